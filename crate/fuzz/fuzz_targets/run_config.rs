#![no_main]
use libfuzzer_sys::fuzz_target;

use cemmaf_cli::RunConfig;

fuzz_target!(|text: &str| {
    let _ = cemmaf_core::kv::parse(text);
    if let Ok(cfg) = RunConfig::parse(text) {
        if cfg.validate().is_ok() {
            assert_eq!(RunConfig::parse(&cfg.to_text()).expect("printed config parses"), cfg);
        }
    }
});
