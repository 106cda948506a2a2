#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(cfg) = cemmaf_core::fixture::FixtureConfig::parse(text) {
        let _ = cfg.validate();
    }
});
