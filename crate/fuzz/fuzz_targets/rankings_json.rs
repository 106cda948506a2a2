#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(entries) = cemmaf_cli::rankings::parse_rankings(text) {
        let _ = cemmaf_cli::rankings::group_by_method(&entries);
    }
});
