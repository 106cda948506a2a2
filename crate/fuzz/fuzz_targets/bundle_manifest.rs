#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    let _ = cemmaf_core::bundle::parse_manifest(text);
});
