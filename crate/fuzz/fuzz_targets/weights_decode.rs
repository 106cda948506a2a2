#![no_main]
use libfuzzer_sys::fuzz_target;

use cemmaf_core::weights::{decode, encode};

fuzz_target!(|data: &[u8]| {
    if let Ok(tensors) = decode(data) {
        let bytes = encode(&tensors).expect("decoded tensors re-encode");
        assert_eq!(decode(&bytes).expect("re-encoded file decodes"), tensors);
    }
});
