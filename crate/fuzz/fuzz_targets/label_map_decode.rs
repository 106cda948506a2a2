#![no_main]
use libfuzzer_sys::fuzz_target;

use cemmaf_core::segmentation::{decode_label_map, encode_label_map};

fuzz_target!(|data: &[u8]| {
    if let Ok(partition) = decode_label_map(data) {
        let bytes = encode_label_map(&partition).expect("decoded map re-encodes");
        assert_eq!(decode_label_map(&bytes).expect("re-encoded map decodes"), partition);
    }
});
