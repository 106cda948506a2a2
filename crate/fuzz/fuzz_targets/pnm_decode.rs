#![no_main]
use libfuzzer_sys::fuzz_target;

use cemmaf_core::image::{decode_image, decode_pnm};

fuzz_target!(|data: &[u8]| {
    let _ = decode_pnm(data);
    if let Ok(image) = decode_image(data) {
        assert!(image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
});
