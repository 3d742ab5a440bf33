#![no_main]

use libfuzzer_sys::fuzz_target;
use sesa_core::image::{decode_pnm, encode_pnm};

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_pnm(data) {
        // decoded values are k/maxval, so an 8-bit re-encode is stable after one pass
        let enc = encode_pnm(&img).unwrap();
        let back = decode_pnm(&enc).unwrap();
        assert_eq!(encode_pnm(&back).unwrap(), enc);
    }
});
