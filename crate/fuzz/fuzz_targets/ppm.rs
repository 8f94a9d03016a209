#![no_main]

use framecap::pipeline::{decode_ppm, encode_ppm};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(frame) = decode_ppm(data) {
        let bytes = encode_ppm(&frame).expect("decoded frame encodes");
        let again = decode_ppm(&bytes).expect("encoded frame decodes");
        assert!(frame.bit_eq(&again));
    }
});
