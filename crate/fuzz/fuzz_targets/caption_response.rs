#![no_main]

use framecap::pipeline::parse_caption_response;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(r) = parse_caption_response(text) {
        assert!(!r.caption.trim().is_empty());
    }
});
