#![no_main]

use framecap::pipeline::{chunk_video, format_manifest, parse_manifest};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(entries) = parse_manifest(text, "fuzz") {
        for e in &entries {
            let _ = chunk_video(e.duration_s, 8.0);
        }
        let again = parse_manifest(&format_manifest(&entries), "fuzz").expect("formatted manifest parses");
        assert_eq!(again.len(), entries.len());
    }
});
