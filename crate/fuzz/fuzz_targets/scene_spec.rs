#![no_main]

use framecap::synth::SceneSpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = text.parse::<SceneSpec>() {
        assert_eq!(spec.to_string().parse::<SceneSpec>().expect("display parses"), spec);
        let _ = spec.check_bounds(8, 32, 32);
    }
});
