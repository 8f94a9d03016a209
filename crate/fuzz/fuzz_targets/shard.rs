#![no_main]

use framecap::shard::{format_shard, parse_shard};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_shard(text, "fuzz") {
        // Whatever parses must survive a format/parse round trip.
        let again = parse_shard(&format_shard(&records), "fuzz").expect("formatted shard parses");
        assert_eq!(again, records);
    }
});
