#![no_main]

use bevloc::synthworld::{DatasetMeta, WorldFile};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(world) = WorldFile::parse(text) {
            // Accepted worlds must survive a write/read cycle.
            let again = WorldFile::parse(&WorldFile::to_json(&world)).expect("round trip");
            assert_eq!(again.obstacles.len(), world.obstacles.len());
        }
        let _ = DatasetMeta::parse(text);
    }
});
