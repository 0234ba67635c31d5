#![no_main]

use bevloc::synthworld::{parse_cloud_bin, write_cloud_bin};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(cloud) = parse_cloud_bin(data) {
        assert_eq!(write_cloud_bin(&cloud), data);
    }
});
