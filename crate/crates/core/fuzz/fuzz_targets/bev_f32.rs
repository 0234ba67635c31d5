#![no_main]

use bevloc::bev::BevImage;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = BevImage::from_f32_le(data) {
        assert_eq!(img.to_f32_le(), data);
    }
});
