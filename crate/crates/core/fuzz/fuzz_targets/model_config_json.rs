#![no_main]

use bevloc::pipeline::ModelConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(cfg) = serde_json::from_slice::<ModelConfig>(data) {
        let _ = cfg.validate();
    }
});
