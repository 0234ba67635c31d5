#![no_main]

use bevloc::pipeline::EvalReport;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = EvalReport::parse_csv(text);
    }
});
