#![no_main]

use bevloc::pipeline::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::from_bytes(data) {
        // Anything accepted must survive re-encoding.
        assert_eq!(
            Checkpoint::from_bytes(&ck.to_bytes()).expect("re-encoded checkpoint"),
            ck
        );
        let _ = ck.to_model();
    }
});
