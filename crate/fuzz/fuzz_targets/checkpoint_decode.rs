#![no_main]
use libfuzzer_sys::fuzz_target;
use perceparator::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::from_bytes(data) {
        // Anything accepted must re-encode to a file that decodes identically.
        let again = Checkpoint::from_bytes(&ckpt.to_bytes()).expect("re-encoded checkpoint decodes");
        assert_eq!(again, ckpt);
    }
});
