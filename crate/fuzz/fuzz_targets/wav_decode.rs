#![no_main]
use libfuzzer_sys::fuzz_target;
use perceparator::data::{wav_decode, wav_encode};

fuzz_target!(|data: &[u8]| {
    if let Ok(wav) = wav_decode(data) {
        assert!(wav.samples.iter().all(|s| (-1.0..1.0).contains(s)));
        let bytes = wav_encode(&wav.samples, wav.sample_rate).expect("decoded audio re-encodes");
        let again = wav_decode(&bytes).expect("re-encoded audio decodes");
        assert_eq!(again, wav);
    }
});
