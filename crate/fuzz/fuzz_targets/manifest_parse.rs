#![no_main]
use libfuzzer_sys::fuzz_target;
use perceparator::data::parse_manifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(entries) = parse_manifest(text, None) {
        let sources = entries.first().map(|e| e.references.len());
        assert!(entries.iter().all(|e| Some(e.references.len()) == sources && e.references.len() >= 2));
        assert!(entries.windows(2).all(|w| w[0].line < w[1].line));
    }
});
