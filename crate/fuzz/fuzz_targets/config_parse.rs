#![no_main]
use libfuzzer_sys::fuzz_target;
use perceparator::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = RunConfig::parse(text) {
        let rendered = cfg.render();
        let again = RunConfig::parse(&rendered).expect("rendered config parses");
        assert_eq!(again.render(), rendered);
    }
});
