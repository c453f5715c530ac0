#![no_main]
use libfuzzer_sys::fuzz_target;
use voxfuse::config::FusionConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(config) = FusionConfig::parse_str(text) {
        let back = FusionConfig::parse_str(&config.to_text()).expect("own output parses");
        assert_eq!(config, back);
    }
});
