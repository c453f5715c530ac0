#![no_main]
use libfuzzer_sys::fuzz_target;
use voxfuse::calib::AugmentationRecord;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(record) = AugmentationRecord::parse_str(text) {
        let back = AugmentationRecord::parse_str(&record.to_text()).expect("own output parses");
        assert_eq!(record, back);
    }
});
