#![no_main]
use libfuzzer_sys::fuzz_target;
use voxfuse::calib::KittiCalibration;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(calib) = KittiCalibration::parse_str(text) {
        let back = KittiCalibration::parse_str(&calib.to_calib_string()).expect("own output parses");
        assert_eq!(calib, back);
    }
});
