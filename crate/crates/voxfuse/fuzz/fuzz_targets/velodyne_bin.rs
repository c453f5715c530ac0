#![no_main]
use libfuzzer_sys::fuzz_target;
use voxfuse::calib::{points_from_bin_bytes, points_to_bin_bytes};

fuzz_target!(|data: &[u8]| {
    if let Ok(points) = points_from_bin_bytes(data) {
        assert_eq!(points_to_bin_bytes(&points), data);
    }
});
