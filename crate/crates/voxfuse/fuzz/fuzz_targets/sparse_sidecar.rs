#![no_main]
use libfuzzer_sys::fuzz_target;
use voxfuse::voxelgrid::VoxelGridSpec;

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else { return };
    if let Ok((spec, channels, count)) = VoxelGridSpec::parse_sidecar_line(line) {
        let (back, ch, n) = VoxelGridSpec::parse_sidecar_line(&spec.sidecar_line(channels, count))
            .expect("own output parses");
        assert_eq!(spec, back);
        assert_eq!((channels, count), (ch, n));
    }
});
