#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = voxfuse::tensor::tensor_from_npy_bytes(data) {
        // anything that parses must survive a serialize/parse round trip
        let bytes = voxfuse::tensor::tensor_to_npy_bytes(&t);
        let back = voxfuse::tensor::tensor_from_npy_bytes(&bytes).expect("own output parses");
        assert!(back.bitwise_eq(&t));
    }
});
