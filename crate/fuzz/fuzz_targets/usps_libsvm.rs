#![no_main]

use libfuzzer_sys::fuzz_target;
use prealign::data::parse_usps_libsvm;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = parse_usps_libsvm("fuzz", data) {
        assert_eq!(ds.input_dim(), 784);
        assert!(ds.images().as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }
});
