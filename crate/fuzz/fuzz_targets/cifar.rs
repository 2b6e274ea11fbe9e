#![no_main]

use libfuzzer_sys::fuzz_target;
use prealign::data::{parse_cifar, CifarVariant};

fuzz_target!(|data: &[u8]| {
    for variant in [CifarVariant::C10, CifarVariant::C100] {
        if let Ok(ds) = parse_cifar("fuzz", data, variant) {
            assert_eq!(ds.len() * variant.record_len(), data.len());
            assert_eq!(ds.input_dim(), 3072);
        }
    }
});
