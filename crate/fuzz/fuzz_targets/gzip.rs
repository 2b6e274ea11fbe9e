#![no_main]

use libfuzzer_sys::fuzz_target;
use prealign::data::decode_maybe_gzip;

fuzz_target!(|data: &[u8]| {
    if let Ok(out) = decode_maybe_gzip(data.to_vec()) {
        if !data.starts_with(&[0x1f, 0x8b]) {
            assert_eq!(out, data);
        }
    }
});
