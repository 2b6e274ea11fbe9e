#![no_main]

use libfuzzer_sys::fuzz_target;
use prealign::net::Mlp;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = Mlp::from_bytes(data) {
        assert_eq!(m.to_bytes(), data);
    }
});
