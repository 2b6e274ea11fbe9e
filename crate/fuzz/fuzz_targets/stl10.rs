#![no_main]

use libfuzzer_sys::fuzz_target;
use prealign::data::parse_stl10;

// Byte 0 is the label count; the labels follow, then the image bytes.
fuzz_target!(|data: &[u8]| {
    let Some((&n, rest)) = data.split_first() else { return };
    let n = (n as usize).min(rest.len());
    let (labels, images) = rest.split_at(n);
    if let Ok(ds) = parse_stl10("fuzz", images, labels) {
        assert_eq!(ds.len(), labels.len());
        assert_eq!(ds.input_dim(), 3072);
    }
});
