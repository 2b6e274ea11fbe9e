#![no_main]

use libfuzzer_sys::fuzz_target;
use prealign::data::{parse_idx, parse_idx_labels};

// The first byte splits the input into an image file and a label file.
fuzz_target!(|data: &[u8]| {
    let _ = parse_idx_labels(data);
    if let Some((&cut, rest)) = data.split_first() {
        let cut = (cut as usize * rest.len()) / 255;
        let (images, labels) = rest.split_at(cut);
        if let Ok(ds) = parse_idx("fuzz", images, labels) {
            assert_eq!(ds.len(), ds.labels().len());
            assert!(ds.labels().iter().all(|&y| y < ds.class_count()));
        }
    }
});
