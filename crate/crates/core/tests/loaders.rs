mod common;

use std::io::Write;

use flate2::write::GzEncoder;
use flate2::Compression;
use prealign::data::{
    self, apply_affine, encode_idx, load_idx, parse_cifar, parse_idx, parse_stl10, parse_usps_libsvm, transform_affine,
    AffineParams, CifarVariant, Dataset, TransformSpec,
};
use prealign::error::Error;
use prealign::linalg::Matrix;
use proptest::prelude::*;

fn byte_dataset(n: usize, dim: usize, classes: usize) -> (Vec<u8>, Vec<usize>, Dataset) {
    let bytes: Vec<u8> = (0..n * dim).map(|i| ((i * 37 + 11) % 256) as u8).collect();
    let labels: Vec<usize> = (0..n).map(|i| (i * 7) % classes).collect();
    let images = Matrix::from_vec(n, dim, bytes.iter().map(|&b| b as f64 / 255.0).collect()).unwrap();
    let ds = Dataset::new("fixture", images, labels.clone(), classes).unwrap();
    (bytes, labels, ds)
}

#[test]
fn idx_round_trip_is_bit_exact() {
    let (bytes, labels, ds) = byte_dataset(13, 5 * 4, 10);
    let (img, lab) = encode_idx(&ds, 5, 4).unwrap();
    assert_eq!(&img[..4], &[0, 0, 8, 3]);
    assert_eq!(&img[16..], bytes.as_slice());
    let back = parse_idx("back", &img, &lab).unwrap();
    assert_eq!(back.labels(), labels.as_slice());
    assert_eq!(back.images().as_slice(), ds.images().as_slice());
    let (img2, lab2) = encode_idx(&back, 5, 4).unwrap();
    assert_eq!((img2, lab2), (img, lab));
}

#[test]
fn idx_files_load_plain_and_gzipped() {
    let dir = tempfile::tempdir().unwrap();
    let (_, _, ds) = byte_dataset(9, 16, 3);
    let (img, lab) = encode_idx(&ds, 4, 4).unwrap();
    std::fs::write(dir.path().join("img"), &img).unwrap();
    std::fs::write(dir.path().join("lab"), &lab).unwrap();
    let mut gz = GzEncoder::new(Vec::new(), Compression::default());
    gz.write_all(&img).unwrap();
    std::fs::write(dir.path().join("img.gz"), gz.finish().unwrap()).unwrap();
    let plain = load_idx(&dir.path().join("img"), &dir.path().join("lab")).unwrap();
    let zipped = load_idx(&dir.path().join("img.gz"), &dir.path().join("lab")).unwrap();
    assert_eq!(plain.images(), zipped.images());
    assert_eq!(plain.class_count(), 3);
    assert!(matches!(load_idx(&dir.path().join("missing"), &dir.path().join("lab")), Err(Error::Data(_))));
}

#[test]
fn idx_rejects_bad_headers() {
    let (_, _, ds) = byte_dataset(4, 4, 2);
    let (mut img, lab) = encode_idx(&ds, 2, 2).unwrap();
    assert!(matches!(parse_idx("x", &img[..10], &lab), Err(Error::Format(_))));
    assert!(matches!(parse_idx("x", &img[..img.len() - 1], &lab), Err(Error::Format(_))));
    assert!(matches!(parse_idx("x", &img, &lab[..lab.len() - 1]), Err(Error::Format(_))));
    assert!(matches!(parse_idx("x", &lab, &img), Err(Error::Format(_))));
    let (one_less, _) = encode_idx(&ds.select(&[0, 1, 2]), 2, 2).unwrap();
    assert!(matches!(parse_idx("x", &one_less, &lab), Err(Error::Data(_))));
    img[3] = 0x04;
    assert!(matches!(parse_idx("x", &img, &lab), Err(Error::Format(_))));
}

#[test]
fn cifar_records_decode_exactly() {
    for variant in [CifarVariant::C10, CifarVariant::C100] {
        let n = 3;
        let mut raw = Vec::new();
        let mut expected_pixels = Vec::new();
        for i in 0..n {
            if variant == CifarVariant::C100 {
                raw.push(19);
            }
            raw.push((i * 4) as u8);
            for p in 0..3072 {
                let b = ((p * 3 + i * 101) % 256) as u8;
                raw.push(b);
                expected_pixels.push(b as f64 / 255.0);
            }
        }
        let ds = parse_cifar("c", &raw, variant).unwrap();
        assert_eq!(ds.labels(), &[0, 4, 8]);
        assert_eq!(ds.images().as_slice(), expected_pixels.as_slice());
        assert_eq!(ds.class_count(), variant.class_count());
        assert!(parse_cifar("c", &raw[..raw.len() - 1], variant).is_err());
    }
    let mut bad = vec![10u8];
    bad.extend(vec![0u8; 3072]);
    assert!(matches!(parse_cifar("c", &bad, CifarVariant::C10), Err(Error::Data(_))));
}

#[test]
fn usps_libsvm_decodes_values_and_labels() {
    // A constant image (every pixel -0.2) survives the resize unchanged.
    let full: Vec<String> = (1..=256).map(|i| format!("{i}:-0.2")).collect();
    let text = format!("10 {}\n3 1:1 256:-1\n\n", full.join(" "));
    let ds = parse_usps_libsvm("usps", text.as_bytes()).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.labels(), &[0, 3]);
    assert_eq!(ds.input_dim(), 784);
    assert!(ds.images().row(0).iter().all(|&v| (v - 0.4).abs() < 1e-12));
    // Corner pixels keep their value: top-left 1 → 1, bottom-right -1 → 0.
    assert!((ds.images()[(1, 0)] - 1.0).abs() < 1e-12);
    assert!(ds.images()[(1, 783)].abs() < 1e-12);
    // Absent features are zero in [-1, 1], i.e. 0.5 after mapping.
    assert!((ds.images()[(1, 392)] - 0.5).abs() < 1e-12);
}

#[test]
fn usps_errors_carry_line_numbers() {
    for (text, needle) in
        [("1 1:0.5\n11 2:0.1\n", "line 2"), ("1 0:0.5\n", "line 1"), ("1 3:2.0\n", "line 1"), ("2 x\n", "line 1")]
    {
        match parse_usps_libsvm("u", text.as_bytes()) {
            Err(Error::Format(msg)) => assert!(msg.contains(needle), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }
    assert!(parse_usps_libsvm("u", b"\n\n").is_err());
}

#[test]
fn stl10_column_major_box_filter() {
    const SIDE: usize = 96;
    let mut img = vec![0u8; 3 * SIDE * SIDE];
    // Channel 1, displayed pixel (row 4, col 7) lies in output cell (1, 2).
    img[SIDE * SIDE + 7 * SIDE + 4] = 90;
    // Channel 2 constant.
    for p in &mut img[2 * SIDE * SIDE..] {
        *p = 255;
    }
    let ds = parse_stl10("s", &img, &[10]).unwrap();
    assert_eq!(ds.labels(), &[9]);
    assert_eq!(ds.input_dim(), 3072);
    let row = ds.images().row(0);
    assert!((row[1024 + 32 + 2] - 90.0 / (9.0 * 255.0)).abs() < 1e-15);
    assert_eq!(row[1024..2048].iter().filter(|&&v| v != 0.0).count(), 1);
    assert!(row[2048..].iter().all(|&v| (v - 1.0).abs() < 1e-15));
    assert!(parse_stl10("s", &img, &[0]).is_err());
    assert!(parse_stl10("s", &img, &[1, 2]).is_err());
}

#[test]
fn subsets_are_seeded_and_distinct() {
    let (_, _, ds) = byte_dataset(50, 4, 5);
    let a = data::subset(&ds, 20, 7).unwrap();
    let b = data::subset(&ds, 20, 7).unwrap();
    let c = data::subset(&ds, 20, 8).unwrap();
    assert_eq!(a.images(), b.images());
    assert_ne!(a.images(), c.images());
    assert!(data::subset(&ds, 51, 0).is_err());
}

#[test]
fn identity_transform_is_a_no_op() {
    let ds = common::synthetic_digits("d", 20, 28, 10, 3);
    let out = transform_affine(&ds, &TransformSpec::identity(5), 28).unwrap();
    assert!(out.images().max_abs_diff(ds.images()).unwrap() < 1e-12);
    for i in 0..ds.len() {
        let same = apply_affine(ds.images().row(i), 28, &AffineParams::IDENTITY);
        let diff = same.iter().zip(ds.images().row(i)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }
}

#[test]
fn affine_round_trip_restores_digits() {
    let ds = common::synthetic_digits("d", 40, 28, 10, 4);
    let params = [
        AffineParams { tx: 1.4, ty: -1.0, scale: 1.0, rotate_deg: 0.0 },
        AffineParams { tx: 0.0, ty: 0.0, scale: 1.2, rotate_deg: 0.0 },
        AffineParams { tx: 0.0, ty: 0.0, scale: 0.8, rotate_deg: 25.0 },
        AffineParams { tx: -1.2, ty: 0.9, scale: 1.1, rotate_deg: -20.0 },
    ];
    for p in &params {
        let mut total = 0.0;
        for i in 0..ds.len() {
            let x = ds.images().row(i);
            let back = apply_affine(&apply_affine(x, 28, p), 28, &p.inverse());
            total += back.iter().zip(x).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64;
        }
        let mae = total / ds.len() as f64;
        assert!(mae < 0.05, "{p:?}: {mae}");
    }
}

#[test]
fn transforms_are_seeded_and_change_images() {
    let ds = common::synthetic_digits("d", 10, 28, 10, 6);
    let spec = TransformSpec { translate_frac: (-0.05, 0.05), scale: (0.8, 1.2), rotate_deg: (-25.0, 25.0), seed: 9 };
    let a = transform_affine(&ds, &spec, 28).unwrap();
    let b = transform_affine(&ds, &spec, 28).unwrap();
    assert_eq!(a.images(), b.images());
    assert!(a.images().max_abs_diff(ds.images()).unwrap() > 0.1);
    assert_eq!(a.labels(), ds.labels());
    let bad = TransformSpec { scale: (0.0, 1.0), ..spec };
    assert!(transform_affine(&ds, &bad, 28).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn idx_round_trip_any_bytes(n in 1usize..8, rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let dim = rows * cols;
        let bytes: Vec<u8> = (0..n * dim).map(|i| (seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64) >> 13) as u8).collect();
        let labels: Vec<usize> = (0..n).map(|i| (seed as usize + i) % 10).collect();
        let ds = Dataset::new("p", Matrix::from_vec(n, dim, bytes.iter().map(|&b| b as f64 / 255.0).collect()).unwrap(), labels.clone(), 10).unwrap();
        let (img, lab) = encode_idx(&ds, rows, cols).unwrap();
        let back = parse_idx("p", &img, &lab).unwrap();
        prop_assert_eq!(back.labels(), labels.as_slice());
        prop_assert_eq!(back.images().as_slice(), ds.images().as_slice());
    }

    #[test]
    fn affine_output_stays_in_unit_range(tx in -3.0f64..3.0, ty in -3.0f64..3.0, s in 0.5f64..1.5, r in -45.0f64..45.0) {
        let ds = common::synthetic_digits("d", 1, 16, 4, 1);
        let out = apply_affine(ds.images().row(0), 16, &AffineParams { tx, ty, scale: s, rotate_deg: r });
        prop_assert_eq!(out.len(), 256);
        prop_assert!(out.iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
    }

    #[test]
    fn inverse_of_inverse_is_identity(tx in -3.0f64..3.0, ty in -3.0f64..3.0, s in 0.5f64..1.5, r in -45.0f64..45.0) {
        let p = AffineParams { tx, ty, scale: s, rotate_deg: r };
        let q = p.inverse().inverse();
        prop_assert!((q.tx - tx).abs() < 1e-9 && (q.ty - ty).abs() < 1e-9);
        prop_assert!((q.scale - s).abs() < 1e-12 && (q.rotate_deg - r).abs() < 1e-9);
    }
}
