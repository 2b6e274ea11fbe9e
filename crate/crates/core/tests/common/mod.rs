//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use prealign::data::{encode_idx, Dataset};
use prealign::linalg::Matrix;
use prealign::net::{self, Mlp};
use prealign::seed;
use rand::Rng;
use rand_distr::StandardNormal;

pub fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn random_labels(n: usize, classes: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..classes)).collect()
}

fn loss(mlp: &Mlp, x: &Matrix, y: &[usize]) -> f64 {
    let t = net::forward(mlp, x).unwrap();
    net::cross_entropy(&t.probabilities, y).unwrap()
}

fn relu_pattern(mlp: &Mlp, x: &Matrix) -> Vec<bool> {
    let t = net::forward(mlp, x).unwrap();
    let hidden = t.pre_activations.len() - 1;
    t.pre_activations[..hidden].iter().flat_map(|o| o.as_slice().iter().map(|&v| v > 0.0).collect::<Vec<_>>()).collect()
}

/// Result of comparing analytic gradients against central differences.
pub struct FdReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose `±h` perturbation flips a ReLU and so has no
    /// well-defined central difference.
    pub skipped: usize,
}

/// Relative error with an absolute floor so that near-zero gradients compare
/// on an absolute scale.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
}

/// Central-difference check of `backward_bp` on every weight and bias.
pub fn finite_difference_check(mlp: &Mlp, x: &Matrix, y: &[usize], h: f64) -> FdReport {
    let trace = net::forward(mlp, x).unwrap();
    let g = prealign::learn::backward_bp(mlp, &trace, y).unwrap();
    let mut report = FdReport { max_rel_error: 0.0, checked: 0, skipped: 0 };
    for l in 0..mlp.layer_count() {
        let (rows, cols) = mlp.weights()[l].shape();
        let n_params = rows * cols + rows;
        for p in 0..n_params {
            let perturbed = |delta: f64| {
                let mut m = mlp.clone();
                let mut w = m.weights()[l].clone();
                let mut b = m.biases()[l].clone();
                if p < rows * cols {
                    w.as_mut_slice()[p] += delta;
                } else {
                    b[p - rows * cols] += delta;
                }
                m.set_layer(l, w, b).unwrap();
                m
            };
            let (plus, minus) = (perturbed(h), perturbed(-h));
            if relu_pattern(&plus, x) != relu_pattern(&minus, x) {
                report.skipped += 1;
                continue;
            }
            let fd = (loss(&plus, x, y) - loss(&minus, x, y)) / (2.0 * h);
            let analytic = if p < rows * cols { g.d_weights[l].as_slice()[p] } else { g.d_biases[l][p - rows * cols] };
            report.max_rel_error = report.max_rel_error.max(rel_error(analytic, fd));
            report.checked += 1;
        }
    }
    report
}

/// Class-dependent blob images on a `side × side` grid, in `[0, 1]`.
pub fn synthetic_digits(name: &str, n: usize, side: usize, classes: usize, seed_value: u64) -> Dataset {
    let mut rng = seed::rng(seed_value);
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * side * side);
    for _ in 0..n {
        let y = rng.gen_range(0..classes);
        labels.push(y);
        let angle = std::f64::consts::TAU * y as f64 / classes as f64;
        let c = (side as f64 - 1.0) / 2.0;
        let (cx, cy) = (c + 0.25 * side as f64 * angle.cos(), c + 0.25 * side as f64 * angle.sin());
        let jitter: f64 = rng.gen_range(-0.5..0.5);
        let sigma = side as f64 / 7.0;
        for r in 0..side {
            for col in 0..side {
                let d2 = (r as f64 - cy - jitter).powi(2) + (col as f64 - cx + jitter).powi(2);
                let v = (-d2 / (2.0 * sigma * sigma)).exp();
                data.push((v * 255.0).round() / 255.0);
            }
        }
    }
    Dataset::new(name, Matrix::from_vec(n, side * side, data).unwrap(), labels, classes).unwrap()
}

/// Writes `<dir>/<family>/{train,t10k}-{images-idx3,labels-idx1}-ubyte`.
pub fn write_idx_family(root: &Path, family: &str, train: &Dataset, test: &Dataset, side: usize) {
    let dir = root.join(family);
    std::fs::create_dir_all(&dir).unwrap();
    for (prefix, ds) in [("train", train), ("t10k", test)] {
        let (img, lab) = encode_idx(ds, side, side).unwrap();
        std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), img).unwrap();
        std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), lab).unwrap();
    }
}
