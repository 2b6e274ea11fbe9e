//! Analysis quantities computed from networks, activations and curves.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{bail, Result};
use crate::learn::{train_step, AdamState, Rule};
use crate::linalg::{self, Matrix};
use crate::net::{self, Mlp};
use crate::seed;

/// Angles between forward weights and feedback for the input units of one
/// layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AngleReport {
    pub layer_index: usize,
    pub per_neuron_deg: Vec<f64>,
    pub mean_deg: f64,
}

fn check_layer(mlp: &Mlp, layer: usize) -> Result<()> {
    if layer >= mlp.layer_count() {
        bail!(Config, "layer {layer} out of range for a {}-layer network", mlp.layer_count());
    }
    Ok(())
}

/// Angle in degrees between two vectors; 90 when either has zero norm.
///
/// Uses `2·atan2(‖â − b̂‖, ‖â + b̂‖)` on the unit vectors, which stays accurate
/// near 0° and 180° where `acos` of the cosine loses half the digits.
pub fn angle_deg(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (linalg::norm(a), linalg::norm(b));
    if na == 0.0 || nb == 0.0 {
        return 90.0;
    }
    let (mut diff, mut sum) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (u, v) = (x / na, y / nb);
        diff += (u - v) * (u - v);
        sum += (u + v) * (u + v);
    }
    (2.0 * diff.sqrt().atan2(sum.sqrt())).to_degrees()
}

/// For every input unit `i` of `layer`, the angle between column `i` of
/// `W_layer` and row `i` of `B_layer`.
pub fn alignment_angles(mlp: &Mlp, layer: usize) -> Result<AngleReport> {
    check_layer(mlp, layer)?;
    let w = &mlp.weights()[layer];
    let b = &mlp.feedback()[layer];
    let per_neuron_deg: Vec<f64> = (0..w.cols()).map(|i| angle_deg(&w.column(i), b.row(i))).collect();
    let mean_deg = per_neuron_deg.iter().sum::<f64>() / per_neuron_deg.len() as f64;
    Ok(AngleReport { layer_index: layer, per_neuron_deg, mean_deg })
}

/// `‖W_layer − B_layerᵀ‖_F`.
pub fn weight_feedback_distance(mlp: &Mlp, layer: usize) -> Result<f64> {
    check_layer(mlp, layer)?;
    let w = &mlp.weights()[layer];
    let b = &mlp.feedback()[layer];
    let mut acc = 0.0;
    for r in 0..w.rows() {
        for c in 0..w.cols() {
            let d = w[(r, c)] - b[(c, r)];
            acc += d * d;
        }
    }
    Ok(acc.sqrt())
}

/// Exponential of the Shannon entropy of a non-negative spectrum normalised
/// to sum 1.
pub fn spectral_effective_rank(singular_values: &[f64]) -> Result<f64> {
    let total: f64 = singular_values.iter().sum();
    if !(total > 0.0) {
        bail!(Value, "effective rank of an all-zero spectrum is undefined");
    }
    let entropy: f64 = singular_values.iter().map(|&s| s / total).filter(|&p| p > 0.0).map(|p| -p * p.ln()).sum();
    Ok(entropy.exp())
}

pub fn effective_rank(m: &Matrix) -> Result<f64> {
    if m.is_empty() || m.max_abs() == 0.0 {
        bail!(Value, "effective rank of an all-zero matrix is undefined");
    }
    spectral_effective_rank(&linalg::svd(m)?.singular_values)
}

/// Neuron-by-neuron cosine-similarity matrix of activation columns. Zero
/// columns have similarity 0 with everything and 1 with themselves.
pub fn cosine_gram(activations: &Matrix) -> Matrix {
    let n = activations.cols();
    let t = activations.transpose();
    let norms: Vec<f64> = (0..n).map(|j| linalg::norm(t.row(j))).collect();
    let g = t.matmul_t(&t).expect("square product of a transposed matrix");
    Matrix::from_fn(n, n, |j, k| {
        if j == k {
            1.0
        } else if norms[j] == 0.0 || norms[k] == 0.0 {
            0.0
        } else {
            g[(j, k)] / (norms[j] * norms[k])
        }
    })
}

/// Effective rank of the cosine Gram matrix of `activations`
/// (samples × neurons).
pub fn gram_effective_dim(activations: &Matrix) -> Result<f64> {
    if activations.cols() < 2 || activations.rows() < 2 {
        bail!(
            Config,
            "gram dimensionality needs at least 2 samples and 2 neurons, got {}x{}",
            activations.rows(),
            activations.cols()
        );
    }
    effective_rank(&cosine_gram(activations))
}

/// Trapezoidal area under a per-epoch curve divided by its span, so a
/// constant curve returns that constant.
pub fn accuracy_auc(curve: &[f64]) -> Result<f64> {
    match curve {
        [] => bail!(Config, "AUC of an empty curve"),
        [only] => Ok(*only),
        _ => {
            let area: f64 = curve.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum();
            Ok(area / (curve.len() - 1) as f64)
        }
    }
}

pub fn generalization_gap(train_loss: f64, test_loss: f64) -> f64 {
    test_loss - train_loss
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub coords: Vec<Vec<f64>>,
    pub feedback_coord: Vec<f64>,
    pub explained_variance: Vec<f64>,
}

/// Projects flattened weight snapshots and the feedback target onto the top
/// `k` principal components of all of them together.
pub fn weight_trajectory_pca(snapshots: &[Vec<f64>], feedback_point: &[f64], k: usize) -> Result<Trajectory> {
    if snapshots.len() < 3 {
        bail!(Dimension, "trajectory needs at least 3 snapshots, got {}", snapshots.len());
    }
    let d = feedback_point.len();
    if let Some(s) = snapshots.iter().find(|s| s.len() != d) {
        bail!(Shape, "snapshot length {} differs from feedback length {d}", s.len());
    }
    let mut data = Vec::with_capacity((snapshots.len() + 1) * d);
    for s in snapshots {
        data.extend_from_slice(s);
    }
    data.extend_from_slice(feedback_point);
    let points = Matrix::from_vec(snapshots.len() + 1, d, data)?;
    let pca = linalg::pca_fit(&points, k)?;
    let coords = snapshots.iter().map(|s| pca.project(s)).collect::<Result<Vec<_>>>()?;
    let feedback_coord = pca.project(feedback_point)?;
    Ok(Trajectory { coords, feedback_coord, explained_variance: pca.explained_variance })
}

/// Flattens `B_layerᵀ` so it lives in the same space as `W_layer`.
pub fn feedback_target(mlp: &Mlp, layer: usize) -> Result<Vec<f64>> {
    check_layer(mlp, layer)?;
    Ok(mlp.feedback()[layer].transpose().into_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    /// Support examples per class (K).
    pub shots_per_class: usize,
    pub inner_steps: usize,
    pub inner_lr: f64,
    /// Query examples per class, disjoint from the support set.
    pub query_per_class: usize,
    pub seed: u64,
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_steps == 0 || self.shots_per_class == 0 || self.query_per_class == 0 {
            bail!(Config, "meta-loss needs positive shots, query size and inner steps");
        }
        if !(self.inner_lr > 0.0 && self.inner_lr.is_finite()) {
            bail!(Config, "inner learning rate must be positive, got {}", self.inner_lr);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaLoss {
    pub total: f64,
    pub per_task: Vec<f64>,
}

/// Per-class support and query indices for one task. Both are sampled
/// without replacement from the same shuffled class pool, so they never
/// overlap.
pub fn sample_episode(ds: &Dataset, shots: usize, queries: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count()];
    for (i, &y) in ds.labels().iter().enumerate() {
        pools[y].push(i);
    }
    let mut rng = seed::rng(seed);
    let (mut support, mut query) = (Vec::new(), Vec::new());
    for (class, pool) in pools.iter_mut().enumerate() {
        if pool.len() < shots + queries {
            bail!(
                Config,
                "task '{}' has {} examples of class {class}, episode needs {}",
                ds.name(),
                pool.len(),
                shots + queries
            );
        }
        let (picked, _) = pool.partial_shuffle(&mut rng, shots + queries);
        support.extend_from_slice(&picked[..shots]);
        query.extend_from_slice(&picked[shots..]);
    }
    support.shuffle(&mut rng);
    Ok((support, query))
}

/// Sum over tasks of the query loss after `inner_steps` full-batch FA + Adam
/// updates on a clone of `mlp`. Episodes are seeded per task index, so
/// repeated calls on different networks see the same examples.
pub fn meta_loss(mlp: &Mlp, cfg: &MetaConfig, tasks: &[&Dataset]) -> Result<MetaLoss> {
    cfg.validate()?;
    if tasks.is_empty() {
        bail!(Config, "meta-loss needs at least one task");
    }
    for t in tasks {
        if t.input_dim() != mlp.input_dim() || t.class_count() != mlp.class_count() {
            bail!(
                Config,
                "task '{}' is {}-dim with {} classes, network is {}-dim with {}",
                t.name(),
                t.input_dim(),
                t.class_count(),
                mlp.input_dim(),
                mlp.class_count()
            );
        }
    }
    let per_task = tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let (support, query) = sample_episode(
                task,
                cfg.shots_per_class,
                cfg.query_per_class,
                seed::derive(cfg.seed, "meta-task", i as u64),
            )?;
            let xs = task.images().select_rows(&support);
            let ys: Vec<usize> = support.iter().map(|&j| task.labels()[j]).collect();
            let mut clone = mlp.clone();
            let mut state = AdamState::new(&clone);
            for _ in 0..cfg.inner_steps {
                train_step(&mut state, &mut clone, &xs, &ys, Rule::Fa, cfg.inner_lr)?;
            }
            let xq = task.images().select_rows(&query);
            let yq: Vec<usize> = query.iter().map(|&j| task.labels()[j]).collect();
            let p = net::predict(&clone, &xq)?;
            net::cross_entropy(&p, &yq)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(MetaLoss { total: per_task.iter().sum(), per_task })
}
