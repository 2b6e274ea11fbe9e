//! Multilayer perceptron: parameters, He initialisation, the ReLU/softmax
//! forward pass, loss and accuracy, and the binary checkpoint format.

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{bail, Result};
use crate::linalg::Matrix;
use crate::seed;

/// Lower clamp applied to probabilities before taking the log.
pub const LOG_FLOOR: f64 = 1e-12;

/// Checkpoint magic.
pub const CHECKPOINT_MAGIC: &[u8; 5] = b"PRLN1";

/// Forward weights `W_l` (`dims[l+1] × dims[l]`), biases `b_l` and fixed
/// feedback matrices `B_l` (`dims[l] × dims[l+1]`, the shape of `W_lᵀ`).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    pub(crate) weights: Vec<Matrix>,
    pub(crate) biases: Vec<Vec<f64>>,
    feedback: Vec<Matrix>,
}

impl Mlp {
    /// Assembles a network from explicit parameters, checking every shape.
    pub fn from_parts(
        dims: Vec<usize>,
        weights: Vec<Matrix>,
        biases: Vec<Vec<f64>>,
        feedback: Vec<Matrix>,
    ) -> Result<Self> {
        validate_dims(&dims)?;
        let layers = dims.len() - 1;
        if weights.len() != layers || biases.len() != layers || feedback.len() != layers {
            bail!(
                Shape,
                "{layers} layers but {} weights, {} biases, {} feedback matrices",
                weights.len(),
                biases.len(),
                feedback.len()
            );
        }
        for l in 0..layers {
            let (n_in, n_out) = (dims[l], dims[l + 1]);
            if weights[l].shape() != (n_out, n_in) {
                bail!(Shape, "W_{l} is {:?}, expected {:?}", weights[l].shape(), (n_out, n_in));
            }
            if biases[l].len() != n_out {
                bail!(Shape, "b_{l} has length {}, expected {n_out}", biases[l].len());
            }
            if feedback[l].shape() != (n_in, n_out) {
                bail!(Shape, "B_{l} is {:?}, expected {:?}", feedback[l].shape(), (n_in, n_out));
            }
            let finite = weights[l].all_finite() && feedback[l].all_finite() && biases[l].iter().all(|x| x.is_finite());
            if !finite {
                bail!(Value, "layer {l} has non-finite parameters");
            }
        }
        Ok(Mlp { dims, weights, biases, feedback })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn layer_count(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn class_count(&self) -> usize {
        *self.dims.last().expect("dims validated non-empty")
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn feedback(&self) -> &[Matrix] {
        &self.feedback
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(|w| w.rows() * w.cols()).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Replaces every feedback matrix, keeping forward parameters.
    pub fn with_feedback(self, feedback: Vec<Matrix>) -> Result<Self> {
        Mlp::from_parts(self.dims, self.weights, self.biases, feedback)
    }

    /// Sets `B_l := W_lᵀ` at every layer, which turns feedback alignment into
    /// exact backpropagation.
    pub fn with_transposed_feedback(self) -> Self {
        let feedback = self.weights.iter().map(Matrix::transpose).collect();
        Mlp { feedback, ..self }
    }

    /// Sets `W_l := B_lᵀ` at every layer: forward weights start perfectly
    /// aligned with the fixed feedback.
    pub fn with_weights_aligned_to_feedback(self) -> Self {
        let weights = self.feedback.iter().map(Matrix::transpose).collect();
        Mlp { weights, ..self }
    }

    /// Overwrites forward parameters of one layer.
    pub fn set_layer(&mut self, layer: usize, weights: Matrix, bias: Vec<f64>) -> Result<()> {
        if layer >= self.layer_count() {
            bail!(Config, "layer {layer} out of range for {} layers", self.layer_count());
        }
        if weights.shape() != self.weights[layer].shape() || bias.len() != self.biases[layer].len() {
            bail!(Shape, "replacement parameters for layer {layer} have the wrong shape");
        }
        self.weights[layer] = weights;
        self.biases[layer] = bias;
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().all(Matrix::all_finite) && self.biases.iter().flatten().all(|x| x.is_finite())
    }

    /// Serialises into the `PRLN1` checkpoint container: magic, layer count
    /// and dims as little-endian `u32`, then for each layer the `W`, `b`, `B`
    /// buffers as little-endian `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let floats = self.parameter_count() + self.feedback.iter().map(|b| b.rows() * b.cols()).sum::<usize>();
        let mut out = Vec::with_capacity(9 + 4 * self.dims.len() + 8 * floats);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.layer_count() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for l in 0..self.layer_count() {
            for buf in [self.weights[l].as_slice(), &self.biases[l], self.feedback[l].as_slice()] {
                for x in buf {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    /// Parses a `PRLN1` checkpoint. Rejects truncated or oversized payloads
    /// before allocating parameter buffers.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = ByteCursor { bytes, pos: 0 };
        if cursor.take(5)? != CHECKPOINT_MAGIC {
            bail!(Format, "checkpoint magic mismatch");
        }
        let layers = cursor.u32()? as usize;
        if layers == 0 {
            bail!(Format, "checkpoint declares zero layers");
        }
        if layers > (bytes.len().saturating_sub(9)) / 4 {
            bail!(Format, "checkpoint declares {layers} layers but is only {} bytes", bytes.len());
        }
        let dims = (0..=layers).map(|_| cursor.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if dims.iter().any(|&d| d == 0) {
            bail!(Format, "checkpoint has a zero-width layer");
        }
        let mut expected: usize = 0;
        for l in 0..layers {
            let per = dims[l]
                .checked_mul(dims[l + 1])
                .and_then(|wb| wb.checked_mul(2))
                .and_then(|x| x.checked_add(dims[l + 1]))
                .and_then(|x| x.checked_mul(8));
            expected = match per.and_then(|p| expected.checked_add(p)) {
                Some(e) => e,
                None => bail!(Format, "checkpoint dims overflow"),
            };
        }
        if cursor.remaining() != expected {
            bail!(Format, "checkpoint payload is {} bytes, dims {:?} need {expected}", cursor.remaining(), dims);
        }
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        let mut feedback = Vec::with_capacity(layers);
        for l in 0..layers {
            let (n_in, n_out) = (dims[l], dims[l + 1]);
            weights.push(Matrix::from_vec(n_out, n_in, cursor.f64s(n_out * n_in)?)?);
            biases.push(cursor.f64s(n_out)?);
            feedback.push(Matrix::from_vec(n_in, n_out, cursor.f64s(n_in * n_out)?)?);
        }
        Mlp::from_parts(dims, weights, biases, feedback).map_err(|e| match e {
            crate::Error::Value(m) => crate::Error::Format(m),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Mlp::from_bytes(&fs::read(path)?)
    }
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            bail!(Format, "unexpected end of input at byte {}", self.pos);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("took 4 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect())
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        bail!(Config, "an MLP needs at least input and output sizes, got {dims:?}");
    }
    if dims.iter().any(|&d| d == 0) {
        bail!(Config, "layer sizes must be positive, got {dims:?}");
    }
    Ok(())
}

/// He-initialised network: `W_l` and `B_l` entries drawn independently from
/// `N(0, 2 / dims[l])`, biases zero.
pub fn init_mlp(dims: &[usize], seed: u64) -> Result<Mlp> {
    validate_dims(dims)?;
    let mut rng = seed::rng(seed);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    let mut feedback = Vec::new();
    for l in 0..dims.len() - 1 {
        let (n_in, n_out) = (dims[l], dims[l + 1]);
        let std = (2.0 / n_in as f64).sqrt();
        let mut draw = |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            std * z
        };
        weights.push(Matrix::from_fn(n_out, n_in, &mut draw));
        feedback.push(Matrix::from_fn(n_in, n_out, &mut draw));
        biases.push(vec![0.0; n_out]);
    }
    Mlp::from_parts(dims.to_vec(), weights, biases, feedback)
}

/// Everything the backward pass needs from one forward pass over a batch.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `pre_activations[l] = h_l · W_lᵀ + b_l`, one per layer.
    pub pre_activations: Vec<Matrix>,
    /// `activations[0]` is the input batch; `activations[l]` feeds layer `l`.
    pub activations: Vec<Matrix>,
    /// Row-wise softmax of the last pre-activation.
    pub probabilities: Matrix,
}

fn affine(h: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix> {
    let mut o = h.matmul_t(w)?;
    for r in 0..o.rows() {
        for (x, bias) in o.row_mut(r).iter_mut().zip(b) {
            *x += bias;
        }
    }
    Ok(o)
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// ReLU derivative, with `relu'(0) = 0`.
#[inline]
pub fn relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    for r in 0..p.rows() {
        let row = p.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    p
}

fn check_input(mlp: &Mlp, batch: &Matrix) -> Result<()> {
    if batch.cols() != mlp.input_dim() {
        bail!(Shape, "batch has {} columns, network expects {}", batch.cols(), mlp.input_dim());
    }
    Ok(())
}

pub fn forward(mlp: &Mlp, batch: &Matrix) -> Result<ForwardTrace> {
    check_input(mlp, batch)?;
    let layers = mlp.layer_count();
    let mut pre_activations = Vec::with_capacity(layers);
    let mut activations = Vec::with_capacity(layers);
    activations.push(batch.clone());
    for l in 0..layers {
        let o = affine(&activations[l], &mlp.weights[l], &mlp.biases[l])?;
        if l + 1 < layers {
            activations.push(o.map(relu));
        }
        pre_activations.push(o);
    }
    let probabilities = softmax_rows(pre_activations.last().expect("at least one layer"));
    Ok(ForwardTrace { pre_activations, activations, probabilities })
}

/// Output probabilities only, evaluated in row chunks to bound memory.
pub fn predict(mlp: &Mlp, inputs: &Matrix) -> Result<Matrix> {
    check_input(mlp, inputs)?;
    const CHUNK: usize = 1024;
    let mut out = Vec::with_capacity(inputs.rows() * mlp.class_count());
    let mut start = 0;
    while start < inputs.rows() {
        let end = (start + CHUNK).min(inputs.rows());
        let mut h = inputs.row_range(start, end);
        for l in 0..mlp.layer_count() {
            let o = affine(&h, &mlp.weights[l], &mlp.biases[l])?;
            h = if l + 1 < mlp.layer_count() { o.map(relu) } else { softmax_rows(&o) };
        }
        out.extend_from_slice(h.as_slice());
        start = end;
    }
    Matrix::from_vec(inputs.rows(), mlp.class_count(), out)
}

/// Activations of hidden layer `layer` (1-based, as in `h_layer`).
pub fn hidden_activations(mlp: &Mlp, inputs: &Matrix, layer: usize) -> Result<Matrix> {
    check_input(mlp, inputs)?;
    if layer == 0 || layer >= mlp.layer_count() {
        bail!(Config, "hidden layer {layer} out of range for {} layers", mlp.layer_count());
    }
    let mut h = inputs.clone();
    for l in 0..layer {
        h = affine(&h, &mlp.weights[l], &mlp.biases[l])?.map(relu);
    }
    Ok(h)
}

fn check_labels(probabilities: &Matrix, labels: &[usize]) -> Result<()> {
    if probabilities.rows() != labels.len() {
        bail!(Data, "{} probability rows but {} labels", probabilities.rows(), labels.len());
    }
    if probabilities.rows() == 0 {
        bail!(Data, "empty batch");
    }
    let d = probabilities.cols();
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= d) {
        bail!(Data, "label {y} at index {i} is out of range for {d} classes");
    }
    Ok(())
}

/// Mean negative log-likelihood of the true classes.
pub fn cross_entropy(probabilities: &Matrix, labels: &[usize]) -> Result<f64> {
    check_labels(probabilities, labels)?;
    let total: f64 = labels.iter().enumerate().map(|(i, &y)| -probabilities[(i, y)].max(LOG_FLOOR).ln()).sum();
    Ok(total / labels.len() as f64)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(probabilities: &Matrix, labels: &[usize]) -> Result<f64> {
    check_labels(probabilities, labels)?;
    let correct = labels.iter().enumerate().filter(|(i, &y)| argmax(probabilities.row(*i)) == y).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Loss and accuracy of `mlp` on a labelled set.
pub fn evaluate(mlp: &Mlp, inputs: &Matrix, labels: &[usize]) -> Result<(f64, f64)> {
    let p = predict(mlp, inputs)?;
    Ok((cross_entropy(&p, labels)?, accuracy(&p, labels)?))
}
