//! Error propagation (backpropagation and feedback alignment), the Adam
//! update and the epoch-level training loop.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{bail, Error, Result};
use crate::linalg::Matrix;
use crate::net::{self, relu_grad, ForwardTrace, Mlp};
use crate::record::{Phase, RunRecord};
use crate::seed;

/// How hidden-layer errors are propagated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rule {
    /// `δ_l = (W_lᵀ δ_{l+1}) ⊙ φ'(o_l)`
    Bp,
    /// `δ_l = (B_l δ_{l+1}) ⊙ φ'(o_l)` with the fixed random `B_l`.
    Fa,
}

impl Rule {
    pub fn as_str(self) -> &'static str {
        match self {
            Rule::Bp => "bp",
            Rule::Fa => "fa",
        }
    }
}

/// Parameter updates mirroring the network's `W_l` and `b_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub d_weights: Vec<Matrix>,
    pub d_biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Gradients {
            d_weights: mlp.weights().iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect(),
            d_biases: mlp.biases().iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.d_weights
            .iter()
            .map(Matrix::max_abs)
            .chain(self.d_biases.iter().flatten().map(|x| x.abs()))
            .fold(0.0, f64::max)
    }
}

fn check_trace(mlp: &Mlp, trace: &ForwardTrace, labels: &[usize]) -> Result<()> {
    let layers = mlp.layer_count();
    if trace.pre_activations.len() != layers || trace.activations.len() != layers {
        bail!(Shape, "trace has {} layers, network has {layers}", trace.pre_activations.len());
    }
    let n = trace.probabilities.rows();
    if labels.len() != n {
        bail!(Shape, "{n} trace rows but {} labels", labels.len());
    }
    for l in 0..layers {
        let (n_in, n_out) = (mlp.dims()[l], mlp.dims()[l + 1]);
        if trace.activations[l].shape() != (n, n_in) || trace.pre_activations[l].shape() != (n, n_out) {
            bail!(Shape, "trace layer {l} does not match network dims {:?}", mlp.dims());
        }
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= mlp.class_count()) {
        bail!(Data, "label {y} out of range for {} classes", mlp.class_count());
    }
    Ok(())
}

/// `δ_L = (p − onehot(y)) / batch`
fn output_delta(trace: &ForwardTrace, labels: &[usize]) -> Matrix {
    let n = labels.len() as f64;
    let mut delta = trace.probabilities.clone();
    for (i, &y) in labels.iter().enumerate() {
        delta[(i, y)] -= 1.0;
    }
    for x in delta.as_mut_slice() {
        *x /= n;
    }
    delta
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (o, x) in out.iter_mut().zip(m.row(r)) {
            *o += x;
        }
    }
    out
}

/// Propagates `delta` (errors at the output of layer `layer`) to the output
/// of layer `layer - 1`.
fn propagate(mlp: &Mlp, trace: &ForwardTrace, delta: &Matrix, layer: usize, rule: Rule) -> Result<Matrix> {
    let back = match rule {
        Rule::Bp => delta.matmul(&mlp.weights()[layer])?,
        Rule::Fa => delta.matmul_t(&mlp.feedback()[layer])?,
    };
    let mut back = back;
    let pre = &trace.pre_activations[layer - 1];
    for (b, &o) in back.as_mut_slice().iter_mut().zip(pre.as_slice()) {
        *b *= relu_grad(o);
    }
    Ok(back)
}

pub fn backward(mlp: &Mlp, trace: &ForwardTrace, labels: &[usize], rule: Rule) -> Result<Gradients> {
    check_trace(mlp, trace, labels)?;
    let layers = mlp.layer_count();
    let mut d_weights = vec![Matrix::zeros(0, 0); layers];
    let mut d_biases = vec![Vec::new(); layers];
    let mut delta = output_delta(trace, labels);
    for l in (0..layers).rev() {
        d_weights[l] = delta.t_matmul(&trace.activations[l])?;
        d_biases[l] = column_sums(&delta);
        if l > 0 {
            delta = propagate(mlp, trace, &delta, l, rule)?;
        }
    }
    Ok(Gradients { d_weights, d_biases })
}

pub fn backward_bp(mlp: &Mlp, trace: &ForwardTrace, labels: &[usize]) -> Result<Gradients> {
    backward(mlp, trace, labels, Rule::Bp)
}

pub fn backward_fa(mlp: &Mlp, trace: &ForwardTrace, labels: &[usize]) -> Result<Gradients> {
    backward(mlp, trace, labels, Rule::Fa)
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moment buffers for every `W_l` and `b_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_weights: Vec<Vec<f64>>,
    pub second_weights: Vec<Vec<f64>>,
    pub first_biases: Vec<Vec<f64>>,
    pub second_biases: Vec<Vec<f64>>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(mlp: &Mlp) -> Self {
        let w: Vec<Vec<f64>> = mlp.weights().iter().map(|w| vec![0.0; w.rows() * w.cols()]).collect();
        let b: Vec<Vec<f64>> = mlp.biases().iter().map(|b| vec![0.0; b.len()]).collect();
        AdamState {
            first_weights: w.clone(),
            second_weights: w,
            first_biases: b.clone(),
            second_biases: b,
            step_count: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }

    fn matches(&self, mlp: &Mlp) -> bool {
        self.first_weights.len() == mlp.layer_count()
            && mlp.weights().iter().zip(&self.first_weights).all(|(w, m)| w.rows() * w.cols() == m.len())
            && mlp.biases().iter().zip(&self.first_biases).all(|(b, m)| b.len() == m.len())
    }

    /// Advances the step counter and returns the two bias corrections.
    fn begin_step(&mut self) -> (f64, f64) {
        self.step_count += 1;
        let t = self.step_count as i32;
        (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t))
    }

    fn update_layer(&mut self, mlp: &mut Mlp, layer: usize, dw: &Matrix, db: &[f64], lr: f64, corr: (f64, f64)) {
        let hyper = (self.beta1, self.beta2, self.eps);
        adam_tensor(
            mlp.weights[layer].as_mut_slice(),
            dw.as_slice(),
            &mut self.first_weights[layer],
            &mut self.second_weights[layer],
            lr,
            hyper,
            corr,
        );
        adam_tensor(
            &mut mlp.biases[layer],
            db,
            &mut self.first_biases[layer],
            &mut self.second_biases[layer],
            lr,
            hyper,
            corr,
        );
    }
}

fn adam_tensor(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    (b1, b2, eps): (f64, f64, f64),
    (c1, c2): (f64, f64),
) {
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// One bias-corrected Adam update of every `W_l` and `b_l`. Feedback
/// matrices are never touched.
pub fn adam_step(state: &mut AdamState, mlp: &mut Mlp, grads: &Gradients, lr: f64) -> Result<()> {
    if !state.matches(mlp) {
        bail!(Shape, "adam state does not match network dims {:?}", mlp.dims());
    }
    if grads.d_weights.len() != mlp.layer_count()
        || grads.d_biases.len() != mlp.layer_count()
        || grads.d_weights.iter().zip(mlp.weights()).any(|(g, w)| g.shape() != w.shape())
        || grads.d_biases.iter().zip(mlp.biases()).any(|(g, b)| g.len() != b.len())
    {
        bail!(Shape, "gradients do not match network dims {:?}", mlp.dims());
    }
    let corr = state.begin_step();
    for l in 0..mlp.layer_count() {
        state.update_layer(mlp, l, &grads.d_weights[l], &grads.d_biases[l], lr, corr);
    }
    Ok(())
}

/// Feedback-alignment step with the update interleaved in the backward sweep:
/// for each layer from the top, `W_l` and `b_l` are updated from `δ_{l+1}`
/// before `δ_l = (B_l δ_{l+1}) ⊙ φ'(o_l)` is formed for the layer below.
pub fn fa_step_interleaved(
    state: &mut AdamState,
    mlp: &mut Mlp,
    trace: &ForwardTrace,
    labels: &[usize],
    lr: f64,
) -> Result<()> {
    check_trace(mlp, trace, labels)?;
    if !state.matches(mlp) {
        bail!(Shape, "adam state does not match network dims {:?}", mlp.dims());
    }
    let corr = state.begin_step();
    let mut delta = output_delta(trace, labels);
    for l in (0..mlp.layer_count()).rev() {
        let dw = delta.t_matmul(&trace.activations[l])?;
        let db = column_sums(&delta);
        state.update_layer(mlp, l, &dw, &db, lr, corr);
        if l > 0 {
            delta = propagate(mlp, trace, &delta, l, Rule::Fa)?;
        }
    }
    Ok(())
}

/// Forward, backward and Adam on one minibatch. Returns the batch loss and
/// the number of correct predictions.
pub fn train_step(
    state: &mut AdamState,
    mlp: &mut Mlp,
    batch: &Matrix,
    labels: &[usize],
    rule: Rule,
    lr: f64,
) -> Result<(f64, usize)> {
    let trace = net::forward(mlp, batch)?;
    let loss = net::cross_entropy(&trace.probabilities, labels)?;
    let correct = count_correct(&trace.probabilities, labels);
    let grads = backward(mlp, &trace, labels, rule)?;
    adam_step(state, mlp, &grads, lr)?;
    Ok((loss, correct))
}

pub(crate) fn count_correct(p: &Matrix, labels: &[usize]) -> usize {
    labels.iter().enumerate().filter(|(i, &y)| net::argmax(p.row(*i)) == y).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub rule: Rule,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop once test accuracy has not improved for this many epochs.
    #[serde(default)]
    pub patience: Option<usize>,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub shuffle: bool,
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bail!(Config, "learning rate must be positive, got {}", self.learning_rate);
        }
        if self.batch_size == 0 {
            bail!(Config, "batch size must be at least 1");
        }
        if self.epochs == 0 {
            bail!(Config, "epochs must be at least 1");
        }
        if self.patience == Some(0) {
            bail!(Config, "patience must be at least 1 when set");
        }
        Ok(())
    }
}

pub type SnapshotHook<'a> = &'a mut dyn FnMut(&Mlp, &mut RunRecord) -> Result<()>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub records: Vec<RunRecord>,
    pub optimizer_steps: u64,
    /// Epoch (1-based) with the best test accuracy.
    pub best_epoch: usize,
}

fn check_dataset(mlp: &Mlp, ds: &Dataset, role: &str) -> Result<()> {
    if ds.is_empty() {
        bail!(Config, "{role} set '{}' is empty", ds.name());
    }
    if ds.input_dim() != mlp.input_dim() {
        bail!(
            Config,
            "{role} set '{}' has input dim {}, network expects {}",
            ds.name(),
            ds.input_dim(),
            mlp.input_dim()
        );
    }
    if ds.class_count() != mlp.class_count() {
        bail!(
            Config,
            "{role} set '{}' has {} classes, network outputs {}",
            ds.name(),
            ds.class_count(),
            mlp.class_count()
        );
    }
    Ok(())
}

/// Minibatch training with the chosen error-propagation rule and Adam.
///
/// After every epoch both sets are evaluated in full; the hook then sees the
/// updated network and may add metrics to the epoch's record. The model left
/// in `mlp` is the last one trained, also under early stopping.
pub fn train(
    mlp: &mut Mlp,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    mut hook: Option<SnapshotHook<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dataset(mlp, train_set, "training")?;
    check_dataset(mlp, test_set, "test")?;

    let mut rng = seed::rng(cfg.seed);
    let mut state = AdamState::new(mlp);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut records = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut stale = 0;

    for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train_set.images().select_rows(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.labels()[i]).collect();
            train_step(&mut state, mlp, &batch, &labels, cfg.rule, cfg.learning_rate)?;
        }
        if !mlp.all_finite() {
            return Err(Error::Numeric(format!("non-finite parameters after epoch {epoch}")));
        }

        let (train_loss, train_acc) = net::evaluate(mlp, train_set.images(), train_set.labels())?;
        let (test_loss, test_acc) = net::evaluate(mlp, test_set.images(), test_set.labels())?;
        if test_acc > best {
            best = test_acc;
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
        }
        let mut rec = RunRecord::new(Phase::Train, epoch);
        rec.train_loss = Some(train_loss);
        rec.train_acc = Some(train_acc);
        rec.test_loss = Some(test_loss);
        rec.test_acc = Some(test_acc);
        rec.metrics.insert("best_test_acc".into(), best);
        rec.seed = cfg.seed;
        if let Some(h) = hook.as_mut() {
            h(mlp, &mut rec)?;
        }
        if !rec.all_finite() {
            return Err(Error::Numeric(format!("non-finite metric at epoch {epoch}")));
        }
        records.push(rec);
        if cfg.patience.is_some_and(|p| stale >= p) {
            break;
        }
    }
    Ok(TrainOutcome { records, optimizer_steps: state.step_count, best_epoch })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::init_mlp;
    use rand::Rng;

    fn batch(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = seed::rng(seed);
        Matrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn perfect_prediction_gives_zero_gradients() {
        // Zero hidden weights, large output bias on class 1.
        let net = Mlp::from_parts(
            vec![2, 2, 2],
            vec![Matrix::zeros(2, 2), Matrix::zeros(2, 2)],
            vec![vec![0.0, 0.0], vec![-800.0, 800.0]],
            vec![Matrix::filled(2, 2, 0.3), Matrix::filled(2, 2, -0.2)],
        )
        .unwrap();
        let x = batch(3, 2, 1);
        let t = net::forward(&net, &x).unwrap();
        for rule in [Rule::Bp, Rule::Fa] {
            let g = backward(&net, &t, &[1, 1, 1], rule).unwrap();
            assert!(g.max_abs() < 1e-12);
        }
    }

    #[test]
    fn output_delta_by_hand() {
        // Uniform probabilities over 2 classes, label 0, batch of 2.
        let net =
            Mlp::from_parts(vec![1, 2], vec![Matrix::zeros(2, 1)], vec![vec![0.0, 0.0]], vec![Matrix::zeros(1, 2)])
                .unwrap();
        let x = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let t = net::forward(&net, &x).unwrap();
        let g = backward_bp(&net, &t, &[0, 0]).unwrap();
        // δ = (-0.5, 0.5)/2 per row, two rows summed.
        assert!((g.d_biases[0][0] + 0.5).abs() < 1e-15);
        assert!((g.d_biases[0][1] - 0.5).abs() < 1e-15);
        assert_eq!(output_delta(&t, &[0, 0]).row(0), &[-0.25, 0.25]);
    }

    #[test]
    fn fa_hidden_delta_by_hand() {
        // [2,2,2]: W0 = I, b0 = 0, W1 = 0, b1 = 0 -> p uniform.
        let b1 = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let net = Mlp::from_parts(
            vec![2, 2, 2],
            vec![Matrix::identity(2), Matrix::zeros(2, 2)],
            vec![vec![0.0; 2], vec![0.0; 2]],
            vec![Matrix::identity(2), b1],
        )
        .unwrap();
        // Input (1, -1): o1 = (1, -1), relu' = (1, 0).
        let x = Matrix::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let t = net::forward(&net, &x).unwrap();
        let g = backward_fa(&net, &t, &[0]).unwrap();
        // δ2 = (-0.5, 0.5); B1·δ2 = (1*-0.5 + 2*0.5, 3*-0.5 + 4*0.5) = (0.5, 0.5);
        // ⊙ (1, 0) -> δ1 = (0.5, 0). dW0 = δ1 xᵀ.
        assert_eq!(g.d_biases[0], vec![0.5, 0.0]);
        assert_eq!(g.d_weights[0].as_slice(), &[0.5, -0.5, 0.0, 0.0]);
        // BP uses W1ᵀ = 0 -> no hidden error at all.
        let g_bp = backward_bp(&net, &t, &[0]).unwrap();
        assert_eq!(g_bp.d_biases[0], vec![0.0, 0.0]);
    }

    #[test]
    fn last_layer_gradient_is_rule_independent() {
        let net = init_mlp(&[6, 5, 4, 3], 7).unwrap();
        let x = batch(9, 6, 2);
        let t = net::forward(&net, &x).unwrap();
        let labels = [0, 1, 2, 0, 1, 2, 0, 1, 2];
        let bp = backward_bp(&net, &t, &labels).unwrap();
        let fa = backward_fa(&net, &t, &labels).unwrap();
        assert_eq!(bp.d_weights[2], fa.d_weights[2]);
        assert_eq!(bp.d_biases[2], fa.d_biases[2]);
        assert_ne!(bp.d_weights[0], fa.d_weights[0]);
    }

    #[test]
    fn backward_shape_errors() {
        let net = init_mlp(&[4, 3, 2], 0).unwrap();
        let other = init_mlp(&[5, 3, 2], 0).unwrap();
        let t = net::forward(&other, &batch(2, 5, 0)).unwrap();
        assert!(matches!(backward_bp(&net, &t, &[0, 1]), Err(Error::Shape(_))));
        let t = net::forward(&net, &batch(2, 4, 0)).unwrap();
        assert!(matches!(backward_bp(&net, &t, &[0]), Err(Error::Shape(_))));
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut net = init_mlp(&[4, 3, 2], 1).unwrap();
        let before = net.clone();
        let mut st = AdamState::new(&net);
        adam_step(&mut st, &mut net, &Gradients::zeros_like(&before), 1e-3).unwrap();
        assert_eq!(net, before);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut net = init_mlp(&[3, 2], 1).unwrap();
        let before = net.clone();
        let mut g = Gradients::zeros_like(&net);
        g.d_weights[0] = Matrix::from_rows(&[vec![0.5, -2.0, 1e-3], vec![-1e-2, 3.0, 0.0]]).unwrap();
        let mut st = AdamState::new(&net);
        adam_step(&mut st, &mut net, &g, 0.01).unwrap();
        for i in 0..6 {
            let gi = g.d_weights[0].as_slice()[i];
            let step = net.weights()[0].as_slice()[i] - before.weights()[0].as_slice()[i];
            let expected = -0.01 * gi / (gi.abs() + ADAM_EPS);
            assert!((step - expected).abs() < 1e-15, "{step} vs {expected}");
        }
        assert_eq!(net.feedback(), before.feedback());
    }

    #[test]
    fn adam_rejects_mismatched_state() {
        let net_a = init_mlp(&[3, 2], 1).unwrap();
        let mut net_b = init_mlp(&[4, 2], 1).unwrap();
        let mut st = AdamState::new(&net_a);
        let g = Gradients::zeros_like(&net_b);
        assert!(matches!(adam_step(&mut st, &mut net_b, &g, 0.1), Err(Error::Shape(_))));
    }

    #[test]
    fn interleaved_fa_equals_compute_then_update() {
        let mut a = init_mlp(&[6, 5, 4, 3], 21).unwrap();
        let mut b = a.clone();
        let mut sa = AdamState::new(&a);
        let mut sb = AdamState::new(&b);
        for step in 0..5 {
            let x = batch(8, 6, 100 + step);
            let labels: Vec<usize> = (0..8).map(|i| (i + step as usize) % 3).collect();
            let ta = net::forward(&a, &x).unwrap();
            let g = backward_fa(&a, &ta, &labels).unwrap();
            adam_step(&mut sa, &mut a, &g, 1e-2).unwrap();
            let tb = net::forward(&b, &x).unwrap();
            fa_step_interleaved(&mut sb, &mut b, &tb, &labels, 1e-2).unwrap();
        }
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }
}
