//! Minimal neural engine: MLP forward/backward with inverted dropout, plain
//! SGD, cross-entropy loss, penultimate-layer embeddings, and MC-dropout
//! prediction.
//!
//! Parameters use value semantics throughout: every update returns a new
//! [`ModelParams`], so a virtual update can never corrupt the live model.

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seeds;

/// Probability floor applied before any logarithm.
pub const PROB_EPS: f64 = 1e-12;

// ─── Domain types ──────────────────────────────────────

/// A labelled minibatch: `n × d` features in `[0, 1]` plus `n` class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    features: Matrix,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::shape("Batch::new", features.rows(), labels.len()));
        }
        if !features.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(
                "batch features must lie in [0, 1]".into(),
            ));
        }
        Ok(Batch { features, labels })
    }

    pub fn empty(feature_dim: usize) -> Self {
        Batch {
            features: Matrix::empty(feature_dim),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Rows at `indices`, in order.
    pub fn select(&self, indices: &[usize]) -> Batch {
        Batch {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Batch) -> Result<Batch> {
        Ok(Batch {
            features: self.features.vstack(other.features())?,
            labels: self
                .labels
                .iter()
                .chain(other.labels())
                .copied()
                .collect(),
        })
    }
}

/// `n × N_c` class probabilities; every row lies on the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrix(Matrix);

impl PredictionMatrix {
    /// Validates the simplex invariant (row sums within 1e-6 of 1, entries in
    /// `[0, 1]`). Zero-row matrices are accepted.
    pub fn from_matrix(m: Matrix) -> Result<Self> {
        for (i, row) in m.iter_rows().enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || !row.iter().all(|p| (0.0..=1.0).contains(p)) {
                return Err(Error::InvalidArgument(format!(
                    "prediction row {i} is not on the simplex (sum {sum})"
                )));
            }
        }
        Ok(PredictionMatrix(m))
    }

    /// Trusted constructor for softmax output.
    fn from_softmax(m: Matrix) -> Self {
        PredictionMatrix(m)
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn classes(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `n × d_e` penultimate-layer activations.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix(Matrix);

impl EmbeddingMatrix {
    pub fn from_matrix(m: Matrix) -> Result<Self> {
        if !m.all_finite() {
            return Err(Error::NonFinite("embeddings"));
        }
        Ok(EmbeddingMatrix(m))
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

/// Non-negative scalar loss. `from_empty_batch` flags the degenerate
/// zero-loss returned for an empty batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub from_empty_batch: bool,
}

impl LossValue {
    pub(crate) fn new(value: f64) -> Result<Self> {
        if !value.is_finite() || value < 0.0 {
            return Err(Error::NonFinite("loss"));
        }
        Ok(LossValue {
            value,
            from_empty_batch: false,
        })
    }

    pub(crate) fn empty_batch() -> Self {
        LossValue {
            value: 0.0,
            from_empty_batch: true,
        }
    }
}

/// Flat MLP parameters: per layer, `in·out` row-major weights followed by
/// `out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layer_shapes: Vec<(usize, usize)>,
    values: Vec<f64>,
    learning_rate: f64,
    dropout_rate: f64,
}

/// Flat gradient with the same layout as the owning [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    values: Vec<f64>,
}

impl Gradient {
    pub fn from_flat(values: Vec<f64>) -> Result<Self> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        Ok(Gradient { values })
    }

    pub fn flat(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Dropout behaviour of a forward pass. `Train` and `Stochastic` both apply
/// seeded dropout masks; the distinction documents intent (training step vs
/// MC-dropout prediction pass).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Eval,
    Train { seed: u64 },
    Stochastic { seed: u64 },
}

impl ForwardMode {
    fn dropout_seed(self) -> Option<u64> {
        match self {
            ForwardMode::Eval => None,
            ForwardMode::Train { seed } | ForwardMode::Stochastic { seed } => Some(seed),
        }
    }
}

// ─── Raw forward/backward ──────────────────────────────
//
// The classifier and the VAE halves share these. The head decides what is
// applied to the last affine layer's output; backward always starts from
// dL/d(pre-head output).

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum OutputHead {
    Softmax,
    Linear,
    Sigmoid,
}

pub(crate) struct RawCache {
    /// Input to each affine layer (`layer_inputs[0]` is the batch features).
    layer_inputs: Vec<Matrix>,
    /// Post-ReLU, pre-dropout output of each hidden layer.
    relu_outputs: Vec<Matrix>,
    /// Dropout multipliers (0 or 1/keep) per hidden layer; `None` when no
    /// dropout was applied.
    masks: Vec<Option<Matrix>>,
    /// Post-head output.
    pub(crate) output: Matrix,
    layer_shapes: Vec<(usize, usize)>,
}

fn affine(input: &Matrix, weights: &[f64], biases: &[f64], out_dim: usize) -> Matrix {
    let n = input.rows();
    let mut out = Matrix::zeros(n, out_dim);
    for i in 0..n {
        let a_row = input.row(i);
        let out_row = out.row_mut(i);
        out_row.copy_from_slice(biases);
        for (k, &a) in a_row.iter().enumerate() {
            // ReLU and dropout leave many exact zeros; skipping them is a
            // large win on the hot path.
            if a != 0.0 {
                let w_row = &weights[k * out_dim..(k + 1) * out_dim];
                for (o, &w) in out_row.iter_mut().zip(w_row) {
                    *o += a * w;
                }
            }
        }
    }
    out
}

fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn draw_mask(rows: usize, cols: usize, dropout_rate: f64, seed: u64, layer: u64) -> Matrix {
    let keep = 1.0 - dropout_rate;
    let scale = 1.0 / keep;
    let mut rng = seeds::rng(seed, &[layer]);
    let mut mask = Matrix::zeros(rows, cols);
    for v in mask.data_mut() {
        *v = if rng.random::<f64>() < keep { scale } else { 0.0 };
    }
    mask
}

pub(crate) fn forward_raw(
    params: &ModelParams,
    features: &Matrix,
    head: OutputHead,
    dropout_seed: Option<u64>,
) -> Result<RawCache> {
    if features.cols() != params.input_dim() {
        return Err(Error::shape("forward", params.input_dim(), features.cols()));
    }
    let n_layers = params.n_layers();
    let mut layer_inputs = Vec::with_capacity(n_layers);
    let mut relu_outputs = Vec::with_capacity(n_layers.saturating_sub(1));
    let mut masks = Vec::with_capacity(n_layers.saturating_sub(1));
    let mut activation = features.clone();

    for l in 0..n_layers {
        let (in_dim, out_dim) = params.layer_shapes[l];
        debug_assert_eq!(activation.cols(), in_dim);
        let z = affine(&activation, params.weights(l), params.biases(l), out_dim);
        if !z.all_finite() {
            return Err(Error::NonFinite("forward activation"));
        }
        layer_inputs.push(activation);
        if l + 1 < n_layers {
            let mut relu = z;
            for v in relu.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            let next = match dropout_seed {
                Some(seed) if params.dropout_rate > 0.0 => {
                    let mask =
                        draw_mask(relu.rows(), relu.cols(), params.dropout_rate, seed, l as u64);
                    let mut dropped = relu.clone();
                    for (v, m) in dropped.data_mut().iter_mut().zip(mask.data()) {
                        *v *= m;
                    }
                    masks.push(Some(mask));
                    dropped
                }
                _ => {
                    masks.push(None);
                    relu.clone()
                }
            };
            relu_outputs.push(relu);
            activation = next;
        } else {
            let output = match head {
                OutputHead::Softmax => softmax_rows(&z),
                OutputHead::Linear => z,
                OutputHead::Sigmoid => {
                    let mut s = z;
                    for v in s.data_mut() {
                        *v = 1.0 / (1.0 + (-*v).exp());
                    }
                    s
                }
            };
            return Ok(RawCache {
                layer_inputs,
                relu_outputs,
                masks,
                output,
                layer_shapes: params.layer_shapes.clone(),
            });
        }
    }
    unreachable!("ModelParams guarantees at least one layer");
}

/// Backpropagates from `d_out` = dL/d(pre-head output of the last layer).
/// Returns the flat gradient and dL/d(input features).
pub(crate) fn backward_raw(
    params: &ModelParams,
    cache: &RawCache,
    d_out: &Matrix,
) -> Result<(Gradient, Matrix)> {
    if cache.layer_shapes != params.layer_shapes {
        return Err(Error::shape(
            "backward",
            format!("{:?}", cache.layer_shapes),
            format!("{:?}", params.layer_shapes),
        ));
    }
    let last = params.n_layers() - 1;
    if d_out.cols() != params.layer_shapes[last].1 || d_out.rows() != cache.layer_inputs[0].rows() {
        return Err(Error::shape(
            "backward",
            format!("{}x{}", cache.layer_inputs[0].rows(), params.layer_shapes[last].1),
            format!("{}x{}", d_out.rows(), d_out.cols()),
        ));
    }

    let mut grad = vec![0.0; params.values.len()];
    let mut dz = d_out.clone();

    for l in (0..=last).rev() {
        let (in_dim, out_dim) = params.layer_shapes[l];
        let input = &cache.layer_inputs[l];
        let (w_off, b_off) = params.offsets(l);
        let n = input.rows();

        // dW = input^T · dz, db = column sums of dz.
        for i in 0..n {
            let a_row = input.row(i);
            let dz_row = dz.row(i);
            for (k, &a) in a_row.iter().enumerate() {
                if a != 0.0 {
                    let g_row = &mut grad[w_off + k * out_dim..w_off + (k + 1) * out_dim];
                    for (g, &d) in g_row.iter_mut().zip(dz_row) {
                        *g += a * d;
                    }
                }
            }
            let g_b = &mut grad[b_off..b_off + out_dim];
            for (g, &d) in g_b.iter_mut().zip(dz_row) {
                *g += d;
            }
        }

        // d(input) = dz · W^T.
        let weights = params.weights(l);
        let mut d_in = Matrix::zeros(n, in_dim);
        for i in 0..n {
            let dz_row = dz.row(i);
            let d_row = d_in.row_mut(i);
            for (k, d) in d_row.iter_mut().enumerate() {
                let w_row = &weights[k * out_dim..(k + 1) * out_dim];
                *d = dz_row.iter().zip(w_row).map(|(a, b)| a * b).sum();
            }
        }

        if l == 0 {
            let grad = Gradient::from_flat(grad)?;
            return Ok((grad, d_in));
        }

        // Through the previous hidden layer's dropout and ReLU.
        let hidden = l - 1;
        if let Some(mask) = &cache.masks[hidden] {
            for (v, m) in d_in.data_mut().iter_mut().zip(mask.data()) {
                *v *= m;
            }
        }
        let relu = &cache.relu_outputs[hidden];
        for (v, &r) in d_in.data_mut().iter_mut().zip(relu.data()) {
            if r <= 0.0 {
                *v = 0.0;
            }
        }
        dz = d_in;
    }
    unreachable!();
}

// ─── Public operations ─────────────────────────────────

/// Activation cache produced by [`forward`]; consumed by [`backward`].
pub struct ForwardCache {
    raw: RawCache,
}

impl ForwardCache {
    pub fn batch_len(&self) -> usize {
        self.raw.layer_inputs[0].rows()
    }
}

impl ModelParams {
    /// Glorot-uniform initialization from `seed`; biases start at zero.
    /// `layer_dims` lists the widths, e.g. `[784, 128, 64, 10]`.
    pub fn init(layer_dims: &[usize], learning_rate: f64, dropout_rate: f64, seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "layer_dims must list at least two positive widths, got {layer_dims:?}"
            )));
        }
        let layer_shapes: Vec<(usize, usize)> = layer_dims.windows(2).map(|w| (w[0], w[1])).collect();
        let total: usize = layer_shapes.iter().map(|(i, o)| i * o + o).sum();
        let mut values = vec![0.0; total];
        let mut rng = seeds::rng(seed, &[seeds::tag::INIT]);
        let mut off = 0;
        for &(in_dim, out_dim) in &layer_shapes {
            let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
            for v in &mut values[off..off + in_dim * out_dim] {
                *v = rng.random_range(-bound..bound);
            }
            off += in_dim * out_dim + out_dim; // biases stay zero
        }
        Self::from_flat(layer_shapes, values, learning_rate, dropout_rate)
    }

    pub fn from_flat(
        layer_shapes: Vec<(usize, usize)>,
        values: Vec<f64>,
        learning_rate: f64,
        dropout_rate: f64,
    ) -> Result<Self> {
        if layer_shapes.is_empty() {
            return Err(Error::InvalidArgument("at least one layer required".into()));
        }
        for w in layer_shapes.windows(2) {
            if w[0].1 != w[1].0 {
                return Err(Error::shape("ModelParams::from_flat", w[0].1, w[1].0));
            }
        }
        let expected: usize = layer_shapes.iter().map(|(i, o)| i * o + o).sum();
        if values.len() != expected {
            return Err(Error::shape("ModelParams::from_flat", expected, values.len()));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("model parameters"));
        }
        // A zero learning rate is allowed so that a virtual update can be
        // exercised as the identity.
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be non-negative, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must lie in [0, 1), got {dropout_rate}"
            )));
        }
        Ok(ModelParams {
            layer_shapes,
            values,
            learning_rate,
            dropout_rate,
        })
    }

    pub fn layer_shapes(&self) -> &[(usize, usize)] {
        &self.layer_shapes
    }

    pub fn flat(&self) -> &[f64] {
        &self.values
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn n_layers(&self) -> usize {
        self.layer_shapes.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_shapes[0].0
    }

    pub fn output_dim(&self) -> usize {
        self.layer_shapes[self.layer_shapes.len() - 1].1
    }

    /// Width of the last hidden layer (the embedding width).
    pub fn embedding_dim(&self) -> Option<usize> {
        if self.n_layers() < 2 {
            None
        } else {
            Some(self.layer_shapes[self.n_layers() - 2].1)
        }
    }

    /// (weights offset, biases offset) of layer `l` in the flat vector.
    fn offsets(&self, l: usize) -> (usize, usize) {
        let mut off = 0;
        for &(i, o) in &self.layer_shapes[..l] {
            off += i * o + o;
        }
        let (i, o) = self.layer_shapes[l];
        (off, off + i * o)
    }

    fn weights(&self, l: usize) -> &[f64] {
        let (w, b) = self.offsets(l);
        &self.values[w..b]
    }

    fn biases(&self, l: usize) -> &[f64] {
        let (_, b) = self.offsets(l);
        let (_, o) = self.layer_shapes[l];
        &self.values[b..b + o]
    }

    /// Full forward pass. Eval mode is deterministic; `Train`/`Stochastic`
    /// apply dropout masks drawn from the given seed.
    pub fn forward(&self, batch: &Batch, mode: ForwardMode) -> Result<(PredictionMatrix, ForwardCache)> {
        let raw = forward_raw(self, batch.features(), OutputHead::Softmax, mode.dropout_seed())?;
        let preds = PredictionMatrix::from_softmax(raw.output.clone());
        Ok((preds, ForwardCache { raw }))
    }

    /// Gradient of the mean cross-entropy with respect to all parameters,
    /// honouring the dropout masks recorded in `cache`.
    pub fn backward(&self, cache: &ForwardCache, labels: &[usize]) -> Result<Gradient> {
        let n = cache.batch_len();
        if labels.len() != n {
            return Err(Error::shape("backward labels", n, labels.len()));
        }
        let classes = self.output_dim();
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        if n == 0 {
            return Gradient::from_flat(vec![0.0; self.values.len()]);
        }
        // d(mean CE)/d(logits) = (softmax - onehot) / n.
        let mut d_logits = cache.raw.output.clone();
        let inv_n = 1.0 / n as f64;
        for (i, &label) in labels.iter().enumerate() {
            let row = d_logits.row_mut(i);
            row[label] -= 1.0;
            for v in row.iter_mut() {
                *v *= inv_n;
            }
        }
        let (grad, _) = backward_raw(self, &cache.raw, &d_logits)?;
        Ok(grad)
    }

    /// `ω − η·∇L` as a new value; `self` is unchanged.
    pub fn sgd_step(&self, grad: &Gradient) -> Result<ModelParams> {
        if grad.len() != self.values.len() {
            return Err(Error::shape("sgd_step", self.values.len(), grad.len()));
        }
        let mut next = self.clone();
        for (v, g) in next.values.iter_mut().zip(grad.flat()) {
            *v -= self.learning_rate * g;
        }
        Ok(next)
    }

    /// Same update rule as [`Self::sgd_step`], producing the throwaway model
    /// used for interference scoring. The caller must never install the
    /// result as the live model.
    pub fn virtual_update(&self, grad: &Gradient) -> Result<ModelParams> {
        self.sgd_step(grad)
    }

    /// Post-activation values of the last hidden layer, dropout disabled.
    pub fn extract_embeddings(&self, batch: &Batch) -> Result<EmbeddingMatrix> {
        if self.n_layers() < 2 {
            return Err(Error::UnsupportedArchitecture(
                "embeddings require at least one hidden layer".into(),
            ));
        }
        let raw = forward_raw(self, batch.features(), OutputHead::Softmax, None)?;
        let emb = raw.relu_outputs.last().expect("n_layers >= 2").clone();
        EmbeddingMatrix::from_matrix(emb)
    }

    /// `k` stochastic forward passes with per-pass derived seeds.
    pub fn mc_predict(&self, batch: &Batch, k: usize, seed: u64) -> Result<Vec<PredictionMatrix>> {
        if k == 0 {
            return Err(Error::InvalidArgument("mc_predict requires k >= 1".into()));
        }
        (0..k)
            .map(|pass| {
                let pass_seed = seeds::derive(seed, &[pass as u64]);
                let (preds, _) = self.forward(batch, ForwardMode::Stochastic { seed: pass_seed })?;
                Ok(preds)
            })
            .collect()
    }
}

/// Per-row `−ln(pred[label])` with the probability clamped at [`PROB_EPS`].
pub fn per_sample_cross_entropy(preds: &PredictionMatrix, labels: &[usize]) -> Result<Vec<f64>> {
    if preds.rows() != labels.len() {
        return Err(Error::shape("cross_entropy", preds.rows(), labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= preds.classes()) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {} classes",
            preds.classes()
        )));
    }
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -(preds.row(i)[l].max(PROB_EPS)).ln())
        .collect())
}

/// Mean cross-entropy over the batch; an empty batch yields zero with the
/// `from_empty_batch` flag set.
pub fn cross_entropy(preds: &PredictionMatrix, labels: &[usize]) -> Result<LossValue> {
    let per_sample = per_sample_cross_entropy(preds, labels)?;
    if per_sample.is_empty() {
        return Ok(LossValue::empty_batch());
    }
    LossValue::new(per_sample.iter().sum::<f64>() / per_sample.len() as f64)
}
