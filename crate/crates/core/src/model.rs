//! Toy relational network: a shared ReLU encoder φ and a pair head r.
//!
//! ```text
//! x_i ─φ─▶ z_i ┐
//!              ├─ combine ─▶ ReLU MLP ─▶ p (pair features) ─▶ affine ─▶ σ (or 2 logits)
//! x_j ─φ─▶ z_j ┘
//! ```
//!
//! Every encoder and head layer is affine followed by ReLU; the final map to the
//! score is affine only. Both branches share the encoder weights, so their
//! gradients are summed.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::EmbeddingSet;
use crate::error::{Error, Result};
use crate::io::Cursor;
use crate::losses::{LossSpec, PairTarget, SAME_LOGIT};
use crate::metrics;
use crate::numeric::{dot, Matrix, Rng};

const STREAM_INIT: u64 = 10;
const STREAM_PAIRS: u64 = 11;

/// How the two embeddings enter the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairCombine {
    /// `[z_i, z_j]`
    #[default]
    Concat,
    /// `[z_i + z_j, |z_i − z_j|]`, order-invariant.
    Symmetric,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Input dimension, hidden widths, embedding dimension.
    pub encoder_dims: Vec<usize>,
    /// Hidden widths of the head; the last entry is the pair-feature dimension.
    pub head_dims: Vec<usize>,
    /// 1 for scalar-score losses, 2 for the two-logit head.
    pub head_outputs: usize,
    pub combine: PairCombine,
}

impl Architecture {
    /// `input → 64 → 32` encoder, `64 → 64 → 32` head.
    pub fn desk_default(input_dim: usize, head_outputs: usize) -> Self {
        Self {
            encoder_dims: vec![input_dim, 64, 32],
            head_dims: vec![64, 32],
            head_outputs,
            combine: PairCombine::Concat,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder_dims[0]
    }

    pub fn embedding_dim(&self) -> usize {
        *self.encoder_dims.last().unwrap()
    }

    pub fn pair_dim(&self) -> usize {
        *self.head_dims.last().unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_dims.len() < 2 || self.head_dims.is_empty() {
            return Err(Error::invalid("encoder needs ≥ 1 layer and head ≥ 1 hidden layer"));
        }
        if self.encoder_dims.iter().chain(&self.head_dims).any(|&d| d == 0) {
            return Err(Error::invalid("layer widths must be ≥ 1"));
        }
        if !(1..=2).contains(&self.head_outputs) {
            return Err(Error::invalid("head_outputs must be 1 or 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out × in`
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(input: usize, output: usize) -> Self {
        Self {
            weights: Matrix::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    fn glorot(input: usize, output: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let w = (0..input * output).map(|_| rng.uniform(-limit, limit)).collect();
        Self {
            weights: Matrix::from_vec(output, input, w).expect("finite init"),
            bias: (0..output).map(|_| rng.uniform(-limit, limit)).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .row_iter()
            .zip(&self.bias)
            .map(|(row, b)| dot(row, x) + b)
            .collect()
    }

    fn relu_forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.affine(x);
        y.iter_mut().for_each(|v| *v = v.max(0.0));
        y
    }

    /// Accumulates parameter gradients for pre-activation gradient `g_pre`
    /// and returns the gradient with respect to the layer input.
    fn backward(&self, input: &[f64], g_pre: &[f64], grad: &mut Layer) -> Vec<f64> {
        let n_in = self.input_dim();
        let mut g_in = vec![0.0; n_in];
        for (o, &g) in g_pre.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let gw = grad.weights.row_mut(o);
            for (w, &a) in gw.iter_mut().zip(input) {
                *w += g * a;
            }
            for (gi, &w) in g_in.iter_mut().zip(self.weights.row(o)) {
                *gi += g * w;
            }
        }
        g_in
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.weights.as_slice().iter().chain(&self.bias)
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.as_mut_slice().iter_mut().chain(self.bias.iter_mut())
    }
}

/// Penultimate pair features `p` and the head output.
#[derive(Debug, Clone, PartialEq)]
pub struct PairOutput {
    pub features: Vec<f64>,
    pub score: Vec<f64>,
}

/// How a relational similarity is read off the head output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityReadout {
    /// Scalar σ, or the "same" logit of a two-logit head.
    #[default]
    SameLogit,
    /// Scalar σ, or `same − different` for a two-logit head.
    LogitDifference,
}

impl SimilarityReadout {
    pub fn read(self, score: &[f64]) -> f64 {
        match (score.len(), self) {
            (1, _) => score[0],
            (_, SimilarityReadout::SameLogit) => score[SAME_LOGIT],
            (_, SimilarityReadout::LogitDifference) => score[SAME_LOGIT] - score[1 - SAME_LOGIT],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    arch: Architecture,
    encoder: Vec<Layer>,
    head: Vec<Layer>,
    output: Layer,
}

struct EncoderTrace {
    /// `activations[0]` is the input; `activations[k]` is the output of layer k.
    activations: Vec<Vec<f64>>,
}

struct PairTrace {
    left: EncoderTrace,
    right: EncoderTrace,
    combined: Vec<f64>,
    head_acts: Vec<Vec<f64>>,
    score: Vec<f64>,
}

impl ModelParams {
    fn build(arch: Architecture, mut make: impl FnMut(usize, usize) -> Layer) -> Result<Self> {
        arch.validate()?;
        let encoder = arch.encoder_dims.windows(2).map(|w| make(w[0], w[1])).collect();
        let mut head = Vec::new();
        let mut width = 2 * arch.embedding_dim();
        for &h in &arch.head_dims {
            head.push(make(width, h));
            width = h;
        }
        let output = make(width, arch.head_outputs);
        Ok(Self { arch, encoder, head, output })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        Self::build(arch, Layer::zeros)
    }

    /// Uniform `±sqrt(6/(fan_in+fan_out))` initialization for weights and biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        Self::init_with(arch, seed, 1.0)
    }

    /// [`ModelParams::init`] with the output layer multiplied by `output_scale`.
    pub fn init_with(arch: Architecture, seed: u64, output_scale: f64) -> Result<Self> {
        if !(output_scale >= 0.0) || !output_scale.is_finite() {
            return Err(Error::invalid("output_scale must be finite and ≥ 0"));
        }
        let mut rng = Rng::derive(seed, STREAM_INIT);
        let mut params = Self::build(arch, |i, o| Layer::glorot(i, o, &mut rng))?;
        params.output.params_mut().for_each(|v| *v *= output_scale);
        Ok(params)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn encoder_layers(&self) -> &[Layer] {
        &self.encoder
    }

    pub fn encoder_layers_mut(&mut self) -> &mut [Layer] {
        &mut self.encoder
    }

    pub fn head_layers_mut(&mut self) -> &mut [Layer] {
        &mut self.head
    }

    pub fn output_layer_mut(&mut self) -> &mut Layer {
        &mut self.output
    }

    fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.encoder.iter().chain(&self.head).chain(std::iter::once(&self.output))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.encoder
            .iter_mut()
            .chain(self.head.iter_mut())
            .chain(std::iter::once(&mut self.output))
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(|l| l.weights.as_slice().len() + l.bias.len()).sum()
    }

    /// Parameters in layer order (encoder, head, output), each layer weights then bias.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers().flat_map(Layer::params).copied().collect()
    }

    pub fn from_flat(arch: Architecture, values: &[f64]) -> Result<Self> {
        let mut params = Self::zeros(arch)?;
        if values.len() != params.param_count() {
            return Err(Error::invalid(format!(
                "{} parameters for an architecture with {}",
                values.len(),
                params.param_count()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite parameter"));
        }
        for (slot, v) in params.layers_mut().flat_map(Layer::params_mut).zip(values) {
            *slot = *v;
        }
        Ok(params)
    }

    /// Rounds every parameter to the nearest `f32`.
    pub fn quantize_f32(&mut self) {
        for p in self.layers_mut().flat_map(Layer::params_mut) {
            *p = f64::from(*p as f32);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers().flat_map(Layer::params).all(|v| v.is_finite())
    }

    fn encode_trace(&self, x: &[f64]) -> EncoderTrace {
        let mut activations = Vec::with_capacity(self.encoder.len() + 1);
        activations.push(x.to_vec());
        for layer in &self.encoder {
            let next = layer.relu_forward(activations.last().unwrap());
            activations.push(next);
        }
        EncoderTrace { activations }
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.arch.input_dim() {
            return Err(Error::invalid(format!(
                "input has length {}, encoder expects {}",
                x.len(),
                self.arch.input_dim()
            )));
        }
        Ok(self.encode_trace(x).activations.pop().unwrap())
    }

    /// Encodes every row of `set`.
    pub fn encode_set(&self, set: &EmbeddingSet) -> Result<EmbeddingSet> {
        set.map_rows(self.arch.embedding_dim(), |x| self.encode(x))
    }

    fn combine(&self, zi: &[f64], zj: &[f64]) -> Vec<f64> {
        match self.arch.combine {
            PairCombine::Concat => [zi, zj].concat(),
            PairCombine::Symmetric => zi
                .iter()
                .zip(zj)
                .map(|(a, b)| a + b)
                .chain(zi.iter().zip(zj).map(|(a, b)| (a - b).abs()))
                .collect(),
        }
    }

    fn head_trace(&self, combined: Vec<f64>) -> (Vec<f64>, Vec<Vec<f64>>, Vec<f64>) {
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.head.len());
        for layer in &self.head {
            let input = acts.last().unwrap_or(&combined);
            let next = layer.relu_forward(input);
            acts.push(next);
        }
        let score = self.output.affine(acts.last().unwrap());
        (combined, acts, score)
    }

    pub fn score_pair(&self, zi: &[f64], zj: &[f64]) -> Result<PairOutput> {
        let e = self.arch.embedding_dim();
        if zi.len() != e || zj.len() != e {
            return Err(Error::invalid(format!(
                "embeddings of length {} and {}, head expects {e}",
                zi.len(),
                zj.len()
            )));
        }
        let (_, mut acts, score) = self.head_trace(self.combine(zi, zj));
        Ok(PairOutput {
            features: acts.pop().unwrap(),
            score,
        })
    }

    /// Encodes both inputs and scores the pair.
    pub fn forward_pair(&self, xi: &[f64], xj: &[f64]) -> Result<PairOutput> {
        self.score_pair(&self.encode(xi)?, &self.encode(xj)?)
    }

    fn trace_pair(&self, xi: &[f64], xj: &[f64]) -> PairTrace {
        let left = self.encode_trace(xi);
        let right = self.encode_trace(xj);
        let (combined, head_acts, score) = self.head_trace(self.combine(
            left.activations.last().unwrap(),
            right.activations.last().unwrap(),
        ));
        PairTrace { left, right, combined, head_acts, score }
    }

    fn backprop_encoder(&self, trace: &EncoderTrace, mut g: Vec<f64>, grads: &mut ModelParams) {
        for (k, layer) in self.encoder.iter().enumerate().rev() {
            let out = &trace.activations[k + 1];
            for (gv, a) in g.iter_mut().zip(out) {
                if *a <= 0.0 {
                    *gv = 0.0;
                }
            }
            g = layer.backward(&trace.activations[k], &g, &mut grads.encoder[k]);
        }
    }

    /// Accumulates `dL/dθ` for one pair into `grads` and returns the loss value.
    fn accumulate_pair_grad(
        &self,
        xi: &[f64],
        xj: &[f64],
        target: PairTarget,
        loss: &LossSpec,
        grads: &mut ModelParams,
    ) -> Result<f64> {
        let trace = self.trace_pair(xi, xj);
        if trace.score.iter().any(|s| !s.is_finite()) {
            return Ok(f64::NAN);
        }
        let out = loss.evaluate(&trace.score, target)?;

        let last = trace.head_acts.last().unwrap();
        let mut g = self.output.backward(last, &out.grad, &mut grads.output);
        for k in (0..self.head.len()).rev() {
            for (gv, a) in g.iter_mut().zip(&trace.head_acts[k]) {
                if *a <= 0.0 {
                    *gv = 0.0;
                }
            }
            let input = if k == 0 { &trace.combined } else { &trace.head_acts[k - 1] };
            g = self.head[k].backward(input, &g, &mut grads.head[k]);
        }

        let e = self.arch.embedding_dim();
        let (gi, gj) = match self.arch.combine {
            PairCombine::Concat => (g[..e].to_vec(), g[e..].to_vec()),
            PairCombine::Symmetric => {
                let zi = trace.left.activations.last().unwrap();
                let zj = trace.right.activations.last().unwrap();
                let mut gi = vec![0.0; e];
                let mut gj = vec![0.0; e];
                for d in 0..e {
                    let sign = (zi[d] - zj[d]).signum() * f64::from(u8::from(zi[d] != zj[d]));
                    gi[d] = g[d] + g[e + d] * sign;
                    gj[d] = g[d] - g[e + d] * sign;
                }
                (gi, gj)
            }
        };
        self.backprop_encoder(&trace.left, gi, grads);
        self.backprop_encoder(&trace.right, gj, grads);
        Ok(out.value)
    }

    /// Mean loss over `batch` and its gradient with respect to every parameter.
    pub fn batch_loss_and_grad(&self, batch: &PairBatch, loss: &LossSpec) -> Result<(f64, ModelParams)> {
        self.check_batch(batch, loss)?;
        let mut grads = ModelParams::zeros(self.arch.clone())?;
        let mut total = 0.0;
        for m in 0..batch.len() {
            total += self.accumulate_pair_grad(batch.left.row(m), batch.right.row(m), batch.targets[m], loss, &mut grads)?;
        }
        let scale = 1.0 / batch.len() as f64;
        grads.layers_mut().flat_map(Layer::params_mut).for_each(|g| *g *= scale);
        Ok((total * scale, grads))
    }

    /// Mean loss over `batch`, forward only.
    pub fn batch_loss(&self, batch: &PairBatch, loss: &LossSpec) -> Result<f64> {
        self.check_batch(batch, loss)?;
        let mut total = 0.0;
        for m in 0..batch.len() {
            let out = self.forward_pair(batch.left.row(m), batch.right.row(m))?;
            total += loss.evaluate(&out.score, batch.targets[m])?.value;
        }
        Ok(total / batch.len() as f64)
    }

    fn check_batch(&self, batch: &PairBatch, loss: &LossSpec) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::invalid("empty pair batch"));
        }
        if batch.left.cols() != self.arch.input_dim() {
            return Err(Error::invalid("pair batch dimension does not match encoder input"));
        }
        if loss.head_outputs() != self.arch.head_outputs {
            return Err(Error::invalid(format!(
                "loss {loss} needs {} head outputs, model has {}",
                loss.head_outputs(),
                self.arch.head_outputs
            )));
        }
        Ok(())
    }
}

/// `M` input pairs with same/different targets.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub left: Matrix,
    pub right: Matrix,
    pub targets: Vec<PairTarget>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn n_same(&self) -> usize {
        self.targets.iter().filter(|t| t.is_same()).count()
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> PairBatch {
        let d = self.left.cols();
        let take = |m: &Matrix| {
            Matrix::from_vec(range.len(), d, m.as_slice()[range.start * d..range.end * d].to_vec())
                .expect("slice of valid matrix")
        };
        PairBatch {
            left: take(&self.left),
            right: take(&self.right),
            targets: self.targets[range.clone()].to_vec(),
        }
    }

    /// Each pair repeated `times` times in place.
    pub fn replicate(&self, times: usize) -> PairBatch {
        let idx: Vec<usize> = (0..self.len()).flat_map(|m| std::iter::repeat(m).take(times)).collect();
        let pick = |m: &Matrix| {
            let d = m.cols();
            let data = idx.iter().flat_map(|&i| m.row(i).iter().copied()).collect();
            Matrix::from_vec(idx.len(), d, data).expect("rows of valid matrix")
        };
        PairBatch {
            left: pick(&self.left),
            right: pick(&self.right),
            targets: idx.iter().map(|&i| self.targets[i]).collect(),
        }
    }

    pub fn flipped_labels(&self) -> PairBatch {
        PairBatch {
            targets: self.targets.iter().map(|t| PairTarget::new(!t.is_same())).collect(),
            ..self.clone()
        }
    }
}

/// Balanced same/different pairs: `⌈m/2⌉` same-class then `⌊m/2⌋`
/// different-class pairs, shuffled. Classes are chosen uniformly.
pub fn sample_pairs(set: &EmbeddingSet, m: usize, rng: &mut Rng) -> Result<PairBatch> {
    let groups: Vec<Vec<usize>> = set.by_class().into_values().collect();
    if groups.len() < 2 {
        return Err(Error::Data("pair sampling needs at least 2 classes".into()));
    }
    let eligible: Vec<&Vec<usize>> = groups.iter().filter(|g| g.len() >= 2).collect();
    let n_same = m.div_ceil(2);
    if n_same > 0 && eligible.is_empty() {
        return Err(Error::Data("no class has 2 samples for a same-class pair".into()));
    }
    let mut pairs: Vec<(usize, usize, PairTarget)> = Vec::with_capacity(m);
    for _ in 0..n_same {
        let g = eligible[rng.below(eligible.len())];
        let a = rng.below(g.len());
        let mut b = rng.below(g.len() - 1);
        if b >= a {
            b += 1;
        }
        pairs.push((g[a], g[b], PairTarget::SAME));
    }
    for _ in n_same..m {
        let ca = rng.below(groups.len());
        let mut cb = rng.below(groups.len() - 1);
        if cb >= ca {
            cb += 1;
        }
        let (ga, gb) = (&groups[ca], &groups[cb]);
        pairs.push((ga[rng.below(ga.len())], gb[rng.below(gb.len())], PairTarget::DIFFERENT));
    }
    rng.shuffle(&mut pairs);
    let d = set.dim();
    let mut left = Vec::with_capacity(m * d);
    let mut right = Vec::with_capacity(m * d);
    for &(i, j, _) in &pairs {
        left.extend_from_slice(set.sample(i));
        right.extend_from_slice(set.sample(j));
    }
    Ok(PairBatch {
        left: Matrix::from_vec(m, d, left)?,
        right: Matrix::from_vec(m, d, right)?,
        targets: pairs.into_iter().map(|p| p.2).collect(),
    })
}

/// Hidden widths and pairing mode; the input dimension comes from the data and
/// the head arity from the loss.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub encoder_hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub head_hidden: Vec<usize>,
    pub pair_dim: usize,
    pub combine: PairCombine,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            encoder_hidden: vec![64],
            embedding_dim: 32,
            head_hidden: vec![64],
            pair_dim: 32,
            combine: PairCombine::Concat,
        }
    }
}

impl ArchitectureConfig {
    pub fn resolve(&self, input_dim: usize, loss: &LossSpec) -> Architecture {
        let mut encoder_dims = vec![input_dim];
        encoder_dims.extend(&self.encoder_hidden);
        encoder_dims.push(self.embedding_dim);
        let mut head_dims = self.head_hidden.clone();
        head_dims.push(self.pair_dim);
        Architecture {
            encoder_dims,
            head_dims,
            head_outputs: loss.head_outputs(),
            combine: self.combine,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossSpec,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub pairs_per_epoch: usize,
    pub seed: u64,
    pub architecture: ArchitectureConfig,
    /// Multiplier on the initial output-layer weights and bias.
    #[serde(default = "unit_scale")]
    pub output_init_scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

impl TrainConfig {
    pub fn new(loss: LossSpec, seed: u64) -> Self {
        Self {
            loss,
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 32,
            epochs: 30,
            pairs_per_epoch: 2048,
            seed,
            architecture: ArchitectureConfig::default(),
            output_init_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.pairs_per_epoch == 0 {
            return Err(Error::Config("batch_size and pairs_per_epoch must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub config: TrainConfig,
    /// Mean loss of the last epoch; NaN when no epoch ran.
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
}

/// SGD with momentum (`v ← μv + g`, `θ ← θ − ηv`) over balanced pair mini-batches.
/// Final parameters are rounded to `f32`, the checkpoint storage width.
pub fn train(config: &TrainConfig, pretrain: &EmbeddingSet) -> Result<TrainOutcome> {
    config.validate()?;
    let arch = config.architecture.resolve(pretrain.dim(), &config.loss);
    let mut params = ModelParams::init_with(arch.clone(), config.seed, config.output_init_scale)?;
    let mut velocity = ModelParams::zeros(arch)?;
    let mut pair_rng = Rng::derive(config.seed, STREAM_PAIRS);
    let mut curve = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let pairs = sample_pairs(pretrain, config.pairs_per_epoch, &mut pair_rng)?;
        let mut epoch_total = 0.0;
        let mut start = 0;
        while start < pairs.len() {
            let end = (start + config.batch_size).min(pairs.len());
            let batch = pairs.slice(start..end);
            let (mean, grads) = params.batch_loss_and_grad(&batch, &config.loss)?;
            epoch_total += mean * batch.len() as f64;
            if !mean.is_finite() {
                break;
            }
            for ((p, v), g) in params
                .layers_mut()
                .flat_map(Layer::params_mut)
                .zip(velocity.layers_mut().flat_map(Layer::params_mut))
                .zip(grads.layers().flat_map(Layer::params))
            {
                *v = config.momentum * *v + g;
                *p -= config.learning_rate * *v;
            }
            start = end;
        }
        let epoch_mean = epoch_total / pairs.len() as f64;
        if !epoch_mean.is_finite() || !params.is_finite() {
            return Err(Error::Diverged { epoch, loss: epoch_mean });
        }
        curve.push(epoch_mean);
    }

    params.quantize_f32();
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            params,
            config: config.clone(),
            final_loss: curve.last().copied().unwrap_or(f64::NAN),
        },
        loss_curve: curve,
    })
}

/// AUROC of the relational similarity as a same/different discriminator
/// (two-logit heads are read as `same − different`).
pub fn pair_auc_sanity(params: &ModelParams, pairs: &PairBatch) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("empty pair batch"));
    }
    let mut same = Vec::new();
    let mut diff = Vec::new();
    for m in 0..pairs.len() {
        let out = params.forward_pair(pairs.left.row(m), pairs.right.row(m))?;
        let s = SimilarityReadout::LogitDifference.read(&out.score);
        if pairs.targets[m].is_same() {
            same.push(s);
        } else {
            diff.push(s);
        }
    }
    if same.is_empty() || diff.is_empty() {
        return Err(Error::invalid("pair AUC needs both same and different pairs"));
    }
    metrics::auroc(&same, &diff)
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OODM";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainConfig,
    final_loss: Option<f64>,
}

/// Binary layout: `"OODM"`, u8 version, u32 dims count, u32 dims, u32 parameter
/// count, f32 parameters, u32 JSON length, JSON `{config, final_loss}`.
///
/// Dims are `[n_enc, enc..., n_head, head..., head_outputs, combine]`.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let arch = ckpt.params.architecture();
    let mut dims: Vec<u32> = vec![arch.encoder_dims.len() as u32];
    dims.extend(arch.encoder_dims.iter().map(|&d| d as u32));
    dims.push(arch.head_dims.len() as u32);
    dims.extend(arch.head_dims.iter().map(|&d| d as u32));
    dims.push(arch.head_outputs as u32);
    dims.push(match arch.combine {
        PairCombine::Concat => 0,
        PairCombine::Symmetric => 1,
    });
    let params = ckpt.params.flatten();
    let meta = serde_json::to_vec(&CheckpointMeta {
        config: ckpt.config.clone(),
        final_loss: ckpt.final_loss.is_finite().then_some(ckpt.final_loss),
    })?;

    let mut out = Vec::with_capacity(16 + dims.len() * 4 + params.len() * 4 + meta.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p as f32).to_le_bytes());
    }
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], source: &str) -> Result<Checkpoint> {
    let mut cur = Cursor { bytes, pos: 0, source };
    if cur.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(source, 0, "bad magic (expected \"OODM\")"));
    }
    let version = cur.take(1, "version")?[0];
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            what: "checkpoint",
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let n_dims = cur.u32("dims count")? as usize;
    if n_dims > 4096 {
        return Err(Error::format(source, 5, "implausible dims count"));
    }
    let dims: Vec<usize> = (0..n_dims)
        .map(|_| cur.u32("dims").map(|d| d as usize))
        .collect::<Result<_>>()?;
    let bad_dims = || Error::format(source, 9, "malformed architecture dims");
    let n_enc = *dims.first().ok_or_else(bad_dims)?;
    let enc = dims.get(1..1 + n_enc).ok_or_else(bad_dims)?.to_vec();
    let n_head = *dims.get(1 + n_enc).ok_or_else(bad_dims)?;
    let head = dims.get(2 + n_enc..2 + n_enc + n_head).ok_or_else(bad_dims)?.to_vec();
    let tail = dims.get(2 + n_enc + n_head..).ok_or_else(bad_dims)?;
    if tail.len() != 2 {
        return Err(bad_dims());
    }
    let combine = match tail[1] {
        0 => PairCombine::Concat,
        1 => PairCombine::Symmetric,
        _ => return Err(bad_dims()),
    };
    let arch = Architecture {
        encoder_dims: enc,
        head_dims: head,
        head_outputs: tail[0],
        combine,
    };
    arch.validate().map_err(|e| Error::format(source, 9, e.to_string()))?;

    let n_params = cur.u32("parameter count")? as usize;
    let expected = ModelParams::zeros(arch.clone())?.param_count();
    if n_params != expected {
        return Err(Error::format(
            source,
            cur.pos as u64,
            format!("{n_params} parameters stored, architecture needs {expected}"),
        ));
    }
    let param_offset = cur.pos;
    let values: Vec<f64> = cur
        .take(n_params * 4, "parameters")?
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    let params = ModelParams::from_flat(arch, &values)
        .map_err(|e| Error::format(source, param_offset as u64, e.to_string()))?;
    let meta_len = cur.u32("metadata length")? as usize;
    let meta_offset = cur.pos;
    let meta: CheckpointMeta = serde_json::from_slice(cur.take(meta_len, "metadata")?)
        .map_err(|e| Error::format(source, meta_offset as u64, format!("metadata: {e}")))?;
    if cur.pos != bytes.len() {
        return Err(Error::format(source, cur.pos as u64, "trailing bytes"));
    }
    Ok(Checkpoint {
        params,
        config: meta.config,
        final_loss: meta.final_loss.unwrap_or(f64::NAN),
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path)?, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch(outputs: usize, combine: PairCombine) -> Architecture {
        Architecture {
            encoder_dims: vec![3, 4],
            head_dims: vec![5, 3],
            head_outputs: outputs,
            combine,
        }
    }

    fn tiny_set() -> EmbeddingSet {
        let mut rng = Rng::new(4);
        let data: Vec<f64> = (0..24).map(|_| rng.normal()).collect();
        EmbeddingSet::new(Matrix::from_vec(8, 3, data).unwrap(), vec![0, 0, 1, 1, 2, 2, 3, 3]).unwrap()
    }

    #[test]
    fn zero_model_outputs() {
        let params = ModelParams::zeros(tiny_arch(1, PairCombine::Concat)).unwrap();
        assert_eq!(params.encode(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0; 4]);
        let mut params = params;
        params.head_layers_mut()[1].bias = vec![0.5, -1.0, 2.0];
        params.output_layer_mut().bias = vec![0.25];
        let out = params.score_pair(&[1.0; 4], &[2.0; 4]).unwrap();
        assert_eq!(out.features, vec![0.5, 0.0, 2.0]);
        assert_eq!(out.score, vec![0.25]);
    }

    #[test]
    fn identity_encoder_layer() {
        let arch = Architecture {
            encoder_dims: vec![4, 4],
            ..tiny_arch(1, PairCombine::Concat)
        };
        let mut params = ModelParams::zeros(arch).unwrap();
        params.encoder_layers_mut()[0].weights = Matrix::identity(4);
        assert_eq!(params.encode(&[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        assert!(params.encode(&[1.0]).is_err());
    }

    #[test]
    fn symmetric_mode_is_order_invariant() {
        let params = ModelParams::init(tiny_arch(2, PairCombine::Symmetric), 9).unwrap();
        let a = [0.3, 1.2, 0.0, 2.0];
        let b = [1.0, 0.1, 0.7, 0.0];
        assert_eq!(params.score_pair(&a, &b).unwrap(), params.score_pair(&b, &a).unwrap());
        assert!(params.score_pair(&a, &b[..3]).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = ModelParams::init(tiny_arch(1, PairCombine::Concat), 1).unwrap();
        let b = ModelParams::init(tiny_arch(1, PairCombine::Concat), 1).unwrap();
        assert_eq!(a, b);
        let x = [0.5, -0.5, 2.0];
        assert_eq!(a.forward_pair(&x, &x).unwrap(), b.forward_pair(&x, &x).unwrap());
        let limit = (6.0f64 / 7.0).sqrt();
        assert!(a.encoder_layers()[0].weights.as_slice().iter().all(|w| w.abs() <= limit));
    }

    #[test]
    fn pair_sampling_balance() {
        let set = tiny_set();
        let batch = sample_pairs(&set, 10, &mut Rng::new(1)).unwrap();
        assert_eq!(batch.n_same(), 5);
        let odd = sample_pairs(&set, 7, &mut Rng::new(1)).unwrap();
        assert_eq!(odd.n_same(), 4);
        let big = sample_pairs(&set, 10_000, &mut Rng::new(2)).unwrap();
        assert_eq!(big.n_same(), 5000);
        assert_eq!(
            sample_pairs(&set, 10, &mut Rng::new(1)).unwrap(),
            sample_pairs(&set, 10, &mut Rng::new(1)).unwrap()
        );
        let minimal = set.subset(&[0, 1, 2, 3]);
        assert_eq!(
            sample_pairs(&minimal, 6, &mut Rng::new(3)).unwrap(),
            sample_pairs(&minimal, 6, &mut Rng::new(3)).unwrap()
        );
    }

    #[test]
    fn pair_sampling_errors_and_resampling() {
        let set = tiny_set();
        let one_class = set.subset(&[0, 1]);
        assert!(matches!(sample_pairs(&one_class, 4, &mut Rng::new(0)), Err(Error::Data(_))));
        let singletons = set.subset(&[0, 2, 4]);
        assert!(matches!(sample_pairs(&singletons, 4, &mut Rng::new(0)), Err(Error::Data(_))));
        // Class 2 has one sample here: every same pair must come from class 0.
        let mixed = set.subset(&[0, 1, 4]);
        let batch = sample_pairs(&mixed, 20, &mut Rng::new(0)).unwrap();
        for m in 0..batch.len() {
            if batch.targets[m].is_same() {
                assert_ne!(batch.left.row(m), batch.right.row(m));
                assert_ne!(batch.left.row(m), mixed.sample(2));
            }
        }
    }

    #[test]
    fn zero_epochs_returns_init() {
        let set = tiny_set();
        let mut cfg = TrainConfig::new(LossSpec::Hinge { delta: 0.01 }, 3);
        cfg.epochs = 0;
        let outcome = train(&cfg, &set).unwrap();
        let mut init = ModelParams::init(cfg.architecture.resolve(3, &cfg.loss), 3).unwrap();
        init.quantize_f32();
        assert_eq!(outcome.checkpoint.params, init);
        assert!(outcome.loss_curve.is_empty());
    }

    #[test]
    fn divergence_is_reported() {
        let set = tiny_set();
        let mut cfg = TrainConfig::new(LossSpec::Hinge { delta: 1.0 }, 3);
        cfg.learning_rate = 1e200;
        cfg.epochs = 5;
        cfg.pairs_per_epoch = 64;
        match train(&cfg, &set) {
            Err(Error::Diverged { epoch, .. }) => assert!(epoch < 5),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let set = tiny_set();
        let mut cfg = TrainConfig::new(LossSpec::Sce, 5);
        cfg.epochs = 2;
        cfg.pairs_per_epoch = 64;
        cfg.architecture.combine = PairCombine::Symmetric;
        let ckpt = train(&cfg, &set).unwrap().checkpoint;
        let bytes = encode_checkpoint(&ckpt).unwrap();
        let back = decode_checkpoint(&bytes, "mem").unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        for cut in [0, 4, 5, 12, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint(&bytes[..cut], "mem"), Err(Error::Format { .. })));
        }
        let mut v0 = bytes;
        v0[4] = 0;
        assert!(matches!(
            decode_checkpoint(&v0, "mem"),
            Err(Error::UnsupportedVersion { found: 0, .. })
        ));
    }

    #[test]
    fn label_flip_complements_pair_auc() {
        let set = tiny_set();
        let params = ModelParams::init(tiny_arch(1, PairCombine::Concat), 2).unwrap();
        let batch = sample_pairs(&set, 200, &mut Rng::new(8)).unwrap();
        let auc = pair_auc_sanity(&params, &batch).unwrap();
        let flipped = pair_auc_sanity(&params, &batch.flipped_labels()).unwrap();
        assert!((auc + flipped - 1.0).abs() < 1e-12);
        let same_only = batch.slice(0..1).replicate(3);
        let single_label = PairBatch {
            targets: vec![PairTarget::SAME; 3],
            ..same_only
        };
        assert!(pair_auc_sanity(&params, &single_label).is_err());
    }
}
