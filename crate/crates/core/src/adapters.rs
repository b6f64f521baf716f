//! Per-layer classification adapters and their training objectives.
//!
//! An adapter is `Linear(D -> H) -> ReLU -> Linear(H -> C) -> softmax`. One
//! adapter is attached to every layer. Two objectives are supported over
//! frozen embedding grids:
//!
//! * adapter-only: layer `i`'s adapter sees the mean of all sentence
//!   embeddings of layer `i` and is trained with cross-entropy, independently
//!   of the other layers;
//! * joint: a weighted sum over layers of cross-entropies, where layer `i`'s
//!   adapter sees the mean of all prefix embeddings of layer `i` (prefix `j`
//!   being the mean of sentences `0..=j`).
//!
//! Gradients are computed by hand and verified with central differences in
//! [`grad_check`].

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::debug;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{argmax, ClassDistribution, DataError, EmbeddingGrid};

pub const DEFAULT_HIDDEN_DIM: usize = 256;
/// Lower clamp on the true-class probability before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("DimensionMismatch: {0}")]
    DimensionMismatch(String),
    #[error("InconsistentShape: {0}")]
    InconsistentShape(String),
    #[error("NonFiniteLoss: {0}")]
    NonFiniteLoss(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("adapter file {path}: {message}")]
    File { path: String, message: String },
}

impl AdapterError {
    pub fn kind(&self) -> &'static str {
        match self {
            AdapterError::DimensionMismatch(_) => "DimensionMismatch",
            AdapterError::InconsistentShape(_) => "InconsistentShape",
            AdapterError::NonFiniteLoss(_) => "NonFiniteLoss",
            AdapterError::Config(_) => "ConfigError",
            AdapterError::File { .. } => "AdapterFileError",
        }
    }
}

impl From<AdapterError> for DataError {
    fn from(e: AdapterError) -> Self {
        DataError::DimensionMismatch { message: e.to_string() }
    }
}

/// Weights of one two-layer adapter, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    input_dim: usize,
    hidden_dim: usize,
    num_classes: usize,
    /// `input_dim x hidden_dim`
    w1: Vec<f64>,
    b1: Vec<f64>,
    /// `hidden_dim x num_classes`
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl AdapterParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        assert!(input_dim >= 1 && hidden_dim >= 1 && num_classes >= 2, "invalid adapter shape");
        Self {
            input_dim,
            hidden_dim,
            num_classes,
            w1: vec![0.0; input_dim * hidden_dim],
            b1: vec![0.0; hidden_dim],
            w2: vec![0.0; hidden_dim * num_classes],
            b2: vec![0.0; num_classes],
        }
    }

    /// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init<R: Rng + ?Sized>(input_dim: usize, hidden_dim: usize, num_classes: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(input_dim, hidden_dim, num_classes);
        let a1 = 1.0 / (input_dim as f64).sqrt();
        let a2 = 1.0 / (hidden_dim as f64).sqrt();
        p.w1.iter_mut().chain(p.b1.iter_mut()).for_each(|w| *w = rng.random_range(-a1..=a1));
        p.w2.iter_mut().chain(p.b2.iter_mut()).for_each(|w| *w = rng.random_range(-a2..=a2));
        p
    }

    /// Builds an adapter from nested rows (`w1` is `D` rows of `H`, `w2` is
    /// `H` rows of `C`).
    pub fn from_parts(w1: Vec<Vec<f64>>, b1: Vec<f64>, w2: Vec<Vec<f64>>, b2: Vec<f64>) -> Result<Self, AdapterError> {
        let input_dim = w1.len();
        let hidden_dim = b1.len();
        let num_classes = b2.len();
        if input_dim == 0 || hidden_dim == 0 || num_classes < 2 {
            return Err(AdapterError::DimensionMismatch(format!(
                "adapter needs D >= 1, H >= 1, C >= 2 (got D={input_dim}, H={hidden_dim}, C={num_classes})"
            )));
        }
        if w1.iter().any(|r| r.len() != hidden_dim) {
            return Err(AdapterError::DimensionMismatch(format!("w1 rows must have length {hidden_dim}")));
        }
        if w2.len() != hidden_dim || w2.iter().any(|r| r.len() != num_classes) {
            return Err(AdapterError::DimensionMismatch(format!("w2 must be {hidden_dim} x {num_classes}")));
        }
        let p = Self {
            input_dim,
            hidden_dim,
            num_classes,
            w1: w1.into_iter().flatten().collect(),
            b1,
            w2: w2.into_iter().flatten().collect(),
            b2,
        };
        if p.tensors().iter().any(|t| t.iter().any(|x| !x.is_finite())) {
            return Err(AdapterError::DimensionMismatch("adapter weights must be finite".into()));
        }
        Ok(p)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn w1_rows(&self) -> Vec<Vec<f64>> {
        self.w1.chunks(self.hidden_dim).map(<[f64]>::to_vec).collect()
    }

    pub fn w2_rows(&self) -> Vec<Vec<f64>> {
        self.w2.chunks(self.num_classes).map(<[f64]>::to_vec).collect()
    }

    pub fn b1(&self) -> &[f64] {
        &self.b1
    }

    pub fn b2(&self) -> &[f64] {
        &self.b2
    }

    /// `[w1, b1, w2, b2]`
    pub fn tensors(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Parameter by flat index over `[w1, b1, w2, b2]`.
    pub fn param(&self, mut idx: usize) -> f64 {
        for t in self.tensors() {
            if idx < t.len() {
                return t[idx];
            }
            idx -= t.len();
        }
        panic!("parameter index out of range");
    }

    pub fn param_mut(&mut self, mut idx: usize) -> &mut f64 {
        for t in self.tensors_mut() {
            if idx < t.len() {
                return &mut t[idx];
            }
            idx -= t.len();
        }
        panic!("parameter index out of range");
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim, self.hidden_dim, self.num_classes)
    }

    fn check_input(&self, x: &[f64]) -> Result<(), AdapterError> {
        if x.len() != self.input_dim {
            return Err(AdapterError::DimensionMismatch(format!(
                "adapter expects input of length {}, got {}",
                self.input_dim,
                x.len()
            )));
        }
        Ok(())
    }
}

struct Activations {
    pre: Vec<f64>,
    hidden: Vec<f64>,
    probs: Vec<f64>,
}

fn forward_raw(p: &AdapterParams, x: &[f64]) -> Activations {
    let h = p.hidden_dim;
    let mut pre = p.b1.clone();
    for (xd, row) in x.iter().zip(p.w1.chunks_exact(h)) {
        if *xd != 0.0 {
            pre.iter_mut().zip(row).for_each(|(a, w)| *a += xd * w);
        }
    }
    let hidden: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
    let mut logits = p.b2.clone();
    for (hv, row) in hidden.iter().zip(p.w2.chunks_exact(p.num_classes)) {
        if *hv != 0.0 {
            logits.iter_mut().zip(row).for_each(|(a, w)| *a += hv * w);
        }
    }
    Activations { pre, hidden, probs: softmax(&logits) }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy `-ln q[label]` with `q[label]` clamped to [`PROB_FLOOR`].
pub fn cross_entropy(label: usize, probs: &[f64]) -> f64 {
    -probs[label].max(PROB_FLOOR).ln()
}

pub fn adapter_forward(p: &AdapterParams, x: &[f64]) -> Result<ClassDistribution, AdapterError> {
    p.check_input(x)?;
    Ok(ClassDistribution::from_softmax(forward_raw(p, x).probs))
}

/// Adds `scale * d CE(label, forward(p, x)) / d params` into `grad`, returns CE.
fn backprop(p: &AdapterParams, x: &[f64], label: usize, scale: f64, grad: &mut AdapterParams) -> f64 {
    let act = forward_raw(p, x);
    let loss = cross_entropy(label, &act.probs);
    if scale == 0.0 || act.probs[label] < PROB_FLOOR {
        return loss;
    }
    let (h, c) = (p.hidden_dim, p.num_classes);
    let mut dlogits = act.probs;
    dlogits[label] -= 1.0;
    dlogits.iter_mut().for_each(|g| *g *= scale);

    grad.b2.iter_mut().zip(&dlogits).for_each(|(g, d)| *g += d);
    let mut dpre = vec![0.0; h];
    #[allow(clippy::needless_range_loop)]
    for j in 0..h {
        let row = &p.w2[j * c..(j + 1) * c];
        if act.hidden[j] != 0.0 {
            let grow = &mut grad.w2[j * c..(j + 1) * c];
            grow.iter_mut().zip(&dlogits).for_each(|(g, d)| *g += act.hidden[j] * d);
        }
        if act.pre[j] > 0.0 {
            dpre[j] = row.iter().zip(&dlogits).map(|(w, d)| w * d).sum();
        }
    }
    grad.b1.iter_mut().zip(&dpre).for_each(|(g, d)| *g += d);
    for (xd, grow) in x.iter().zip(grad.w1.chunks_exact_mut(h)) {
        if *xd != 0.0 {
            grow.iter_mut().zip(&dpre).for_each(|(g, d)| *g += xd * d);
        }
    }
    loss
}

fn mean_of(vectors: &[Vec<f64>]) -> Vec<f64> {
    let n = vectors.len() as f64;
    let mut out = vec![0.0; vectors[0].len()];
    for v in vectors {
        out.iter_mut().zip(v).for_each(|(o, x)| *o += x);
    }
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Mean of all sentence embeddings of `layer`.
pub fn mean_embedding(emb: &EmbeddingGrid, layer: usize) -> Vec<f64> {
    mean_of(emb.layer(layer))
}

/// All `m` prefix means of `layer`: `out[j]` is the mean of sentences `0..=j`.
pub fn prefix_embeddings(emb: &EmbeddingGrid, layer: usize) -> Vec<Vec<f64>> {
    let mut running = vec![0.0; emb.embed_dim()];
    emb.layer(layer)
        .iter()
        .enumerate()
        .map(|(j, e)| {
            running.iter_mut().zip(e).for_each(|(r, x)| *r += x);
            running.iter().map(|r| r / (j + 1) as f64).collect()
        })
        .collect()
}

/// Mean of the `m` prefix means of `layer`; the input of the joint objective.
pub fn mean_of_prefixes(emb: &EmbeddingGrid, layer: usize) -> Vec<f64> {
    mean_of(&prefix_embeddings(emb, layer))
}

/// Adapter-only loss of layer `layer` on one sample.
pub fn adapter_loss(p: &AdapterParams, emb: &EmbeddingGrid, layer: usize) -> Result<f64, AdapterError> {
    let x = mean_embedding(emb, layer);
    Ok(cross_entropy(emb.label(), adapter_forward(p, &x)?.probs()))
}

/// Weighted sum over layers of the cross-entropy on mean-of-prefix inputs.
pub fn aggregate_ft_loss(
    adapters: &[AdapterParams],
    emb: &EmbeddingGrid,
    weights: &[f64],
) -> Result<f64, AdapterError> {
    check_stack(adapters, emb, Some(weights))?;
    let mut total = 0.0;
    for (i, (p, w)) in adapters.iter().zip(weights).enumerate() {
        let x = mean_of_prefixes(emb, i);
        total += w * cross_entropy(emb.label(), adapter_forward(p, &x)?.probs());
    }
    Ok(total)
}

fn check_stack(adapters: &[AdapterParams], emb: &EmbeddingGrid, weights: Option<&[f64]>) -> Result<(), AdapterError> {
    if adapters.len() != emb.num_layers() {
        return Err(AdapterError::DimensionMismatch(format!(
            "{} adapters for {} layers",
            adapters.len(),
            emb.num_layers()
        )));
    }
    if let Some(w) = weights {
        if w.len() != adapters.len() {
            return Err(AdapterError::DimensionMismatch(format!(
                "{} layer weights for {} layers",
                w.len(),
                adapters.len()
            )));
        }
    }
    if let Some((i, a)) = adapters.iter().enumerate().find(|(_, a)| a.input_dim != emb.embed_dim()) {
        return Err(AdapterError::DimensionMismatch(format!(
            "adapter {i} expects input_dim {}, grid has {}",
            a.input_dim,
            emb.embed_dim()
        )));
    }
    Ok(())
}

/// Which loss a gradient or training run refers to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective<'a> {
    /// Adapter-only loss of a single layer.
    AdapterOnly { layer: usize },
    /// Weighted joint loss over all layers.
    Aggregate { weights: &'a [f64] },
}

impl Objective<'_> {
    /// Loss on one sample, and its gradient for every adapter in the stack.
    pub fn loss_and_grad(
        &self,
        adapters: &[AdapterParams],
        emb: &EmbeddingGrid,
    ) -> Result<(f64, Vec<AdapterParams>), AdapterError> {
        let mut grads: Vec<AdapterParams> = adapters.iter().map(AdapterParams::zeros_like).collect();
        let loss = match *self {
            Objective::AdapterOnly { layer } => {
                let p = adapters
                    .get(layer)
                    .ok_or_else(|| AdapterError::DimensionMismatch(format!("no adapter for layer {layer}")))?;
                let x = mean_embedding(emb, layer);
                p.check_input(&x)?;
                backprop(p, &x, emb.label(), 1.0, &mut grads[layer])
            }
            Objective::Aggregate { weights } => {
                check_stack(adapters, emb, Some(weights))?;
                let mut total = 0.0;
                for (i, p) in adapters.iter().enumerate() {
                    let x = mean_of_prefixes(emb, i);
                    total += weights[i] * backprop(p, &x, emb.label(), weights[i], &mut grads[i]);
                }
                total
            }
        };
        Ok((loss, grads))
    }

    pub fn loss(&self, adapters: &[AdapterParams], emb: &EmbeddingGrid) -> Result<f64, AdapterError> {
        match *self {
            Objective::AdapterOnly { layer } => adapter_loss(&adapters[layer], emb, layer),
            Objective::Aggregate { weights } => aggregate_ft_loss(adapters, emb, weights),
        }
    }

    /// Indices of the adapters whose parameters the objective depends on.
    fn layers(&self, num_layers: usize) -> std::ops::Range<usize> {
        match *self {
            Objective::AdapterOnly { layer } => layer..layer + 1,
            Objective::Aggregate { .. } => 0..num_layers,
        }
    }
}

/// One compared coordinate of a gradient check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoordCheck {
    pub layer: usize,
    pub param: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords: Vec<CoordCheck>,
}

/// Relative error with a `1e-6` floor on the denominator so that coordinates
/// where both gradients vanish compare on absolute error.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares analytic gradients against central differences on the given
/// `(layer, param)` coordinates.
pub fn grad_check_coords(
    objective: Objective<'_>,
    adapters: &[AdapterParams],
    emb: &EmbeddingGrid,
    eps: f64,
    coords: &[(usize, usize)],
) -> Result<GradCheckReport, AdapterError> {
    assert!(eps > 0.0, "finite-difference step must be positive");
    let (_, grads) = objective.loss_and_grad(adapters, emb)?;
    let mut work = adapters.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &(layer, param) in coords {
        let orig = work[layer].param(param);
        *work[layer].param_mut(param) = orig + eps;
        let plus = objective.loss(&work, emb)?;
        *work[layer].param_mut(param) = orig - eps;
        let minus = objective.loss(&work, emb)?;
        *work[layer].param_mut(param) = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = grads[layer].param(param);
        out.push(CoordCheck { layer, param, analytic, numeric, rel_error: relative_error(analytic, numeric) });
    }
    let max_rel_error = out.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_error, coords: out })
}

/// Gradient check on `num_coords` coordinates drawn without replacement
/// (all of them if fewer exist).
pub fn grad_check(
    objective: Objective<'_>,
    adapters: &[AdapterParams],
    emb: &EmbeddingGrid,
    eps: f64,
    num_coords: usize,
    seed: u64,
) -> Result<GradCheckReport, AdapterError> {
    let mut all: Vec<(usize, usize)> =
        objective.layers(adapters.len()).flat_map(|l| (0..adapters[l].num_params()).map(move |p| (l, p))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    all.shuffle(&mut rng);
    all.truncate(num_coords);
    grad_check_coords(objective, adapters, emb, eps, &all)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    AdapterOnly,
    JointFtLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub hidden_dim: usize,
    /// Per-layer loss weights of the joint objective; `None` means
    /// [`default_layer_weights`].
    pub layer_weights: Option<Vec<f64>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 128,
            epochs: 20,
            seed: 0,
            hidden_dim: DEFAULT_HIDDEN_DIM,
            layer_weights: None,
        }
    }
}

impl TrainConfig {
    fn validate(&self, num_layers: usize) -> Result<Vec<f64>, AdapterError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(AdapterError::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.hidden_dim == 0 {
            return Err(AdapterError::Config("batch_size and hidden_dim must be >= 1".into()));
        }
        let weights = self.layer_weights.clone().unwrap_or_else(|| default_layer_weights(num_layers));
        if weights.len() != num_layers {
            return Err(AdapterError::Config(format!("{} layer weights for {num_layers} layers", weights.len())));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(AdapterError::Config("layer weights must be finite and >= 0".into()));
        }
        Ok(weights)
    }
}

/// 0.1 for every layer except 0.8 for the last.
pub fn default_layer_weights(num_layers: usize) -> Vec<f64> {
    let mut w = vec![0.1; num_layers];
    if let Some(last) = w.last_mut() {
        *last = 0.8;
    }
    w
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub adapters: Vec<AdapterParams>,
    /// Mean training loss per epoch.
    pub loss_trace: Vec<f64>,
}

struct Adam {
    lr: f64,
    t: i32,
    m: Vec<AdapterParams>,
    v: Vec<AdapterParams>,
}

impl Adam {
    fn new(lr: f64, params: &[AdapterParams]) -> Self {
        Self {
            lr,
            t: 0,
            m: params.iter().map(AdapterParams::zeros_like).collect(),
            v: params.iter().map(AdapterParams::zeros_like).collect(),
        }
    }

    fn step(&mut self, params: &mut [AdapterParams], grads: &[AdapterParams]) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pt, gt), mt), vt) in
                p.tensors_mut().into_iter().zip(g.tensors()).zip(m.tensors_mut()).zip(v.tensors_mut())
            {
                for i in 0..pt.len() {
                    mt[i] = ADAM_BETA1 * mt[i] + (1.0 - ADAM_BETA1) * gt[i];
                    vt[i] = ADAM_BETA2 * vt[i] + (1.0 - ADAM_BETA2) * gt[i] * gt[i];
                    pt[i] -= self.lr * (mt[i] / c1) / ((vt[i] / c2).sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

/// Shape shared by every grid of a training set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackShape {
    pub num_layers: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
}

fn check_dataset(dataset: &[EmbeddingGrid], num_classes: usize) -> Result<StackShape, AdapterError> {
    let first = dataset.first().ok_or_else(|| AdapterError::InconsistentShape("training set is empty".into()))?;
    let shape = StackShape { num_layers: first.num_layers(), embed_dim: first.embed_dim(), num_classes };
    if num_classes < 2 {
        return Err(AdapterError::InconsistentShape("need at least 2 classes".into()));
    }
    for (idx, g) in dataset.iter().enumerate() {
        if g.num_layers() != shape.num_layers || g.embed_dim() != shape.embed_dim {
            return Err(AdapterError::InconsistentShape(format!(
                "sample {idx} is {} layers x dim {}, expected {} x {}",
                g.num_layers(),
                g.embed_dim(),
                shape.num_layers,
                shape.embed_dim
            )));
        }
        if g.label() >= num_classes {
            return Err(AdapterError::InconsistentShape(format!(
                "sample {idx} has label {} but only {num_classes} classes",
                g.label()
            )));
        }
    }
    Ok(shape)
}

/// Derives an independent stream seed; distinct `(seed, index)` pairs give
/// unrelated outputs.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over a combined key
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SHUFFLE_STREAM: u64 = 0x5348_5546_464c_4521;

fn init_layer(cfg: &TrainConfig, shape: StackShape, layer: usize) -> AdapterParams {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, layer as u64));
    AdapterParams::init(shape.embed_dim, cfg.hidden_dim, shape.num_classes, &mut rng)
}

/// Classifier inputs for one layer: the mean sentence embedding (adapter-only)
/// or the mean of prefix embeddings (joint).
pub fn layer_inputs(dataset: &[EmbeddingGrid], layer: usize, mode: TrainMode) -> Vec<Vec<f64>> {
    dataset
        .par_iter()
        .map(|g| match mode {
            TrainMode::AdapterOnly => mean_embedding(g, layer),
            TrainMode::JointFtLoss => mean_of_prefixes(g, layer),
        })
        .collect()
}

/// Mini-batch Adam over a set of (input, weight) layer problems that share a
/// shuffle order. Returns the per-epoch mean of the weighted loss.
fn fit(
    params: &mut [AdapterParams],
    inputs: &[Vec<Vec<f64>>],
    weights: &[f64],
    labels: &[usize],
    cfg: &TrainConfig,
    shuffle_seed: u64,
) -> Result<Vec<f64>, AdapterError> {
    let n = labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut adam = Adam::new(cfg.learning_rate, params);
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut grads: Vec<AdapterParams> = params.iter().map(AdapterParams::zeros_like).collect();
            for &idx in batch {
                for (l, p) in params.iter().enumerate() {
                    let w = weights[l];
                    epoch_loss += w * backprop(p, &inputs[l][idx], labels[idx], w * scale, &mut grads[l]);
                }
            }
            adam.step(params, &grads);
        }
        let mean = epoch_loss / n as f64;
        if !mean.is_finite() {
            return Err(AdapterError::NonFiniteLoss(format!(
                "epoch {epoch}: mean loss {mean} (learning rate {})",
                cfg.learning_rate
            )));
        }
        debug!("epoch {epoch}: loss {mean:.6}");
        trace.push(mean);
    }
    Ok(trace)
}

/// Trains the adapter of a single layer on the adapter-only objective.
pub fn train_layer(
    dataset: &[EmbeddingGrid],
    num_classes: usize,
    layer: usize,
    cfg: &TrainConfig,
) -> Result<(AdapterParams, Vec<f64>), AdapterError> {
    let shape = check_dataset(dataset, num_classes)?;
    cfg.validate(shape.num_layers)?;
    if layer >= shape.num_layers {
        return Err(AdapterError::DimensionMismatch(format!("layer {layer} out of range")));
    }
    let labels: Vec<usize> = dataset.iter().map(EmbeddingGrid::label).collect();
    let inputs = vec![layer_inputs(dataset, layer, TrainMode::AdapterOnly)];
    let mut params = vec![init_layer(cfg, shape, layer)];
    let trace = fit(&mut params, &inputs, &[1.0], &labels, cfg, derive_seed(cfg.seed ^ SHUFFLE_STREAM, layer as u64))?;
    Ok((params.pop().expect("one adapter"), trace))
}

/// Trains one adapter per layer.
///
/// In adapter-only mode the layers are independent problems and are trained
/// in parallel; the loss trace is the mean over layers. In joint mode all
/// adapters are updated together on the weighted objective.
pub fn train_adapters(
    dataset: &[EmbeddingGrid],
    num_classes: usize,
    cfg: &TrainConfig,
    mode: TrainMode,
) -> Result<TrainOutput, AdapterError> {
    let shape = check_dataset(dataset, num_classes)?;
    let weights = cfg.validate(shape.num_layers)?;
    match mode {
        TrainMode::AdapterOnly => {
            let per_layer = (0..shape.num_layers)
                .into_par_iter()
                .map(|l| train_layer(dataset, num_classes, l, cfg))
                .collect::<Result<Vec<_>, _>>()?;
            let epochs = cfg.epochs;
            let loss_trace = (0..epochs)
                .map(|e| per_layer.iter().map(|(_, t)| t[e]).sum::<f64>() / shape.num_layers as f64)
                .collect();
            Ok(TrainOutput { adapters: per_layer.into_iter().map(|(p, _)| p).collect(), loss_trace })
        }
        TrainMode::JointFtLoss => {
            let labels: Vec<usize> = dataset.iter().map(EmbeddingGrid::label).collect();
            let inputs: Vec<_> = (0..shape.num_layers).map(|l| layer_inputs(dataset, l, mode)).collect();
            let mut adapters: Vec<_> = (0..shape.num_layers).map(|l| init_layer(cfg, shape, l)).collect();
            let loss_trace =
                fit(&mut adapters, &inputs, &weights, &labels, cfg, derive_seed(cfg.seed ^ SHUFFLE_STREAM, u64::MAX))?;
            Ok(TrainOutput { adapters, loss_trace })
        }
    }
}

/// Fraction of samples whose training-time input at `layer` is classified
/// correctly.
pub fn training_accuracy(adapter: &AdapterParams, dataset: &[EmbeddingGrid], layer: usize, mode: TrainMode) -> f64 {
    let inputs = layer_inputs(dataset, layer, mode);
    let correct =
        inputs.iter().zip(dataset).filter(|(x, g)| argmax(&forward_raw(adapter, x).probs) == g.label()).count();
    correct as f64 / dataset.len() as f64
}

#[derive(Serialize, Deserialize)]
struct AdapterRecord {
    layer: usize,
    w1: Vec<Vec<f64>>,
    b1: Vec<f64>,
    w2: Vec<Vec<f64>>,
    b2: Vec<f64>,
}

/// Writes one adapter per line, in layer order.
pub fn write_adapters<W: Write>(adapters: &[AdapterParams], mut out: W) -> std::io::Result<()> {
    for (layer, a) in adapters.iter().enumerate() {
        let rec = AdapterRecord { layer, w1: a.w1_rows(), b1: a.b1.clone(), w2: a.w2_rows(), b2: a.b2.clone() };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn save_adapters(adapters: &[AdapterParams], path: impl AsRef<Path>) -> Result<(), AdapterError> {
    let path = path.as_ref();
    let file_err = |e: std::io::Error| AdapterError::File { path: path.display().to_string(), message: e.to_string() };
    let file = File::create(path).map_err(file_err)?;
    write_adapters(adapters, BufWriter::new(file)).map_err(file_err)
}

/// Reads adapters; lines may come in any order but must cover layers `0..L`
/// exactly once with matching shapes.
pub fn read_adapters<R: BufRead>(reader: R, source: &str) -> Result<Vec<AdapterParams>, AdapterError> {
    let err = |message: String| AdapterError::File { path: source.to_string(), message };
    let mut records = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AdapterRecord = serde_json::from_str(&line).map_err(|e| err(format!("line {}: {e}", n + 1)))?;
        records.push(rec);
    }
    if records.is_empty() {
        return Err(err("no adapters".into()));
    }
    records.sort_by_key(|r| r.layer);
    let mut out = Vec::with_capacity(records.len());
    for (expected, rec) in records.into_iter().enumerate() {
        if rec.layer != expected {
            return Err(err(format!("layers must be 0..L without gaps or repeats (found {})", rec.layer)));
        }
        let p = AdapterParams::from_parts(rec.w1, rec.b1, rec.w2, rec.b2)
            .map_err(|e| err(format!("layer {expected}: {e}")))?;
        if let Some(first) = out.first() {
            let first: &AdapterParams = first;
            if (p.input_dim, p.num_classes) != (first.input_dim, first.num_classes) {
                return Err(err(format!("layer {expected} shape differs from layer 0")));
            }
        }
        out.push(p);
    }
    Ok(out)
}

pub fn load_adapters(path: impl AsRef<Path>) -> Result<Vec<AdapterParams>, AdapterError> {
    let path = path.as_ref();
    let file = File::open(path)
        .map_err(|e| AdapterError::File { path: path.display().to_string(), message: e.to_string() })?;
    read_adapters(BufReader::new(file), &path.display().to_string())
}
