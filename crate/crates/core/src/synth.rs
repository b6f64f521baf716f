//! Synthetic embedding grids with a controllable class-signal schedule.
//!
//! Cell `(i, k)` of a class-`y` sample is
//! `layer_ramp[i] * sentence_ramp[k] * mu_y + N(0, sigma^2)` per coordinate,
//! where `mu_y` is the `y`-th standard basis vector. The ramps decide where
//! in the grid the label becomes visible: a front-loaded sentence ramp makes
//! early exits profitable, a ramp that is zero except for the last sentence
//! removes any advantage from reading a prefix of the input.
//!
//! By default each cell depends only on its own sentence. With `cumulative`
//! set, column `k` instead carries the signal revealed by sentences `0..=k`
//! (the sum of `sentence_ramp[..=k]`, capped at 1), the way a causal
//! encoder's embedding of sentence `k` has seen the whole prefix. Either way
//! the causality contract of probe grids holds by construction.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::derive_seed;
use crate::datamodel::EmbeddingGrid;

#[derive(Debug, Error, PartialEq)]
pub enum SpecError {
    #[error("SpecError: {0}")]
    Invalid(String),
}

/// Number of sentences per sample: fixed, or drawn uniformly from an
/// inclusive range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SentenceCount {
    Fixed(usize),
    Range { min: usize, max: usize },
}

impl SentenceCount {
    pub fn max(&self) -> usize {
        match *self {
            SentenceCount::Fixed(m) => m,
            SentenceCount::Range { max, .. } => max,
        }
    }

    fn min(&self) -> usize {
        match *self {
            SentenceCount::Fixed(m) => m,
            SentenceCount::Range { min, .. } => min,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_samples: usize,
    pub num_classes: usize,
    pub num_layers: usize,
    pub sentences: SentenceCount,
    pub embed_dim: usize,
    /// Signal multiplier per layer, length `num_layers`.
    pub layer_ramp: Vec<f64>,
    /// Signal multiplier per sentence position, length `sentences.max()`.
    pub sentence_ramp: Vec<f64>,
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub cumulative: bool,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        let bad = |m: String| Err(SpecError::Invalid(m));
        if self.num_samples == 0 {
            return bad("num_samples must be >= 1".into());
        }
        if self.num_classes < 2 {
            return bad("num_classes must be >= 2".into());
        }
        if self.num_layers == 0 {
            return bad("num_layers must be >= 1".into());
        }
        if self.embed_dim < self.num_classes {
            return bad(format!(
                "embed_dim {} must be >= num_classes {} for orthogonal class directions",
                self.embed_dim, self.num_classes
            ));
        }
        let (lo, hi) = (self.sentences.min(), self.sentences.max());
        if lo == 0 || lo > hi {
            return bad(format!("invalid sentence range {lo}..={hi}"));
        }
        if self.layer_ramp.len() != self.num_layers {
            return bad(format!("layer_ramp has {} entries, expected {}", self.layer_ramp.len(), self.num_layers));
        }
        if self.sentence_ramp.len() != hi {
            return bad(format!("sentence_ramp has {} entries, expected {hi}", self.sentence_ramp.len()));
        }
        let in_unit = |v: &f64| (0.0..=1.0).contains(v);
        if !self.layer_ramp.iter().chain(&self.sentence_ramp).all(in_unit) {
            return bad("ramp multipliers must lie in [0, 1]".into());
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        Ok(())
    }
}

/// `n` evenly spaced values from `start` to `end` inclusive.
pub fn linear_ramp(n: usize, start: f64, end: f64) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![end],
        _ => (0..n).map(|i| if i == n - 1 { end } else { start + (end - start) * i as f64 / (n - 1) as f64 }).collect(),
    }
}

/// Rises linearly from `start` at layer 0 to 1.0 at layer `peak`, then stays at 1.
pub fn saturating_ramp(n: usize, start: f64, peak: usize) -> Vec<f64> {
    (0..n).map(|i| if i >= peak { 1.0 } else { start + (1.0 - start) * i as f64 / peak as f64 }).collect()
}

/// Balanced labels (counts differ by at most one) in seeded random order.
fn balanced_labels(n: usize, num_classes: usize, seed: u64) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX)));
    labels
}

pub fn generate_dataset(spec: &SynthSpec) -> Result<Vec<EmbeddingGrid>, SpecError> {
    spec.validate()?;
    let labels = balanced_labels(spec.num_samples, spec.num_classes, spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| SpecError::Invalid(e.to_string()))?;
    let column_signal: Vec<f64> = if spec.cumulative {
        spec.sentence_ramp
            .iter()
            .scan(0.0, |acc, r| {
                *acc += r;
                Some(f64::min(*acc, 1.0))
            })
            .collect()
    } else {
        spec.sentence_ramp.clone()
    };
    labels
        .par_iter()
        .enumerate()
        .map(|(idx, &label)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, idx as u64));
            let m = match spec.sentences {
                SentenceCount::Fixed(m) => m,
                SentenceCount::Range { min, max } => rng.random_range(min..=max),
            };
            let cells = spec
                .layer_ramp
                .iter()
                .map(|lr| {
                    column_signal[..m]
                        .iter()
                        .map(|sr| {
                            let mut v = vec![0.0; spec.embed_dim];
                            v[label] = lr * sr;
                            if spec.noise_sigma > 0.0 {
                                v.iter_mut().for_each(|x| *x += noise.sample(&mut rng));
                            }
                            v
                        })
                        .collect()
                })
                .collect();
            EmbeddingGrid::new(label, cells).map_err(|e| SpecError::Invalid(e.to_string()))
        })
        .collect()
}
