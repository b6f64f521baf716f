//! Accuracy and speed-up accounting.
//!
//! The layer-wise baseline is the idealized one: pick the first layer whose
//! accuracy on the last sentence is within `T` of the best layer, and charge
//! `L / (L_e + 1)`. The 2D strategy is charged `(m * L) / operations_used`
//! per sample.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::ProbeGrid;
use crate::engine::{run_2d, run_layerwise, step_size, EEConfig};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("EmptyDataset: at least one sample is required")]
    EmptyDataset,
    #[error("EmptyFilter: no sample has exactly {0} sentences")]
    EmptyFilter(usize),
    #[error("NotReachable: no layer reaches accuracy {0}")]
    NotReachable(f64),
    #[error("InconsistentShape: sample {sample} has {found} layers, expected {expected}")]
    InconsistentLayers { sample: usize, found: usize, expected: usize },
}

impl MetricsError {
    pub fn kind(&self) -> &'static str {
        match self {
            MetricsError::EmptyDataset => "EmptyDataset",
            MetricsError::EmptyFilter(_) => "EmptyFilter",
            MetricsError::NotReachable(_) => "NotReachable",
            MetricsError::InconsistentLayers { .. } => "InconsistentShape",
        }
    }
}

fn common_layers(dataset: &[ProbeGrid]) -> Result<usize, MetricsError> {
    let first = dataset.first().ok_or(MetricsError::EmptyDataset)?;
    let expected = first.num_layers();
    if let Some((sample, g)) = dataset.iter().enumerate().find(|(_, g)| g.num_layers() != expected) {
        return Err(MetricsError::InconsistentLayers { sample, found: g.num_layers(), expected });
    }
    Ok(expected)
}

/// Accuracy of each layer's classifier on the last sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAccuracyProfile {
    pub acc: Vec<f64>,
}

impl LayerAccuracyProfile {
    pub fn max(&self) -> f64 {
        self.acc.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn num_layers(&self) -> usize {
        self.acc.len()
    }
}

pub fn layer_accuracy_profile(dataset: &[ProbeGrid]) -> Result<LayerAccuracyProfile, MetricsError> {
    let num_layers = common_layers(dataset)?;
    let correct = dataset
        .par_iter()
        .map(|g| (0..num_layers).map(|l| usize::from(run_layerwise(g, l) == g.label())).collect::<Vec<_>>())
        .reduce(|| vec![0; num_layers], |a, b| a.iter().zip(&b).map(|(x, y)| x + y).collect());
    let n = dataset.len() as f64;
    Ok(LayerAccuracyProfile { acc: correct.into_iter().map(|c| c as f64 / n).collect() })
}

/// Best layer accuracy minus the allowed loss `allowed_loss`.
pub fn accuracy_threshold(profile: &LayerAccuracyProfile, allowed_loss: f64) -> f64 {
    profile.max() - allowed_loss
}

/// First layer whose accuracy reaches `acc_thr`.
pub fn optimal_exit_layer(profile: &LayerAccuracyProfile, acc_thr: f64) -> Result<usize, MetricsError> {
    profile.acc.iter().position(|a| *a >= acc_thr).ok_or(MetricsError::NotReachable(acc_thr))
}

/// `L / (L_e + 1)`
pub fn speedup_layerwise(num_layers: usize, exit_layer: usize) -> f64 {
    assert!(exit_layer < num_layers, "exit layer {exit_layer} out of range for {num_layers} layers");
    num_layers as f64 / (exit_layer + 1) as f64
}

/// `(m * L) / operations_used`
pub fn speedup_2d(num_sentences: usize, num_layers: usize, operations_used: usize) -> f64 {
    assert!(operations_used >= 1, "operations_used must be positive");
    (num_sentences * num_layers) as f64 / operations_used as f64
}

/// The optimal layer-wise early exit at a given allowed accuracy loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerwiseBaseline {
    pub profile: LayerAccuracyProfile,
    pub allowed_loss: f64,
    pub acc_thr: f64,
    pub exit_layer: usize,
    pub speedup: f64,
}

pub fn layerwise_baseline(dataset: &[ProbeGrid], allowed_loss: f64) -> Result<LayerwiseBaseline, MetricsError> {
    let profile = layer_accuracy_profile(dataset)?;
    let acc_thr = accuracy_threshold(&profile, allowed_loss);
    let exit_layer = optimal_exit_layer(&profile, acc_thr)?;
    let speedup = speedup_layerwise(profile.num_layers(), exit_layer);
    Ok(LayerwiseBaseline { profile, allowed_loss, acc_thr, exit_layer, speedup })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub label: usize,
    pub prediction: usize,
    pub num_sentences: usize,
    pub operations_used: usize,
    pub exited_early: bool,
    pub exit_layer: Option<usize>,
    pub exit_sentence: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tau_ignore: f64,
    pub tau_acc: f64,
    pub samples: usize,
    pub accuracy: f64,
    pub total_ops: usize,
    pub total_full_ops: usize,
    /// `total_full_ops / total_ops`, the headline figure.
    pub speedup_total: f64,
    /// Mean of the per-sample ratios.
    pub speedup_mean: f64,
    pub exits: usize,
    pub per_sample: Vec<SampleSummary>,
}

pub fn evaluate_2d(dataset: &[ProbeGrid], cfg: &EEConfig) -> Result<EvalReport, MetricsError> {
    let num_layers = common_layers(dataset)?;
    let per_sample: Vec<SampleSummary> = dataset
        .par_iter()
        .map(|g| {
            let out = run_2d(g, cfg);
            SampleSummary {
                label: g.label(),
                prediction: out.predicted_label,
                num_sentences: g.num_sentences(),
                operations_used: out.operations_used,
                exited_early: out.exited_early,
                exit_layer: out.exit_step.map(|s| s.layer),
                exit_sentence: out.exit_step.map(|s| s.sentence),
            }
        })
        .collect();
    let n = per_sample.len();
    let correct = per_sample.iter().filter(|s| s.prediction == s.label).count();
    let total_ops: usize = per_sample.iter().map(|s| s.operations_used).sum();
    let total_full_ops: usize = per_sample.iter().map(|s| s.num_sentences * num_layers).sum();
    let ratio_sum: f64 = per_sample.iter().map(|s| speedup_2d(s.num_sentences, num_layers, s.operations_used)).sum();
    Ok(EvalReport {
        tau_ignore: cfg.tau_ignore,
        tau_acc: cfg.tau_acc,
        samples: n,
        accuracy: correct as f64 / n as f64,
        total_ops,
        total_full_ops,
        speedup_total: total_full_ops as f64 / total_ops as f64,
        speedup_mean: ratio_sum / n as f64,
        exits: per_sample.iter().filter(|s| s.exited_early).count(),
        per_sample,
    })
}

fn filter_m(dataset: &[ProbeGrid], fixed_m: usize) -> Result<Vec<&ProbeGrid>, MetricsError> {
    common_layers(dataset)?;
    let kept: Vec<&ProbeGrid> = dataset.iter().filter(|g| g.num_sentences() == fixed_m).collect();
    if kept.is_empty() {
        return Err(MetricsError::EmptyFilter(fixed_m));
    }
    Ok(kept)
}

/// `L x fixed_m` matrix of per-cell argmax accuracy over samples with
/// exactly `fixed_m` sentences.
pub fn cell_accuracy_heatmap(dataset: &[ProbeGrid], fixed_m: usize) -> Result<Vec<Vec<f64>>, MetricsError> {
    let kept = filter_m(dataset, fixed_m)?;
    let num_layers = kept[0].num_layers();
    let counts = kept
        .par_iter()
        .map(|g| {
            let mut c = vec![0usize; num_layers * fixed_m];
            for l in 0..num_layers {
                for k in 0..fixed_m {
                    c[l * fixed_m + k] = usize::from(g.cell(l, k).argmax() == g.label());
                }
            }
            c
        })
        .reduce(|| vec![0; num_layers * fixed_m], |a, b| a.iter().zip(&b).map(|(x, y)| x + y).collect());
    let n = kept.len() as f64;
    Ok(counts.chunks(fixed_m).map(|row| row.iter().map(|c| *c as f64 / n).collect()).collect())
}

/// Deepest layer reached when block `s` completes, for an `L x m` grid.
pub fn block_final_layer(num_layers: usize, num_sentences: usize, block: usize) -> usize {
    ((block + 1) * step_size(num_layers, num_sentences)).min(num_layers) - 1
}

/// Accuracy of the state held at the end of each progression block: the
/// argmax of the newest sentence at the deepest active layer.
pub fn block_accuracy_curve(dataset: &[ProbeGrid], fixed_m: usize) -> Result<Vec<f64>, MetricsError> {
    let kept = filter_m(dataset, fixed_m)?;
    let num_layers = kept[0].num_layers();
    let n = kept.len() as f64;
    Ok((0..fixed_m)
        .map(|s| {
            let layer = block_final_layer(num_layers, fixed_m, s);
            kept.iter().filter(|g| g.cell(layer, s).argmax() == g.label()).count() as f64 / n
        })
        .collect())
}

/// Writes an `L x m` matrix with a `layer\sentence` header.
pub fn write_cell_heatmap_csv<W: Write>(matrix: &[Vec<f64>], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    let width = matrix.first().map_or(0, Vec::len);
    let mut header = vec!["layer\\sentence".to_string()];
    header.extend((0..width).map(|k| k.to_string()));
    w.write_record(&header)?;
    for (l, row) in matrix.iter().enumerate() {
        let mut rec = vec![l.to_string()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_block_curve_csv<W: Write>(curve: &[f64], num_layers: usize, out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["block", "final_layer", "accuracy"])?;
    for (s, acc) in curve.iter().enumerate() {
        let layer = block_final_layer(num_layers, curve.len(), s);
        w.write_record([s.to_string(), layer.to_string(), acc.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-layer FLOP estimate for processing one sentence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModelInput {
    /// Average tokens per sentence.
    pub tps: f64,
    pub embed_dim: f64,
    /// MLP expansion factor.
    pub exp_f: f64,
    /// Index of the sentence being processed.
    pub sentence_index: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModelOutput {
    pub qkv_flops: f64,
    /// `sentence_index * attention_coefficient`
    pub attention_flops: f64,
    pub attention_coefficient: f64,
    pub mlp_flops: f64,
    /// Sentence index at which attention cost equals the qkv + MLP cost.
    pub crossover_s: f64,
}

pub fn cost_model(inp: &CostModelInput) -> CostModelOutput {
    let d2 = inp.embed_dim * inp.embed_dim;
    let qkv_flops = 3.0 * inp.tps * d2;
    let mlp_flops = 2.0 * inp.tps * d2 * inp.exp_f;
    let attention_coefficient = inp.tps * inp.tps * inp.embed_dim;
    CostModelOutput {
        qkv_flops,
        attention_flops: inp.sentence_index * attention_coefficient,
        attention_coefficient,
        mlp_flops,
        crossover_s: (qkv_flops + mlp_flops) / attention_coefficient,
    }
}
