//! Two-dimensional early-exit inference over a probe grid.
//!
//! Sentences arrive one at a time. When sentence `s` arrives, the first
//! `L_s = min((s + 1) * step, L)` layers become active: every earlier sentence
//! is pushed through the newly activated layers, then sentence `s` itself
//! runs through all active layers. Each (layer, sentence) evaluation is one
//! abstract operation. After every operation the layer's classifier votes
//! for its argmax class with weight equal to its confidence margin, provided
//! the margin exceeds `tau_ignore`; the first class whose accumulated votes
//! exceed `tau_acc` is returned.
//!
//! For `L = 8, m = 4` (step 2) the operations are numbered
//!
//! ```text
//!            sent 0   sent 1   sent 2   sent 3
//! layer 6-7  18,19    20,21    22,23    30,31
//! layer 4-5   8, 9    10,11    16,17    28,29
//! layer 2-3   2, 3     6, 7    14,15    26,27
//! layer 0-1   0, 1     4, 5    12,13    24,25
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{argmax, ProbeGrid};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("tau_ignore must be a finite value in [0, 1], got {0}")]
    TauIgnore(f64),
    #[error("tau_acc must be finite and >= 0, got {0}")]
    TauAcc(f64),
}

/// The two inference thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EEConfig {
    pub tau_ignore: f64,
    pub tau_acc: f64,
}

impl EEConfig {
    pub fn new(tau_ignore: f64, tau_acc: f64) -> Result<Self, ConfigError> {
        if !tau_ignore.is_finite() || !(0.0..=1.0).contains(&tau_ignore) {
            return Err(ConfigError::TauIgnore(tau_ignore));
        }
        if !tau_acc.is_finite() || tau_acc < 0.0 {
            return Err(ConfigError::TauAcc(tau_acc));
        }
        Ok(Self { tau_ignore, tau_acc })
    }

    /// A configuration that can never exit early.
    pub fn never_exit() -> Self {
        Self { tau_ignore: 1.0, tau_acc: f64::MAX }
    }
}

/// One (layer, sentence) operation of a traversal plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TraversalStep {
    pub layer: usize,
    pub sentence: usize,
    pub op_index: usize,
}

/// Number of layers activated per arriving sentence: `max(1, L / m)`.
pub fn step_size(num_layers: usize, num_sentences: usize) -> usize {
    assert!(num_layers >= 1 && num_sentences >= 1, "grid must be at least 1x1");
    (num_layers / num_sentences).max(1)
}

/// Deepest layer ever visited by the plan, plus one.
pub fn visited_depth(num_layers: usize, num_sentences: usize) -> usize {
    (num_sentences * step_size(num_layers, num_sentences)).min(num_layers)
}

/// Margin between the largest and second-largest probability.
pub fn confidence(probs: &[f64]) -> f64 {
    let mut first = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    for &p in probs {
        if p > first {
            second = first;
            first = p;
        } else if p > second {
            second = p;
        }
    }
    first - second
}

/// Lazy iterator over the operations of the block schedule.
#[derive(Debug, Clone)]
pub struct Traversal {
    num_layers: usize,
    num_sentences: usize,
    step: usize,
    // current arriving sentence, sentence being pushed, next layer
    s: usize,
    s1: usize,
    layer: usize,
    op_index: usize,
}

impl Traversal {
    pub fn new(num_layers: usize, num_sentences: usize) -> Self {
        let step = step_size(num_layers, num_sentences);
        let mut t = Self { num_layers, num_sentences, step, s: 0, s1: 0, layer: 0, op_index: 0 };
        t.layer = t.start_layer();
        t
    }

    fn active_layers(&self) -> usize {
        ((self.s + 1) * self.step).min(self.num_layers)
    }

    fn start_layer(&self) -> usize {
        if self.s1 == self.s {
            0
        } else {
            self.step * self.s
        }
    }

    /// Total number of operations in the plan.
    pub fn len_for(num_layers: usize, num_sentences: usize) -> usize {
        let step = step_size(num_layers, num_sentences);
        (0..num_sentences)
            .map(|s| {
                let active = ((s + 1) * step).min(num_layers);
                let old = active.saturating_sub(step * s);
                s * old + active
            })
            .sum()
    }
}

impl Iterator for Traversal {
    type Item = TraversalStep;

    fn next(&mut self) -> Option<TraversalStep> {
        while self.s < self.num_sentences {
            if self.layer < self.active_layers() {
                let step = TraversalStep { layer: self.layer, sentence: self.s1, op_index: self.op_index };
                self.layer += 1;
                self.op_index += 1;
                return Some(step);
            }
            if self.s1 < self.s {
                self.s1 += 1;
            } else {
                self.s += 1;
                self.s1 = 0;
            }
            self.layer = self.start_layer();
        }
        None
    }
}

/// The full operation order for an `L x m` grid.
pub fn traversal_plan(num_layers: usize, num_sentences: usize) -> Vec<TraversalStep> {
    Traversal::new(num_layers, num_sentences).collect()
}

/// Read access to per-cell class probabilities.
///
/// Implemented by [`ProbeGrid`]; tests wrap it to record which cells the
/// engine touches.
pub trait ProbeSource {
    fn num_layers(&self) -> usize;
    fn num_sentences(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn probs(&self, layer: usize, sentence: usize) -> &[f64];
}

impl ProbeSource for ProbeGrid {
    fn num_layers(&self) -> usize {
        ProbeGrid::num_layers(self)
    }

    fn num_sentences(&self) -> usize {
        ProbeGrid::num_sentences(self)
    }

    fn num_classes(&self) -> usize {
        ProbeGrid::num_classes(self)
    }

    fn probs(&self, layer: usize, sentence: usize) -> &[f64] {
        self.cell(layer, sentence).probs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EEOutcome {
    pub predicted_label: usize,
    pub operations_used: usize,
    pub exited_early: bool,
    pub exit_step: Option<TraversalStep>,
    /// Per-class confidence sums at termination.
    pub accumulators: Vec<f64>,
}

/// Runs the 2D early-exit schedule on one sample.
///
/// Both thresholds are strict: a margin equal to `tau_ignore` is ignored and
/// an accumulator equal to `tau_acc` does not trigger an exit. Without an
/// exit, the prediction is the argmax of the deepest visited layer for the
/// last sentence and `operations_used` is the number of operations actually
/// performed (which is `L * m` only when `m` divides `L`).
pub fn run_2d<S: ProbeSource + ?Sized>(grid: &S, cfg: &EEConfig) -> EEOutcome {
    let (num_layers, num_sentences) = (grid.num_layers(), grid.num_sentences());
    let mut acc = vec![0.0; grid.num_classes()];
    let mut performed = 0;
    for step in Traversal::new(num_layers, num_sentences) {
        performed += 1;
        let probs = grid.probs(step.layer, step.sentence);
        let predicted = argmax(probs);
        let conf = confidence(probs);
        if conf > cfg.tau_ignore {
            acc[predicted] += conf;
            if acc[predicted] > cfg.tau_acc {
                return EEOutcome {
                    predicted_label: predicted,
                    operations_used: performed,
                    exited_early: true,
                    exit_step: Some(step),
                    accumulators: acc,
                };
            }
        }
    }
    let deepest = visited_depth(num_layers, num_sentences) - 1;
    EEOutcome {
        predicted_label: argmax(grid.probs(deepest, num_sentences - 1)),
        operations_used: performed,
        exited_early: false,
        exit_step: None,
        accumulators: acc,
    }
}

/// Layer-wise baseline: the classifier at `exit_layer` applied to the last
/// sentence, whose state has seen the whole input.
pub fn run_layerwise<S: ProbeSource + ?Sized>(grid: &S, exit_layer: usize) -> usize {
    assert!(exit_layer < grid.num_layers(), "exit layer {exit_layer} out of range");
    argmax(grid.probs(exit_layer, grid.num_sentences() - 1))
}

/// Prediction of the last layer on the last sentence.
pub fn run_full<S: ProbeSource + ?Sized>(grid: &S) -> usize {
    run_layerwise(grid, grid.num_layers() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::ClassDistribution;

    fn grid_from(label: usize, rows: Vec<Vec<Vec<f64>>>) -> ProbeGrid {
        ProbeGrid::from_rows(label, rows).unwrap()
    }

    fn cfg(i: f64, a: f64) -> EEConfig {
        EEConfig::new(i, a).unwrap()
    }

    #[test]
    fn step_size_examples() {
        assert_eq!(step_size(8, 4), 2);
        assert_eq!(step_size(32, 10), 3);
        assert_eq!(step_size(4, 9), 1);
    }

    #[test]
    fn confidence_examples() {
        assert!((confidence(&[0.7, 0.2, 0.1]) - 0.5).abs() < 1e-12);
        assert_eq!(confidence(&[0.5, 0.5]), 0.0);
        assert_eq!(confidence(&[1.0 / 3.0; 3]), 0.0);
        assert!((confidence(&[0.1, 0.2, 0.7]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert_eq!(EEConfig::new(2.0, 1.0), Err(ConfigError::TauIgnore(2.0)));
        assert_eq!(EEConfig::new(0.5, -1.0), Err(ConfigError::TauAcc(-1.0)));
        assert!(EEConfig::new(f64::NAN, 1.0).is_err());
        assert!(EEConfig::new(0.0, 0.0).is_ok());
    }

    #[test]
    fn plan_for_two_layers_one_sentence() {
        assert_eq!(
            traversal_plan(2, 1),
            vec![
                TraversalStep { layer: 0, sentence: 0, op_index: 0 },
                TraversalStep { layer: 1, sentence: 0, op_index: 1 },
            ]
        );
    }

    #[test]
    fn plan_seven_by_three_skips_last_layer() {
        let plan = traversal_plan(7, 3);
        assert_eq!(plan.len(), 18);
        assert_eq!(Traversal::len_for(7, 3), 18);
        for s in 0..3 {
            let mut layers: Vec<_> = plan.iter().filter(|p| p.sentence == s).map(|p| p.layer).collect();
            layers.sort_unstable();
            assert_eq!(layers, (0..6).collect::<Vec<_>>());
        }
        assert!(plan.iter().all(|p| p.layer < 6));
    }

    #[test]
    fn plan_with_more_sentences_than_layers() {
        let plan = traversal_plan(4, 9);
        assert_eq!(plan.len(), Traversal::len_for(4, 9));
        // every cell visited exactly once
        let mut seen = std::collections::HashSet::new();
        for p in &plan {
            assert!(seen.insert((p.layer, p.sentence)));
        }
        assert_eq!(seen.len(), 36);
    }

    #[test]
    fn immediate_exit() {
        let g = grid_from(0, vec![vec![vec![0.95, 0.05]]]);
        let out = run_2d(&g, &cfg(0.3, 0.5));
        assert!(out.exited_early);
        assert_eq!(out.operations_used, 1);
        assert_eq!(out.predicted_label, 0);
        assert_eq!(out.exit_step, Some(TraversalStep { layer: 0, sentence: 0, op_index: 0 }));
    }

    #[test]
    fn exit_on_second_step() {
        let g = grid_from(0, vec![vec![vec![0.6, 0.4]], vec![vec![0.7, 0.3]]]);
        let out = run_2d(&g, &cfg(0.1, 0.45));
        assert!(out.exited_early);
        assert_eq!(out.operations_used, 2);
        assert_eq!(out.predicted_label, 0);
        assert!((out.accumulators[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn tau_ignore_one_never_exits() {
        let g = grid_from(1, vec![vec![vec![0.99, 0.01], vec![0.01, 0.99]], vec![vec![0.0, 1.0], vec![0.3, 0.7]]]);
        let out = run_2d(&g, &cfg(1.0, 0.0));
        assert!(!out.exited_early);
        assert_eq!(out.operations_used, 4);
        assert_eq!(out.predicted_label, run_full(&g));
        assert!(out.accumulators.iter().all(|a| *a == 0.0));
    }

    #[test]
    fn equal_thresholds_do_not_fire() {
        // margin exactly 0.5 == tau_ignore
        let g = grid_from(0, vec![vec![vec![0.75, 0.25]]]);
        assert!(!run_2d(&g, &cfg(0.5, 0.0)).exited_early);
        // accumulator exactly 0.5 == tau_acc
        assert!(!run_2d(&g, &cfg(0.0, 0.5)).exited_early);
        assert!(run_2d(&g, &cfg(0.0, 0.49)).exited_early);
    }

    #[test]
    fn fallback_uses_deepest_visited_layer() {
        // L = 3, m = 2: step 1, layer 2 never visited
        let a = vec![0.9, 0.1];
        let b = vec![0.1, 0.9];
        let g = grid_from(0, vec![vec![a.clone(), a.clone()], vec![a.clone(), a.clone()], vec![b.clone(), b]]);
        let out = run_2d(&g, &EEConfig::never_exit());
        assert_eq!(out.operations_used, 4);
        assert_eq!(out.predicted_label, 0);
        assert_eq!(run_full(&g), 1);
    }

    #[test]
    fn layerwise_reads_last_column() {
        let cells: Vec<Vec<ClassDistribution>> = (0..4)
            .map(|i| {
                (0..3)
                    .map(|k| {
                        if i == 2 && k == 2 {
                            ClassDistribution::new(vec![0.1, 0.8, 0.1]).unwrap()
                        } else {
                            ClassDistribution::new(vec![0.6, 0.2, 0.2]).unwrap()
                        }
                    })
                    .collect()
            })
            .collect();
        let g = ProbeGrid::new(1, cells).unwrap();
        assert_eq!(run_layerwise(&g, 2), 1);
        assert_eq!(run_layerwise(&g, 3), 0);
        assert_eq!(run_full(&g), run_layerwise(&g, 3));
    }

    #[test]
    fn full_inference_ties_to_lowest_class() {
        let g = grid_from(1, vec![vec![vec![0.5, 0.5]]]);
        assert_eq!(run_full(&g), 0);
    }
}
