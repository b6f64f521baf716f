//! Search over `(tau_ignore, tau_acc)` for the largest 2D speed-up whose
//! accuracy stays at or above a threshold.
//!
//! Two strategies: an exhaustive grid (which also yields the accuracy and
//! speed-up heatmaps) and a coarse-to-fine 3x3 refinement that spends a fixed
//! evaluation budget.

use std::collections::HashMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::ProbeGrid;
use crate::engine::EEConfig;
use crate::metrics::{evaluate_2d, MetricsError};

#[derive(Debug, Error, PartialEq)]
pub enum TuneError {
    #[error("invalid tuning grid: {0}")]
    Grid(String),
    #[error("refinement budget must be >= 9, got {0}")]
    Budget(usize),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl TuneError {
    pub fn kind(&self) -> &'static str {
        match self {
            TuneError::Grid(_) => "GridError",
            TuneError::Budget(_) => "BudgetError",
            TuneError::Metrics(e) => e.kind(),
        }
    }
}

/// `n` values spaced evenly in log space between `lo` and `hi` inclusive.
pub fn log_spaced(n: usize, lo: f64, hi: f64) -> Vec<f64> {
    assert!(lo > 0.0 && hi >= lo, "log spacing needs 0 < lo <= hi");
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            let mut v: Vec<f64> = (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect();
            v[0] = lo;
            v[n - 1] = hi;
            v
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneGrid {
    pub tau_ignore_values: Vec<f64>,
    pub tau_acc_values: Vec<f64>,
}

impl Default for TuneGrid {
    /// `tau_ignore` in `{0.0, 0.1, ..., 0.9}`, `tau_acc` at 25 log-spaced
    /// points in `[0.1, 50]`: 250 cells.
    fn default() -> Self {
        Self {
            tau_ignore_values: (0..10).map(|i| i as f64 / 10.0).collect(),
            tau_acc_values: log_spaced(25, 0.1, 50.0),
        }
    }
}

impl TuneGrid {
    pub fn new(tau_ignore_values: Vec<f64>, tau_acc_values: Vec<f64>) -> Result<Self, TuneError> {
        let g = Self { tau_ignore_values, tau_acc_values };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), TuneError> {
        let increasing = |v: &[f64]| !v.is_empty() && v.windows(2).all(|w| w[0] < w[1]);
        if !increasing(&self.tau_ignore_values) || !increasing(&self.tau_acc_values) {
            return Err(TuneError::Grid("value lists must be nonempty and strictly increasing".into()));
        }
        for &ti in &self.tau_ignore_values {
            for &ta in &self.tau_acc_values {
                EEConfig::new(ti, ta).map_err(|e| TuneError::Grid(e.to_string()))?;
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tau_ignore_values.len() * self.tau_acc_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Result of evaluating one configuration on the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellEval {
    pub tau_ignore: f64,
    pub tau_acc: f64,
    pub accuracy: f64,
    pub speedup_total: f64,
    pub speedup_mean: f64,
    pub total_ops: usize,
    pub feasible: bool,
}

impl CellEval {
    pub fn cfg(&self) -> EEConfig {
        EEConfig { tau_ignore: self.tau_ignore, tau_acc: self.tau_acc }
    }
}

/// Rows follow `tau_ignore_values`, columns follow `tau_acc_values`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub tau_ignore_values: Vec<f64>,
    pub tau_acc_values: Vec<f64>,
    pub cells: Vec<Vec<CellEval>>,
}

impl Heatmap {
    pub fn write_csv<W: Write>(&self, out: W, value: impl Fn(&CellEval) -> f64) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["tau_ignore\\tau_acc".to_string()];
        header.extend(self.tau_acc_values.iter().map(f64::to_string));
        w.write_record(&header)?;
        for (ti, row) in self.tau_ignore_values.iter().zip(&self.cells) {
            let mut rec = vec![ti.to_string()];
            rec.extend(row.iter().map(|c| value(c).to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_accuracy_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        self.write_csv(out, |c| c.accuracy)
    }

    pub fn write_speedup_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        self.write_csv(out, |c| c.speedup_total)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub best_cfg: EEConfig,
    pub best_speedup: f64,
    pub best_accuracy: f64,
    pub acc_thr: f64,
    /// Whether the best cell meets `acc_thr`; when nothing does, the most
    /// accurate cell is reported instead.
    pub feasible: bool,
    pub evaluations: usize,
    pub evaluated: Vec<CellEval>,
    /// Best speed-up after each refinement stage (one entry for a grid).
    pub stage_best: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heatmap: Option<Heatmap>,
}

fn evaluate_cell(dataset: &[ProbeGrid], tau_ignore: f64, tau_acc: f64, acc_thr: f64) -> Result<CellEval, TuneError> {
    let cfg = EEConfig::new(tau_ignore, tau_acc).map_err(|e| TuneError::Grid(e.to_string()))?;
    let r = evaluate_2d(dataset, &cfg)?;
    Ok(CellEval {
        tau_ignore,
        tau_acc,
        accuracy: r.accuracy,
        speedup_total: r.speedup_total,
        speedup_mean: r.speedup_mean,
        total_ops: r.total_ops,
        feasible: r.accuracy >= acc_thr,
    })
}

/// Best-cell rule: among feasible cells the largest speed-up, ties broken
/// toward larger `tau_acc` and then smaller `tau_ignore`. With no feasible
/// cell, the most accurate one (then the same rule).
fn select_best(cells: &[CellEval]) -> Option<CellEval> {
    let tie = |a: &CellEval, b: &CellEval| a.tau_acc.total_cmp(&b.tau_acc).then(b.tau_ignore.total_cmp(&a.tau_ignore));
    let feasible = cells.iter().filter(|c| c.feasible);
    if let Some(best) = feasible.max_by(|a, b| a.speedup_total.total_cmp(&b.speedup_total).then_with(|| tie(a, b))) {
        return Some(*best);
    }
    cells
        .iter()
        .max_by(|a, b| {
            a.accuracy.total_cmp(&b.accuracy).then(a.speedup_total.total_cmp(&b.speedup_total)).then_with(|| tie(a, b))
        })
        .copied()
}

fn finish(evaluated: Vec<CellEval>, acc_thr: f64, stage_best: Vec<f64>, heatmap: Option<Heatmap>) -> TuneResult {
    let best = select_best(&evaluated).expect("at least one evaluation");
    TuneResult {
        best_cfg: best.cfg(),
        best_speedup: best.speedup_total,
        best_accuracy: best.accuracy,
        acc_thr,
        feasible: best.feasible,
        evaluations: evaluated.len(),
        evaluated,
        stage_best,
        heatmap,
    }
}

/// Evaluates every grid cell (in parallel) and picks the best.
pub fn grid_search(dataset: &[ProbeGrid], grid: &TuneGrid, acc_thr: f64) -> Result<TuneResult, TuneError> {
    grid.validate()?;
    let points: Vec<(f64, f64)> =
        grid.tau_ignore_values.iter().flat_map(|&ti| grid.tau_acc_values.iter().map(move |&ta| (ti, ta))).collect();
    let evaluated =
        points.par_iter().map(|&(ti, ta)| evaluate_cell(dataset, ti, ta, acc_thr)).collect::<Result<Vec<_>, _>>()?;
    let cells = evaluated.chunks(grid.tau_acc_values.len()).map(<[CellEval]>::to_vec).collect();
    let heatmap = Heatmap {
        tau_ignore_values: grid.tau_ignore_values.clone(),
        tau_acc_values: grid.tau_acc_values.clone(),
        cells,
    };
    let best = select_best(&evaluated).map_or(0.0, |b| b.speedup_total);
    Ok(finish(evaluated, acc_thr, vec![best], Some(heatmap)))
}

/// Search box for [`refine_search`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneBounds {
    pub tau_ignore: (f64, f64),
    pub tau_acc: (f64, f64),
}

impl Default for TuneBounds {
    fn default() -> Self {
        Self { tau_ignore: (0.0, 0.9), tau_acc: (0.1, 50.0) }
    }
}

/// One search axis; `tau_acc` is searched in log space when its lower bound
/// is positive.
#[derive(Debug, Clone, Copy)]
struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn new((lo, hi): (f64, f64), log: bool) -> Self {
        if log {
            Self { lo: lo.ln(), hi: hi.ln(), log }
        } else {
            Self { lo, hi, log }
        }
    }

    fn value(&self, internal: f64) -> f64 {
        let x = internal.clamp(self.lo, self.hi);
        if self.log {
            x.exp()
        } else {
            x
        }
    }

    fn internal(&self, value: f64) -> f64 {
        if self.log {
            value.ln()
        } else {
            value
        }
    }
}

/// Coarse-to-fine search: a 3x3 grid spanning `bounds`, then repeated 3x3
/// grids centred on the best cell so far with half the previous spacing,
/// until `budget` evaluations are spent. Already evaluated points are reused.
pub fn refine_search(
    dataset: &[ProbeGrid],
    bounds: TuneBounds,
    acc_thr: f64,
    budget: usize,
) -> Result<TuneResult, TuneError> {
    if budget < 9 {
        return Err(TuneError::Budget(budget));
    }
    let (ilo, ihi) = bounds.tau_ignore;
    let (alo, ahi) = bounds.tau_acc;
    if !(0.0..=1.0).contains(&ilo)
        || !(0.0..=1.0).contains(&ihi)
        || ilo > ihi
        || alo < 0.0
        || alo > ahi
        || !ahi.is_finite()
    {
        return Err(TuneError::Grid(format!("invalid bounds {bounds:?}")));
    }
    let ign = Axis::new(bounds.tau_ignore, false);
    let acc = Axis::new(bounds.tau_acc, alo > 0.0);
    let mut center = ((ign.lo + ign.hi) / 2.0, (acc.lo + acc.hi) / 2.0);
    let mut half = ((ign.hi - ign.lo) / 2.0, (acc.hi - acc.lo) / 2.0);

    let mut evaluated: Vec<CellEval> = Vec::new();
    let mut seen: HashMap<(u64, u64), usize> = HashMap::new();
    let mut stage_best = Vec::new();
    let mut idle_stages = 0;
    while evaluated.len() < budget && idle_stages < 2 {
        let mut fresh = Vec::new();
        for di in [-1.0, 0.0, 1.0] {
            for da in [-1.0, 0.0, 1.0] {
                let p = (ign.value(center.0 + di * half.0), acc.value(center.1 + da * half.1));
                let key = (p.0.to_bits(), p.1.to_bits());
                if !seen.contains_key(&key) && !fresh.iter().any(|q: &(f64, f64)| (q.0.to_bits(), q.1.to_bits()) == key)
                {
                    fresh.push(p);
                }
            }
        }
        fresh.truncate(budget - evaluated.len());
        if fresh.is_empty() {
            idle_stages += 1;
        } else {
            idle_stages = 0;
        }
        let results =
            fresh.par_iter().map(|&(ti, ta)| evaluate_cell(dataset, ti, ta, acc_thr)).collect::<Result<Vec<_>, _>>()?;
        for r in results {
            seen.insert((r.tau_ignore.to_bits(), r.tau_acc.to_bits()), evaluated.len());
            evaluated.push(r);
        }
        let best = select_best(&evaluated).expect("coarse stage evaluates at least one cell");
        stage_best.push(best.speedup_total);
        center = (ign.internal(best.tau_ignore), acc.internal(best.tau_acc));
        half = (half.0 / 2.0, half.1 / 2.0);
    }
    Ok(finish(evaluated, acc_thr, stage_best, None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::ClassDistribution;

    fn dataset() -> Vec<ProbeGrid> {
        // Confident and correct on sentence 0, noisy afterwards.
        (0..6)
            .map(|i| {
                let label = i % 2;
                let cells = (0..4)
                    .map(|l| {
                        (0..4)
                            .map(|k| {
                                let p =
                                    if k == 0 { 0.6 + 0.1 * l as f64 } else { 0.5 + 0.05 * ((i + k + l) % 3) as f64 };
                                let mut v = vec![1.0 - p, 1.0 - p];
                                v[label] = p;
                                v[1 - label] = 1.0 - p;
                                ClassDistribution::new(v).unwrap()
                            })
                            .collect()
                    })
                    .collect();
                ProbeGrid::new(label, cells).unwrap()
            })
            .collect()
    }

    #[test]
    fn default_grid_shape() {
        let g = TuneGrid::default();
        assert_eq!(g.len(), 250);
        assert_eq!(g.tau_acc_values[0], 0.1);
        assert_eq!(g.tau_acc_values[24], 50.0);
        assert!(g.tau_acc_values.iter().any(|v| *v < 27.74) && g.tau_acc_values.iter().any(|v| *v > 27.74));
        g.validate().unwrap();
    }

    #[test]
    fn grid_validation() {
        assert!(TuneGrid::new(vec![0.2, 0.1], vec![1.0]).is_err());
        assert!(TuneGrid::new(vec![], vec![1.0]).is_err());
        assert!(TuneGrid::new(vec![1.5], vec![1.0]).is_err());
    }

    #[test]
    fn single_cell_grid() {
        let g = TuneGrid::new(vec![0.3], vec![0.5]).unwrap();
        let r = grid_search(&dataset(), &g, 0.0).unwrap();
        assert_eq!(r.evaluations, 1);
        assert_eq!(r.best_cfg, EEConfig::new(0.3, 0.5).unwrap());
    }

    #[test]
    fn no_exit_cell_is_feasible_at_full_accuracy() {
        let data = dataset();
        let g = TuneGrid::new(vec![0.0, 1.0], vec![0.1, 1e6]).unwrap();
        let full = evaluate_2d(&data, &EEConfig::never_exit()).unwrap().accuracy;
        let r = grid_search(&data, &g, full).unwrap();
        assert!(r.feasible);
        assert!(r.best_accuracy >= full);
    }

    #[test]
    fn infeasible_reports_most_accurate() {
        let g = TuneGrid::new(vec![0.0, 0.5], vec![0.1, 1.0]).unwrap();
        let r = grid_search(&dataset(), &g, 1.1).unwrap();
        assert!(!r.feasible);
        let max_acc = r.evaluated.iter().map(|c| c.accuracy).fold(0.0, f64::max);
        assert_eq!(r.best_accuracy, max_acc);
    }

    #[test]
    fn ties_prefer_larger_tau_acc() {
        let cells = [
            CellEval {
                tau_ignore: 0.1,
                tau_acc: 1.0,
                accuracy: 1.0,
                speedup_total: 2.0,
                speedup_mean: 2.0,
                total_ops: 1,
                feasible: true,
            },
            CellEval {
                tau_ignore: 0.2,
                tau_acc: 2.0,
                accuracy: 1.0,
                speedup_total: 2.0,
                speedup_mean: 2.0,
                total_ops: 1,
                feasible: true,
            },
            CellEval {
                tau_ignore: 0.0,
                tau_acc: 2.0,
                accuracy: 1.0,
                speedup_total: 2.0,
                speedup_mean: 2.0,
                total_ops: 1,
                feasible: true,
            },
            CellEval {
                tau_ignore: 0.0,
                tau_acc: 9.0,
                accuracy: 0.1,
                speedup_total: 9.0,
                speedup_mean: 9.0,
                total_ops: 1,
                feasible: false,
            },
        ];
        let b = select_best(&cells).unwrap();
        assert_eq!((b.tau_ignore, b.tau_acc), (0.0, 2.0));
    }

    #[test]
    fn refine_budget_nine_is_one_stage() {
        let r = refine_search(&dataset(), TuneBounds::default(), 0.0, 9).unwrap();
        assert_eq!(r.evaluations, 9);
        assert_eq!(r.stage_best.len(), 1);
        let ti: Vec<f64> = r.evaluated.iter().map(|c| c.tau_ignore).collect();
        assert!(ti.contains(&0.0) && ti.contains(&0.9));
        assert!(matches!(refine_search(&dataset(), TuneBounds::default(), 0.0, 8), Err(TuneError::Budget(8))));
    }

    #[test]
    fn refine_respects_budget_and_keeps_best() {
        let r = refine_search(&dataset(), TuneBounds::default(), 0.5, 30).unwrap();
        assert!(r.evaluations <= 30);
        assert!(r.stage_best.windows(2).all(|w| w[1] >= w[0]));
        for c in r.evaluated.iter().filter(|c| c.feasible) {
            assert!(r.best_speedup >= c.speedup_total);
        }
    }

    #[test]
    fn heatmap_csv_header() {
        let g = TuneGrid::new(vec![0.0, 0.5], vec![1.0, 2.0]).unwrap();
        let r = grid_search(&dataset(), &g, 0.0).unwrap();
        let mut buf = Vec::new();
        r.heatmap.unwrap().write_accuracy_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("tau_ignore\\tau_acc,1,2\n0,"));
        assert_eq!(text.lines().count(), 3);
    }
}
