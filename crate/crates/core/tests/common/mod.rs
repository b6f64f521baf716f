#![allow(dead_code)]

use ee2d::{ClassDistribution, ProbeGrid};
use rand::Rng;

/// Straight transcription of the early-exit pseudocode, kept deliberately
/// naive: nested loops, a sort for the margin, and a linear scan for the
/// argmax. Returns `(label, operations_used, exited_early)`.
pub fn naive_run(grid: &ProbeGrid, tau_ignore: f64, tau_acc: f64) -> (usize, usize, bool) {
    let num_sentences = grid.num_sentences();
    let num_layers = grid.num_layers();
    let mut operations_used = 0;
    let delta = std::cmp::max(1, num_layers / num_sentences);
    let mut acc = vec![0.0; grid.num_classes()];
    let mut deepest = 0;
    for s in 0..num_sentences {
        for s1 in 0..=s {
            let layers_to_traverse = std::cmp::min((s + 1) * delta, num_layers);
            let start_layer = if s1 == s { 0 } else { delta * s };
            for l in start_layer..layers_to_traverse {
                operations_used += 1;
                deepest = deepest.max(l);
                let p = grid.cell(l, s1).probs();
                let predicted = first_argmax(p);
                let mut sorted = p.to_vec();
                sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
                let confidence = sorted[0] - sorted[1];
                if confidence > tau_ignore {
                    acc[predicted] += confidence;
                    if acc[predicted] > tau_acc {
                        return (predicted, operations_used, true);
                    }
                }
            }
        }
    }
    let final_label = first_argmax(grid.cell(deepest, num_sentences - 1).probs());
    (final_label, operations_used, false)
}

fn first_argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..p.len() {
        if p[i] > p[best] {
            best = i;
        }
    }
    best
}

/// All probability vectors over `c` classes whose entries are multiples of
/// `1 / denom`.
pub fn lattice_vectors(c: usize, denom: u32) -> Vec<Vec<f64>> {
    fn rec(c: usize, left: u32, denom: u32, cur: &mut Vec<f64>, out: &mut Vec<Vec<f64>>) {
        if c == 1 {
            cur.push(left as f64 / denom as f64);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for k in 0..=left {
            cur.push(k as f64 / denom as f64);
            rec(c - 1, left - k, denom, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(c, denom, denom, &mut Vec::new(), &mut out);
    out
}

pub fn lattice_grid<R: Rng>(rng: &mut R, layers: usize, sentences: usize, classes: usize, denom: u32) -> ProbeGrid {
    let choices = lattice_vectors(classes, denom);
    let cells = (0..layers)
        .map(|_| {
            (0..sentences)
                .map(|_| ClassDistribution::new(choices[rng.random_range(0..choices.len())].clone()).unwrap())
                .collect()
        })
        .collect();
    ProbeGrid::new(rng.random_range(0..classes), cells).unwrap()
}

pub fn random_distribution<R: Rng>(rng: &mut R, classes: usize) -> ClassDistribution {
    let raw: Vec<f64> = (0..classes).map(|_| rng.random::<f64>().powi(3) + 1e-9).collect();
    let sum: f64 = raw.iter().sum();
    ClassDistribution::new(raw.into_iter().map(|x| x / sum).collect()).unwrap()
}

pub fn random_grid<R: Rng>(rng: &mut R, layers: usize, sentences: usize, classes: usize) -> ProbeGrid {
    let cells = (0..layers).map(|_| (0..sentences).map(|_| random_distribution(rng, classes)).collect()).collect();
    ProbeGrid::new(rng.random_range(0..classes), cells).unwrap()
}
