//! Tunes the two thresholds with the full grid and with the iterative
//! refinement, and writes the grid heatmaps.

use ee2d::metrics::{accuracy_threshold, layer_accuracy_profile};
use ee2d::tuner::{grid_search, refine_search, TuneBounds, TuneGrid};
use ee2d::ProbeGrid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn probe(rng: &mut ChaCha8Rng, layers: usize, sentences: usize) -> ProbeGrid {
    let label = rng.random_range(0..3);
    let rows = (0..layers)
        .map(|l| {
            (0..sentences)
                .map(|k| {
                    let signal = (1.0 + l as f64) * (1.0 + k as f64) / (layers * sentences) as f64;
                    let mut logits: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
                    logits[label] += 3.0 * signal;
                    let z: f64 = logits.iter().map(|x| x.exp()).sum();
                    logits.iter().map(|x| x.exp() / z).collect()
                })
                .collect()
        })
        .collect();
    ProbeGrid::from_rows(label, rows).expect("softmax rows")
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let data: Vec<ProbeGrid> = (0..400)
        .map(|_| {
            let m = rng.random_range(2..=6);
            probe(&mut rng, 12, m)
        })
        .collect();
    let acc_thr = accuracy_threshold(&layer_accuracy_profile(&data)?, 0.01);

    let grid = grid_search(&data, &TuneGrid::default(), acc_thr)?;
    println!(
        "grid:   {} evaluations, best {:?} at {:.2}x (accuracy {:.3}, target {acc_thr:.3})",
        grid.evaluations, grid.best_cfg, grid.best_speedup, grid.best_accuracy
    );
    let refined = refine_search(&data, TuneBounds::default(), acc_thr, 30)?;
    println!(
        "refine: {} evaluations, best {:?} at {:.2}x, per stage {:?}",
        refined.evaluations, refined.best_cfg, refined.best_speedup, refined.stage_best
    );

    if let Some(h) = &grid.heatmap {
        let dir = std::env::temp_dir();
        h.write_accuracy_csv(std::fs::File::create(dir.join("ee2d_accuracy.csv"))?)?;
        h.write_speedup_csv(std::fs::File::create(dir.join("ee2d_speedup.csv"))?)?;
        println!("heatmaps in {}", dir.display());
    }
    Ok(())
}
