//! Per-cell accuracy of a synthetic probe set and the accuracy reached at
//! the end of each progression block, written as CSV to stdout.

use ee2d::metrics::{block_accuracy_curve, cell_accuracy_heatmap, write_block_curve_csv, write_cell_heatmap_csv};
use ee2d::ProbeGrid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Probe grid whose confidence in the true class grows with depth and
/// sentence position.
fn probe(rng: &mut ChaCha8Rng, layers: usize, sentences: usize) -> ProbeGrid {
    let label = rng.random_range(0..2);
    let rows = (0..layers)
        .map(|l| {
            (0..sentences)
                .map(|k| {
                    let strength = (l + 1) as f64 / layers as f64 * (k + 1) as f64 / sentences as f64;
                    let p = (0.5 + 0.45 * strength + rng.random_range(-0.15..0.15)).clamp(0.0, 1.0);
                    if label == 0 {
                        vec![p, 1.0 - p]
                    } else {
                        vec![1.0 - p, p]
                    }
                })
                .collect()
        })
        .collect();
    ProbeGrid::from_rows(label, rows).expect("rows are distributions")
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let data: Vec<ProbeGrid> = (0..500).map(|_| probe(&mut rng, 8, 4)).collect();

    let stdout = std::io::stdout();
    write_cell_heatmap_csv(&cell_accuracy_heatmap(&data, 4)?, stdout.lock())?;
    println!();
    write_block_curve_csv(&block_accuracy_curve(&data, 4)?, 8, stdout.lock())?;
    Ok(())
}
