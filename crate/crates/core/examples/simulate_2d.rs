//! Runs the 2D early exit on a hand-written probe grid and on a synthetic
//! probe set.

use ee2d::adapters::{train_adapters, TrainConfig, TrainMode};
use ee2d::datamodel::apply_adapters_all;
use ee2d::metrics::evaluate_2d;
use ee2d::synth::{generate_dataset, SentenceCount, SynthSpec};
use ee2d::{run_2d, EEConfig, ProbeGrid};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // 2 layers x 2 sentences, rows are layers
    let grid =
        ProbeGrid::from_rows(1, vec![vec![vec![0.5, 0.5], vec![0.4, 0.6]], vec![vec![0.2, 0.8], vec![0.05, 0.95]]])?;
    let out = run_2d(&grid, &EEConfig::new(0.3, 2.0)?);
    println!("{out:?}");

    let spec = SynthSpec {
        num_samples: 300,
        num_classes: 3,
        num_layers: 8,
        sentences: SentenceCount::Range { min: 3, max: 6 },
        embed_dim: 8,
        layer_ramp: ee2d::synth::saturating_ramp(8, 0.2, 4),
        sentence_ramp: vec![0.3, 0.3, 0.2, 0.1, 0.1, 0.0],
        noise_sigma: 0.4,
        seed: 7,
        cumulative: true,
    };
    let emb = generate_dataset(&spec)?;
    let cfg = TrainConfig { learning_rate: 1e-2, epochs: 10, batch_size: 32, hidden_dim: 16, ..TrainConfig::default() };
    let adapters = train_adapters(&emb, 3, &cfg, TrainMode::AdapterOnly)?.adapters;
    let probes = apply_adapters_all(&emb, &adapters)?;

    for (ti, ta) in [(0.0, 1e9), (0.3, 5.0), (0.5, 1.0)] {
        let r = evaluate_2d(&probes, &EEConfig::new(ti, ta)?)?;
        println!(
            "tau_ignore {ti:<4} tau_acc {ta:<6} accuracy {:.3} speedup {:.2}x exits {}/{}",
            r.accuracy, r.speedup_total, r.exits, r.samples
        );
    }
    Ok(())
}
