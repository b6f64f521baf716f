//! Compares the best layer-wise exit with the 2D exit at the same allowed
//! accuracy loss on synthetic data.

use ee2d::adapters::{train_adapters, TrainConfig, TrainMode};
use ee2d::datamodel::apply_adapters_all;
use ee2d::metrics::{evaluate_2d, layerwise_baseline};
use ee2d::synth::{generate_dataset, saturating_ramp, SentenceCount, SynthSpec};
use ee2d::tuner::{grid_search, TuneGrid};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = |num_samples, seed| SynthSpec {
        num_samples,
        num_classes: 3,
        num_layers: 12,
        sentences: SentenceCount::Fixed(6),
        embed_dim: 12,
        layer_ramp: saturating_ramp(12, 0.1, 6),
        sentence_ramp: vec![0.6, 0.2, 0.1, 0.1, 0.0, 0.0],
        noise_sigma: 0.5,
        seed,
        cumulative: true,
    };
    let train = generate_dataset(&spec(400, 1))?;
    let test = generate_dataset(&spec(600, 2))?;
    let cfg = TrainConfig { learning_rate: 1e-3, epochs: 20, hidden_dim: 32, ..TrainConfig::default() };
    let adapters = train_adapters(&train, 3, &cfg, TrainMode::AdapterOnly)?.adapters;
    let probes = apply_adapters_all(&test, &adapters)?;

    let base = layerwise_baseline(&probes, 0.01)?;
    let acc: Vec<String> = base.profile.acc.iter().map(|a| format!("{a:.2}")).collect();
    println!("layer accuracy [{}]", acc.join(" "));
    println!("layer-wise: exit after layer {} of 12, {:.2}x", base.exit_layer, base.speedup);

    let tuned = grid_search(&probes, &TuneGrid::default(), base.acc_thr)?;
    let r = evaluate_2d(&probes, &tuned.best_cfg)?;
    println!(
        "2D: tau_ignore {:.2} tau_acc {:.2}, accuracy {:.3}, {:.2}x ({:.2}x over layer-wise)",
        tuned.best_cfg.tau_ignore,
        tuned.best_cfg.tau_acc,
        r.accuracy,
        r.speedup_total,
        r.speedup_total / base.speedup
    );
    Ok(())
}
