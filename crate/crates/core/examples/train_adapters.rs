//! Trains per-layer adapters on synthetic embeddings with both objectives
//! and writes the adapter-only stack to a temporary file.

use ee2d::adapters::{load_adapters, save_adapters, train_adapters, training_accuracy, TrainConfig, TrainMode};
use ee2d::synth::{generate_dataset, linear_ramp, SentenceCount, SynthSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SynthSpec {
        num_samples: 200,
        num_classes: 2,
        num_layers: 4,
        sentences: SentenceCount::Fixed(3),
        embed_dim: 6,
        layer_ramp: linear_ramp(4, 0.2, 1.0),
        sentence_ramp: vec![0.5, 0.3, 0.2],
        noise_sigma: 0.3,
        seed: 1,
        cumulative: true,
    };
    let emb = generate_dataset(&spec)?;
    let cfg = TrainConfig { learning_rate: 1e-2, epochs: 8, batch_size: 32, hidden_dim: 12, ..TrainConfig::default() };

    for mode in [TrainMode::AdapterOnly, TrainMode::JointFtLoss] {
        let out = train_adapters(&emb, 2, &cfg, mode)?;
        let acc: Vec<String> =
            (0..4).map(|l| format!("{:.2}", training_accuracy(&out.adapters[l], &emb, l, mode))).collect();
        println!("{mode:?}: final loss {:.4}, accuracy per layer [{}]", out.loss_trace.last().unwrap(), acc.join(", "));
        if mode == TrainMode::AdapterOnly {
            let path = std::env::temp_dir().join("ee2d_example_adapters.jsonl");
            save_adapters(&out.adapters, &path)?;
            assert_eq!(load_adapters(&path)?, out.adapters);
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}
