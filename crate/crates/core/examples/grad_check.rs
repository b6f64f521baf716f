//! Compares analytic gradients with central differences for both
//! training objectives.

use ee2d::adapters::{default_layer_weights, grad_check, AdapterParams, Objective};
use ee2d::EmbeddingGrid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (layers, sentences, dim, classes) = (3, 4, 5, 3);
    let cells = (0..layers)
        .map(|_| (0..sentences).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
        .collect();
    let emb = EmbeddingGrid::new(2, cells)?;
    let adapters: Vec<_> = (0..layers).map(|_| AdapterParams::init(dim, 8, classes, &mut rng)).collect();

    let weights = default_layer_weights(layers);
    for (name, objective) in [
        ("adapter-only, layer 1", Objective::AdapterOnly { layer: 1 }),
        ("joint", Objective::Aggregate { weights: &weights }),
    ] {
        let r = grad_check(objective, &adapters, &emb, 1e-5, 50, 0)?;
        println!("{name}: {} coords, max relative error {:.2e}", r.coords.len(), r.max_rel_error);
    }
    Ok(())
}
