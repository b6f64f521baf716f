//! Writes a small probe set as JSONL, reads it back and prints the
//! manifest line.

use ee2d::datamodel::{load_dataset, save_dataset, DatasetManifest, Grids};
use ee2d::ProbeGrid;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let grids = vec![
        ProbeGrid::from_rows(0, vec![vec![vec![0.9, 0.1]], vec![vec![0.8, 0.2]]])?,
        ProbeGrid::from_rows(1, vec![vec![vec![0.6, 0.4], vec![0.3, 0.7]], vec![vec![0.5, 0.5], vec![0.1, 0.9]]])?,
    ];
    let grids = Grids::Probe(grids);
    let manifest = DatasetManifest::describe(&grids, 2, "handwritten")?;
    let path = std::env::temp_dir().join("ee2d_example_probe.jsonl");
    save_dataset(&manifest, &grids, &path)?;
    println!("{}", std::fs::read_to_string(&path)?.lines().next().unwrap_or_default());

    let (manifest, probes) = load_dataset(&path)?.into_probe()?;
    println!(
        "{} samples, {} layers, sentences per sample {:?}",
        manifest.samples,
        manifest.num_layers,
        probes.iter().map(|g| g.num_sentences()).collect::<Vec<_>>()
    );
    Ok(())
}
