//! Two-dimensional (layer x sentence) early-exit inference for sequence
//! classification.
//!
//! The crate works on precomputed grids: for every sample, a matrix indexed
//! by encoder layer and sentence holding either a class distribution
//! ([`ProbeGrid`]) or a sentence embedding ([`EmbeddingGrid`]). Embedding
//! grids are turned into probe grids by small per-layer adapters
//! ([`adapters`]); probe grids are consumed by the early-exit engine
//! ([`engine`]), scored ([`metrics`]) and used to pick thresholds
//! ([`tuner`]).
//!
//! ```
//! use ee2d::{run_2d, ClassDistribution, EEConfig, ProbeGrid};
//!
//! let sure = |c: usize| {
//!     let mut p = vec![0.05; 3];
//!     p[c] = 0.9;
//!     ClassDistribution::new(p).unwrap()
//! };
//! let grid = ProbeGrid::new(2, vec![vec![sure(2), sure(2)]; 4]).unwrap();
//! let out = run_2d(&grid, &EEConfig::new(0.3, 1.0).unwrap());
//! assert_eq!(out.predicted_label, 2);
//! assert_eq!(out.operations_used, 2);
//! ```

pub mod adapters;
pub mod cli;
pub mod datamodel;
pub mod engine;
pub mod metrics;
pub mod synth;
pub mod textseg;
pub mod tuner;

pub use adapters::{AdapterParams, TrainConfig, TrainMode};
pub use datamodel::{ClassDistribution, Dataset, DatasetManifest, EmbeddingGrid, Grids, ProbeGrid};
pub use engine::{run_2d, traversal_plan, EEConfig, EEOutcome, ProbeSource, TraversalStep};
pub use metrics::EvalReport;
pub use synth::SynthSpec;
pub use textseg::{split_sentences, SentenceSplitter};
pub use tuner::{TuneGrid, TuneResult};
