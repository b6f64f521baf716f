//! Grid datasets: per-sample (layer x sentence) matrices of either class
//! distributions (probe grids) or sentence embeddings (embedding grids).
//!
//! On disk a dataset is JSON Lines. Line 1 is the manifest, every further
//! line is one sample:
//!
//! ```text
//! {"kind":"probe","num_classes":3,"num_layers":8,"samples":2,"provenance":"..."}
//! {"label":1,"cells":[[[0.2,0.7,0.1], ...], ...]}
//! ```
//!
//! `cells[i][k]` is the vector for layer `i`, sentence `k`. The number of
//! sentences may vary per sample; layers and classes are dataset-global.
//!
//! Cell `(i, k)` must be computed from sentences `0..=k` only. That causality
//! contract cannot be checked from file contents; producers are responsible
//! for it (causal masking in an extractor, construction in [`crate::synth`]).

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{adapter_forward, AdapterParams};

/// Allowed absolute deviation of a distribution's sum from 1.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-5;

/// Where in a dataset an error was found.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Location {
    pub sample: Option<usize>,
    pub layer: Option<usize>,
    pub sentence: Option<usize>,
}

impl Location {
    pub fn sample(idx: usize) -> Self {
        Self { sample: Some(idx), ..Self::default() }
    }

    pub fn cell(layer: usize, sentence: usize) -> Self {
        Self { sample: None, layer: Some(layer), sentence: Some(sentence) }
    }

    fn in_sample(self, idx: usize) -> Self {
        Self { sample: Some(idx), ..self }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if let Some(s) = self.sample {
            parts.push(format!("sample {s}"));
        }
        if let Some(l) = self.layer {
            parts.push(format!("layer {l}"));
        }
        if let Some(k) = self.sentence {
            parts.push(format!("sentence {k}"));
        }
        if parts.is_empty() {
            f.write_str("dataset")
        } else {
            f.write_str(&parts.join(", "))
        }
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("SchemaError at {at}: {message}")]
    Schema { at: Location, message: String },
    #[error("NormalizationError at {at}: {message}")]
    Normalization { at: Location, message: String },
    #[error("InconsistentShape at {at}: {message}")]
    InconsistentShape { at: Location, message: String },
    #[error("DimensionMismatch: {message}")]
    DimensionMismatch { message: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl DataError {
    /// Short error name, used by the CLI.
    pub fn kind(&self) -> &'static str {
        match self {
            DataError::Schema { .. } => "SchemaError",
            DataError::Normalization { .. } => "NormalizationError",
            DataError::InconsistentShape { .. } => "InconsistentShape",
            DataError::DimensionMismatch { .. } => "DimensionMismatch",
            DataError::Io { .. } => "IoError",
        }
    }

    fn schema(at: Location, message: impl Into<String>) -> Self {
        DataError::Schema { at, message: message.into() }
    }

    fn shape(at: Location, message: impl Into<String>) -> Self {
        DataError::InconsistentShape { at, message: message.into() }
    }

    fn in_sample(self, idx: usize) -> Self {
        match self {
            DataError::Schema { at, message } => DataError::Schema { at: at.in_sample(idx), message },
            DataError::Normalization { at, message } => DataError::Normalization { at: at.in_sample(idx), message },
            DataError::InconsistentShape { at, message } => {
                DataError::InconsistentShape { at: at.in_sample(idx), message }
            }
            other => other,
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io { path: path.display().to_string(), source }
    }
}

/// A probability vector over `C >= 2` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistribution(Vec<f64>);

impl ClassDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, DataError> {
        Self::validate(&probs, Location::default())?;
        Ok(Self(probs))
    }

    pub fn uniform(num_classes: usize) -> Self {
        assert!(num_classes >= 2, "a distribution needs at least two classes");
        Self(vec![1.0 / num_classes as f64; num_classes])
    }

    /// Builder for values already known to be a softmax output.
    pub(crate) fn from_softmax(probs: Vec<f64>) -> Self {
        debug_assert!(Self::validate(&probs, Location::default()).is_ok());
        Self(probs)
    }

    fn validate(probs: &[f64], at: Location) -> Result<(), DataError> {
        if probs.len() < 2 {
            return Err(DataError::schema(at, format!("need at least 2 classes, got {}", probs.len())));
        }
        if let Some(bad) = probs.iter().find(|p| !p.is_finite()) {
            return Err(DataError::schema(at, format!("non-finite probability {bad}")));
        }
        if let Some(bad) = probs.iter().find(|p| **p < 0.0) {
            return Err(DataError::Normalization { at, message: format!("negative probability {bad}") });
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(DataError::Normalization { at, message: format!("probabilities sum to {sum}") });
        }
        Ok(())
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Index of the maximum; the first maximal entry wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-sample `L x m` matrix of class distributions produced by per-layer
/// classifiers over individual sentences.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeGrid {
    label: usize,
    num_classes: usize,
    /// `cells[layer][sentence]`
    cells: Vec<Vec<ClassDistribution>>,
}

impl ProbeGrid {
    pub fn new(label: usize, cells: Vec<Vec<ClassDistribution>>) -> Result<Self, DataError> {
        let (num_layers, num_sentences) = rectangular_shape(&cells)?;
        let num_classes = cells[0][0].num_classes();
        for (i, row) in cells.iter().enumerate() {
            for (k, cell) in row.iter().enumerate() {
                if cell.num_classes() != num_classes {
                    return Err(DataError::shape(
                        Location::cell(i, k),
                        format!("expected {num_classes} classes, found {}", cell.num_classes()),
                    ));
                }
            }
        }
        if label >= num_classes {
            return Err(DataError::schema(
                Location::default(),
                format!("label {label} out of range for {num_classes} classes"),
            ));
        }
        debug_assert!(num_layers >= 1 && num_sentences >= 1);
        Ok(Self { label, num_classes, cells })
    }

    /// Validates raw probability rows, reporting the offending cell.
    pub fn from_rows(label: usize, rows: Vec<Vec<Vec<f64>>>) -> Result<Self, DataError> {
        let mut cells = Vec::with_capacity(rows.len());
        for (i, row) in rows.into_iter().enumerate() {
            let mut out = Vec::with_capacity(row.len());
            for (k, probs) in row.into_iter().enumerate() {
                ClassDistribution::validate(&probs, Location::cell(i, k))?;
                out.push(ClassDistribution(probs));
            }
            cells.push(out);
        }
        Self::new(label, cells)
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_layers(&self) -> usize {
        self.cells.len()
    }

    pub fn num_sentences(&self) -> usize {
        self.cells[0].len()
    }

    pub fn cell(&self, layer: usize, sentence: usize) -> &ClassDistribution {
        &self.cells[layer][sentence]
    }

    pub fn rows(&self) -> &[Vec<ClassDistribution>] {
        &self.cells
    }
}

/// Per-sample `L x m` matrix of sentence embeddings (mean-pooled token
/// states of sentence `k` at the output of layer `i`).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGrid {
    label: usize,
    embed_dim: usize,
    cells: Vec<Vec<Vec<f64>>>,
}

impl EmbeddingGrid {
    pub fn new(label: usize, cells: Vec<Vec<Vec<f64>>>) -> Result<Self, DataError> {
        rectangular_shape(&cells)?;
        let embed_dim = cells[0][0].len();
        if embed_dim == 0 {
            return Err(DataError::schema(Location::cell(0, 0), "embedding dimension must be >= 1"));
        }
        for (i, row) in cells.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                if v.len() != embed_dim {
                    return Err(DataError::shape(
                        Location::cell(i, k),
                        format!("expected embedding dimension {embed_dim}, found {}", v.len()),
                    ));
                }
                if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
                    return Err(DataError::schema(Location::cell(i, k), format!("non-finite value {bad}")));
                }
            }
        }
        Ok(Self { label, embed_dim, cells })
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn num_layers(&self) -> usize {
        self.cells.len()
    }

    pub fn num_sentences(&self) -> usize {
        self.cells[0].len()
    }

    pub fn cell(&self, layer: usize, sentence: usize) -> &[f64] {
        &self.cells[layer][sentence]
    }

    /// All sentence embeddings of one layer, in sentence order.
    pub fn layer(&self, layer: usize) -> &[Vec<f64>] {
        &self.cells[layer]
    }

    pub fn rows(&self) -> &[Vec<Vec<f64>>] {
        &self.cells
    }
}

fn rectangular_shape<T>(cells: &[Vec<T>]) -> Result<(usize, usize), DataError> {
    if cells.is_empty() {
        return Err(DataError::schema(Location::default(), "grid has no layers"));
    }
    let m = cells[0].len();
    if m == 0 {
        return Err(DataError::schema(Location::default(), "grid has no sentences"));
    }
    if let Some((i, row)) = cells.iter().enumerate().find(|(_, r)| r.len() != m) {
        return Err(DataError::schema(
            Location { layer: Some(i), ..Location::default() },
            format!("ragged matrix: layer 0 has {m} sentences, layer {i} has {}", row.len()),
        ));
    }
    Ok((cells.len(), m))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridKind {
    Probe,
    Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub kind: GridKind,
    pub num_classes: usize,
    pub num_layers: usize,
    pub samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embed_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
    #[serde(default)]
    pub provenance: String,
}

impl DatasetManifest {
    /// Manifest describing `grids`; fails on an empty or inconsistent set.
    pub fn describe(grids: &Grids, num_classes: usize, provenance: impl Into<String>) -> Result<Self, DataError> {
        let (kind, num_layers, embed_dim) = match grids {
            Grids::Probe(g) => (GridKind::Probe, g.first().map(ProbeGrid::num_layers), None),
            Grids::Embedding(g) => {
                (GridKind::Embedding, g.first().map(EmbeddingGrid::num_layers), g.first().map(EmbeddingGrid::embed_dim))
            }
        };
        let num_layers = num_layers.ok_or_else(|| DataError::schema(Location::default(), "samples must be >= 1"))?;
        let manifest = Self {
            kind,
            num_classes,
            num_layers,
            samples: grids.len(),
            embed_dim,
            class_names: None,
            provenance: provenance.into(),
        };
        manifest.check_grids(grids)?;
        Ok(manifest)
    }

    fn check_header(&self) -> Result<(), DataError> {
        let at = Location::default();
        if self.samples == 0 {
            return Err(DataError::schema(at, "samples must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(DataError::schema(at, "num_classes must be >= 2"));
        }
        if self.num_layers == 0 {
            return Err(DataError::schema(at, "num_layers must be >= 1"));
        }
        if self.kind == GridKind::Embedding && self.embed_dim.is_none() {
            return Err(DataError::schema(at, "embedding manifest requires embed_dim"));
        }
        if let Some(names) = &self.class_names {
            if names.len() != self.num_classes {
                return Err(DataError::schema(
                    at,
                    format!("{} class names for {} classes", names.len(), self.num_classes),
                ));
            }
        }
        Ok(())
    }

    fn check_grids(&self, grids: &Grids) -> Result<(), DataError> {
        self.check_header()?;
        if grids.len() != self.samples {
            return Err(DataError::schema(
                Location::default(),
                format!("manifest declares {} samples, found {}", self.samples, grids.len()),
            ));
        }
        match (self.kind, grids) {
            (GridKind::Probe, Grids::Probe(g)) => {
                for (idx, grid) in g.iter().enumerate() {
                    self.check_probe(grid).map_err(|e| e.in_sample(idx))?;
                }
            }
            (GridKind::Embedding, Grids::Embedding(g)) => {
                for (idx, grid) in g.iter().enumerate() {
                    self.check_embedding(grid).map_err(|e| e.in_sample(idx))?;
                }
            }
            _ => return Err(DataError::schema(Location::default(), "manifest kind does not match grid kind")),
        }
        Ok(())
    }

    fn check_probe(&self, grid: &ProbeGrid) -> Result<(), DataError> {
        let at = Location::default();
        if grid.num_layers() != self.num_layers {
            return Err(DataError::shape(
                at,
                format!("expected {} layers, found {}", self.num_layers, grid.num_layers()),
            ));
        }
        if grid.num_classes() != self.num_classes {
            return Err(DataError::shape(
                at,
                format!("expected {} classes, found {}", self.num_classes, grid.num_classes()),
            ));
        }
        Ok(())
    }

    fn check_embedding(&self, grid: &EmbeddingGrid) -> Result<(), DataError> {
        let at = Location::default();
        if grid.num_layers() != self.num_layers {
            return Err(DataError::shape(
                at,
                format!("expected {} layers, found {}", self.num_layers, grid.num_layers()),
            ));
        }
        if Some(grid.embed_dim()) != self.embed_dim {
            return Err(DataError::shape(
                at,
                format!("expected embed_dim {:?}, found {}", self.embed_dim, grid.embed_dim()),
            ));
        }
        if grid.label() >= self.num_classes {
            return Err(DataError::schema(
                at,
                format!("label {} out of range for {} classes", grid.label(), self.num_classes),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Grids {
    Probe(Vec<ProbeGrid>),
    Embedding(Vec<EmbeddingGrid>),
}

impl Grids {
    pub fn len(&self) -> usize {
        match self {
            Grids::Probe(g) => g.len(),
            Grids::Embedding(g) => g.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> GridKind {
        match self {
            Grids::Probe(_) => GridKind::Probe,
            Grids::Embedding(_) => GridKind::Embedding,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub grids: Grids,
}

impl Dataset {
    pub fn into_probe(self) -> Result<(DatasetManifest, Vec<ProbeGrid>), DataError> {
        match self.grids {
            Grids::Probe(g) => Ok((self.manifest, g)),
            Grids::Embedding(_) => Err(DataError::schema(Location::default(), "expected a probe dataset")),
        }
    }

    pub fn into_embedding(self) -> Result<(DatasetManifest, Vec<EmbeddingGrid>), DataError> {
        match self.grids {
            Grids::Embedding(g) => Ok((self.manifest, g)),
            Grids::Probe(_) => Err(DataError::schema(Location::default(), "expected an embedding dataset")),
        }
    }
}

#[derive(Deserialize)]
struct SampleRecord {
    label: usize,
    cells: Vec<Vec<Vec<f64>>>,
}

#[derive(Serialize)]
struct SampleRecordRef<'a> {
    label: usize,
    cells: Vec<Vec<&'a [f64]>>,
}

/// Reads and validates a dataset from any line-oriented reader.
pub fn read_dataset<R: BufRead>(reader: R) -> Result<Dataset, DataError> {
    let mut lines = reader.lines().enumerate().filter(|(_, l)| match l {
        Ok(l) => !l.trim().is_empty(),
        Err(_) => true,
    });
    let io_err = |e: std::io::Error| DataError::Io { path: "<reader>".into(), source: e };

    let (_, header) = lines.next().ok_or_else(|| DataError::schema(Location::default(), "missing manifest line"))?;
    let manifest: DatasetManifest = serde_json::from_str(&header.map_err(io_err)?)
        .map_err(|e| DataError::schema(Location::default(), format!("manifest: {e}")))?;
    manifest.check_header()?;

    let mut probes = Vec::new();
    let mut embeddings = Vec::new();
    let mut count = 0;
    for (line_no, line) in lines {
        let idx = count;
        count += 1;
        let line = line.map_err(io_err)?;
        let rec: SampleRecord = serde_json::from_str(&line)
            .map_err(|e| DataError::schema(Location::sample(idx), format!("line {}: {e}", line_no + 1)))?;
        match manifest.kind {
            GridKind::Probe => {
                let grid = ProbeGrid::from_rows(rec.label, rec.cells).map_err(|e| e.in_sample(idx))?;
                manifest.check_probe(&grid).map_err(|e| e.in_sample(idx))?;
                probes.push(grid);
            }
            GridKind::Embedding => {
                let grid = EmbeddingGrid::new(rec.label, rec.cells).map_err(|e| e.in_sample(idx))?;
                manifest.check_embedding(&grid).map_err(|e| e.in_sample(idx))?;
                embeddings.push(grid);
            }
        }
    }
    if count != manifest.samples {
        return Err(DataError::schema(
            Location::default(),
            format!("manifest declares {} samples, file contains {count}", manifest.samples),
        ));
    }
    let grids = match manifest.kind {
        GridKind::Probe => Grids::Probe(probes),
        GridKind::Embedding => Grids::Embedding(embeddings),
    };
    Ok(Dataset { manifest, grids })
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    read_dataset(BufReader::new(file)).map_err(|e| match e {
        DataError::Io { source, .. } => DataError::io(path, source),
        other => other,
    })
}

/// Writes `manifest` and `grids` as JSON Lines.
pub fn write_dataset<W: Write>(manifest: &DatasetManifest, grids: &Grids, mut out: W) -> std::io::Result<()> {
    serde_json::to_writer(&mut out, manifest)?;
    out.write_all(b"\n")?;
    match grids {
        Grids::Probe(g) => {
            for grid in g {
                let rec = SampleRecordRef {
                    label: grid.label(),
                    cells: grid.rows().iter().map(|r| r.iter().map(ClassDistribution::probs).collect()).collect(),
                };
                serde_json::to_writer(&mut out, &rec)?;
                out.write_all(b"\n")?;
            }
        }
        Grids::Embedding(g) => {
            for grid in g {
                let rec = SampleRecordRef {
                    label: grid.label(),
                    cells: grid.rows().iter().map(|r| r.iter().map(Vec::as_slice).collect()).collect(),
                };
                serde_json::to_writer(&mut out, &rec)?;
                out.write_all(b"\n")?;
            }
        }
    }
    out.flush()
}

pub fn save_dataset(manifest: &DatasetManifest, grids: &Grids, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    manifest.check_grids(grids)?;
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    write_dataset(manifest, grids, BufWriter::new(file)).map_err(|e| DataError::io(path, e))
}

/// Turns an embedding grid into a probe grid by running layer `i`'s adapter
/// on every sentence embedding of layer `i`.
pub fn apply_adapters(emb: &EmbeddingGrid, adapters: &[AdapterParams]) -> Result<ProbeGrid, DataError> {
    if adapters.len() != emb.num_layers() {
        return Err(DataError::DimensionMismatch {
            message: format!("{} adapters for {} layers", adapters.len(), emb.num_layers()),
        });
    }
    let num_classes = adapters[0].num_classes();
    for (i, a) in adapters.iter().enumerate() {
        if a.input_dim() != emb.embed_dim() {
            return Err(DataError::DimensionMismatch {
                message: format!("adapter {i} expects input_dim {}, grid has {}", a.input_dim(), emb.embed_dim()),
            });
        }
        if a.num_classes() != num_classes {
            return Err(DataError::DimensionMismatch {
                message: format!("adapter {i} has {} classes, adapter 0 has {num_classes}", a.num_classes()),
            });
        }
    }
    if emb.label() >= num_classes {
        return Err(DataError::schema(
            Location::default(),
            format!("label {} out of range for {num_classes} classes", emb.label()),
        ));
    }
    let cells = adapters
        .iter()
        .zip(emb.rows())
        .map(|(a, row)| row.iter().map(|x| adapter_forward(a, x)).collect::<Result<Vec<_>, _>>())
        .collect::<Result<Vec<_>, _>>()?;
    ProbeGrid::new(emb.label(), cells)
}

/// [`apply_adapters`] over a whole dataset, in parallel.
pub fn apply_adapters_all(embs: &[EmbeddingGrid], adapters: &[AdapterParams]) -> Result<Vec<ProbeGrid>, DataError> {
    embs.par_iter().enumerate().map(|(idx, g)| apply_adapters(g, adapters).map_err(|e| e.in_sample(idx))).collect()
}
