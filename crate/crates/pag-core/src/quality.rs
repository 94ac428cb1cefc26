//! Quality space and the sampling pipeline that populates it.
//!
//! Every input maps to a quality point `(ρ, κ)`: its local robustness radius
//! and the model's confidence. A counterexample range `R(ρ, κ)` collects the
//! points that are *less* robust than ρ while being *at least* as confident
//! as κ — strict on the radius, inclusive on the confidence:
//! `(ρ′, κ′) ∈ R(ρ, κ) ⟺ ρ′ < ρ ∧ κ′ ≥ κ`.
//!
//! `build_quality_sample` draws inputs by picking a dataset row uniformly,
//! adding i.i.d. Gaussian noise per dimension, and clamping into the input
//! box (default noise scale 8/256); then asks the chosen oracle for ρ and
//! takes κ from the model (or from the external tool). Each draw index owns
//! an independent, seed-derived random stream, so results are byte-identical
//! for any worker count, and the sample file can be appended to and resumed
//! across runs. A sidecar JSON document records everything needed to
//! reproduce or safely resume the sample, plus a completion marker.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::CertificateParams;
use crate::error::{PagError, Result};
use crate::external::{query_pool, ExternalOracleCmd};
use crate::model::MlpModel;
use crate::oracles::{run_oracle, OracleChoice, OracleConfig, OracleKind};

/// Default sampling noise scale: 8/256 in pixel units.
pub const DEFAULT_NOISE_SIGMA: f64 = 8.0 / 256.0;

/// Position of an input in quality space: robustness radius and confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityPoint {
    pub rho: f64,
    pub kappa: f64,
}

/// The set of quality points strictly less robust than `rho` with
/// confidence at least `kappa`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleRange {
    pub rho: f64,
    pub kappa: f64,
}

impl CounterexampleRange {
    /// Membership test: strict on the radius, inclusive on the confidence.
    pub fn contains(&self, q: &QualityPoint) -> bool {
        q.rho < self.rho && q.kappa >= self.kappa
    }
}

/// True iff any sample point lies in the range.
pub fn has_counterexample(points: &[QualityPoint], range: &CounterexampleRange) -> bool {
    points.iter().any(|q| range.contains(q))
}

/// The strongest witness in the range: the contained point of smallest
/// radius (first index on ties), or `None` if the range is empty of points.
pub fn find_counterexample(
    points: &[QualityPoint],
    range: &CounterexampleRange,
) -> Option<(usize, QualityPoint)> {
    let mut best: Option<(usize, QualityPoint)> = None;
    for (i, q) in points.iter().enumerate() {
        if range.contains(q) && best.map_or(true, |(_, b)| q.rho < b.rho) {
            best = Some((i, *q));
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

/// A table of base inputs: columns `feature_0..feature_{d-1}` plus an
/// optional trailing `label` column (carried through but not used by the
/// sampler — sampling is label-blind).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub features: Vec<Vec<f64>>,
    pub labels: Option<Vec<usize>>,
}

/// Reads a dataset CSV, validating the header shape and every cell.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let mut dim = 0;
    for (i, name) in headers.iter().enumerate() {
        let expect = format!("feature_{i}");
        if name == expect {
            dim = i + 1;
        } else if name == "label" && i == headers.len() - 1 && i == dim {
            break;
        } else {
            return Err(PagError::DatasetFormat(format!(
                "column {i} is `{name}`, expected `{expect}` or a trailing `label`"
            )));
        }
    }
    if dim == 0 {
        return Err(PagError::DatasetFormat("no feature columns".into()));
    }
    let has_label = headers.len() == dim + 1;

    let mut features = Vec::new();
    let mut labels = if has_label { Some(Vec::new()) } else { None };
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != headers.len() {
            return Err(PagError::DatasetFormat(format!(
                "row {row_idx} has {} cells, header has {}",
                record.len(),
                headers.len()
            )));
        }
        let mut row = Vec::with_capacity(dim);
        for j in 0..dim {
            let v: f64 = record[j].parse().map_err(|_| {
                PagError::DatasetFormat(format!("row {row_idx}, column {j}: `{}`", &record[j]))
            })?;
            if !v.is_finite() {
                return Err(PagError::DatasetFormat(format!(
                    "row {row_idx}, column {j}: non-finite value"
                )));
            }
            row.push(v);
        }
        if let Some(labels) = &mut labels {
            let l: usize = record[dim].parse().map_err(|_| {
                PagError::DatasetFormat(format!("row {row_idx}: bad label `{}`", &record[dim]))
            })?;
            labels.push(l);
        }
        features.push(row);
    }
    if features.is_empty() {
        return Err(PagError::DatasetFormat("dataset has no rows".into()));
    }
    Ok(Dataset { dim, features, labels })
}

/// Writes a dataset CSV in the canonical column layout.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..dataset.dim).map(|j| format!("feature_{j}")).collect();
    if dataset.labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header)?;
    for (i, row) in dataset.features.iter().enumerate() {
        let mut cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        if let Some(labels) = &dataset.labels {
            cells.push(labels[i].to_string());
        }
        w.write_record(&cells)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Sample construction
// ---------------------------------------------------------------------------

/// Where quality evaluations come from.
pub enum SampleBackend<'a> {
    /// A local model: `rho` from the chosen oracle, `kappa` from softmax.
    Model { model: &'a MlpModel, choice: OracleChoice, cfg: OracleConfig },
    /// An external tool speaking the line protocol: both values from the
    /// tool. Inputs are clamped to the unit box.
    External { cmd: &'a ExternalOracleCmd, timeout_ms: u64 },
}

impl SampleBackend<'_> {
    /// A short human-readable name for logs and sample metadata.
    pub fn describe(&self) -> String {
        match self {
            SampleBackend::Model { choice, .. } => {
                serde_json::to_value(choice).unwrap().as_str().unwrap().to_string()
            }
            SampleBackend::External { cmd, .. } => format!("external:{cmd}"),
        }
    }

    fn clamp_bounds(&self, j: usize) -> (f64, f64) {
        match self {
            SampleBackend::Model { model, .. } => model.box_bounds(j),
            SampleBackend::External { .. } => (0.0, 1.0),
        }
    }

    /// Content hash of the backing model; external tools cannot prove one.
    pub fn model_hash(&self) -> Option<String> {
        match self {
            SampleBackend::Model { model, .. } => Some(model.content_hash()),
            SampleBackend::External { .. } => None,
        }
    }

    fn oracle_config(&self) -> Option<OracleConfig> {
        match self {
            SampleBackend::Model { cfg, .. } => Some(*cfg),
            SampleBackend::External { .. } => None,
        }
    }
}

/// Sidecar metadata: everything needed to reproduce the sample, match a
/// resume against the original configuration, and tell a finished file from
/// an interrupted one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub noise_sigma: f64,
    pub oracle: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_config: Option<OracleConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_hash: Option<String>,
    /// The weakest result kind observed so far across the sample's oracle
    /// answers (kinds are not persisted per row, so the aggregate is folded
    /// incrementally and rewritten with every appended chunk).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_result_kind: Option<OracleKind>,
    pub requested_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<CertificateParams>,
    /// False while the CSV is still being appended to.
    pub complete: bool,
}

impl SampleMeta {
    /// The fields that must agree for a resume to be legitimate (everything
    /// except the completion marker).
    fn matches(&self, other: &SampleMeta) -> bool {
        self.seed == other.seed
            && self.noise_sigma == other.noise_sigma
            && self.oracle == other.oracle
            && self.oracle_config == other.oracle_config
            && self.model_hash == other.model_hash
            && self.requested_size == other.requested_size
            && self.params == other.params
    }
}

/// A completed quality sample with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct QualitySample {
    pub points: Vec<QualityPoint>,
    pub meta: SampleMeta,
}

/// On-disk home of a sample: an append-only CSV (`index,rho,kappa`) plus the
/// sidecar `<csv>.meta.json`.
#[derive(Debug, Clone)]
pub struct SampleStore {
    pub csv_path: PathBuf,
}

impl SampleStore {
    pub fn new(csv_path: impl Into<PathBuf>) -> Self {
        SampleStore { csv_path: csv_path.into() }
    }

    pub fn meta_path(&self) -> PathBuf {
        let mut os = self.csv_path.clone().into_os_string();
        os.push(".meta.json");
        PathBuf::from(os)
    }

    fn write_meta(&self, meta: &SampleMeta) -> Result<()> {
        let file = std::fs::File::create(self.meta_path())?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), meta)?;
        Ok(())
    }

    fn read_meta(&self) -> Result<Option<SampleMeta>> {
        match std::fs::File::open(self.meta_path()) {
            Ok(f) => Ok(Some(serde_json::from_reader(std::io::BufReader::new(f))?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Parses already-persisted rows, validating the contiguous index column.
    fn read_rows(&self) -> Result<Vec<QualityPoint>> {
        let file = match std::fs::File::open(&self.csv_path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        let mut points = Vec::new();
        for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if n == 0 {
                if line.trim() != "index,rho,kappa" {
                    return Err(PagError::InconsistentParams(format!(
                        "sample file {} has unexpected header `{line}`",
                        self.csv_path.display()
                    )));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let mut cells = line.split(',');
            let bad = || {
                PagError::InconsistentParams(format!(
                    "sample file {} row {n} is malformed",
                    self.csv_path.display()
                ))
            };
            let idx: usize = cells.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            let rho: f64 = cells.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            let kappa: f64 = cells.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            if idx != points.len() || cells.next().is_some() {
                return Err(bad());
            }
            points.push(QualityPoint { rho, kappa });
        }
        Ok(points)
    }

    fn append_rows(&self, start_index: usize, rows: &[QualityPoint], new_file: bool) -> Result<()> {
        let mut file = std::io::BufWriter::new(
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&self.csv_path)?,
        );
        if new_file {
            writeln!(file, "index,rho,kappa")?;
        }
        for (offset, q) in rows.iter().enumerate() {
            writeln!(file, "{},{},{}", start_index + offset, q.rho, q.kappa)?;
        }
        file.flush()?;
        Ok(())
    }
}

/// The input for draw `index`: a uniformly chosen dataset row plus
/// independent Gaussian noise per dimension, clamped into `bounds`.
///
/// Each index derives its own counter-mode stream from the master seed, so
/// draws are independent of evaluation order and worker count.
pub fn draw_input(
    dataset: &Dataset,
    index: u64,
    noise_sigma: f64,
    seed: u64,
    bounds: impl Fn(usize) -> (f64, f64),
) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let row = &dataset.features[rng.gen_range(0..dataset.features.len())];
    let noise = rand_distr::Normal::new(0.0, noise_sigma).expect("validated sigma");
    row.iter()
        .enumerate()
        .map(|(j, v)| {
            let (lo, hi) = bounds(j);
            (v + rng.sample(noise)).clamp(lo, hi)
        })
        .collect()
}

/// Draws `size` quality points through the chosen backend.
///
/// With a `store`, rows are appended in draw-index order as they complete
/// (chunk by chunk), an existing partial file with matching metadata is
/// resumed from where it stopped, and the sidecar's completion marker is set
/// only at the end. An existing complete file with matching metadata is
/// simply loaded.
pub fn build_quality_sample(
    dataset: &Dataset,
    backend: &SampleBackend,
    size: usize,
    noise_sigma: f64,
    seed: u64,
    workers: usize,
    params: Option<&CertificateParams>,
    store: Option<&SampleStore>,
) -> Result<QualitySample> {
    if size == 0 {
        return Err(PagError::range("size", 0.0, "integer >= 1"));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(PagError::range("noise_sigma", noise_sigma, "finite >= 0"));
    }
    if let SampleBackend::Model { model, cfg, .. } = backend {
        model.validate()?;
        cfg.validate()?;
        if model.input_dim != dataset.dim {
            return Err(PagError::InconsistentParams(format!(
                "model expects {} input dimensions, dataset has {}",
                model.input_dim, dataset.dim
            )));
        }
    }

    let mut meta = SampleMeta {
        seed,
        noise_sigma,
        oracle: backend.describe(),
        oracle_config: backend.oracle_config(),
        model_hash: backend.model_hash(),
        oracle_result_kind: None,
        requested_size: size,
        params: params.copied(),
        complete: false,
    };

    // Resume bookkeeping.
    let mut points: Vec<QualityPoint> = Vec::with_capacity(size);
    if let Some(store) = store {
        match store.read_meta()? {
            None => {
                if store.csv_path.exists() {
                    return Err(PagError::InconsistentParams(format!(
                        "sample file {} exists without its sidecar; refusing to touch it",
                        store.csv_path.display()
                    )));
                }
                store.write_meta(&meta)?;
            }
            Some(existing) => {
                if !existing.matches(&meta) {
                    return Err(PagError::InconsistentParams(format!(
                        "existing sample at {} was built with different settings",
                        store.csv_path.display()
                    )));
                }
                points = store.read_rows()?;
                if points.len() > size {
                    return Err(PagError::InconsistentParams(format!(
                        "existing sample has {} rows, more than the requested {size}",
                        points.len()
                    )));
                }
                if existing.complete {
                    if points.len() != size {
                        return Err(PagError::InconsistentParams(
                            "sample marked complete but row count disagrees".into(),
                        ));
                    }
                    return Ok(QualitySample { points, meta: existing });
                }
                // Continue folding result kinds from where the partial run
                // left off.
                meta.oracle_result_kind = existing.oracle_result_kind;
            }
        }
    }

    const CHUNK: usize = 4096;
    while points.len() < size {
        let start = points.len();
        let end = (start + CHUNK).min(size);
        let inputs: Vec<Vec<f64>> = (start..end)
            .map(|i| draw_input(dataset, i as u64, noise_sigma, seed, |j| backend.clamp_bounds(j)))
            .collect();
        let (chunk, chunk_kind) = evaluate_inputs(backend, &inputs, start, workers)?;
        meta.oracle_result_kind = match (meta.oracle_result_kind, chunk_kind) {
            (Some(a), Some(b)) => Some(a.weaker(b)),
            (a, b) => a.or(b),
        };
        if let Some(store) = store {
            store.append_rows(start, &chunk, start == 0)?;
            store.write_meta(&meta)?;
        }
        points.extend(chunk);
    }

    let meta = SampleMeta { complete: true, ..meta };
    if let Some(store) = store {
        store.write_meta(&meta)?;
    }
    Ok(QualitySample { points, meta })
}

/// Evaluates the quality of the given inputs, in order, through the backend.
/// Returns the points together with the weakest oracle result kind observed.
/// Failures carry the index `base_index + position`.
fn evaluate_inputs(
    backend: &SampleBackend,
    inputs: &[Vec<f64>],
    base_index: usize,
    workers: usize,
) -> Result<(Vec<QualityPoint>, Option<OracleKind>)> {
    match backend {
        SampleBackend::Model { model, choice, cfg } => {
            let work = |(offset, x): (usize, &Vec<f64>)| -> Result<(QualityPoint, OracleKind)> {
                let result = run_oracle(model, x, *choice, cfg)
                    .map_err(|e| e.at_index(base_index + offset))?;
                let kappa = model.forward(x).confidence;
                Ok((QualityPoint { rho: result.radius, kappa }, result.kind))
            };
            let evaluated: Result<Vec<(QualityPoint, OracleKind)>> = if workers == 1 {
                inputs.iter().enumerate().map(work).collect()
            } else {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .map_err(|e| PagError::InconsistentParams(format!("thread pool: {e}")))?;
                pool.install(|| inputs.par_iter().enumerate().map(work).collect())
            };
            let evaluated = evaluated?;
            let kind = evaluated.iter().map(|(_, k)| *k).reduce(OracleKind::weaker);
            Ok((evaluated.into_iter().map(|(q, _)| q).collect(), kind))
        }
        SampleBackend::External { cmd, timeout_ms } => {
            let answers = query_pool(cmd, *timeout_ms, workers, inputs).map_err(|e| {
                let index = match &e {
                    PagError::OracleTimeout { request_id, .. } => {
                        Some(base_index + *request_id as usize)
                    }
                    PagError::ProtocolViolation { request_id: Some(id), .. } => {
                        Some(base_index + *id as usize)
                    }
                    // For a crash the first unanswered position stands in
                    // for the failing draw (exact for in-order tools).
                    PagError::ToolCrash { completed, .. } => Some(base_index + completed),
                    _ => None,
                };
                match index {
                    Some(i) => e.at_index(i),
                    None => e,
                }
            })?;
            let kind = answers.iter().map(|a| a.oracle.kind).reduce(OracleKind::weaker);
            let points = answers
                .into_iter()
                .map(|a| QualityPoint { rho: a.oracle.radius, kappa: a.kappa })
                .collect();
            Ok((points, kind))
        }
    }
}

/// Quality of each dataset row itself (no noise, no subsampling), in row
/// order — the evaluation-time counterpart of `build_quality_sample`.
pub fn evaluate_rows(
    dataset: &Dataset,
    backend: &SampleBackend,
    workers: usize,
) -> Result<Vec<QualityPoint>> {
    if let SampleBackend::Model { model, cfg, .. } = backend {
        model.validate()?;
        cfg.validate()?;
        if model.input_dim != dataset.dim {
            return Err(PagError::InconsistentParams(format!(
                "model expects {} input dimensions, dataset has {}",
                model.input_dim, dataset.dim
            )));
        }
    }
    let mut points = Vec::with_capacity(dataset.features.len());
    const CHUNK: usize = 4096;
    for (c, chunk) in dataset.features.chunks(CHUNK).enumerate() {
        let (chunk_points, _) = evaluate_inputs(backend, chunk, c * CHUNK, workers)?;
        points.extend(chunk_points);
    }
    Ok(points)
}
