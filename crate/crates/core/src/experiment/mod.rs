//! Batch experiments: the analytical table, a corrupted shard group under a
//! client workload, and block reads under at-rest corruption.
//!
//! Every run is fully determined by an [`ExperimentSpec`]. Results are CSV
//! with a leading `# schema_version=N` line, and each run carries a list of
//! internal consistency [`Check`]s.

mod blockfs;
mod kv;
mod model;

use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blockfs::LegacyPolicy;
use crate::fault::InjectionMode;

pub use blockfs::{run_blockfs_experiment, BlockReadRow, BlockfsReport, ModeSummary, ReadMode};
pub use kv::{run_kv_experiment, KvReport, KvRow, KvSummary};
pub use model::{run_model_sweep, run_model_table, ModelRow, ModelTable};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("cannot read spec {path}: {source}")]
    ReadSpec {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("invalid spec: {0}")]
    Spec(#[from] toml::de::Error),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
    #[error("output {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("run aborted: {0}")]
    Run(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum System {
    Model,
    Kv,
    Blockfs,
}

/// Analytical model parameters for `system = "model"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelWorkload {
    pub block_bits: u64,
    pub chunk_bits: u64,
    pub replication: u32,
    /// Monte Carlo trials per row; zero skips the simulation.
    pub mc_trials: u64,
    /// Also emit the fixed reference table.
    pub include_table: bool,
}

impl Default for ModelWorkload {
    fn default() -> Self {
        Self { block_bits: 4096, chunk_bits: 512, replication: 3, mc_trials: 100_000, include_table: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KvWorkload {
    pub replicas: usize,
    pub ops: usize,
    pub key_space: usize,
    pub value_size: usize,
    pub read_fraction: f64,
    pub delete_fraction: f64,
    pub batch: usize,
    pub injection: InjectionMode,
    /// Probability that any message is lost in transit.
    pub drop_rate: f64,
    pub memtable_bytes: usize,
    pub block_capacity: usize,
    /// Range scans a healthy replica tries before abstaining from a patch.
    pub assembly_attempts: usize,
}

impl Default for KvWorkload {
    fn default() -> Self {
        Self {
            replicas: 3,
            ops: 5_000,
            key_space: 2_000,
            value_size: 100,
            read_fraction: 0.3,
            delete_fraction: 0.05,
            batch: 4,
            injection: InjectionMode::OnRead,
            drop_rate: 0.0,
            memtable_bytes: 16 * 1024,
            block_capacity: 1024,
            assembly_attempts: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockfsWorkload {
    pub files: usize,
    pub block_size: usize,
    pub reads: usize,
    pub modes: Vec<ReadMode>,
    pub legacy_policy: LegacyPolicy,
    /// Scrub all datanodes after the corruption phase of every read.
    pub scrub_before_read: bool,
}

impl Default for BlockfsWorkload {
    fn default() -> Self {
        Self {
            files: 4,
            block_size: 8 << 20,
            reads: 1_000,
            modes: vec![ReadMode::Direct, ReadMode::Legacy],
            legacy_policy: LegacyPolicy::WholeReplica,
            scrub_before_read: false,
        }
    }
}

/// A complete, reproducible experiment description (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub system: System,
    #[serde(default)]
    pub ubers: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelWorkload,
    #[serde(default)]
    pub kv: KvWorkload,
    #[serde(default)]
    pub blockfs: BlockfsWorkload,
}

impl ExperimentSpec {
    pub fn new(system: System) -> Self {
        Self {
            system,
            ubers: Vec::new(),
            seed: 0,
            output: None,
            model: ModelWorkload::default(),
            kv: KvWorkload::default(),
            blockfs: BlockfsWorkload::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::ReadSpec { path: path.into(), source })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if let Some(u) = self.ubers.iter().find(|u| !(0.0..=1.0).contains(*u)) {
            return Err(ExperimentError::Param(format!("uber {u} outside [0, 1]")));
        }
        let kv = &self.kv;
        if self.system == System::Kv && (kv.replicas == 0 || kv.key_space == 0 || kv.batch == 0) {
            return Err(ExperimentError::Param("kv replicas, key_space and batch must be positive".into()));
        }
        let b = &self.blockfs;
        if self.system == System::Blockfs && (b.files == 0 || b.block_size == 0 || b.modes.is_empty()) {
            return Err(ExperimentError::Param("blockfs files, block_size and modes must be non-empty".into()));
        }
        Ok(())
    }
}

/// One internal consistency check of a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, detail: detail.into() }
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}] {}: {}", if self.passed { "ok" } else { "FAIL" }, self.name, self.detail)
    }
}

/// Result of running any experiment.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub csv: String,
    pub checks: Vec<Check>,
}

impl Outcome {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn write_to(&self, path: &Path) -> Result<(), ExperimentError> {
        let mut f = std::fs::File::create(path).map_err(|source| ExperimentError::Write { path: path.into(), source })?;
        f.write_all(self.csv.as_bytes()).map_err(|source| ExperimentError::Write { path: path.into(), source })
    }
}

pub fn run(spec: &ExperimentSpec) -> Result<Outcome, ExperimentError> {
    spec.validate()?;
    match spec.system {
        System::Model => {
            let mut rows = if spec.model.include_table { run_model_table().rows } else { Vec::new() };
            rows.extend(run_model_sweep(spec)?.rows);
            let table = ModelTable { rows };
            Ok(Outcome { csv: table.to_csv()?, checks: table.checks() })
        }
        System::Kv => {
            let r = run_kv_experiment(spec)?;
            Ok(Outcome { csv: r.to_csv()?, checks: r.checks.clone() })
        }
        System::Blockfs => {
            let r = run_blockfs_experiment(spec)?;
            Ok(Outcome { csv: r.to_csv()?, checks: r.checks.clone() })
        }
    }
}

/// CSV text with the schema header line.
pub(crate) fn csv_text<S: Serialize>(system: &str, rows: &[S]) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let body = w.into_inner().map_err(|e| e.into_error())?;
    Ok(format!("# schema_version={SCHEMA_VERSION} system={system}\n{}", String::from_utf8(body).expect("csv is utf-8")))
}

/// Deviation of an observed failure count from probability `p`, in binomial
/// standard errors.
pub fn binomial_z(failures: u64, trials: u64, p: f64) -> f64 {
    let observed = failures as f64 / trials as f64;
    let se = (p * (1.0 - p) / trials as f64).sqrt();
    if se == 0.0 {
        if observed == p {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (observed - p).abs() / se
    }
}

/// Two-sided significance level matching three standard errors.
pub const MODEL_MATCH_ALPHA: f64 = 0.0027;

/// Exact binomial tails `(P[X <= k], P[X >= k])` for `X ~ Bin(n, p)`.
pub fn binomial_tails(k: u64, n: u64, p: f64) -> (f64, f64) {
    if p <= 0.0 {
        return (1.0, if k == 0 { 1.0 } else { 0.0 });
    }
    if p >= 1.0 {
        return (if k >= n { 1.0 } else { 0.0 }, 1.0);
    }
    let (lp, lq) = (p.ln(), (-p).ln_1p());
    let mut log_pmf = n as f64 * lq;
    let mut terms = Vec::with_capacity(k as usize + 1);
    for i in 0..=k.min(n) {
        terms.push(log_pmf);
        log_pmf += ((n - i) as f64).ln() - ((i + 1) as f64).ln() + lp - lq;
    }
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lower = (max.exp() * terms.iter().map(|t| (t - max).exp()).sum::<f64>()).min(1.0);
    let at_k = terms.last().copied().unwrap_or(f64::NEG_INFINITY).exp();
    (lower, (1.0 - lower + at_k).clamp(0.0, 1.0))
}

/// Whether `failures` out of `trials` is consistent with probability `p`:
/// neither exact tail is below half of [`MODEL_MATCH_ALPHA`]. Returns the
/// smaller tail too.
pub fn consistent_with(failures: u64, trials: u64, p: f64) -> (bool, f64) {
    let (lo, hi) = binomial_tails(failures, trials, p);
    let tail = lo.min(hi);
    (tail >= MODEL_MATCH_ALPHA / 2.0, tail)
}
