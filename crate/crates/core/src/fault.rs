//! Deterministic bit-flip injection over a simulated storage device.
//!
//! [`StorageEnv`] wraps a [`Backing`] store. With an [`InjectorConfig`] in
//! `OnRead` mode every bit returned by [`StorageEnv::read_through`] is flipped
//! independently with probability `uber`; the stored bytes are never touched.
//! In `AtRest` mode, [`StorageEnv::corrupt_at_rest`] flips stored bits in place
//! and reports each flip.
//!
//! Flip positions come from a counter-based stream: each 512-byte page is
//! keyed by `(seed, file, page index, read epoch)`, so the flips seen for a
//! given byte do not depend on how reads are split or interleaved. The epoch
//! advances per read of a file unless the injector is `sticky`, in which case
//! every read of a page sees the same flips.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bits per injection page.
pub const PAGE_BITS: u64 = 4096;

/// Draws gaps between successive flipped bits of a Bernoulli(`uber`) stream
/// by inverting the geometric CDF.
#[derive(Debug, Clone, Copy)]
pub struct FlipSampler {
    /// `ln(1 - uber)`, or `None` for a zero rate.
    log_q: Option<f64>,
}

impl FlipSampler {
    pub fn new(uber: f64) -> Self {
        let log_q = (uber > 0.0).then(|| (-uber.min(1.0)).ln_1p());
        Self { log_q }
    }

    /// Number of clean bits before the next flipped one, or `None` if the
    /// rate is zero.
    pub fn next_gap<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<u64> {
        let log_q = self.log_q?;
        let u = 1.0 - rng.random::<f64>();
        // Saturates to u64::MAX for astronomically long gaps.
        Some((u.ln() / log_q) as u64)
    }

    /// Positions in `[0, len_bits)` that are flipped.
    pub fn positions<R: Rng + ?Sized>(&self, rng: &mut R, len_bits: u64) -> Vec<u64> {
        let mut out = Vec::new();
        let mut pos = 0u64;
        while let Some(gap) = self.next_gap(rng) {
            match pos.checked_add(gap) {
                Some(p) if p < len_bits => {
                    out.push(p);
                    pos = p + 1;
                }
                _ => break,
            }
        }
        out
    }
}

/// Persistent byte store addressed by slash-separated names.
pub trait Backing: Send + Sync + std::fmt::Debug {
    fn read(&self, name: &str, offset: u64, len: usize) -> io::Result<Vec<u8>>;
    /// Creates or replaces the whole file.
    fn write(&self, name: &str, data: &[u8]) -> io::Result<()>;
    fn append(&self, name: &str, data: &[u8]) -> io::Result<()>;
    fn write_at(&self, name: &str, offset: u64, data: &[u8]) -> io::Result<()>;
    fn len(&self, name: &str) -> io::Result<u64>;
    fn delete(&self, name: &str) -> io::Result<()>;
    fn exists(&self, name: &str) -> bool;
    fn list(&self) -> Vec<String>;

    fn read_all(&self, name: &str) -> io::Result<Vec<u8>> {
        let len = self.len(name)?;
        self.read(name, 0, len as usize)
    }

    fn flip_bit(&self, name: &str, bit: u64) -> io::Result<()> {
        let mut byte = self.read(name, bit / 8, 1)?;
        byte[0] ^= 1 << (bit % 8);
        self.write_at(name, bit / 8, &byte)
    }
}

fn not_found(name: &str) -> io::Error {
    io::Error::new(io::ErrorKind::NotFound, format!("no such file: {name}"))
}

fn out_of_range(name: &str) -> io::Error {
    io::Error::new(io::ErrorKind::UnexpectedEof, format!("range outside file: {name}"))
}

#[derive(Debug, Default)]
pub struct MemBacking {
    files: RwLock<BTreeMap<String, Vec<u8>>>,
}

impl MemBacking {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Backing for MemBacking {
    fn read(&self, name: &str, offset: u64, len: usize) -> io::Result<Vec<u8>> {
        let files = self.files.read().unwrap();
        let data = files.get(name).ok_or_else(|| not_found(name))?;
        let start = usize::try_from(offset).map_err(|_| out_of_range(name))?;
        let end = start.checked_add(len).ok_or_else(|| out_of_range(name))?;
        data.get(start..end).map(<[u8]>::to_vec).ok_or_else(|| out_of_range(name))
    }

    fn write(&self, name: &str, data: &[u8]) -> io::Result<()> {
        self.files.write().unwrap().insert(name.to_string(), data.to_vec());
        Ok(())
    }

    fn append(&self, name: &str, data: &[u8]) -> io::Result<()> {
        self.files.write().unwrap().entry(name.to_string()).or_default().extend_from_slice(data);
        Ok(())
    }

    fn write_at(&self, name: &str, offset: u64, data: &[u8]) -> io::Result<()> {
        let mut files = self.files.write().unwrap();
        let file = files.get_mut(name).ok_or_else(|| not_found(name))?;
        let start = offset as usize;
        let end = start + data.len();
        if end > file.len() {
            file.resize(end, 0);
        }
        file[start..end].copy_from_slice(data);
        Ok(())
    }

    fn len(&self, name: &str) -> io::Result<u64> {
        let files = self.files.read().unwrap();
        files.get(name).map(|d| d.len() as u64).ok_or_else(|| not_found(name))
    }

    fn delete(&self, name: &str) -> io::Result<()> {
        self.files.write().unwrap().remove(name).map(|_| ()).ok_or_else(|| not_found(name))
    }

    fn exists(&self, name: &str) -> bool {
        self.files.read().unwrap().contains_key(name)
    }

    fn list(&self) -> Vec<String> {
        self.files.read().unwrap().keys().cloned().collect()
    }
}

/// Files under a directory on the local file system. Writes are synced.
#[derive(Debug)]
pub struct DirBacking {
    root: PathBuf,
}

impl DirBacking {
    pub fn new(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn ensure_parent(path: &Path) -> io::Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(())
    }
}

impl Backing for DirBacking {
    fn read(&self, name: &str, offset: u64, len: usize) -> io::Result<Vec<u8>> {
        let mut f = fs::File::open(self.path(name))?;
        f.seek(SeekFrom::Start(offset))?;
        let mut buf = vec![0u8; len];
        f.read_exact(&mut buf)?;
        Ok(buf)
    }

    fn write(&self, name: &str, data: &[u8]) -> io::Result<()> {
        let path = self.path(name);
        Self::ensure_parent(&path)?;
        let tmp = path.with_extension("tmp-write");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(data)?;
            f.sync_all()?;
        }
        fs::rename(tmp, path)
    }

    fn append(&self, name: &str, data: &[u8]) -> io::Result<()> {
        let path = self.path(name);
        Self::ensure_parent(&path)?;
        let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
        f.write_all(data)?;
        f.sync_data()
    }

    fn write_at(&self, name: &str, offset: u64, data: &[u8]) -> io::Result<()> {
        let mut f = fs::OpenOptions::new().write(true).open(self.path(name))?;
        f.seek(SeekFrom::Start(offset))?;
        f.write_all(data)?;
        f.sync_data()
    }

    fn len(&self, name: &str) -> io::Result<u64> {
        Ok(fs::metadata(self.path(name))?.len())
    }

    fn delete(&self, name: &str) -> io::Result<()> {
        fs::remove_file(self.path(name))
    }

    fn exists(&self, name: &str) -> bool {
        self.path(name).is_file()
    }

    fn list(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut stack = vec![self.root.clone()];
        while let Some(dir) = stack.pop() {
            let Ok(entries) = fs::read_dir(&dir) else { continue };
            for entry in entries.flatten() {
                let path = entry.path();
                if path.is_dir() {
                    stack.push(path);
                } else if let Ok(rel) = path.strip_prefix(&self.root) {
                    out.push(rel.to_string_lossy().replace(std::path::MAIN_SEPARATOR, "/"));
                }
            }
        }
        out.sort();
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionMode {
    OnRead,
    AtRest,
}

#[derive(Debug, Error)]
pub enum ScopeError {
    #[error("bad scope glob {glob:?}: {source}")]
    Glob {
        glob: String,
        #[source]
        source: glob::PatternError,
    },
}

/// Which files the injector may touch. Consensus log files (`*.log`) are
/// excluded unless a scope explicitly clears the exclusions.
#[derive(Debug, Clone)]
pub struct Scope {
    include: Vec<glob::Pattern>,
    exclude: Vec<glob::Pattern>,
}

impl Default for Scope {
    fn default() -> Self {
        Self { include: Vec::new(), exclude: vec![glob::Pattern::new("*.log").expect("static glob")] }
    }
}

impl Scope {
    pub fn glob(pattern: &str) -> Result<Self, ScopeError> {
        let p = glob::Pattern::new(pattern).map_err(|source| ScopeError::Glob { glob: pattern.into(), source })?;
        Ok(Self { include: vec![p], ..Self::default() })
    }

    pub fn everything() -> Self {
        Self { include: Vec::new(), exclude: Vec::new() }
    }

    pub fn matches(&self, name: &str) -> bool {
        (self.include.is_empty() || self.include.iter().any(|p| p.matches(name)))
            && !self.exclude.iter().any(|p| p.matches(name))
    }
}

#[derive(Debug, Clone)]
pub struct InjectorConfig {
    pub uber: f64,
    pub mode: InjectionMode,
    pub seed: u64,
    pub scope: Scope,
    /// Freeze the read epoch so re-reads see identical flips.
    pub sticky: bool,
}

impl InjectorConfig {
    pub fn on_read(uber: f64, seed: u64) -> Self {
        Self { uber, mode: InjectionMode::OnRead, seed, scope: Scope::default(), sticky: false }
    }

    pub fn at_rest(uber: f64, seed: u64) -> Self {
        Self { uber, mode: InjectionMode::AtRest, seed, scope: Scope::default(), sticky: false }
    }

    pub fn with_scope(mut self, scope: Scope) -> Self {
        self.scope = scope;
        self
    }

    pub fn sticky(mut self, sticky: bool) -> Self {
        self.sticky = sticky;
        self
    }
}

/// The `[injector]` table of an experiment config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectorSection {
    pub uber: f64,
    pub mode: InjectionMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(rename = "scope-glob", default)]
    pub scope_glob: Option<String>,
    #[serde(default)]
    pub sticky: bool,
}

impl InjectorSection {
    pub fn to_config(&self) -> Result<InjectorConfig, ScopeError> {
        let scope = match &self.scope_glob {
            Some(g) => Scope::glob(g)?,
            None => Scope::default(),
        };
        Ok(InjectorConfig { uber: self.uber, mode: self.mode, seed: self.seed, scope, sticky: self.sticky })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorruptionReport {
    /// `(file, bit offset)` for every flipped bit, in file then offset order.
    pub flips: Vec<(String, u64)>,
    /// Set when an I/O error stopped the pass early.
    pub aborted: Option<String>,
}

impl CorruptionReport {
    pub fn len(&self) -> usize {
        self.flips.len()
    }
    pub fn is_empty(&self) -> bool {
        self.flips.is_empty()
    }
}

/// 64-bit FNV-1a, used to key the flip stream by file name.
fn name_key(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

fn keyed_rng(seed: u64, file: u64, page: u64, epoch: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (i, word) in [seed, file, page, epoch].into_iter().enumerate() {
        key[i * 8..i * 8 + 8].copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Storage with optional fault injection and read/flip counters.
#[derive(Debug)]
pub struct StorageEnv {
    backing: Arc<dyn Backing>,
    injector: RwLock<Option<InjectorConfig>>,
    bits_read: AtomicU64,
    bits_flipped: AtomicU64,
    epochs: Mutex<HashMap<String, u64>>,
    at_rest_round: AtomicU64,
}

impl StorageEnv {
    pub fn new(backing: Arc<dyn Backing>) -> Self {
        Self {
            backing,
            injector: RwLock::new(None),
            bits_read: AtomicU64::new(0),
            bits_flipped: AtomicU64::new(0),
            epochs: Mutex::new(HashMap::new()),
            at_rest_round: AtomicU64::new(0),
        }
    }

    pub fn in_memory() -> Self {
        Self::new(Arc::new(MemBacking::new()))
    }

    pub fn with_injector(self, config: InjectorConfig) -> Self {
        self.set_injector(Some(config));
        self
    }

    pub fn set_injector(&self, config: Option<InjectorConfig>) {
        *self.injector.write().unwrap() = config;
    }

    pub fn injector(&self) -> Option<InjectorConfig> {
        self.injector.read().unwrap().clone()
    }

    pub fn backing(&self) -> &Arc<dyn Backing> {
        &self.backing
    }

    pub fn bits_read(&self) -> u64 {
        self.bits_read.load(Ordering::Relaxed)
    }

    pub fn bits_flipped(&self) -> u64 {
        self.bits_flipped.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.bits_read.store(0, Ordering::Relaxed);
        self.bits_flipped.store(0, Ordering::Relaxed);
    }

    fn next_epoch(&self, name: &str, sticky: bool) -> u64 {
        if sticky {
            return 0;
        }
        let mut epochs = self.epochs.lock().unwrap();
        let e = epochs.entry(name.to_string()).or_insert(0);
        let current = *e;
        *e += 1;
        current
    }

    /// Reads `len` bytes at `offset`, applying on-read flips when configured.
    pub fn read_through(&self, name: &str, offset: u64, len: usize) -> io::Result<Vec<u8>> {
        let mut data = self.backing.read(name, offset, len)?;
        let bits = len as u64 * 8;
        self.bits_read.fetch_add(bits, Ordering::Relaxed);
        let guard = self.injector.read().unwrap();
        let Some(cfg) = guard.as_ref() else { return Ok(data) };
        if cfg.mode != InjectionMode::OnRead || cfg.uber <= 0.0 || !cfg.scope.matches(name) || len == 0 {
            return Ok(data);
        }
        let epoch = self.next_epoch(name, cfg.sticky);
        let flipped = apply_page_flips(cfg, name, epoch, offset * 8, &mut data);
        self.bits_flipped.fetch_add(flipped, Ordering::Relaxed);
        Ok(data)
    }

    pub fn read_all(&self, name: &str) -> io::Result<Vec<u8>> {
        let len = self.backing.len(name)?;
        self.read_through(name, 0, len as usize)
    }

    pub fn write(&self, name: &str, data: &[u8]) -> io::Result<()> {
        self.backing.write(name, data)
    }

    pub fn append(&self, name: &str, data: &[u8]) -> io::Result<()> {
        self.backing.append(name, data)
    }

    pub fn write_at(&self, name: &str, offset: u64, data: &[u8]) -> io::Result<()> {
        self.backing.write_at(name, offset, data)
    }

    pub fn len(&self, name: &str) -> io::Result<u64> {
        self.backing.len(name)
    }

    pub fn delete(&self, name: &str) -> io::Result<()> {
        self.backing.delete(name)
    }

    pub fn exists(&self, name: &str) -> bool {
        self.backing.exists(name)
    }

    pub fn list(&self) -> Vec<String> {
        self.backing.list()
    }

    /// Flips one stored bit unconditionally.
    pub fn flip_bit(&self, name: &str, bit: u64) -> io::Result<()> {
        self.backing.flip_bit(name, bit)
    }

    /// Flips every stored bit of the in-scope `files` with probability `uber`
    /// and reports each flip. Each call is a new round of the keyed stream.
    pub fn corrupt_at_rest<S: AsRef<str>>(&self, files: &[S]) -> CorruptionReport {
        let mut report = CorruptionReport::default();
        let Some(cfg) = self.injector() else { return report };
        if cfg.uber <= 0.0 {
            return report;
        }
        let round = self.at_rest_round.fetch_add(1, Ordering::Relaxed);
        let sampler = FlipSampler::new(cfg.uber);
        for file in files {
            let name = file.as_ref();
            if !cfg.scope.matches(name) {
                continue;
            }
            let len_bits = match self.backing.len(name) {
                Ok(len) => len * 8,
                Err(e) => {
                    report.aborted = Some(format!("{name}: {e}"));
                    return report;
                }
            };
            let mut rng = keyed_rng(cfg.seed, name_key(name), u64::MAX, round);
            for bit in sampler.positions(&mut rng, len_bits) {
                if let Err(e) = self.backing.flip_bit(name, bit) {
                    report.aborted = Some(format!("{name}: {e}"));
                    return report;
                }
                self.bits_flipped.fetch_add(1, Ordering::Relaxed);
                report.flips.push((name.to_string(), bit));
            }
        }
        report
    }
}

/// Applies the keyed per-page flips to `data`, which starts at absolute bit
/// `start_bit` of the file. Returns the number of flipped bits.
fn apply_page_flips(cfg: &InjectorConfig, name: &str, epoch: u64, start_bit: u64, data: &mut [u8]) -> u64 {
    let sampler = FlipSampler::new(cfg.uber);
    let file_key = name_key(name);
    let end_bit = start_bit + data.len() as u64 * 8;
    let mut flipped = 0;
    for page in start_bit / PAGE_BITS..end_bit.div_ceil(PAGE_BITS) {
        let page_start = page * PAGE_BITS;
        let mut rng = keyed_rng(cfg.seed, file_key, page, epoch);
        for offset in sampler.positions(&mut rng, PAGE_BITS) {
            let bit = page_start + offset;
            if bit < start_bit || bit >= end_bit {
                continue;
            }
            let rel = bit - start_bit;
            data[(rel / 8) as usize] ^= 1 << (rel % 8);
            flipped += 1;
        }
    }
    flipped
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env_with(cfg: Option<InjectorConfig>) -> StorageEnv {
        let env = StorageEnv::in_memory();
        env.set_injector(cfg);
        env
    }

    #[test]
    fn gap_distribution_is_geometric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in [0.5, 0.01] {
            let s = FlipSampler::new(p);
            let n = 200_000;
            let gaps: Vec<u64> = (0..n).map(|_| s.next_gap(&mut rng).unwrap()).collect();
            let mean = gaps.iter().sum::<u64>() as f64 / n as f64;
            let want = (1.0 - p) / p;
            let sd = ((1.0 - p) / (p * p) / n as f64).sqrt();
            assert!((mean - want).abs() < 4.0 * sd, "p={p}: mean {mean} vs {want}");
            let zeros = gaps.iter().filter(|&&g| g == 0).count() as f64 / n as f64;
            assert!((zeros - p).abs() < 4.0 * (p * (1.0 - p) / n as f64).sqrt(), "p={p}: P(0)={zeros}");
        }
        assert_eq!(FlipSampler::new(1.0).next_gap(&mut rng), Some(0));
        assert_eq!(FlipSampler::new(0.0).next_gap(&mut rng), None);
    }

    #[test]
    fn no_injector_reads_are_exact() {
        let env = env_with(None);
        let data: Vec<u8> = (0..4096u32).map(|i| i as u8).collect();
        env.write("a.sst", &data).unwrap();
        assert_eq!(env.read_through("a.sst", 0, data.len()).unwrap(), data);
        assert_eq!(env.bits_read(), 4096 * 8);
        assert_eq!(env.bits_flipped(), 0);
    }

    #[test]
    fn zero_rate_is_identity_and_full_rate_complements() {
        let data: Vec<u8> = (0..1000u32).map(|i| (i * 13) as u8).collect();
        let env = env_with(Some(InjectorConfig::on_read(0.0, 1)));
        env.write("f", &data).unwrap();
        assert_eq!(env.read_through("f", 0, 1000).unwrap(), data);

        let env = env_with(Some(InjectorConfig::on_read(1.0, 1)));
        env.write("f", &data).unwrap();
        let out = env.read_through("f", 3, 500).unwrap();
        let expected: Vec<u8> = data[3..503].iter().map(|b| !b).collect();
        assert_eq!(out, expected);
        assert_eq!(env.bits_flipped(), 500 * 8);
    }

    #[test]
    fn flips_do_not_depend_on_read_split() {
        let data = vec![0u8; 8192];
        let cfg = InjectorConfig::on_read(1e-2, 42).sticky(true);
        let env = env_with(Some(cfg));
        env.write("f", &data).unwrap();
        let whole = env.read_through("f", 0, 8192).unwrap();
        let mut pieces = env.read_through("f", 0, 1000).unwrap();
        pieces.extend(env.read_through("f", 1000, 3333).unwrap());
        pieces.extend(env.read_through("f", 4333, 8192 - 4333).unwrap());
        assert_eq!(whole, pieces);
        assert!(whole.iter().any(|&b| b != 0));
    }

    #[test]
    fn epochs_vary_transient_flips() {
        let env = env_with(Some(InjectorConfig::on_read(1e-2, 42)));
        env.write("f", &vec![0u8; 4096]).unwrap();
        let a = env.read_through("f", 0, 4096).unwrap();
        let b = env.read_through("f", 0, 4096).unwrap();
        assert_ne!(a, b);
        // Same configuration, same read sequence: same flips.
        let env2 = env_with(Some(InjectorConfig::on_read(1e-2, 42)));
        env2.write("f", &vec![0u8; 4096]).unwrap();
        assert_eq!(env2.read_through("f", 0, 4096).unwrap(), a);
        assert_eq!(env2.read_through("f", 0, 4096).unwrap(), b);
    }

    #[test]
    fn scope_filters_files() {
        let cfg = InjectorConfig::at_rest(0.5, 3).with_scope(Scope::glob("*.sst").unwrap());
        let env = env_with(Some(cfg));
        env.write("x/1.sst", &[0u8; 64]).unwrap();
        env.write("x/MANIFEST", &[0u8; 64]).unwrap();
        env.write("x/paxos.log", &[0u8; 64]).unwrap();
        let report = env.corrupt_at_rest(&["x/1.sst", "x/MANIFEST", "x/paxos.log"]);
        assert!(!report.is_empty());
        assert!(report.flips.iter().all(|(f, _)| f == "x/1.sst"));
        assert_eq!(env.backing().read_all("x/MANIFEST").unwrap(), vec![0u8; 64]);
    }

    #[test]
    fn default_scope_excludes_logs() {
        let s = Scope::default();
        assert!(s.matches("replica-0/000001.sst"));
        assert!(!s.matches("replica-0/paxos.log"));
        assert!(Scope::everything().matches("replica-0/paxos.log"));
    }

    #[test]
    fn at_rest_report_matches_stored_bytes() {
        let env = env_with(Some(InjectorConfig::at_rest(1e-3, 11)));
        let original = vec![0xA5u8; 4096];
        env.write("blk", &original).unwrap();
        let report = env.corrupt_at_rest(&["blk"]);
        let stored = env.backing().read_all("blk").unwrap();
        let mut expected = original.clone();
        for (_, bit) in &report.flips {
            expected[(*bit / 8) as usize] ^= 1 << (bit % 8);
        }
        assert_eq!(stored, expected);
        assert_eq!(env_with(Some(InjectorConfig::at_rest(0.0, 1))).corrupt_at_rest(&["blk"]), CorruptionReport::default());
    }

    #[test]
    fn at_rest_missing_file_aborts_with_partial_report() {
        let env = env_with(Some(InjectorConfig::at_rest(0.5, 1)));
        env.write("a", &[0u8; 16]).unwrap();
        let report = env.corrupt_at_rest(&["a", "missing"]);
        assert!(!report.flips.is_empty());
        assert!(report.aborted.is_some());
    }

    #[test]
    fn injector_section_parses() {
        let text = "uber = 1e-6\nmode = \"on_read\"\nseed = 9\nscope-glob = \"*.sst\"\n";
        let section: InjectorSection = toml::from_str(text).unwrap();
        let cfg = section.to_config().unwrap();
        assert_eq!(cfg.mode, InjectionMode::OnRead);
        assert!(cfg.scope.matches("a/b.sst"));
        assert!(!cfg.scope.matches("a/MANIFEST"));
    }

    #[test]
    fn dir_backing_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let backing = DirBacking::new(dir.path()).unwrap();
        backing.write("a/b.sst", b"hello").unwrap();
        backing.append("a/b.sst", b" world").unwrap();
        backing.write_at("a/b.sst", 0, b"J").unwrap();
        assert_eq!(backing.read_all("a/b.sst").unwrap(), b"Jello world");
        backing.flip_bit("a/b.sst", 0).unwrap();
        assert_eq!(backing.read("a/b.sst", 0, 1).unwrap(), vec![b'J' ^ 1]);
        assert_eq!(backing.list(), vec!["a/b.sst".to_string()]);
        backing.delete("a/b.sst").unwrap();
        assert!(!backing.exists("a/b.sst"));
    }
}
