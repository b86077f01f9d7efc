//! Probability that a replicated read ends in an application-visible error.
//!
//! A block of `B` bits is stored on `R` replicas, each bit independently
//! corrupted with probability `E` (the uncorrectable bit error rate). With
//! block-level recovery a read fails only if every replica holds at least one
//! bad bit:
//!
//! ```text
//! P_block = (1 - (1 - E)^B)^R                ~ (E*B)^R
//! ```
//!
//! With chunk-level recovery (`C`-bit chunks repaired independently) a read
//! fails only if some chunk position is bad on every replica:
//!
//! ```text
//! P_chunk = 1 - (1 - (1 - (1 - E)^C)^R)^(B/C) ~ (E*C)^R * B/C
//! ```
//!
//! All powers of `(1 - E)` are evaluated as `exp(n * ln_1p(-E))` so that
//! `E = 1e-15` does not round to one. [`monte_carlo_error`] simulates the
//! per-bit process directly and serves as an independent check of both forms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fault::FlipSampler;

/// Threshold on `E*B` (or `E*C`) under which the first-order approximation is
/// reported as valid.
pub const APPROX_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("uber must lie in [0, 1], got {0}")]
    Uber(f64),
    #[error("block size must be positive")]
    EmptyBlock,
    #[error("chunk size must be positive")]
    EmptyChunk,
    #[error("chunk ({chunk_bits} bits) larger than block ({block_bits} bits)")]
    ChunkLargerThanBlock { chunk_bits: u64, block_bits: u64 },
    #[error("replication factor must be at least 1")]
    Replication,
    #[error("target error probability must lie in (0, 1), got {0}")]
    Target(f64),
    #[error("trial count must be positive")]
    Trials,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeUnit {
    Bits,
    Bytes,
    /// 10^3 bytes.
    Kb,
    /// 2^10 bytes.
    Kib,
    /// 10^6 bytes.
    Mb,
    /// 2^20 bytes.
    Mib,
    /// 10^9 bytes.
    Gb,
    /// 2^30 bytes.
    Gib,
}

impl SizeUnit {
    pub fn bits_per_unit(self) -> u64 {
        match self {
            SizeUnit::Bits => 1,
            SizeUnit::Bytes => 8,
            SizeUnit::Kb => 8 * 1_000,
            SizeUnit::Kib => 8 << 10,
            SizeUnit::Mb => 8 * 1_000_000,
            SizeUnit::Mib => 8 << 20,
            SizeUnit::Gb => 8 * 1_000_000_000,
            SizeUnit::Gib => 8 << 30,
        }
    }
}

/// A size with an explicit unit. Device error rates are per bit while files
/// are measured in bytes, so every public size carries its unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSize {
    pub value: u64,
    pub unit: SizeUnit,
}

impl DataSize {
    pub const fn new(value: u64, unit: SizeUnit) -> Self {
        Self { value, unit }
    }
    pub const fn bits(value: u64) -> Self {
        Self::new(value, SizeUnit::Bits)
    }
    pub const fn bytes(value: u64) -> Self {
        Self::new(value, SizeUnit::Bytes)
    }
    pub const fn kib(value: u64) -> Self {
        Self::new(value, SizeUnit::Kib)
    }
    pub const fn mb(value: u64) -> Self {
        Self::new(value, SizeUnit::Mb)
    }
    pub const fn mib(value: u64) -> Self {
        Self::new(value, SizeUnit::Mib)
    }

    pub fn to_bits(self) -> u64 {
        self.value * self.unit.bits_per_unit()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorModelParams {
    uber: f64,
    block_bits: u64,
    chunk_bits: u64,
    replication: u32,
}

impl ErrorModelParams {
    pub fn new(uber: f64, block: DataSize, chunk: DataSize, replication: u32) -> Result<Self, ModelError> {
        Self::from_bits(uber, block.to_bits(), chunk.to_bits(), replication)
    }

    /// A chunk size that does not divide the block leaves a shorter final
    /// chunk, which is modeled at its true length.
    pub fn from_bits(uber: f64, block_bits: u64, chunk_bits: u64, replication: u32) -> Result<Self, ModelError> {
        if !(0.0..=1.0).contains(&uber) {
            return Err(ModelError::Uber(uber));
        }
        if block_bits == 0 {
            return Err(ModelError::EmptyBlock);
        }
        if chunk_bits == 0 {
            return Err(ModelError::EmptyChunk);
        }
        if chunk_bits > block_bits {
            return Err(ModelError::ChunkLargerThanBlock { chunk_bits, block_bits });
        }
        if replication == 0 {
            return Err(ModelError::Replication);
        }
        Ok(Self { uber, block_bits, chunk_bits, replication })
    }

    pub fn uber(&self) -> f64 {
        self.uber
    }
    pub fn block_bits(&self) -> u64 {
        self.block_bits
    }
    pub fn chunk_bits(&self) -> u64 {
        self.chunk_bits
    }
    pub fn replication(&self) -> u32 {
        self.replication
    }

    pub fn with_uber(&self, uber: f64) -> Result<Self, ModelError> {
        Self::from_bits(uber, self.block_bits, self.chunk_bits, self.replication)
    }

    fn full_chunks(&self) -> u64 {
        self.block_bits / self.chunk_bits
    }

    fn tail_bits(&self) -> u64 {
        self.block_bits % self.chunk_bits
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorProbability {
    pub exact: f64,
    pub approx: f64,
    pub approx_valid: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecoveryMode {
    Block,
    Chunk,
}

impl std::fmt::Display for RecoveryMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RecoveryMode::Block => "block",
            RecoveryMode::Chunk => "chunk",
        })
    }
}

/// `1 - (1 - e)^n`: probability that `n` independent bits hold at least one error.
pub fn p_any_flip(uber: f64, bits: u64) -> f64 {
    if bits == 0 || uber == 0.0 {
        return 0.0;
    }
    -(bits as f64 * (-uber).ln_1p()).exp_m1()
}

pub fn p_block_error(params: &ErrorModelParams) -> ErrorProbability {
    let e = params.uber;
    let b = params.block_bits as f64;
    let r = params.replication as i32;
    let exact = p_any_flip(e, params.block_bits).powi(r);
    let approx = (e * b).powi(r);
    ErrorProbability { exact, approx, approx_valid: e * b < APPROX_THRESHOLD }
}

pub fn p_chunk_error(params: &ErrorModelParams) -> ErrorProbability {
    let e = params.uber;
    let r = params.replication as i32;
    let c = params.chunk_bits as f64;
    let per_chunk = p_any_flip(e, params.chunk_bits).powi(r);
    let tail = params.tail_bits();
    let per_tail = if tail > 0 { p_any_flip(e, tail).powi(r) } else { 0.0 };
    let log_ok = params.full_chunks() as f64 * (-per_chunk).ln_1p() + (-per_tail).ln_1p();
    let exact = -log_ok.exp_m1();

    let ratio = params.block_bits as f64 / c;
    let approx = (e * c).powi(r) * ratio;
    let approx_valid = e * c < APPROX_THRESHOLD && approx < APPROX_THRESHOLD;
    ErrorProbability { exact, approx, approx_valid }
}

pub fn p_error(params: &ErrorModelParams, mode: RecoveryMode) -> ErrorProbability {
    match mode {
        RecoveryMode::Block => p_block_error(params),
        RecoveryMode::Chunk => p_chunk_error(params),
    }
}

/// Read-error probability for three replicas repaired chunk by chunk with
/// bit-wise majority voting as the last resort.
///
/// A chunk is lost only when all three copies fail their checksum (no clean
/// copy exists) and some bit position is flipped on at least two copies (the
/// vote is wrong there). Per chunk this is computed exactly by a 16-state
/// chain over bit positions: which replicas have been seen corrupted so far,
/// and whether a two-way collision has occurred. All transition weights are
/// non-negative, so the result keeps full relative precision at tiny `E`.
pub fn p_majority_error(uber: f64, block_bits: u64, chunk_bits: u64) -> Result<f64, ModelError> {
    let params = ErrorModelParams::from_bits(uber, block_bits, chunk_bits, 3)?;
    let per_chunk = majority_chunk_failure(uber, chunk_bits);
    let tail = params.tail_bits();
    let per_tail = if tail > 0 { majority_chunk_failure(uber, tail) } else { 0.0 };
    let log_ok = params.full_chunks() as f64 * (-per_chunk).ln_1p() + (-per_tail).ln_1p();
    Ok(-log_ok.exp_m1())
}

type Matrix16 = [[f64; 16]; 16];

fn majority_chunk_failure(e: f64, bits: u64) -> f64 {
    if e == 0.0 || bits == 0 {
        return 0.0;
    }
    // state = seen_mask (3 bits) | collided << 3
    let keep = 1.0 - e;
    let w_none = keep * keep * keep;
    let w_one = e * keep * keep;
    let w_two = e * e * keep;
    let w_three = e * e * e;
    let mut step: Matrix16 = [[0.0; 16]; 16];
    for from in 0..16usize {
        let seen = from & 7;
        let collided = from >> 3;
        for flipped in 0..8usize {
            let (w, collide) = match flipped.count_ones() {
                0 => (w_none, 0),
                1 => (w_one, 0),
                2 => (w_two, 1),
                _ => (w_three, 1),
            };
            let to = (seen | flipped) | ((collided | collide) << 3);
            step[from][to] += w;
        }
    }
    let total = mat_pow(&step, bits);
    total[0][7 | 8]
}

fn mat_mul(a: &Matrix16, b: &Matrix16) -> Matrix16 {
    let mut out = [[0.0; 16]; 16];
    for i in 0..16 {
        for k in 0..16 {
            let aik = a[i][k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..16 {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

fn mat_pow(m: &Matrix16, mut n: u64) -> Matrix16 {
    let mut result = [[0.0; 16]; 16];
    for (i, row) in result.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let mut base = *m;
    while n > 0 {
        if n & 1 == 1 {
            result = mat_mul(&result, &base);
        }
        base = mat_mul(&base, &base);
        n >>= 1;
    }
    result
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloEstimate {
    pub estimate: f64,
    pub stderr: f64,
    pub failures: u64,
    pub trials: u64,
}

impl MonteCarloEstimate {
    /// Absolute deviation from `p` in units of the binomial standard error
    /// under `p`. Zero-variance cases compare exactly.
    pub fn z_score(&self, p: f64) -> f64 {
        let se = (p * (1.0 - p) / self.trials as f64).sqrt();
        let diff = (self.estimate - p).abs();
        if se == 0.0 {
            if diff == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            diff / se
        }
    }
}

/// Simulates independent per-bit corruption of `R` copies of a `B`-bit block.
///
/// Block mode fails a trial iff every replica has at least one bad bit; chunk
/// mode fails iff some chunk index is bad on all replicas. Flip positions are
/// drawn as geometric gaps between successive bad bits; in chunk mode the scan
/// restarts at the next chunk boundary once a chunk is known to be bad.
pub fn monte_carlo_error(
    params: &ErrorModelParams,
    mode: RecoveryMode,
    trials: u64,
    seed: u64,
) -> Result<MonteCarloEstimate, ModelError> {
    if trials == 0 {
        return Err(ModelError::Trials);
    }
    let sampler = FlipSampler::new(params.uber);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = params.block_bits;
    let c = params.chunk_bits;
    let mut failures = 0u64;
    let mut common: Vec<u64> = Vec::new();
    let mut current: Vec<u64> = Vec::new();

    for _ in 0..trials {
        let failed = match mode {
            RecoveryMode::Block => {
                (0..params.replication).all(|_| sampler.next_gap(&mut rng).is_some_and(|gap| gap < b))
            }
            RecoveryMode::Chunk => {
                common.clear();
                let mut alive = true;
                for replica in 0..params.replication {
                    current.clear();
                    let mut pos = 0u64;
                    while let Some(gap) = sampler.next_gap(&mut rng) {
                        pos = match pos.checked_add(gap) {
                            Some(p) if p < b => p,
                            _ => break,
                        };
                        let chunk = pos / c;
                        current.push(chunk);
                        pos = (chunk + 1) * c;
                        if pos >= b {
                            break;
                        }
                    }
                    if replica == 0 {
                        std::mem::swap(&mut common, &mut current);
                    } else {
                        common.retain(|idx| current.binary_search(idx).is_ok());
                    }
                    if common.is_empty() {
                        alive = false;
                        break;
                    }
                }
                alive
            }
        };
        failures += failed as u64;
    }

    let estimate = failures as f64 / trials as f64;
    let stderr = (estimate * (1.0 - estimate) / trials as f64).sqrt();
    Ok(MonteCarloEstimate { estimate, stderr, failures, trials })
}

/// Relative tolerance of [`max_tolerable_uber`].
pub const INVERSION_RTOL: f64 = 1e-6;

/// Largest error rate whose exact read-error probability stays at or below
/// `target`, found by geometric bisection. The exact forms are monotone
/// non-decreasing in `E`, so the bracket always contains the answer.
pub fn max_tolerable_uber(
    target: f64,
    block_bits: u64,
    chunk_bits: u64,
    replication: u32,
    mode: RecoveryMode,
) -> Result<f64, ModelError> {
    if !(target > 0.0 && target < 1.0) {
        return Err(ModelError::Target(target));
    }
    let base = ErrorModelParams::from_bits(0.0, block_bits, chunk_bits, replication)?;
    let eval = |e: f64| p_error(&base.with_uber(e).expect("bracket stays in [0,1]"), mode).exact;

    let mut hi = 1.0f64;
    if eval(hi) <= target {
        return Ok(hi);
    }
    let mut lo = f64::MIN_POSITIVE;
    if eval(lo) > target {
        return Ok(0.0);
    }
    // Tighter than the advertised tolerance so the returned lower end is
    // within it of the true root.
    while hi / lo > 1.0 + INVERSION_RTOL * 0.1 {
        let mid = (lo * hi).sqrt();
        if eval(mid) <= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MB128: DataSize = DataSize::mb(128);

    fn params(e: f64, b: u64, c: u64, r: u32) -> ErrorModelParams {
        ErrorModelParams::from_bits(e, b, c, r).unwrap()
    }

    #[test]
    fn units_convert_to_bits() {
        assert_eq!(DataSize::bytes(1).to_bits(), 8);
        assert_eq!(DataSize::kib(64).to_bits(), 524_288);
        assert_eq!(MB128.to_bits(), 1_024_000_000);
        assert_eq!(DataSize::mib(8).to_bits(), 67_108_864);
    }

    #[test]
    fn invalid_params_rejected() {
        assert_eq!(ErrorModelParams::from_bits(1.5, 8, 8, 1), Err(ModelError::Uber(1.5)));
        assert!(ErrorModelParams::from_bits(f64::NAN, 8, 8, 1).is_err());
        assert_eq!(ErrorModelParams::from_bits(0.1, 0, 0, 1), Err(ModelError::EmptyBlock));
        assert!(matches!(
            ErrorModelParams::from_bits(0.1, 8, 16, 1),
            Err(ModelError::ChunkLargerThanBlock { .. })
        ));
        assert_eq!(ErrorModelParams::from_bits(0.1, 8, 8, 0), Err(ModelError::Replication));
    }

    #[test]
    fn zero_and_certain_error_rates() {
        let p = params(0.0, 1 << 20, 512, 3);
        assert_eq!(p_block_error(&p).exact, 0.0);
        assert_eq!(p_block_error(&p).approx, 0.0);
        assert_eq!(p_chunk_error(&p).exact, 0.0);
        let one = params(1.0, 1, 1, 1);
        assert_eq!(p_block_error(&one).exact, 1.0);
        assert_eq!(p_chunk_error(&one).exact, 1.0);
    }

    #[test]
    fn table_block_rows() {
        let b = MB128.to_bits();
        let p = p_block_error(&params(1e-10, b, b, 3));
        assert!((p.approx / 1e-3 - 1.0).abs() < 0.1, "{p:?}");
        assert!((p.exact / 1e-3 - 1.0).abs() < 0.1, "{p:?}");
        let p = p_block_error(&params(1e-15, b, b, 3));
        assert!((p.approx / 1e-18 - 1.0).abs() < 0.1, "{p:?}");
        assert!((p.exact / 1e-18 - 1.0).abs() < 0.1, "{p:?}");
        assert!(p.approx_valid);
    }

    #[test]
    fn table_chunk_row() {
        let p = p_chunk_error(&params(1e-10, MB128.to_bits(), DataSize::kib(64).to_bits(), 3));
        assert!((p.approx / 3e-10 - 1.0).abs() < 0.1, "{p:?}");
        assert!((p.exact / 3e-10 - 1.0).abs() < 0.1, "{p:?}");
        assert!(p.approx_valid);
    }

    #[test]
    fn non_divisor_chunk_counts_tail() {
        // 10 bits in chunks of 4: two full chunks plus a 2-bit tail.
        let p = params(0.01, 10, 4, 1);
        let direct = 1.0 - (1.0 - 0.01f64).powi(10);
        assert!((p_chunk_error(&p).exact - direct).abs() < 1e-15);
    }

    #[test]
    fn inversion_examples() {
        let e = max_tolerable_uber(0.5, 1, 1, 1, RecoveryMode::Block).unwrap();
        assert!((e / 0.5 - 1.0).abs() < INVERSION_RTOL);
        let b = MB128.to_bits();
        let e = max_tolerable_uber(1e-18, b, b, 3, RecoveryMode::Block).unwrap();
        assert!((e / 1e-15 - 1.0).abs() < 0.1, "{e}");
        let c = DataSize::kib(64).to_bits();
        let target = p_chunk_error(&params(1e-10, b, c, 3)).exact;
        let e = max_tolerable_uber(target, b, c, 3, RecoveryMode::Chunk).unwrap();
        assert!((e / 1e-10 - 1.0).abs() < INVERSION_RTOL, "{e}");
        assert!(max_tolerable_uber(0.0, 8, 8, 1, RecoveryMode::Block).is_err());
        assert!(max_tolerable_uber(1.0, 8, 8, 1, RecoveryMode::Block).is_err());
    }

    #[test]
    fn monte_carlo_trivial_rates() {
        let zero = monte_carlo_error(&params(0.0, 1024, 128, 3), RecoveryMode::Chunk, 1000, 1).unwrap();
        assert_eq!(zero.estimate, 0.0);
        for mode in [RecoveryMode::Block, RecoveryMode::Chunk] {
            let one = monte_carlo_error(&params(1.0, 64, 8, 1), mode, 1000, 1).unwrap();
            assert_eq!(one.estimate, 1.0);
        }
        assert_eq!(
            monte_carlo_error(&params(0.1, 8, 8, 1), RecoveryMode::Block, 0, 1),
            Err(ModelError::Trials)
        );
    }

    #[test]
    fn monte_carlo_is_seed_deterministic() {
        let p = params(1e-3, 1024, 128, 2);
        let a = monte_carlo_error(&p, RecoveryMode::Chunk, 20_000, 9).unwrap();
        let b = monte_carlo_error(&p, RecoveryMode::Chunk, 20_000, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn monte_carlo_matches_chunk_form() {
        let p = params(1e-3, 1024, 128, 3);
        let exact = p_chunk_error(&p).exact;
        let mc = monte_carlo_error(&p, RecoveryMode::Chunk, 2_000_000, 3).unwrap();
        assert!(mc.z_score(exact) < 3.0, "{mc:?} vs {exact}");
    }

    /// Enumerates every corruption pattern of three tiny chunks.
    fn brute_force_majority(e: f64, bits: u32) -> f64 {
        let n = 3 * bits;
        let mut total = 0.0;
        for pattern in 0u32..(1 << n) {
            let flips = pattern.count_ones() as i32;
            let weight = e.powi(flips) * (1.0 - e).powi(n as i32 - flips);
            let copy = |r: u32| (pattern >> (r * bits)) & ((1 << bits) - 1);
            let all_bad = (0..3).all(|r| copy(r) != 0);
            let (a, b, c) = (copy(0), copy(1), copy(2));
            let collision = (a & b) | (a & c) | (b & c) != 0;
            if all_bad && collision {
                total += weight;
            }
        }
        total
    }

    #[test]
    fn majority_chain_matches_enumeration() {
        for bits in 1..=4u32 {
            for e in [0.5, 0.1, 1e-3] {
                let chain = majority_chunk_failure(e, bits as u64);
                let brute = brute_force_majority(e, bits);
                assert!((chain - brute).abs() <= 1e-12 * brute.max(1e-300), "bits={bits} e={e}: {chain} vs {brute}");
            }
        }
    }

    #[test]
    fn majority_never_exceeds_chunk_recovery() {
        for e in [1e-9, 1e-6, 1e-4, 1e-2] {
            let b = 1 << 20;
            let vote = p_majority_error(e, b, 4096).unwrap();
            let chunk = p_chunk_error(&params(e, b, 4096, 3)).exact;
            assert!(vote <= chunk, "e={e}: {vote} > {chunk}");
        }
    }
}
