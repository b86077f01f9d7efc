use serde::Serialize;

use crate::error_model::{
    monte_carlo_error, p_block_error, p_chunk_error, p_error, p_majority_error, DataSize, ErrorModelParams, RecoveryMode,
};

use super::{binomial_z, consistent_with, csv_text, Check, ExperimentError, ExperimentSpec};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelRow {
    pub uber: f64,
    pub mode: String,
    pub exact: f64,
    pub approx: Option<f64>,
    pub mc_estimate: Option<f64>,
    pub mc_stderr: Option<f64>,
    pub mc_trials: Option<u64>,
    pub approx_valid: Option<bool>,
    pub block_bits: u64,
    pub chunk_bits: u64,
    pub replication: u32,
    pub label: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelTable {
    pub rows: Vec<ModelRow>,
}

/// Reference sizes: 128 MB blocks, 64 KiB chunks, three replicas.
pub const TABLE_BLOCK: DataSize = DataSize::mb(128);
pub const TABLE_CHUNK: DataSize = DataSize::kib(64);
pub const TABLE_UBERS: [f64; 2] = [1e-10, 1e-15];

fn row(params: &ErrorModelParams, mode: &str, exact: f64, approx: Option<f64>, valid: Option<bool>, label: &str) -> ModelRow {
    ModelRow {
        uber: params.uber(),
        mode: mode.into(),
        exact,
        approx,
        mc_estimate: None,
        mc_stderr: None,
        mc_trials: None,
        approx_valid: valid,
        block_bits: params.block_bits(),
        chunk_bits: params.chunk_bits(),
        replication: params.replication(),
        label: label.into(),
    }
}

/// Block- and chunk-level read-error probabilities at the reference sizes,
/// plus desk-scale curves over a range of error rates.
pub fn run_model_table() -> ModelTable {
    let mut rows = Vec::new();
    for uber in TABLE_UBERS {
        let p = ErrorModelParams::new(uber, TABLE_BLOCK, TABLE_CHUNK, 3).expect("reference parameters are valid");
        let b = p_block_error(&p);
        rows.push(row(&p, "block", b.exact, Some(b.approx), Some(b.approx_valid), "table"));
        let c = p_chunk_error(&p);
        if uber == TABLE_UBERS[1] {
            rows.push(row(&p, "chunk", c.exact, Some(c.approx), Some(c.approx_valid), "table_flagged:with_block_over_chunk_factor"));
            // Probability that one particular chunk is bad on every replica.
            let cb = p.chunk_bits() as f64;
            let per_chunk_exact = (-(cb * (-uber).ln_1p())).exp_m1().abs().powi(p.replication() as i32);
            rows.push(row(
                &p,
                "chunk",
                per_chunk_exact,
                Some((uber * cb).powi(p.replication() as i32)),
                None,
                "table_flagged:without_block_over_chunk_factor",
            ));
        } else {
            rows.push(row(&p, "chunk", c.exact, Some(c.approx), Some(c.approx_valid), "table"));
        }
    }
    for (label, block) in [("curve_8mib", DataSize::mib(8)), ("curve_128mb", TABLE_BLOCK)] {
        for step in 0..=16 {
            let uber = 10f64.powf(-12.0 + step as f64 * 0.5);
            let p = ErrorModelParams::new(uber, block, DataSize::bytes(512), 3).expect("curve parameters are valid");
            let b = p_block_error(&p);
            let c = p_chunk_error(&p);
            rows.push(row(&p, "block", b.exact, Some(b.approx), Some(b.approx_valid), label));
            rows.push(row(&p, "chunk", c.exact, Some(c.approx), Some(c.approx_valid), label));
            let m = p_majority_error(uber, p.block_bits(), p.chunk_bits()).expect("valid");
            rows.push(row(&p, "chunk_majority", m, None, None, label));
        }
    }
    ModelTable { rows }
}

/// Rows for the spec's error rates at its model parameters, each with a
/// Monte Carlo estimate when trials are requested.
pub fn run_model_sweep(spec: &ExperimentSpec) -> Result<ModelTable, ExperimentError> {
    let m = &spec.model;
    let mut rows = Vec::new();
    for (i, &uber) in spec.ubers.iter().enumerate() {
        let p = ErrorModelParams::from_bits(uber, m.block_bits, m.chunk_bits, m.replication).map_err(|e| ExperimentError::Param(e.to_string()))?;
        for (j, (name, mode)) in [("block", RecoveryMode::Block), ("chunk", RecoveryMode::Chunk)].into_iter().enumerate() {
            let e = p_error(&p, mode);
            let mut r = row(&p, name, e.exact, Some(e.approx), Some(e.approx_valid), "sweep");
            if m.mc_trials > 0 {
                let seed = spec.seed ^ ((i as u64) << 8 | j as u64);
                let mc = monte_carlo_error(&p, mode, m.mc_trials, seed).map_err(|e| ExperimentError::Param(e.to_string()))?;
                r.mc_estimate = Some(mc.estimate);
                r.mc_stderr = Some(mc.stderr);
                r.mc_trials = Some(mc.trials);
            }
            rows.push(r);
        }
    }
    Ok(ModelTable { rows })
}

impl ModelTable {
    pub fn to_csv(&self) -> Result<String, ExperimentError> {
        Ok(csv_text("model", &self.rows)?)
    }

    pub fn find(&self, label: &str, mode: &str, uber: f64) -> Option<&ModelRow> {
        self.rows.iter().find(|r| r.label == label && r.mode == mode && r.uber == uber)
    }

    /// Monte Carlo rows agree with the closed forms within three standard
    /// errors.
    pub fn checks(&self) -> Vec<Check> {
        self.rows
            .iter()
            .filter_map(|r| {
                let est = r.mc_estimate?;
                let trials = r.mc_trials?;
                let failures = (est * trials as f64).round() as u64;
                let z = binomial_z(failures, trials, r.exact);
                let (ok, tail) = consistent_with(failures, trials, r.exact);
                Some(Check::new(
                    format!("mc {} uber={:e}", r.mode, r.uber),
                    ok,
                    format!("estimate {est:.4e} vs exact {:.4e} (z={z:.2}, tail {tail:.3e})", r.exact),
                ))
            })
            .collect()
    }
}
