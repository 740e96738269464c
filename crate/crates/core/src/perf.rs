//! Analytic iteration-time and throughput models, and the node-assignment search.
//!
//! All counts are elements; traffic in bits is `elements * 32`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelProfile;
use crate::tensor::BYTES_PER_ELEMENT;

pub const BITS_PER_ELEMENT: f64 = (BYTES_PER_ELEMENT * 8) as f64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerfError {
    #[error("invalid input: {0}")]
    Domain(String),
    #[error("no feasible split of {nodes} nodes: {reason}")]
    Infeasible { nodes: usize, reason: String },
    #[error("constants file: {0}")]
    File(String),
}

pub type Result<T, E = PerfError> = std::result::Result<T, E>;

/// Inputs to the models. Times are seconds per iteration on one node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerfConstants {
    /// CONV-block compute of one worker on `batch` samples.
    pub t_conv: f64,
    /// FC-block compute on one CONV worker's activations.
    pub t_fc: f64,
    /// Whole-model compute of one worker on `batch` samples.
    pub t_ps: f64,
    pub bandwidth_bps: f64,
    pub batch: u64,
    pub params: u64,
    pub conv_params: u64,
    /// Boundary activations per sample.
    pub activations: u64,
}

impl PerfConstants {
    pub fn from_profile(p: &ModelProfile, t_conv: f64, t_fc: f64, t_ps: f64, bandwidth_bps: f64) -> Self {
        Self {
            t_conv,
            t_fc,
            t_ps,
            bandwidth_bps,
            batch: p.batch as u64,
            params: p.params,
            conv_params: p.conv_params,
            activations: p.activations,
        }
    }

    pub fn fc_params(&self) -> u64 {
        self.params - self.conv_params
    }

    /// Compute times may be zero; everything else must be positive.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("t_conv", self.t_conv), ("t_fc", self.t_fc), ("t_ps", self.t_ps)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(PerfError::Domain(format!("{name} = {v} must be finite and non-negative")));
            }
        }
        if !(self.bandwidth_bps > 0.0) {
            return Err(PerfError::Domain(format!("bandwidth {} must be positive", self.bandwidth_bps)));
        }
        if self.batch == 0 || self.params == 0 || self.activations == 0 {
            return Err(PerfError::Domain("batch, params and activations must be positive".into()));
        }
        if self.conv_params == 0 || self.conv_params >= self.params {
            return Err(PerfError::Domain(format!(
                "conv_params {} must be in (0, params = {})",
                self.conv_params, self.params
            )));
        }
        Ok(())
    }

    pub fn with_bandwidth(self, bandwidth_bps: f64) -> Self {
        Self { bandwidth_bps, ..self }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| PerfError::File(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("plain struct serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PerfError::File(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }
}

/// Recursive-doubling rounds: `log2 n` for powers of two, `floor(log2 n) + 2`
/// otherwise, and none for a single node.
pub fn rounds(n: usize) -> u32 {
    crate::collectives::rounds(n)
}

fn check_counts(a: usize, b: usize) -> Result<()> {
    if a == 0 || b == 0 {
        return Err(PerfError::Domain(format!("node counts must be positive (got {a}, {b})")));
    }
    Ok(())
}

/// Layer-separated iteration time:
/// `T_c + (n_c/n_f) T_f + 2 n_c A K 32 / (n_f B) + P_c 32 r(n_c) / B`.
pub fn stanza_iter_time(c: &PerfConstants, n_c: usize, n_f: usize) -> Result<f64> {
    c.validate()?;
    check_counts(n_c, n_f)?;
    let (nc, nf) = (n_c as f64, n_f as f64);
    let b = c.bandwidth_bps;
    let act = (c.activations * c.batch) as f64 * BITS_PER_ELEMENT;
    Ok(c.t_conv
        + nc / nf * c.t_fc
        + 2.0 * nc * act / (nf * b)
        + c.conv_params as f64 * BITS_PER_ELEMENT * f64::from(rounds(n_c)) / b)
}

/// Iteration time of the schedule as simulated: the busiest FC worker serves
/// `ceil(n_c/n_f)` CONV workers, and the FC allreduce runs alongside the CONV
/// allreduce, so the exchange costs whichever is longer. Equals
/// [`stanza_iter_time`] when `n_f` divides `n_c` and the CONV exchange is the longer.
pub fn stanza_iter_time_full(c: &PerfConstants, n_c: usize, n_f: usize) -> Result<f64> {
    c.validate()?;
    check_counts(n_c, n_f)?;
    let g = n_c.div_ceil(n_f) as f64;
    let b = c.bandwidth_bps;
    let act = (c.activations * c.batch) as f64 * BITS_PER_ELEMENT;
    let conv = c.conv_params as f64 * BITS_PER_ELEMENT * f64::from(rounds(n_c)) / b;
    let fc = c.fc_params() as f64 * BITS_PER_ELEMENT * f64::from(rounds(n_f)) / b;
    Ok(c.t_conv + g * c.t_fc + 2.0 * g * act / b + conv.max(fc))
}

/// Samples per second: `n_c K / t_s`.
pub fn stanza_throughput(c: &PerfConstants, n_c: usize, n_f: usize) -> Result<f64> {
    Ok((n_c as u64 * c.batch) as f64 / stanza_iter_time(c, n_c, n_f)?)
}

/// Parameter-server iteration time: `2 n_w P 32 / (n_s B) + T_ps`.
pub fn ps_iter_time(c: &PerfConstants, n_w: usize, n_s: usize) -> Result<f64> {
    c.validate()?;
    check_counts(n_w, n_s)?;
    Ok(2.0 * n_w as f64 * c.params as f64 * BITS_PER_ELEMENT / (n_s as f64 * c.bandwidth_bps) + c.t_ps)
}

/// Samples per second: `n_w K / t_ps`.
pub fn ps_throughput(c: &PerfConstants, n_w: usize, n_s: usize) -> Result<f64> {
    Ok((n_w as u64 * c.batch) as f64 / ps_iter_time(c, n_w, n_s)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Stanza,
    Ps,
}

/// A split of `N` nodes: `(n_c, n_f)` for [`Mode::Stanza`], `(n_w, n_s)` for [`Mode::Ps`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub mode: Mode,
    pub nodes: usize,
    /// CONV workers or PS workers.
    pub compute_nodes: usize,
    /// FC workers or servers.
    pub other_nodes: usize,
    pub throughput: f64,
    pub iter_time: f64,
}

/// Activation bytes held by the busiest FC worker in one iteration.
pub fn fc_activation_bytes(c: &PerfConstants, n_c: usize, n_f: usize) -> u64 {
    n_c.div_ceil(n_f) as u64 * c.batch * c.activations * BYTES_PER_ELEMENT as u64
}

/// Exhaustive search over every split of `nodes`, maximizing modeled
/// throughput. Ties go to the split with fewer FC workers (or servers).
/// `memory_limit` (bytes) rejects Stanza splits whose busiest FC worker would
/// hold more activations than that.
pub fn assign_nodes(c: &PerfConstants, nodes: usize, mode: Mode, memory_limit: Option<u64>) -> Result<Assignment> {
    c.validate()?;
    if nodes < 2 {
        return Err(PerfError::Domain(format!("need at least 2 nodes, got {nodes}")));
    }
    let mut best: Option<Assignment> = None;
    for other in 1..nodes {
        let compute = nodes - other;
        let (tp, time) = match mode {
            Mode::Stanza => {
                if memory_limit.is_some_and(|m| fc_activation_bytes(c, compute, other) > m) {
                    continue;
                }
                (stanza_throughput(c, compute, other)?, stanza_iter_time(c, compute, other)?)
            }
            Mode::Ps => (ps_throughput(c, compute, other)?, ps_iter_time(c, compute, other)?),
        };
        if best.is_none_or(|b| tp > b.throughput) {
            best = Some(Assignment {
                mode,
                nodes,
                compute_nodes: compute,
                other_nodes: other,
                throughput: tp,
                iter_time: time,
            });
        }
    }
    best.ok_or_else(|| PerfError::Infeasible {
        nodes,
        reason: format!("every split exceeds the {} byte memory limit", memory_limit.unwrap_or(0)),
    })
}

/// Best layer-separated throughput over best parameter-server throughput at
/// the same node count.
pub fn speedup(c: &PerfConstants, nodes: usize) -> Result<f64> {
    let s = assign_nodes(c, nodes, Mode::Stanza, None)?;
    let p = assign_nodes(c, nodes, Mode::Ps, None)?;
    Ok(s.throughput / p.throughput)
}

/// PS time over layer-separated time with the same `workers` as PS workers
/// and CONV workers, one server and one FC worker.
pub fn speedup_fixed(c: &PerfConstants, workers: usize) -> Result<f64> {
    Ok(ps_iter_time(c, workers, 1)? / stanza_iter_time(c, workers, 1)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn consts() -> PerfConstants {
        PerfConstants {
            t_conv: 0.1,
            t_fc: 0.01,
            t_ps: 0.12,
            bandwidth_bps: 1e10,
            batch: 32,
            params: 1_000_000,
            conv_params: 100_000,
            activations: 1000,
        }
    }

    #[test]
    fn single_worker_has_no_exchange() {
        let c = PerfConstants { t_conv: 0.0, t_fc: 0.0, ..consts() };
        let t = stanza_iter_time(&c, 1, 1).unwrap();
        assert_eq!(t, 2.0 * 32_000.0 * 32.0 / 1e10);
    }

    #[test]
    fn infinite_bandwidth_leaves_compute() {
        let c = consts().with_bandwidth(f64::INFINITY);
        assert_eq!(stanza_iter_time(&c, 6, 2).unwrap(), 0.1 + 3.0 * 0.01);
        assert_eq!(ps_iter_time(&c, 6, 2).unwrap(), 0.12);
    }

    #[test]
    fn two_nodes_have_one_split() {
        let a = assign_nodes(&consts(), 2, Mode::Stanza, None).unwrap();
        assert_eq!((a.compute_nodes, a.other_nodes), (1, 1));
    }

    #[test]
    fn memory_limit_can_make_it_infeasible() {
        let r = assign_nodes(&consts(), 4, Mode::Stanza, Some(10));
        assert!(matches!(r, Err(PerfError::Infeasible { .. })));
    }

    #[test]
    fn rejects_bad_constants() {
        let c = PerfConstants { t_fc: -1.0, ..consts() };
        assert!(matches!(stanza_iter_time(&c, 2, 1), Err(PerfError::Domain(_))));
        assert!(matches!(stanza_iter_time(&consts(), 0, 1), Err(PerfError::Domain(_))));
    }

    #[test]
    fn toml_roundtrip() {
        let c = consts();
        assert_eq!(PerfConstants::from_toml_str(&c.to_toml_string()).unwrap(), c);
    }
}
