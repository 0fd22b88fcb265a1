//! Cost tables for the allocation strategies compared against the
//! importance-weighted cost.

use crate::error::{Error, Result};
use crate::importance::{importance_cost, Calibration, CostTable, ExpertStats, QuantErrorTable};
use crate::moe::MoEModel;
use crate::quant::{binarize, rtn_quantize};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostKind {
    /// `φ^α · w^β · ε^γ`.
    Pmq,
    /// `φ_i · ε̄_j` with `ε̄_j` the layer mean error at j bits.
    Frequency,
    /// `w_i · ε̄_j`.
    Weight,
    /// `ε_{i,j}`.
    Fnorm,
    /// `Σ_sub tr(H) · ‖W − Q_j(W)‖²` with plain RTN / binarization.
    Hessian,
    /// `r_i · ε̄_j`, `r_i ~ U(0, 1)` seeded.
    Random,
}

impl CostKind {
    pub const ALL: [CostKind; 6] = [
        CostKind::Pmq,
        CostKind::Frequency,
        CostKind::Weight,
        CostKind::Fnorm,
        CostKind::Hessian,
        CostKind::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CostKind::Pmq => "pmq",
            CostKind::Frequency => "frequency",
            CostKind::Weight => "weight",
            CostKind::Fnorm => "fnorm",
            CostKind::Hessian => "hessian",
            CostKind::Random => "random",
        }
    }
}

impl fmt::Display for CostKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CostKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        CostKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown cost kind {s:?}")))
    }
}

pub struct CostInputs<'a> {
    pub stats: &'a ExpertStats,
    pub errors: &'a QuantErrorTable,
    /// Required for `CostKind::Hessian`.
    pub hessian: Option<&'a CostTable>,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub seed: u64,
}

pub fn baseline_cost(kind: CostKind, inputs: &CostInputs<'_>) -> Result<CostTable> {
    let means = inputs.errors.layer_means();
    let scaled = |factor: &dyn Fn(usize, usize) -> f64| CostTable {
        layers: inputs
            .stats
            .layers
            .iter()
            .enumerate()
            .map(|(l, es)| {
                (0..es.len())
                    .map(|e| means[l].map(|m| factor(l, e) * m))
                    .collect()
            })
            .collect(),
    };
    match kind {
        CostKind::Pmq => importance_cost(
            inputs.stats,
            inputs.errors,
            inputs.alpha,
            inputs.beta,
            inputs.gamma,
        ),
        CostKind::Fnorm => importance_cost(inputs.stats, inputs.errors, 0.0, 0.0, 1.0),
        CostKind::Frequency => Ok(scaled(&|l, e| inputs.stats.layers[l][e].phi)),
        CostKind::Weight => Ok(scaled(&|l, e| inputs.stats.layers[l][e].w)),
        CostKind::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(inputs.seed);
            let r: Vec<Vec<f64>> = inputs
                .stats
                .layers
                .iter()
                .map(|es| es.iter().map(|_| rng.random::<f64>()).collect())
                .collect();
            Ok(scaled(&|l, e| r[l][e]))
        }
        CostKind::Hessian => inputs.hessian.cloned().ok_or_else(|| {
            Error::MissingInput("hessian cost needs the Hessian sensitivity table".into())
        }),
    }
}

/// `Σ_sub tr(H_sub) · ‖W_sub − Q_j(W_sub)‖²` for every routed expert.
pub fn hessian_sensitivity(
    model: &MoEModel,
    cal: &Calibration,
    group_size: usize,
) -> Result<CostTable> {
    let mut layers = Vec::with_capacity(model.blocks.len());
    for (l, block) in model.blocks.iter().enumerate() {
        let mut row = Vec::with_capacity(block.moe.experts.len());
        for (e, expert) in block.moe.experts.iter().enumerate() {
            let mut c = [0.0; 3];
            for (s, w) in expert.matrices().iter().enumerate() {
                let tr = cal.hessians[l][e][s].trace();
                for (j, slot) in c.iter_mut().enumerate() {
                    let q = if j == 0 {
                        binarize(w)?
                    } else {
                        rtn_quantize(w, j as u8 + 1, group_size)?
                    };
                    let diff = w.sub(&q.dequantize()?)?.frobenius_norm();
                    *slot += tr * diff * diff;
                }
            }
            row.push(c);
        }
        layers.push(row);
    }
    Ok(CostTable { layers })
}
