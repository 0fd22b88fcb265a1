//! Fixed pruning strategies and bookkeeping of kept expert slots.

use super::{OtpMasker, RouterSet};
use crate::error::{Error, Result};
use crate::moe::{LayerRouting, MoEModel, RoutingRecord, SlotMasker, SlotWeights};
use crate::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Positions per forward pass, to bound tape memory.
const CHUNK: usize = 1024;

/// Drops the second expert when `w1 / w0 < mu` and renormalises the rest.
/// Only defined for top-2 routing.
pub fn rule_based_prune(record: &RoutingRecord, mu: f64) -> Result<RoutingRecord> {
    if record.indices.len() != 2 || record.weights.len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "rule-based pruning needs top-2 routing, got k={}",
            record.indices.len()
        )));
    }
    let mut out = record.clone();
    if record.weights[1] / record.weights[0] < mu {
        out.weights = vec![1.0, 0.0];
    }
    Ok(out)
}

/// Rule-based pruning as a masker, one threshold per layer.
pub struct RulePruner {
    pub mu: Vec<f64>,
}

impl SlotMasker for RulePruner {
    fn slot_weights(
        &mut self,
        tape: &mut Tape<'_>,
        layer: usize,
        _hidden: Var,
        _gate_weights: Var,
        routing: &LayerRouting,
    ) -> Result<SlotWeights> {
        let mu = *self.mu.get(layer).ok_or_else(|| {
            Error::InvalidArgument(format!("no rule threshold for layer {layer}"))
        })?;
        let n = routing.tokens();
        let mut w = Vec::with_capacity(n * 2);
        for t in 0..n {
            w.extend(rule_based_prune(&routing.record(t), mu)?.weights);
        }
        Ok(SlotWeights::Replace(
            tape.constant(Tensor::from_parts(vec![n, 2], w)),
        ))
    }
}

/// Per-layer median of `w1 / w0` over `tokens`, so roughly half the
/// positions lose their second expert.
pub fn median_ratio_thresholds(model: &MoEModel, tokens: &[usize]) -> Result<Vec<f64>> {
    if model.config.top_k != 2 {
        return Err(Error::InvalidArgument(format!(
            "rule-based pruning needs top-2 routing, got k={}",
            model.config.top_k
        )));
    }
    if tokens.is_empty() {
        return Err(Error::InvalidArgument(
            "median threshold needs tokens".into(),
        ));
    }
    let mut ratios = vec![Vec::with_capacity(tokens.len()); model.blocks.len()];
    for chunk in tokens.chunks(CHUNK) {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let out = model.forward(&mut tape, &bound, chunk, None)?;
        for (l, r) in out.layers.iter().enumerate() {
            ratios[l].extend(r.weights.chunks(2).map(|w| w[1] / w[0]));
        }
    }
    Ok(ratios
        .into_iter()
        .map(|mut v| {
            v.sort_by(f64::total_cmp);
            let m = v.len();
            if m % 2 == 1 {
                v[m / 2]
            } else {
                0.5 * (v[m / 2 - 1] + v[m / 2])
            }
        })
        .collect())
}

/// Drops the lowest-ranked slot of each position with probability `p`,
/// without renormalising.
pub struct RandomPruner {
    pub p: f64,
    rng: ChaCha8Rng,
}

impl RandomPruner {
    pub fn new(p: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "drop probability {p} outside [0, 1]"
            )));
        }
        Ok(RandomPruner {
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Drop probability giving an expected pruning ratio of `ratio` among
    /// `k` slots when at most one slot is dropped.
    pub fn for_ratio(ratio: f64, k: usize, seed: u64) -> Result<Self> {
        Self::new((ratio * k as f64).clamp(0.0, 1.0), seed)
    }
}

impl SlotMasker for RandomPruner {
    fn slot_weights(
        &mut self,
        tape: &mut Tape<'_>,
        _layer: usize,
        _hidden: Var,
        _gate_weights: Var,
        routing: &LayerRouting,
    ) -> Result<SlotWeights> {
        let k = routing.top_k;
        let n = routing.tokens();
        let mut m = vec![1.0; n * k];
        if k >= 2 {
            for t in 0..n {
                if self.rng.random_bool(self.p) {
                    m[t * k + k - 1] = 0.0;
                }
            }
        }
        Ok(SlotWeights::Multiply(
            tape.constant(Tensor::from_parts(vec![n, k], m)),
        ))
    }
}

/// Routed and kept slot counts per (layer, expert).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PruneLedger {
    pub positions: usize,
    pub routed: Vec<Vec<u64>>,
    pub kept: Vec<Vec<u64>>,
}

impl PruneLedger {
    pub fn new(layers: usize, experts: usize) -> Self {
        PruneLedger {
            positions: 0,
            routed: vec![vec![0; experts]; layers],
            kept: vec![vec![0; experts]; layers],
        }
    }

    /// Adds one forward pass; `weights[t]` counts how many positions token
    /// row t stands for (1 each when `None`).
    pub fn record(&mut self, layers: &[LayerRouting], weights: Option<&[u64]>) {
        let Some(first) = layers.first() else { return };
        let n = first.tokens();
        let weight = |t: usize| weights.map_or(1, |w| w[t]);
        self.positions += (0..n).map(weight).sum::<u64>() as usize;
        for r in layers {
            let applied = r.slot_weights.as_deref();
            for (at, &e) in r.indices.iter().enumerate() {
                let w = weight(at / r.top_k);
                self.routed[r.layer][e] += w;
                if applied.is_none_or(|v| v[at] != 0.0) {
                    self.kept[r.layer][e] += w;
                }
            }
        }
    }

    pub fn routed_total(&self) -> u64 {
        self.routed.iter().flatten().sum()
    }

    pub fn kept_total(&self) -> u64 {
        self.kept.iter().flatten().sum()
    }

    /// Fraction of routed slots that were skipped.
    pub fn pruning_ratio(&self) -> f64 {
        let r = self.routed_total();
        if r == 0 {
            0.0
        } else {
            1.0 - self.kept_total() as f64 / r as f64
        }
    }

    /// Mean experts evaluated per position and layer.
    pub fn mean_active(&self) -> f64 {
        let denom = (self.positions * self.routed.len()) as f64;
        if denom == 0.0 {
            0.0
        } else {
            self.kept_total() as f64 / denom
        }
    }
}

/// Logits (positions × vocab) and slot counts for `ids` under an optional
/// frozen masker, in chunks.
pub fn run_with_masker(
    model: &MoEModel,
    ids: &[usize],
    masker: Option<&mut dyn SlotMasker>,
) -> Result<(Tensor, PruneLedger)> {
    run_with_masker_weighted(model, ids, None, masker)
}

/// As [`run_with_masker`], with row t of `ids` counted `weights[t]` times
/// in the ledger.
pub fn run_with_masker_weighted(
    model: &MoEModel,
    ids: &[usize],
    weights: Option<&[u64]>,
    mut masker: Option<&mut dyn SlotMasker>,
) -> Result<(Tensor, PruneLedger)> {
    if weights.is_some_and(|w| w.len() != ids.len()) {
        return Err(Error::InvalidArgument("one weight per id required".into()));
    }
    let mc = &model.config;
    let mut ledger = PruneLedger::new(mc.num_layers, mc.num_experts);
    let mut data = Vec::with_capacity(ids.len() * mc.vocab);
    for (c, chunk) in ids.chunks(CHUNK).enumerate() {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let m = masker.as_mut().map(|m| &mut **m as &mut dyn SlotMasker);
        let out = model.forward(&mut tape, &bound, chunk, m)?;
        ledger.record(
            &out.layers,
            weights.map(|w| &w[c * CHUNK..c * CHUNK + chunk.len()]),
        );
        data.extend_from_slice(tape.value(out.logits).data());
    }
    Ok((Tensor::from_parts(vec![ids.len(), mc.vocab], data), ledger))
}

/// Noise-free hard masks from trained routers; pruned experts are skipped.
pub fn inference_with_otp(
    model: &MoEModel,
    routers: &RouterSet,
    ids: &[usize],
) -> Result<(Tensor, PruneLedger)> {
    if routers.layers.len() != model.blocks.len() {
        return Err(Error::InvalidArgument(format!(
            "{} routers for {} layers",
            routers.layers.len(),
            model.blocks.len()
        )));
    }
    let mut masker = OtpMasker::inference(routers);
    run_with_masker(model, ids, Some(&mut masker))
}
