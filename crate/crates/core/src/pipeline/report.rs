//! Storage, activated-parameter and MAC accounting.

use super::{EvalMetrics, QuantizedModel};
use crate::moe::{MoEModel, ParamId};
use crate::otp::{PruneLedger, RouterSet};
use crate::quant::MacCount;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub eval_nll: f64,
    pub perplexity: f64,
    /// Packed payloads, quantizer parameters, float64 sections and routers.
    pub total_bytes: u64,
    /// The same model stored entirely as float64.
    pub fp64_bytes: u64,
    pub compression_ratio: f64,
    /// Routed-expert bits per weight, scales and zeros included.
    pub expert_avg_bits: f64,
    /// Mean allocated routed-expert width.
    pub expert_nominal_bits: f64,
    /// Bits per weight over every quantized matrix, overhead included.
    pub quantized_avg_bits: f64,
    /// Bytes touched per token: embedding row, dense MLP, gate, shared
    /// expert, kept routed experts, routers and head.
    pub activated_bytes_per_token: f64,
    /// Kept routed experts only.
    pub activated_expert_bytes_per_token: f64,
    /// Routed experts without pruning.
    pub unpruned_expert_bytes_per_token: f64,
    pub pruning_ratio: f64,
    pub multiplications_per_token: f64,
    pub additions_per_token: f64,
    pub router_params: usize,
}

fn bytes_of(q: &QuantizedModel, id: ParamId) -> u64 {
    match q.packed.get(&id) {
        Some(p) => p.storage_bytes(),
        None => 8 * q.model.param(id).len() as u64,
    }
}

/// MACs for one row through matrix `id`: binary matrices need one
/// multiplication per output, everything else a full dot product.
fn macs_of(q: &QuantizedModel, id: ParamId) -> MacCount {
    let (d, m, binary) = match q.packed.get(&id) {
        Some(p) => (p.d, p.m, p.scheme.is_binary()),
        None => {
            let t = q.model.param(id);
            (t.rows(), t.cols(), false)
        }
    };
    let multiplications = if binary { m } else { d * m };
    MacCount {
        multiplications: multiplications as u64,
        additions: ((d - 1) * m) as u64,
    }
}

fn sum_over(ids: impl IntoIterator<Item = ParamId>, f: impl Fn(ParamId) -> u64) -> u64 {
    ids.into_iter().map(f).sum()
}

/// Report fields from a quantized model, optional routers, the slot ledger
/// of an evaluation run, and its metrics.
pub fn accounting(
    q: &QuantizedModel,
    routers: Option<&RouterSet>,
    ledger: &PruneLedger,
    metrics: &EvalMetrics,
    config_hash: &str,
) -> Report {
    let model: &MoEModel = &q.model;
    let cfg = &model.config;
    let router_params = routers.map_or(0, |r| r.num_params());

    let total_bytes = sum_over(model.param_ids(), |id| bytes_of(q, id)) + 8 * router_params as u64;
    let fp64_bytes = 8 * model.num_params() as u64;

    let (mut ebits, mut eelems, mut enominal) = (0u64, 0u64, 0u64);
    let (mut qbits, mut qelems) = (0u64, 0u64);
    for (id, p) in &q.packed {
        let (b, n) = (p.payload_bits() + p.overhead_bits(), (p.d * p.m) as u64);
        qbits += b;
        qelems += n;
        if id.is_routed_expert() {
            ebits += b;
            eelems += n;
            enominal += p.bits as u64 * n;
        }
    }
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };

    let positions = ledger.positions.max(1) as f64;
    let mut kept_bytes = 0.0;
    let mut routed_bytes = 0.0;
    let mut kept_macs = (0.0, 0.0);
    for layer in 0..cfg.num_layers {
        for expert in 0..cfg.num_experts {
            let ids: Vec<ParamId> = (0..3)
                .map(|w| ParamId::Expert { layer, expert, w })
                .collect();
            let bytes = sum_over(ids.iter().copied(), |id| bytes_of(q, id)) as f64;
            let macs = ids.iter().fold(MacCount::default(), |mut acc, &id| {
                acc += macs_of(q, id);
                acc
            });
            let kept = ledger
                .kept
                .get(layer)
                .and_then(|l| l.get(expert))
                .copied()
                .unwrap_or(0) as f64
                / positions;
            let routed = ledger
                .routed
                .get(layer)
                .and_then(|l| l.get(expert))
                .copied()
                .unwrap_or(0) as f64
                / positions;
            kept_bytes += kept * bytes;
            routed_bytes += routed * bytes;
            kept_macs.0 += kept * macs.multiplications as f64;
            kept_macs.1 += kept * macs.additions as f64;
        }
    }

    let mut fixed_ids = vec![ParamId::Head];
    for layer in 0..cfg.num_layers {
        fixed_ids.extend((0..3).map(|w| ParamId::Dense { layer, w }));
        fixed_ids.push(ParamId::Gate { layer });
        if model.blocks[layer].moe.shared.is_some() {
            fixed_ids.extend((0..3).map(|w| ParamId::Shared { layer, w }));
        }
    }
    let fixed_bytes = sum_over(fixed_ids.iter().copied(), |id| bytes_of(q, id)) as f64;
    let mut fixed_macs = fixed_ids.iter().fold(MacCount::default(), |mut acc, &id| {
        acc += macs_of(q, id);
        acc
    });
    if let Some(r) = routers {
        for layer in &r.layers {
            for t in [&layer.fc1, &layer.fc2] {
                fixed_macs += MacCount {
                    multiplications: t.len() as u64,
                    additions: ((t.rows() - 1) * t.cols()) as u64,
                };
            }
        }
    }
    let embed_row = 8.0 * cfg.hidden as f64;

    Report {
        config_hash: config_hash.to_string(),
        eval_nll: metrics.nll,
        perplexity: metrics.perplexity,
        total_bytes,
        fp64_bytes,
        compression_ratio: fp64_bytes as f64 / total_bytes as f64,
        expert_avg_bits: ratio(ebits, eelems),
        expert_nominal_bits: ratio(enominal, eelems),
        quantized_avg_bits: ratio(qbits, qelems),
        activated_bytes_per_token: embed_row
            + fixed_bytes
            + kept_bytes
            + 8.0 * router_params as f64,
        activated_expert_bytes_per_token: kept_bytes,
        unpruned_expert_bytes_per_token: routed_bytes,
        pruning_ratio: ledger.pruning_ratio(),
        multiplications_per_token: fixed_macs.multiplications as f64 + kept_macs.0,
        additions_per_token: fixed_macs.additions as f64 + kept_macs.1,
        router_params,
    }
}

impl Report {
    pub const CSV_HEADER: &'static str = "config_hash,eval_nll,perplexity,total_bytes,fp64_bytes,compression_ratio,expert_avg_bits,expert_nominal_bits,quantized_avg_bits,activated_bytes_per_token,activated_expert_bytes_per_token,unpruned_expert_bytes_per_token,pruning_ratio,multiplications_per_token,additions_per_token,router_params";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.config_hash,
            self.eval_nll,
            self.perplexity,
            self.total_bytes,
            self.fp64_bytes,
            self.compression_ratio,
            self.expert_avg_bits,
            self.expert_nominal_bits,
            self.quantized_avg_bits,
            self.activated_bytes_per_token,
            self.activated_expert_bytes_per_token,
            self.unpruned_expert_bytes_per_token,
            self.pruning_ratio,
            self.multiplications_per_token,
            self.additions_per_token,
            self.router_params
        )
    }
}
