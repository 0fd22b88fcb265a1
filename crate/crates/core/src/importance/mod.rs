//! Calibration statistics: routing frequency and weight per expert, the
//! per-expert Hessians, and the table of output perturbations caused by
//! quantizing one expert at a time.
//!
//! The toy model has no attention, so every position depends only on its
//! token id. All calibration passes run once per distinct id and weight the
//! results by the id's count.

use crate::error::{Error, Result};
use crate::moe::{ExpertWeights, MarkovCorpus, MoEModel};
use crate::quant::{quantize_expert, HessianAccumulator};
use crate::tensor::{Tape, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const BIT_CHOICES: [u8; 3] = [1, 2, 3];

/// Token sequences used for calibration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub sequences: Vec<Vec<usize>>,
    pub seed: u64,
}

impl CalibrationSet {
    /// `tokens` ids from the model's corpus family, split into sequences of
    /// `seq_len` (the last may be shorter).
    pub fn sample(corpus: &MarkovCorpus, tokens: usize, seq_len: usize, seed: u64) -> Self {
        let seq_len = seq_len.max(1);
        let n_seq = tokens.div_ceil(seq_len);
        let mut sequences = corpus.sample(n_seq, seq_len, seed);
        let extra = n_seq * seq_len - tokens;
        if let Some(last) = sequences.last_mut() {
            last.truncate(seq_len - extra);
        }
        sequences.retain(|s| !s.is_empty());
        CalibrationSet { sequences, seed }
    }

    pub fn from_sequences(sequences: Vec<Vec<usize>>, seed: u64) -> Self {
        CalibrationSet { sequences, seed }
    }

    pub fn num_tokens(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).sum()
    }

    /// Distinct ids in ascending order with their counts.
    pub fn histogram(&self) -> (Vec<usize>, Vec<usize>) {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &t in self.sequences.iter().flatten() {
            *counts.entry(t).or_default() += 1;
        }
        counts.into_iter().unzip()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertStat {
    /// Tokens routed to the expert.
    pub n: usize,
    /// `n / N`.
    pub phi: f64,
    /// Renormalised routing weight summed over all tokens, divided by `N`.
    pub w: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertStats {
    pub total_tokens: usize,
    pub top_k: usize,
    /// `[layer][expert]`.
    pub layers: Vec<Vec<ExpertStat>>,
}

/// `ε[layer][expert][bit − 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantErrorTable {
    pub layers: Vec<Vec<[f64; 3]>>,
}

impl QuantErrorTable {
    pub fn get(&self, layer: usize, expert: usize, bits: u8) -> f64 {
        self.layers[layer][expert][bits as usize - 1]
    }

    /// Mean over experts of each bit-width's error, per layer.
    pub fn layer_means(&self) -> Vec<[f64; 3]> {
        self.layers
            .iter()
            .map(|l| {
                let mut m = [0.0; 3];
                for e in l {
                    for j in 0..3 {
                        m[j] += e[j] / l.len() as f64;
                    }
                }
                m
            })
            .collect()
    }
}

/// `c[layer][expert][bit − 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    pub layers: Vec<Vec<[f64; 3]>>,
}

/// Everything one clean pass over the calibration set yields.
pub struct Calibration {
    pub ids: Vec<usize>,
    pub counts: Vec<usize>,
    pub sequences: Vec<Vec<usize>>,
    /// Hidden state entering each block, distinct ids × H.
    pub block_inputs: Vec<Tensor>,
    /// Selected experts per layer, distinct ids × k.
    pub routes: Vec<Vec<usize>>,
    pub stats: ExpertStats,
    /// `[layer][expert]` Hessians of `w_gate`, `w_up`, `w_down`.
    pub hessians: Vec<Vec<[HessianAccumulator; 3]>>,
}

impl Calibration {
    /// Runs the clean model once over the distinct calibration ids.
    pub fn collect(model: &MoEModel, calib: &CalibrationSet) -> Result<Self> {
        let n_total = calib.num_tokens();
        if n_total == 0 {
            return Err(Error::InvalidArgument("empty calibration set".into()));
        }
        let (ids, counts) = calib.histogram();
        model.check_ids(&ids)?;
        let cfg = &model.config;
        let (h, f, e, k) = (cfg.hidden, cfg.ffn_inner, cfg.num_experts, cfg.top_k);

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let mut x = model.embed_tokens(&mut tape, &bound, &ids)?;
        let mut block_inputs = Vec::with_capacity(cfg.num_layers);
        let mut routes = Vec::with_capacity(cfg.num_layers);
        let mut layers = Vec::with_capacity(cfg.num_layers);
        let mut hessians = Vec::with_capacity(cfg.num_layers);
        for layer in 0..cfg.num_layers {
            block_inputs.push(tape.value(x).clone());
            let (next, routing) = model.block_forward(&mut tape, &bound, layer, x, None)?;
            let u = tape.value(routing.moe_input).clone();
            let mut n = vec![0usize; e];
            let mut wsum = vec![0.0; e];
            let mut rows: Vec<Vec<usize>> = vec![Vec::new(); e];
            for t in 0..ids.len() {
                for s in 0..k {
                    let ex = routing.indices[t * k + s];
                    n[ex] += counts[t];
                    wsum[ex] += counts[t] as f64 * routing.weights[t * k + s];
                    rows[ex].push(t);
                }
            }
            let mut layer_h = Vec::with_capacity(e);
            for (ex, rs) in rows.iter().enumerate() {
                let mut acc = [
                    HessianAccumulator::new(h),
                    HessianAccumulator::new(h),
                    HessianAccumulator::new(f),
                ];
                if !rs.is_empty() {
                    let xs = gather(&u, rs);
                    let c: Vec<f64> = rs.iter().map(|&t| counts[t] as f64).collect();
                    acc[0].add_rows(&xs, Some(&c))?;
                    acc[1].add_rows(&xs, Some(&c))?;
                    let inner = model.blocks[layer].moe.experts[ex].inner_activation(&xs)?;
                    acc[2].add_rows(&inner, Some(&c))?;
                }
                layer_h.push(acc);
            }
            layers.push(
                (0..e)
                    .map(|ex| ExpertStat {
                        n: n[ex],
                        phi: n[ex] as f64 / n_total as f64,
                        w: wsum[ex] / n_total as f64,
                    })
                    .collect(),
            );
            routes.push(routing.indices.clone());
            hessians.push(layer_h);
            x = next;
        }
        Ok(Calibration {
            ids,
            counts,
            sequences: calib.sequences.clone(),
            block_inputs,
            routes,
            stats: ExpertStats {
                total_tokens: n_total,
                top_k: k,
                layers,
            },
            hessians,
        })
    }

    fn position_of(&self, id: usize) -> usize {
        self.ids.binary_search(&id).expect("calibration id")
    }

    /// ε for expert `(layer, expert)` replaced by `quantized`: mean over
    /// sequences of the Frobenius norm of the final-logit change.
    pub fn quant_error(
        &self,
        model: &mut MoEModel,
        layer: usize,
        expert: usize,
        quantized: ExpertWeights,
    ) -> Result<f64> {
        let k = model.config.top_k;
        let rows: Vec<usize> = (0..self.ids.len())
            .filter(|&t| self.routes[layer][t * k..(t + 1) * k].contains(&expert))
            .collect();
        if rows.is_empty() {
            return Ok(0.0);
        }
        let x = gather(&self.block_inputs[layer], &rows);
        let clean = logits_from(model, layer, &x)?;
        let original = std::mem::replace(&mut model.blocks[layer].moe.experts[expert], quantized);
        let perturbed = logits_from(model, layer, &x);
        model.blocks[layer].moe.experts[expert] = original;
        let perturbed = perturbed?;

        let mut sq = vec![0.0; self.ids.len()];
        for (i, &t) in rows.iter().enumerate() {
            sq[t] = clean
                .row(i)
                .iter()
                .zip(perturbed.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
        }
        let total: f64 = self
            .sequences
            .iter()
            .map(|s| {
                s.iter()
                    .map(|&id| sq[self.position_of(id)])
                    .sum::<f64>()
                    .sqrt()
            })
            .sum();
        Ok(total / self.sequences.len() as f64)
    }

    /// Full ε table with the Hessian-compensated quantizer.
    pub fn quant_error_table(
        &self,
        model: &MoEModel,
        group_size: usize,
    ) -> Result<QuantErrorTable> {
        self.quant_error_table_with(model, |layer, expert, w, bits| {
            let q = quantize_expert(w, bits, Some(&self.hessians[layer][expert]), group_size)?;
            q.dequantize()
        })
    }

    /// ε table for an arbitrary quantizer `q(layer, expert, weights, bits)`.
    pub fn quant_error_table_with(
        &self,
        model: &MoEModel,
        mut q: impl FnMut(usize, usize, &ExpertWeights, u8) -> Result<ExpertWeights>,
    ) -> Result<QuantErrorTable> {
        let mut work = model.clone();
        let mut layers = Vec::with_capacity(model.blocks.len());
        for layer in 0..model.blocks.len() {
            let mut row = Vec::with_capacity(model.config.num_experts);
            for expert in 0..model.config.num_experts {
                let mut eps = [0.0; 3];
                if self.stats.layers[layer][expert].n > 0 {
                    for (j, &bits) in BIT_CHOICES.iter().enumerate() {
                        let qw = q(
                            layer,
                            expert,
                            &model.blocks[layer].moe.experts[expert],
                            bits,
                        )?;
                        eps[j] = self.quant_error(&mut work, layer, expert, qw)?;
                    }
                }
                row.push(eps);
            }
            layers.push(row);
        }
        Ok(QuantErrorTable { layers })
    }
}

fn gather(x: &Tensor, rows: &[usize]) -> Tensor {
    let c = x.cols();
    let mut data = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        data.extend_from_slice(x.row(r));
    }
    Tensor::from_parts(vec![rows.len(), c], data)
}

fn logits_from(model: &MoEModel, layer: usize, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let out = model.forward_from(&mut tape, &bound, layer, xv, None)?;
    Ok(tape.value(out.logits).clone())
}

/// Routing statistics from one clean pass.
pub fn collect_stats(model: &MoEModel, calib: &CalibrationSet) -> Result<ExpertStats> {
    Ok(Calibration::collect(model, calib)?.stats)
}

/// ε for one `(layer, expert, bits)` with the Hessian-compensated quantizer.
pub fn compute_quant_error(
    model: &MoEModel,
    calib: &CalibrationSet,
    layer: usize,
    expert: usize,
    bits: u8,
    group_size: usize,
) -> Result<f64> {
    if !BIT_CHOICES.contains(&bits) {
        return Err(Error::InvalidArgument(format!(
            "bits must be 1, 2 or 3, got {bits}"
        )));
    }
    let cal = Calibration::collect(model, calib)?;
    let q = quantize_expert(
        &model.blocks[layer].moe.experts[expert],
        bits,
        Some(&cal.hessians[layer][expert]),
        group_size,
    )?;
    cal.quant_error(&mut model.clone(), layer, expert, q.dequantize()?)
}

/// `c = φ^α · w^β · ε^γ`; experts never routed cost 0 at every width.
pub fn importance_cost(
    stats: &ExpertStats,
    errors: &QuantErrorTable,
    alpha: f64,
    beta: f64,
    gamma: f64,
) -> Result<CostTable> {
    if alpha < 0.0 || beta < 0.0 || gamma < 0.0 {
        return Err(Error::InvalidArgument(
            "cost exponents must be non-negative".into(),
        ));
    }
    let layers = stats
        .layers
        .iter()
        .zip(&errors.layers)
        .map(|(ls, le)| {
            ls.iter()
                .zip(le)
                .map(|(s, eps)| {
                    if s.n == 0 {
                        return [0.0; 3];
                    }
                    let base = s.phi.powf(alpha) * s.w.powf(beta);
                    eps.map(|e| base * e.powf(gamma))
                })
                .collect()
        })
        .collect();
    Ok(CostTable { layers })
}

/// Provenance attached to exported tables.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct StatRow {
    expert: usize,
    n: usize,
    phi: f64,
    w: f64,
}

#[derive(Serialize, Deserialize)]
struct ErrorRow {
    expert: usize,
    eps1: f64,
    eps2: f64,
    eps3: f64,
}

#[derive(Serialize, Deserialize)]
struct Export<T> {
    config_hash: String,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    total_tokens: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    top_k: Option<usize>,
    layers: BTreeMap<usize, Vec<T>>,
}

pub fn stats_to_json(stats: &ExpertStats, prov: &Provenance) -> Result<String> {
    let layers = stats
        .layers
        .iter()
        .enumerate()
        .map(|(l, es)| {
            let rows = es
                .iter()
                .enumerate()
                .map(|(expert, s)| StatRow {
                    expert,
                    n: s.n,
                    phi: s.phi,
                    w: s.w,
                })
                .collect();
            (l, rows)
        })
        .collect();
    let export = Export {
        config_hash: prov.config_hash.clone(),
        seed: prov.seed,
        total_tokens: Some(stats.total_tokens),
        top_k: Some(stats.top_k),
        layers,
    };
    Ok(serde_json::to_string_pretty(&export)?)
}

pub fn stats_from_json(s: &str) -> Result<(ExpertStats, Provenance)> {
    let e: Export<StatRow> = serde_json::from_str(s)?;
    let missing = || Error::Format("stats JSON lacks total_tokens/top_k".into());
    let stats = ExpertStats {
        total_tokens: e.total_tokens.ok_or_else(missing)?,
        top_k: e.top_k.ok_or_else(missing)?,
        layers: e
            .layers
            .into_values()
            .map(|rows| {
                rows.into_iter()
                    .map(|r| ExpertStat {
                        n: r.n,
                        phi: r.phi,
                        w: r.w,
                    })
                    .collect()
            })
            .collect(),
    };
    Ok((
        stats,
        Provenance {
            config_hash: e.config_hash,
            seed: e.seed,
        },
    ))
}

pub fn errors_to_json(errors: &QuantErrorTable, prov: &Provenance) -> Result<String> {
    let layers = errors
        .layers
        .iter()
        .enumerate()
        .map(|(l, es)| {
            let rows = es
                .iter()
                .enumerate()
                .map(|(expert, e)| ErrorRow {
                    expert,
                    eps1: e[0],
                    eps2: e[1],
                    eps3: e[2],
                })
                .collect();
            (l, rows)
        })
        .collect();
    let export = Export {
        config_hash: prov.config_hash.clone(),
        seed: prov.seed,
        total_tokens: None,
        top_k: None,
        layers,
    };
    Ok(serde_json::to_string_pretty(&export)?)
}

pub fn errors_from_json(s: &str) -> Result<(QuantErrorTable, Provenance)> {
    let e: Export<ErrorRow> = serde_json::from_str(s)?;
    let layers = e
        .layers
        .into_values()
        .map(|rows| rows.into_iter().map(|r| [r.eps1, r.eps2, r.eps3]).collect())
        .collect();
    Ok((
        QuantErrorTable { layers },
        Provenance {
            config_hash: e.config_hash,
            seed: e.seed,
        },
    ))
}
