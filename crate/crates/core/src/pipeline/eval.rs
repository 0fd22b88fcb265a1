//! Held-out next-token loss.

use crate::error::{Error, Result};
use crate::moe::{MarkovCorpus, MoEModel, SlotMasker};
use crate::otp::{run_with_masker, run_with_masker_weighted, PruneLedger};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Next-token pairs from held-out sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

impl EvalSet {
    pub fn from_sequences(seqs: &[Vec<usize>]) -> Self {
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for s in seqs {
            for w in s.windows(2) {
                inputs.push(w[0]);
                targets.push(w[1]);
            }
        }
        EvalSet { inputs, targets }
    }

    pub fn sample(corpus: &MarkovCorpus, sequences: usize, seq_len: usize, seed: u64) -> Self {
        Self::from_sequences(&corpus.sample(sequences, seq_len, seed))
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Mean negative log-likelihood in nats.
    pub nll: f64,
    /// `exp(nll)`.
    pub perplexity: f64,
    pub pruning_ratio: f64,
    /// Mean routed experts evaluated per position and layer.
    pub active_experts: f64,
}

/// Mean NLL of `targets` under row-wise logits.
pub fn mean_nll(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    if logits.rows() != targets.len() || targets.is_empty() {
        return Err(Error::shape(
            "mean_nll",
            format!("{} rows for {} targets", logits.rows(), targets.len()),
        ));
    }
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        total += log_sum_exp(row) - row[t];
    }
    let nll = total / targets.len() as f64;
    if !nll.is_finite() {
        return Err(Error::NonFinite("eval loss"));
    }
    Ok(nll)
}

/// Evaluates `model` on `set` under an optional masker whose decisions
/// depend only on the token. Without attention the logits are a function of
/// the input id, so each distinct id is run once and weighted by its count.
pub fn evaluate(
    model: &MoEModel,
    set: &EvalSet,
    masker: Option<&mut dyn SlotMasker>,
) -> Result<(EvalMetrics, PruneLedger)> {
    if set.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let mut ids = set.inputs.clone();
    ids.sort_unstable();
    ids.dedup();
    let (logits, ledger) = run_with_masker_counts(model, &ids, &set.inputs, masker)?;
    let mut total = 0.0;
    for (&x, &y) in set.inputs.iter().zip(&set.targets) {
        let row = logits.row(ids.binary_search(&x).expect("id present"));
        total += log_sum_exp(row) - row[y];
    }
    let nll = total / set.len() as f64;
    metrics(nll, ledger)
}

/// Like [`evaluate`] but runs every position, for maskers that draw fresh
/// randomness per position.
pub fn evaluate_per_position(
    model: &MoEModel,
    set: &EvalSet,
    masker: Option<&mut dyn SlotMasker>,
) -> Result<(EvalMetrics, PruneLedger)> {
    if set.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let (logits, ledger) = run_with_masker(model, &set.inputs, masker)?;
    metrics(mean_nll(&logits, &set.targets)?, ledger)
}

fn metrics(nll: f64, ledger: PruneLedger) -> Result<(EvalMetrics, PruneLedger)> {
    if !nll.is_finite() {
        return Err(Error::NonFinite("eval loss"));
    }
    Ok((
        EvalMetrics {
            nll,
            perplexity: nll.exp(),
            pruning_ratio: ledger.pruning_ratio(),
            active_experts: ledger.mean_active(),
        },
        ledger,
    ))
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

fn run_with_masker_counts(
    model: &MoEModel,
    ids: &[usize],
    positions: &[usize],
    masker: Option<&mut dyn SlotMasker>,
) -> Result<(Tensor, PruneLedger)> {
    let mut counts = vec![0u64; ids.len()];
    for p in positions {
        counts[ids.binary_search(p).expect("id present")] += 1;
    }
    run_with_masker_weighted(model, ids, Some(&counts), masker)
}
