//! Routing records and the hook through which pruning strategies rewrite
//! per-slot routing weights.

use crate::error::Result;
use crate::tensor::{topk, Tape, Tensor, Var};

/// Routing of one token through one MoE layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingRecord {
    /// Selected experts, highest routing weight first.
    pub indices: Vec<usize>,
    /// Routing weights renormalised over the selected experts.
    pub weights: Vec<f64>,
    /// Full softmax over all experts.
    pub scores: Vec<f64>,
}

/// Routing of a batch of tokens through one MoE layer.
#[derive(Clone, Debug)]
pub struct LayerRouting {
    pub layer: usize,
    pub top_k: usize,
    /// tokens × top_k, row-major.
    pub indices: Vec<usize>,
    /// tokens × top_k renormalised weights.
    pub weights: Vec<f64>,
    /// tokens × experts softmax scores.
    pub scores: Tensor,
    /// Normalised hidden state fed to gate and experts.
    pub moe_input: Var,
    /// Weights actually applied to each slot after any masking.
    pub slot_weights: Option<Vec<f64>>,
}

impl LayerRouting {
    pub fn tokens(&self) -> usize {
        self.scores.rows()
    }

    pub fn record(&self, token: usize) -> RoutingRecord {
        let k = self.top_k;
        RoutingRecord {
            indices: self.indices[token * k..(token + 1) * k].to_vec(),
            weights: self.weights[token * k..(token + 1) * k].to_vec(),
            scores: self.scores.row(token).to_vec(),
        }
    }

    /// Slots that contributed to the output (non-zero applied weight).
    pub fn kept_slots(&self, token: usize) -> usize {
        let k = self.top_k;
        match &self.slot_weights {
            Some(w) => w[token * k..(token + 1) * k]
                .iter()
                .filter(|v| **v != 0.0)
                .count(),
            None => k,
        }
    }
}

/// How a pruning strategy changes the routing weights of one layer.
pub enum SlotWeights {
    Unchanged,
    /// tokens × top_k multipliers applied element-wise to the weights.
    Multiply(Var),
    /// tokens × top_k weights used instead of the routed ones.
    Replace(Var),
}

/// Supplies per-layer slot weights during a forward pass.
pub trait SlotMasker {
    /// `hidden` is the layer's normalised input and `gate_weights` the
    /// tokens × top_k renormalised routing weights, sorted descending.
    fn slot_weights(
        &mut self,
        tape: &mut Tape<'_>,
        layer: usize,
        hidden: Var,
        gate_weights: Var,
        routing: &LayerRouting,
    ) -> Result<SlotWeights>;
}

/// Gate softmax for a single token and its top-k selection.
pub fn gate_scores(gate: &Tensor, token: &Tensor, top_k: usize) -> Result<RoutingRecord> {
    if token.len() != gate.rows() {
        return Err(crate::Error::shape(
            "gate_scores",
            format!("token dim {} vs gate {:?}", token.len(), gate.shape()),
        ));
    }
    let row = Tensor::from_parts(vec![1, token.len()], token.data().to_vec());
    let scores = row.matmul(gate)?.softmax(1)?;
    let (indices, picked) = topk(scores.data(), top_k)?;
    let total: f64 = picked.iter().sum();
    Ok(RoutingRecord {
        indices,
        weights: picked.iter().map(|p| p / total).collect(),
        scores: scores.into_data(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gate_is_uniform() {
        let gate = Tensor::zeros(&[4, 5]);
        let tok = Tensor::vector(vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let r = gate_scores(&gate, &tok, 2).unwrap();
        for s in &r.scores {
            assert!((s - 0.2).abs() < 1e-15);
        }
        assert_eq!(r.indices, vec![0, 1]);
    }

    #[test]
    fn symmetric_logits_select_first_pair() {
        // token = e0, so logits equal the first gate row
        let gate = Tensor::from_rows(&[&[1.0, 1.0, 0.0, 0.0], &[0.0, 0.0, 0.0, 0.0]]).unwrap();
        let tok = Tensor::vector(vec![1.0, 0.0]).unwrap();
        let r = gate_scores(&gate, &tok, 2).unwrap();
        assert_eq!(r.indices, vec![0, 1]);
        assert!((r.weights[0] - 0.5).abs() < 1e-15 && (r.weights[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let gate = Tensor::zeros(&[4, 5]);
        let tok = Tensor::vector(vec![1.0, 2.0]).unwrap();
        assert!(gate_scores(&gate, &tok, 1).is_err());
    }
}
