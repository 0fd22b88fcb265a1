//! Quantization of a whole gated-FFN expert.

use super::gptq::{gptq_quantize, HessianAccumulator};
use super::rtn::{binarize, rtn_quantize};
use super::PackedMatrix;
use crate::error::{Error, Result};
use crate::moe::ExpertWeights;

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedExpert {
    pub bits: u8,
    /// `w_gate`, `w_up`, `w_down`.
    pub matrices: [PackedMatrix; 3],
}

impl QuantizedExpert {
    pub fn dequantize(&self) -> Result<ExpertWeights> {
        let [g, u, d] = &self.matrices;
        Ok(ExpertWeights {
            w_gate: g.dequantize()?,
            w_up: u.dequantize()?,
            w_down: d.dequantize()?,
        })
    }
}

/// Quantizes all three matrices at `bits`. With Hessians the compensated
/// path is used (sign grid for 1 bit); without, plain RTN or binarization.
pub fn quantize_expert(
    expert: &ExpertWeights,
    bits: u8,
    hessians: Option<&[HessianAccumulator; 3]>,
    group_size: usize,
) -> Result<QuantizedExpert> {
    if !(1..=8).contains(&bits) {
        return Err(Error::InvalidArgument(format!(
            "unsupported expert bit-width {bits}"
        )));
    }
    let mats = expert.matrices();
    let mut out = Vec::with_capacity(3);
    for (i, w) in mats.iter().enumerate() {
        out.push(match (hessians, bits) {
            (Some(h), _) => gptq_quantize(w, bits, &h[i], group_size)?,
            (None, 1) => binarize(w)?,
            (None, _) => rtn_quantize(w, bits, group_size)?,
        });
    }
    let matrices: [PackedMatrix; 3] = out.try_into().expect("three matrices");
    Ok(QuantizedExpert { bits, matrices })
}
