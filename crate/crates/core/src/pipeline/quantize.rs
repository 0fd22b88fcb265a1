//! Whole-model quantization from a per-expert bit allocation.

use crate::error::{Error, Result};
use crate::importance::Calibration;
use crate::moe::{MoEModel, ParamId};
use crate::quant::{quantize_expert, rtn_quantize, PackedMatrix};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quantizer {
    /// Round-to-nearest, binarization at 1 bit.
    Rtn,
    /// Hessian-compensated, needs calibration.
    #[default]
    Gptq,
}

impl fmt::Display for Quantizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Quantizer::Rtn => "rtn",
            Quantizer::Gptq => "gptq",
        })
    }
}

impl FromStr for Quantizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rtn" => Ok(Quantizer::Rtn),
            "gptq" => Ok(Quantizer::Gptq),
            _ => Err(Error::Config(format!("unknown quantizer {s:?}"))),
        }
    }
}

/// Bit-width of the non-expert matrices (dense MLP, gate, shared expert,
/// head) when they are quantized.
pub const BACKBONE_BITS: u8 = 4;

/// Packed weights plus a model holding their dequantized values. The
/// embedding always stays at full precision.
#[derive(Clone, Debug)]
pub struct QuantizedModel {
    pub model: MoEModel,
    pub packed: BTreeMap<ParamId, PackedMatrix>,
    pub group_size: usize,
}

impl QuantizedModel {
    /// Routed-expert widths, `[layer][expert]`.
    pub fn bits(&self) -> Vec<Vec<u8>> {
        let cfg = &self.model.config;
        (0..cfg.num_layers)
            .map(|layer| {
                (0..cfg.num_experts)
                    .map(|expert| {
                        self.packed[&ParamId::Expert {
                            layer,
                            expert,
                            w: 0,
                        }]
                            .bits
                    })
                    .collect()
            })
            .collect()
    }

    /// Packed bytes of expert `(layer, expert)`.
    pub fn expert_bytes(&self, layer: usize, expert: usize) -> u64 {
        (0..3)
            .map(|w| self.packed[&ParamId::Expert { layer, expert, w }].storage_bytes())
            .sum()
    }

    /// Replaces every packed weight of `base` by its dequantized value.
    pub fn from_parts(
        mut base: MoEModel,
        packed: BTreeMap<ParamId, PackedMatrix>,
        group_size: usize,
    ) -> Result<Self> {
        for id in base.param_ids() {
            let Some(p) = packed.get(&id) else {
                if id.is_routed_expert() {
                    return Err(Error::MissingInput(format!(
                        "no packed section for {}",
                        id.name()
                    )));
                }
                continue;
            };
            let w = p.dequantize()?;
            let slot = base.param_mut(id);
            if slot.shape() != w.shape() {
                return Err(Error::shape(
                    "QuantizedModel::from_parts",
                    format!("{}: {:?} vs {:?}", id.name(), w.shape(), slot.shape()),
                ));
            }
            *slot = w;
        }
        if let Some(id) = packed.keys().find(|id| **id == ParamId::Embed) {
            return Err(Error::Format(format!("{} is never quantized", id.name())));
        }
        Ok(QuantizedModel {
            model: base,
            packed,
            group_size,
        })
    }
}

fn check_shape(model: &MoEModel, bits: &[Vec<u8>]) -> Result<()> {
    let cfg = &model.config;
    if bits.len() != cfg.num_layers {
        return Err(Error::InvalidArgument(format!(
            "allocation has {} layers, model has {}",
            bits.len(),
            cfg.num_layers
        )));
    }
    for (l, b) in bits.iter().enumerate() {
        if b.len() != cfg.num_experts {
            return Err(Error::InvalidArgument(format!(
                "layer {l}: {} widths for {} experts",
                b.len(),
                cfg.num_experts
            )));
        }
    }
    Ok(())
}

/// Quantizes every routed expert at `bits[layer][expert]`, and the other
/// matrices at `backbone_bits` with RTN when given.
pub fn quantize_model(
    model: &MoEModel,
    bits: &[Vec<u8>],
    quantizer: Quantizer,
    calibration: Option<&Calibration>,
    group_size: usize,
    backbone_bits: Option<u8>,
) -> Result<QuantizedModel> {
    check_shape(model, bits)?;
    let cal = match (quantizer, calibration) {
        (Quantizer::Gptq, None) => {
            return Err(Error::MissingInput(
                "compensated quantization needs calibration data".into(),
            ));
        }
        (Quantizer::Gptq, Some(c)) => Some(c),
        (Quantizer::Rtn, _) => None,
    };
    let mut packed = BTreeMap::new();
    for id in model.param_ids() {
        match id {
            ParamId::Embed => {}
            ParamId::Expert {
                layer,
                expert,
                w: 0,
            } => {
                let h = cal.map(|c| &c.hessians[layer][expert]);
                let q = quantize_expert(
                    &model.blocks[layer].moe.experts[expert],
                    bits[layer][expert],
                    h,
                    group_size,
                )?;
                for (w, m) in q.matrices.into_iter().enumerate() {
                    packed.insert(ParamId::Expert { layer, expert, w }, m);
                }
            }
            ParamId::Expert { .. } => {}
            _ => {
                if let Some(b) = backbone_bits {
                    packed.insert(id, rtn_quantize(model.param(id), b, group_size)?);
                }
            }
        }
    }
    QuantizedModel::from_parts(model.clone(), packed, group_size)
}
