//! Round-to-nearest linear quantization and sign binarization.

use super::pack::pack_codes;
use super::{PackedMatrix, Scheme};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupParams {
    pub scale: f64,
    pub zero: u8,
}

impl GroupParams {
    pub fn code(&self, v: f64, bits: u8) -> u8 {
        let qmax = ((1u32 << bits) - 1) as f64;
        ((v / self.scale).round() + self.zero as f64).clamp(0.0, qmax) as u8
    }

    pub fn dequant(&self, q: u8) -> f64 {
        self.scale * (q as f64 - self.zero as f64)
    }
}

/// Scale and zero point for one group. The grid always spans zero so the
/// zero point stays a valid code; a constant group gets a grid on which the
/// constant is exactly representable.
pub fn group_params(values: &[f64], bits: u8) -> GroupParams {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let qmax = ((1u32 << bits) - 1) as f64;
    if lo == hi {
        return match lo {
            c if c > 0.0 => GroupParams { scale: c, zero: 0 },
            c if c < 0.0 => GroupParams { scale: -c, zero: 1 },
            _ => GroupParams {
                scale: 1.0,
                zero: 0,
            },
        };
    }
    let (lo, hi) = (lo.min(0.0), hi.max(0.0));
    let scale = (hi - lo) / qmax;
    let zero = (-(lo / scale).round()).clamp(0.0, qmax) as u8;
    GroupParams { scale, zero }
}

fn check_linear(w: &Tensor, bits: u8, group_size: usize) -> Result<(usize, usize)> {
    let (d, m) = w.dims2("rtn_quantize")?;
    if !(2..=8).contains(&bits) {
        return Err(Error::InvalidArgument(format!(
            "linear quantization needs 2..=8 bits, got {bits}"
        )));
    }
    if group_size == 0 {
        return Err(Error::InvalidArgument("group_size must be positive".into()));
    }
    if d == 0 || m == 0 {
        return Err(Error::shape(
            "rtn_quantize",
            format!("empty matrix {d}×{m}"),
        ));
    }
    Ok((d, m))
}

pub(crate) fn assemble_linear(
    d: usize,
    m: usize,
    bits: u8,
    group_size: usize,
    params: &[GroupParams],
    codes: &[u8],
) -> PackedMatrix {
    PackedMatrix {
        bits,
        d,
        m,
        group_size,
        scheme: Scheme::Linear,
        scales: params.iter().map(|p| p.scale).collect(),
        zeros: params.iter().map(|p| p.zero).collect(),
        payload: pack_codes(codes, bits),
    }
}

pub fn rtn_quantize(w: &Tensor, bits: u8, group_size: usize) -> Result<PackedMatrix> {
    let (d, m) = check_linear(w, bits, group_size)?;
    let groups = d.div_ceil(group_size);
    let data = w.data();
    let mut params = Vec::with_capacity(groups * m);
    let mut codes = vec![0u8; d * m];
    let mut column = Vec::with_capacity(group_size);
    for g in 0..groups {
        let rows = g * group_size..((g + 1) * group_size).min(d);
        for c in 0..m {
            column.clear();
            column.extend(rows.clone().map(|r| data[r * m + c]));
            let p = group_params(&column, bits);
            for r in rows.clone() {
                codes[r * m + c] = p.code(data[r * m + c], bits);
            }
            params.push(p);
        }
    }
    Ok(assemble_linear(d, m, bits, group_size, &params, &codes))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BinaryScale {
    /// `α_c` = mean |W| of output column c.
    #[default]
    Channel,
    /// One scale `‖W‖₁ / (d·m)`.
    Matrix,
}

pub fn binarize(w: &Tensor) -> Result<PackedMatrix> {
    binarize_with(w, BinaryScale::Channel)
}

/// Sign binarization with `sign(0) = +1`; stores `B̃ = (B + 1) / 2`.
pub fn binarize_with(w: &Tensor, scale: BinaryScale) -> Result<PackedMatrix> {
    let (d, m) = w.dims2("binarize")?;
    let data = w.data();
    let codes: Vec<u8> = data.iter().map(|&v| (v >= 0.0) as u8).collect();
    let (scheme, scales) = match scale {
        BinaryScale::Channel => {
            let mut a = vec![0.0; m];
            for r in 0..d {
                for c in 0..m {
                    a[c] += data[r * m + c].abs();
                }
            }
            (
                Scheme::BinaryChannel,
                a.into_iter().map(|s| s / d as f64).collect(),
            )
        }
        BinaryScale::Matrix => {
            let l1: f64 = data.iter().map(|v| v.abs()).sum();
            (Scheme::BinaryMatrix, vec![l1 / (d * m) as f64])
        }
    };
    Ok(PackedMatrix {
        bits: 1,
        d,
        m,
        group_size: d,
        scheme,
        scales,
        zeros: Vec::new(),
        payload: pack_codes(&codes, 1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_aligned_two_bit() {
        let w = Tensor::matrix(4, 1, vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]).unwrap();
        let p = rtn_quantize(&w, 2, 4).unwrap();
        assert_eq!(p.codes().unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(p.dequantize().unwrap().data(), w.data());
    }

    #[test]
    fn constant_groups_are_exact() {
        for c in [0.0, 0.37, -2.5] {
            let w = Tensor::full(&[5, 3], c);
            for bits in [2, 3, 4] {
                let p = rtn_quantize(&w, bits, 2).unwrap();
                assert_eq!(p.dequantize().unwrap(), w);
            }
        }
    }

    #[test]
    fn binarize_small_cases() {
        let w = Tensor::matrix(1, 2, vec![0.5, -0.5]).unwrap();
        let p = binarize(&w).unwrap();
        assert_eq!(p.codes().unwrap(), vec![1, 0]);
        assert_eq!(p.scales, vec![0.5, 0.5]);

        let w = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 0.0]).unwrap();
        let p = binarize(&w).unwrap();
        assert_eq!(p.codes().unwrap(), vec![1, 1, 1, 1]);
        assert_eq!(p.dequantize().unwrap().data(), &[2.0, 1.0, 2.0, 1.0]);
    }

    #[test]
    fn matrix_scale_option() {
        let w = Tensor::matrix(2, 2, vec![1.0, -2.0, 3.0, -6.0]).unwrap();
        let p = binarize_with(&w, BinaryScale::Matrix).unwrap();
        assert_eq!(p.scales, vec![3.0]);
        assert_eq!(p.dequantize().unwrap().data(), &[3.0, -3.0, 3.0, -3.0]);
    }
}
