//! Hessian-compensated quantization: rows of `W` (input dims) are quantized
//! in order and each row's error is pushed onto the remaining rows through
//! the upper Cholesky factor of `H⁻¹`.

use super::pack::pack_codes;
use super::rtn::{assemble_linear, group_params, GroupParams};
use super::{PackedMatrix, Scheme};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const DAMP_FRACTION: f64 = 0.01;
const DAMP_RETRIES: u32 = 3;

/// Running `H = Σ 2·x·xᵀ` over calibration inputs of one matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct HessianAccumulator {
    d: usize,
    h: Vec<f64>,
    samples: f64,
}

impl HessianAccumulator {
    pub fn new(d: usize) -> Self {
        HessianAccumulator {
            d,
            h: vec![0.0; d * d],
            samples: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Calibration rows seen, counting multiplicities.
    pub fn samples(&self) -> f64 {
        self.samples
    }

    pub fn matrix(&self) -> Tensor {
        Tensor::from_parts(vec![self.d, self.d], self.h.clone())
    }

    pub fn trace(&self) -> f64 {
        (0..self.d).map(|i| self.h[i * self.d + i]).sum()
    }

    /// Adds rows `x` (n × d), row r counted `counts[r]` times.
    pub fn add_rows(&mut self, x: &Tensor, counts: Option<&[f64]>) -> Result<()> {
        let (n, d) = x.dims2("hessian")?;
        if d != self.d {
            return Err(Error::shape(
                "hessian",
                format!("rows of width {d}, accumulator {}", self.d),
            ));
        }
        if counts.is_some_and(|c| c.len() != n) {
            return Err(Error::shape("hessian", "counts length differs from rows"));
        }
        let weight = |r: usize| counts.map_or(1.0, |c| c[r]);
        let mut scaled = x.transpose()?;
        for i in 0..d {
            for r in 0..n {
                scaled.data_mut()[i * n + r] *= 2.0 * weight(r);
            }
        }
        let outer = scaled.matmul(x)?;
        for (a, b) in self.h.iter_mut().zip(outer.data()) {
            *a += b;
        }
        self.samples += (0..n).map(weight).sum::<f64>();
        Ok(())
    }
}

/// Lower Cholesky factor of a symmetric positive definite `n × n` matrix.
pub fn cholesky_lower(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for p in 0..j {
                s -= l[i * n + p] * l[j * n + p];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

fn invert_lower(l: &[f64], n: usize) -> Vec<f64> {
    let mut inv = vec![0.0; n * n];
    for c in 0..n {
        for i in c..n {
            let mut s = if i == c { 1.0 } else { 0.0 };
            for p in c..i {
                s -= l[i * n + p] * inv[p * n + c];
            }
            inv[i * n + c] = s / l[i * n + i];
        }
    }
    inv
}

/// Upper factor `U` with `UᵀU = (H + damping)⁻¹`, plus the repaired `H`.
fn inverse_factor(h: &HessianAccumulator) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = h.d;
    let mut base = h.h.clone();
    for i in 0..n {
        // inputs never seen in calibration
        if base[i * n + i] == 0.0 {
            base[i * n + i] = 1.0;
        }
    }
    let mean_diag = (0..n).map(|i| base[i * n + i]).sum::<f64>() / n as f64;
    let mut damp = DAMP_FRACTION * mean_diag;
    for _ in 0..=DAMP_RETRIES {
        let mut a = base.clone();
        for i in 0..n {
            a[i * n + i] += damp;
        }
        if let Some(l) = cholesky_lower(&a, n) {
            let li = invert_lower(&l, n);
            let mut hinv = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..=i {
                    let s: f64 = (i..n).map(|p| li[p * n + i] * li[p * n + j]).sum();
                    hinv[i * n + j] = s;
                    hinv[j * n + i] = s;
                }
            }
            if let Some(lh) = cholesky_lower(&hinv, n) {
                let mut u = vec![0.0; n * n];
                for i in 0..n {
                    for j in i..n {
                        u[i * n + j] = lh[j * n + i];
                    }
                }
                return Ok((u, base));
            }
        }
        damp *= 10.0;
    }
    Err(Error::Numeric(format!(
        "Hessian of dimension {n} not positive definite after {DAMP_RETRIES} damping increases"
    )))
}

/// Quantizes `w` (d × m) at `bits` using calibration Hessian `h` (d × d).
/// `bits = 1` uses the sign grid with per-channel scales, refit afterwards
/// by Hessian-weighted least squares.
pub fn gptq_quantize(
    w: &Tensor,
    bits: u8,
    h: &HessianAccumulator,
    group_size: usize,
) -> Result<PackedMatrix> {
    let (d, m) = w.dims2("gptq_quantize")?;
    if h.d != d {
        return Err(Error::shape(
            "gptq_quantize",
            format!("Hessian {0}×{0} for weight {d}×{m}", h.d),
        ));
    }
    if !(1..=8).contains(&bits) || group_size == 0 {
        return Err(Error::InvalidArgument(format!(
            "bits={bits}, group_size={group_size}"
        )));
    }
    if h.samples < d as f64 {
        log::debug!(
            "gptq: {} calibration rows for input dim {d}; relying on damping",
            h.samples
        );
    }
    let (u, h_fixed) = inverse_factor(h)?;
    let mut work = w.data().to_vec();
    let mut codes = vec![0u8; d * m];

    let alpha: Vec<f64> = if bits == 1 {
        (0..m)
            .map(|c| (0..d).map(|r| work[r * m + c].abs()).sum::<f64>() / d as f64)
            .collect()
    } else {
        Vec::new()
    };
    let mut params: Vec<GroupParams> = Vec::new();
    let mut column = Vec::with_capacity(group_size);
    let mut err = vec![0.0; m];

    for i in 0..d {
        if bits > 1 && i % group_size == 0 {
            let rows = i..(i + group_size).min(d);
            for c in 0..m {
                column.clear();
                column.extend(rows.clone().map(|r| work[r * m + c]));
                params.push(group_params(&column, bits));
            }
        }
        let g0 = params.len().saturating_sub(m);
        let uii = u[i * d + i];
        for c in 0..m {
            let v = work[i * m + c];
            let deq = if bits == 1 {
                let q = (v >= 0.0) as u8;
                codes[i * m + c] = q;
                alpha[c] * (2.0 * q as f64 - 1.0)
            } else {
                let p = params[g0 + c];
                let q = p.code(v, bits);
                codes[i * m + c] = q;
                p.dequant(q)
            };
            err[c] = (v - deq) / uii;
        }
        for j in i + 1..d {
            let uij = u[i * d + j];
            if uij == 0.0 {
                continue;
            }
            let row = &mut work[j * m..(j + 1) * m];
            for (x, e) in row.iter_mut().zip(&err) {
                *x -= uij * e;
            }
        }
    }

    if bits > 1 {
        return Ok(assemble_linear(d, m, bits, group_size, &params, &codes));
    }
    // Per column: keep the compensated signs or the plain signs, whichever
    // has the lower H-weighted error once its scale is refit.
    let orig = w.data();
    let mut scales = alpha.clone();
    for c in 0..m {
        let wc: Vec<f64> = (0..d).map(|r| orig[r * m + c]).collect();
        let comp: Vec<f64> = (0..d)
            .map(|r| 2.0 * codes[r * m + c] as f64 - 1.0)
            .collect();
        let plain: Vec<f64> = wc
            .iter()
            .map(|&v| if v >= 0.0 { 1.0 } else { -1.0 })
            .collect();
        let (a_comp, e_comp) = refit_scale(&h_fixed, d, &wc, &comp, alpha[c]);
        let (a_plain, e_plain) = refit_scale(&h_fixed, d, &wc, &plain, alpha[c]);
        if e_plain < e_comp {
            for r in 0..d {
                codes[r * m + c] = (plain[r] > 0.0) as u8;
            }
            scales[c] = a_plain;
        } else {
            scales[c] = a_comp;
        }
    }
    Ok(PackedMatrix {
        bits: 1,
        d,
        m,
        group_size: d,
        scheme: Scheme::BinaryChannel,
        scales,
        zeros: Vec::new(),
        payload: pack_codes(&codes, 1),
    })
}

fn quad_form(h: &[f64], d: usize, a: &[f64], b: &[f64]) -> f64 {
    (0..d)
        .map(|r| {
            a[r] * h[r * d..(r + 1) * d]
                .iter()
                .zip(b)
                .map(|(x, y)| x * y)
                .sum::<f64>()
        })
        .sum()
}

/// Least-squares scale for signs `b` under metric `h`, and the resulting
/// error; falls back to `alpha` when the fit is not a positive scale.
fn refit_scale(h: &[f64], d: usize, w: &[f64], b: &[f64], alpha: f64) -> (f64, f64) {
    let den = quad_form(h, d, b, b);
    let fit = quad_form(h, d, b, w) / den;
    let a = if den > 0.0 && fit.is_finite() && fit > 0.0 {
        fit
    } else {
        alpha
    };
    let r: Vec<f64> = w.iter().zip(b).map(|(x, y)| x - a * y).collect();
    (a, quad_form(h, d, &r, &r))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_of_known_matrix() {
        let a = [4.0, 2.0, 2.0, 3.0];
        let l = cholesky_lower(&a, 2).unwrap();
        assert_eq!(l, vec![2.0, 0.0, 1.0, 2f64.sqrt()]);
        assert!(cholesky_lower(&[1.0, 2.0, 2.0, 1.0], 2).is_none());
    }

    #[test]
    fn inverse_factor_reconstructs_inverse() {
        let mut h = HessianAccumulator::new(3);
        let x = Tensor::matrix(
            4,
            3,
            vec![1.0, 0.5, 0.0, 0.2, 1.0, 0.3, 0.0, 0.1, 1.0, 1.0, 1.0, 1.0],
        )
        .unwrap();
        h.add_rows(&x, None).unwrap();
        let (u, base) = inverse_factor(&h).unwrap();
        let damp = 0.01 * (0..3).map(|i| base[i * 3 + i]).sum::<f64>() / 3.0;
        // (UᵀU)(H + damp) = I
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for p in 0..3 {
                    let inv_ip: f64 = (0..3).map(|q| u[q * 3 + i] * u[q * 3 + p]).sum();
                    let hpj = base[p * 3 + j] + if p == j { damp } else { 0.0 };
                    s += inv_ip * hpj;
                }
                assert!((s - (i == j) as u8 as f64).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn mismatched_hessian_rejected() {
        let h = HessianAccumulator::new(3);
        assert!(gptq_quantize(&Tensor::zeros(&[4, 2]), 2, &h, 2).is_err());
    }
}
