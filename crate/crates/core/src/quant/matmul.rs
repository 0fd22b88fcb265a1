//! Matmuls against packed weights with multiplication/addition counters.

use super::{PackedMatrix, Scheme};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacCount {
    pub multiplications: u64,
    pub additions: u64,
}

impl std::ops::AddAssign for MacCount {
    fn add_assign(&mut self, o: MacCount) {
        self.multiplications += o.multiplications;
        self.additions += o.additions;
    }
}

fn check_input(x: &Tensor, d: usize, op: &'static str) -> Result<usize> {
    let (n, xd) = x.dims2(op)?;
    if xd != d {
        return Err(Error::shape(
            op,
            format!("input width {xd}, weight rows {d}"),
        ));
    }
    Ok(n)
}

/// `x·Ŵ` for a binary matrix using signed sums: per output, add the inputs
/// where `B̃ = 1`, subtract the rest, then apply the one scale.
pub fn binary_matmul(x: &Tensor, w: &PackedMatrix) -> Result<(Tensor, MacCount)> {
    if !w.scheme.is_binary() {
        return Err(Error::InvalidArgument(
            "binary_matmul needs a binary matrix".into(),
        ));
    }
    let n = check_input(x, w.d, "binary_matmul")?;
    let (d, m) = (w.d, w.m);
    let codes = w.codes()?;
    let mut out = vec![0.0; n * m];
    let mut count = MacCount::default();
    for r in 0..n {
        let xr = x.row(r);
        for c in 0..m {
            let signed = |j: usize| if codes[j * m + c] == 1 { xr[j] } else { -xr[j] };
            let mut acc = signed(0);
            for j in 1..d {
                acc += signed(j);
            }
            let s = match w.scheme {
                Scheme::BinaryChannel => w.scales[c],
                _ => w.scales[0],
            };
            out[r * m + c] = s * acc;
        }
        count.multiplications += m as u64;
        count.additions += ((d - 1) * m) as u64;
    }
    Ok((Tensor::new(vec![n, m], out)?, count))
}

/// Unpack, dequantize, then a dense product.
pub fn dequant_matmul(x: &Tensor, w: &PackedMatrix) -> Result<Tensor> {
    check_input(x, w.d, "dequant_matmul")?;
    x.matmul(&w.dequantize()?)
}

/// Dense product with the counter a full-precision layer would report.
pub fn dense_matmul_counted(x: &Tensor, w: &Tensor) -> Result<(Tensor, MacCount)> {
    let (d, m) = w.dims2("dense_matmul")?;
    let n = check_input(x, d, "dense_matmul")? as u64;
    let y = x.matmul(w)?;
    Ok((
        y,
        MacCount {
            multiplications: n * (d * m) as u64,
            additions: n * ((d - 1) * m) as u64,
        },
    ))
}
