//! Weight quantizers, Hessian-compensated quantization and packed storage.
//!
//! Weights are stored `d × m` (input × output), so a layer computes `x·W`.
//! Linear codes form groups of `group_size` consecutive input rows within
//! each output column; the last group of a column may be shorter.

mod expert;
mod gptq;
mod matmul;
pub mod pack;
mod rtn;

pub use expert::{quantize_expert, QuantizedExpert};
pub use gptq::{cholesky_lower, gptq_quantize, HessianAccumulator};
pub use matmul::{binary_matmul, dense_matmul_counted, dequant_matmul, MacCount};
pub use rtn::{binarize, binarize_with, group_params, rtn_quantize, BinaryScale, GroupParams};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_GROUP_SIZE: usize = 32;
const PKDW_MAGIC: &[u8; 4] = b"PKDW";
const PKDW_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    /// `s·(q − z)` per group.
    Linear,
    /// `α_c·(2q − 1)` per output channel.
    BinaryChannel,
    /// `s·(2q − 1)` with one scale for the matrix.
    BinaryMatrix,
}

impl Scheme {
    fn tag(self) -> u8 {
        match self {
            Scheme::Linear => 0,
            Scheme::BinaryChannel => 1,
            Scheme::BinaryMatrix => 2,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(Scheme::Linear),
            1 => Ok(Scheme::BinaryChannel),
            2 => Ok(Scheme::BinaryMatrix),
            _ => Err(Error::Format(format!("unknown scheme tag {t}"))),
        }
    }

    pub fn is_binary(self) -> bool {
        self != Scheme::Linear
    }
}

/// Bit-packed quantized matrix with its dequantization parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedMatrix {
    pub bits: u8,
    pub d: usize,
    pub m: usize,
    pub group_size: usize,
    pub scheme: Scheme,
    /// Linear: `groups × m`, group-major. Binary: `m` or 1.
    pub scales: Vec<f64>,
    /// Linear only, same layout as `scales`.
    pub zeros: Vec<u8>,
    /// Row-major codes, `bits` each.
    pub payload: Vec<u8>,
}

impl PackedMatrix {
    pub fn groups_per_column(&self) -> usize {
        self.d.div_ceil(self.group_size)
    }

    pub fn codes(&self) -> Result<Vec<u8>> {
        pack::unpack_codes(&self.payload, self.bits, self.d * self.m)
    }

    pub fn dequantize(&self) -> Result<Tensor> {
        let codes = self.codes()?;
        let (d, m) = (self.d, self.m);
        let mut out = vec![0.0; d * m];
        for r in 0..d {
            for c in 0..m {
                let q = codes[r * m + c];
                out[r * m + c] = match self.scheme {
                    Scheme::Linear => {
                        let g = (r / self.group_size) * m + c;
                        self.scales[g] * (q as f64 - self.zeros[g] as f64)
                    }
                    Scheme::BinaryChannel => self.scales[c] * (2.0 * q as f64 - 1.0),
                    Scheme::BinaryMatrix => self.scales[0] * (2.0 * q as f64 - 1.0),
                };
            }
        }
        Tensor::new(vec![d, m], out)
    }

    /// Bits spent on quantizer parameters (f64 scales, u8 zeros).
    pub fn overhead_bits(&self) -> u64 {
        64 * self.scales.len() as u64 + 8 * self.zeros.len() as u64
    }

    pub fn payload_bits(&self) -> u64 {
        (self.d * self.m) as u64 * self.bits as u64
    }

    pub fn storage_bytes(&self) -> u64 {
        self.payload.len() as u64 + 8 * self.scales.len() as u64 + self.zeros.len() as u64
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Format(msg));
        if self.d == 0 || self.m == 0 || self.group_size == 0 {
            return bad(format!(
                "degenerate dims {}×{} group {}",
                self.d, self.m, self.group_size
            ));
        }
        let (want_scales, want_zeros) = match self.scheme {
            Scheme::Linear => {
                if !(2..=8).contains(&self.bits) {
                    return bad(format!("linear scheme with {} bits", self.bits));
                }
                let n = self.groups_per_column() * self.m;
                (n, n)
            }
            Scheme::BinaryChannel | Scheme::BinaryMatrix => {
                if self.bits != 1 {
                    return bad(format!("binary scheme with {} bits", self.bits));
                }
                (
                    if self.scheme == Scheme::BinaryChannel {
                        self.m
                    } else {
                        1
                    },
                    0,
                )
            }
        };
        if self.scales.len() != want_scales || self.zeros.len() != want_zeros {
            return bad(format!(
                "{} scales / {} zeros, expected {want_scales} / {want_zeros}",
                self.scales.len(),
                self.zeros.len()
            ));
        }
        if self.payload.len() != pack::packed_len(self.d * self.m, self.bits) {
            return bad(format!("payload length {}", self.payload.len()));
        }
        if self.scheme == Scheme::Linear
            && self.zeros.iter().any(|&z| z as u32 >= 1u32 << self.bits)
        {
            return bad("zero point out of code range".into());
        }
        Ok(())
    }

    /// `PKDW` section: header, f64 scales, u8 zeros, payload; little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.storage_bytes() as usize);
        out.extend_from_slice(PKDW_MAGIC);
        out.extend_from_slice(&PKDW_VERSION.to_le_bytes());
        out.push(self.bits);
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        out.extend_from_slice(&(self.m as u32).to_le_bytes());
        out.extend_from_slice(&(self.group_size as u32).to_le_bytes());
        out.push(self.scheme.tag());
        for s in &self.scales {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.extend_from_slice(&self.zeros);
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parses one section, returning it and the bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != PKDW_MAGIC {
            return Err(Error::Format("missing PKDW magic".into()));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != PKDW_VERSION {
            return Err(Error::Format(format!("unsupported PKDW version {version}")));
        }
        let bits = r.take(1)?[0];
        let d = r.u32()? as usize;
        let m = r.u32()? as usize;
        let group_size = r.u32()? as usize;
        let scheme = Scheme::from_tag(r.take(1)?[0])?;
        let (n_scales, n_zeros) = match scheme {
            Scheme::Linear => {
                let n = d.div_ceil(group_size.max(1)) * m;
                (n, n)
            }
            Scheme::BinaryChannel => (m, 0),
            Scheme::BinaryMatrix => (1, 0),
        };
        let scales = r
            .take(n_scales * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let zeros = r.take(n_zeros)?.to_vec();
        let payload = r.take(pack::packed_len(d * m, bits.max(1)))?.to_vec();
        let pm = PackedMatrix {
            bits,
            d,
            m,
            group_size,
            scheme,
            scales,
            zeros,
            payload,
        };
        pm.validate()?;
        Ok((pm, r.pos))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("PKDW section truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
