//! LSB-first contiguous bit streams of fixed-width codes.

use crate::error::{Error, Result};

pub fn packed_len(count: usize, bits: u8) -> usize {
    (count * bits as usize).div_ceil(8)
}

/// Packs `codes` (each `< 2^bits`) into a contiguous stream, least
/// significant bits first, zero-padding the final byte.
pub fn pack_codes(codes: &[u8], bits: u8) -> Vec<u8> {
    assert!((1..=8).contains(&bits));
    let mut out = vec![0u8; packed_len(codes.len(), bits)];
    let mut pos = 0usize;
    for &c in codes {
        debug_assert!(bits == 8 || c >> bits == 0);
        let v = (c as u16) << (pos % 8);
        out[pos / 8] |= v as u8;
        if (pos % 8) + bits as usize > 8 {
            out[pos / 8 + 1] |= (v >> 8) as u8;
        }
        pos += bits as usize;
    }
    out
}

pub fn unpack_codes(payload: &[u8], bits: u8, count: usize) -> Result<Vec<u8>> {
    if !(1..=8).contains(&bits) {
        return Err(Error::Format(format!("unsupported code width {bits}")));
    }
    if payload.len() != packed_len(count, bits) {
        return Err(Error::Format(format!(
            "payload is {} bytes, expected {} for {count} codes of {bits} bits",
            payload.len(),
            packed_len(count, bits)
        )));
    }
    let mask = (1u16 << bits) - 1;
    let mut out = Vec::with_capacity(count);
    let mut pos = 0usize;
    for _ in 0..count {
        let lo = payload[pos / 8] as u16;
        let hi = payload.get(pos / 8 + 1).copied().unwrap_or(0) as u16;
        out.push((((lo | (hi << 8)) >> (pos % 8)) & mask) as u8);
        pos += bits as usize;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_bit_codes_fill_bytes_lsb_first() {
        assert_eq!(pack_codes(&[0, 1, 2, 3], 2), vec![0b1110_0100]);
        assert_eq!(pack_codes(&[1, 2, 3], 4), vec![0x21, 0x03]);
    }

    #[test]
    fn three_bit_stream_crosses_bytes() {
        let codes = [7, 0, 5, 1, 6];
        let packed = pack_codes(&codes, 3);
        assert_eq!(packed.len(), 2);
        assert_eq!(unpack_codes(&packed, 3, 5).unwrap(), codes);
    }

    #[test]
    fn wrong_payload_length_rejected() {
        assert!(unpack_codes(&[0, 0], 2, 4).is_err());
    }
}
