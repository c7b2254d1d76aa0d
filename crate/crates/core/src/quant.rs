//! Token-wise asymmetric 4-bit quantization of latent codes.
//!
//! One scale and zero point per token. Codes are packed two per byte with
//! the even-indexed element in the low nibble.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

pub const LEVELS: u8 = 15;
const MIN_SCALE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedLatent {
    pub codes: Vec<u8>,
    pub scale: f32,
    pub zero_point: f32,
}

impl QuantizedLatent {
    /// Resident bytes: packed codes plus two 32-bit reals.
    pub fn bytes(&self) -> usize {
        self.codes.len() + 8
    }

    /// Serialized form: packed codes, then little-endian scale and zero point.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.codes.clone();
        out.extend_from_slice(&self.scale.to_le_bytes());
        out.extend_from_slice(&self.zero_point.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Format("quantized latent shorter than its 8-byte footer".into()));
        }
        let n = bytes.len() - 8;
        let scale = f32::from_le_bytes(bytes[n..n + 4].try_into().expect("4 bytes"));
        let zero_point = f32::from_le_bytes(bytes[n + 4..].try_into().expect("4 bytes"));
        Ok(Self { codes: bytes[..n].to_vec(), scale, zero_point })
    }
}

/// Bytes for one quantized latent of width `latent_dim`.
pub fn quantized_bytes(latent_dim: usize) -> usize {
    latent_dim.div_ceil(2) + 8
}

pub fn pack_nibbles(codes: &[u8]) -> Vec<u8> {
    codes
        .chunks(2)
        .map(|pair| (pair[0] & 0x0f) | (pair.get(1).copied().unwrap_or(0) << 4))
        .collect()
}

pub fn unpack_nibbles(packed: &[u8], len: usize) -> Result<Vec<u8>> {
    if packed.len() * 2 < len {
        return Err(Error::Shape(format!("{} packed bytes cannot hold {len} codes", packed.len())));
    }
    Ok((0..len)
        .map(|i| {
            let b = packed[i / 2];
            if i % 2 == 0 {
                b & 0x0f
            } else {
                b >> 4
            }
        })
        .collect())
}

// Largest f32 not above x / smallest f32 not below x.
fn f32_down(x: f64) -> f32 {
    let f = x as f32;
    if f as f64 > x {
        f32::from_bits(if f > 0.0 { f.to_bits() - 1 } else if f == 0.0 { 0x8000_0001 } else { f.to_bits() + 1 })
    } else {
        f
    }
}

fn f32_up(x: f64) -> f32 {
    -f32_down(-x)
}

/// Smallest f32 scale, not below `scale`, that a dequantized top code maps
/// back to. `zero_point + 15·scale` can round in f64 when the spread is a few
/// f32 ulps of the zero point, which would otherwise bump the scale on
/// requantization.
fn stable_scale(zero_point: f32, mut scale: f32) -> f32 {
    let zp = zero_point as f64;
    for _ in 0..64 {
        let top = LEVELS as f64 * scale as f64 + zp;
        if f32_up(((top - zp) / LEVELS as f64).max(MIN_SCALE)) <= scale {
            break;
        }
        scale = f32::from_bits(scale.to_bits() + 1);
    }
    scale
}

/// `zero_point = min(z)`, `scale = (max − min)/15` (at least 1e-12),
/// `code = round((z − zero_point)/scale)` clamped to `[0, 15]`.
///
/// The zero point is rounded down and the scale up when narrowed to 32 bits,
/// so every input stays inside the representable grid.
pub fn quantize_token<T: Real>(z: &[T]) -> QuantizedLatent {
    if z.is_empty() {
        return QuantizedLatent { codes: Vec::new(), scale: MIN_SCALE as f32, zero_point: 0.0 };
    }
    let lo = z.iter().map(|x| x.f64()).fold(f64::INFINITY, f64::min);
    let hi = z.iter().map(|x| x.f64()).fold(f64::NEG_INFINITY, f64::max);
    let zero_point = f32_down(lo);
    let scale = stable_scale(zero_point, f32_up(((hi - zero_point as f64) / LEVELS as f64).max(MIN_SCALE)));
    let codes: Vec<u8> = z
        .iter()
        .map(|x| {
            let q = ((x.f64() - zero_point as f64) / scale as f64).round();
            q.clamp(0.0, LEVELS as f64) as u8
        })
        .collect();
    QuantizedLatent { codes: pack_nibbles(&codes), scale, zero_point }
}

/// `z_i = code_i·scale + zero_point`; a zero scale yields the zero point.
pub fn dequantize_token<T: Real>(q: &QuantizedLatent, latent_dim: usize) -> Result<Vec<T>> {
    let codes = unpack_nibbles(&q.codes, latent_dim)?;
    let (scale, zp) = (q.scale as f64, q.zero_point as f64);
    Ok(codes
        .into_iter()
        .map(|c| if scale == 0.0 { T::c(zp) } else { T::c(c as f64 * scale + zp) })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unrepresentable_singleton_is_fixed_point() {
        for x in [0.006865317551353349f64, -49.81597826439345, 0.5690841097915486] {
            let q = quantize_token(&[x]);
            let back: Vec<f64> = dequantize_token(&q, 1).unwrap();
            assert_eq!(quantize_token(&back), q);
            assert!((back[0] - x).abs() <= q.scale as f64 / 2.0 + 1e-9);
        }
    }

    #[test]
    fn constant_vector() {
        let q = quantize_token(&[0.75f32; 5]);
        assert!(unpack_nibbles(&q.codes, 5).unwrap().iter().all(|&c| c == 0));
        assert_eq!(q.zero_point, 0.75);
        assert_eq!(dequantize_token::<f32>(&q, 5).unwrap(), vec![0.75; 5]);
    }

    #[test]
    fn endpoints_round_trip() {
        let q = quantize_token(&[0.0f64, 15.0]);
        assert_eq!(unpack_nibbles(&q.codes, 2).unwrap(), vec![0, 15]);
        assert_eq!(dequantize_token::<f64>(&q, 2).unwrap(), vec![0.0, 15.0]);
    }

    #[test]
    fn zero_scale_path() {
        let q = QuantizedLatent { codes: pack_nibbles(&[3, 9, 15]), scale: 0.0, zero_point: -2.5 };
        assert_eq!(dequantize_token::<f32>(&q, 3).unwrap(), vec![-2.5; 3]);
    }

    #[test]
    fn insufficient_codes() {
        let q = quantize_token(&[1.0f32, 2.0]);
        assert!(matches!(dequantize_token::<f32>(&q, 3), Err(Error::Shape(_))));
    }

    #[test]
    fn nibble_layout_and_bytes() {
        assert_eq!(pack_nibbles(&[1, 2, 3]), vec![0x21, 0x03]);
        let q = quantize_token(&[0.0f32; 7]);
        assert_eq!(q.bytes(), 4 + 8);
        assert_eq!(quantized_bytes(7), 12);
        assert_eq!(QuantizedLatent::from_bytes(&q.to_bytes()).unwrap(), q);
    }

    #[test]
    fn directed_rounding() {
        let x = 0.1f64;
        assert!((f32_down(x) as f64) <= x && (f32_up(x) as f64) >= x);
        assert!((f32_down(-x) as f64) <= -x);
        assert_eq!(f32_down(0.5), 0.5);
    }
}
