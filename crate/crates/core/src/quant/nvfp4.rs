//! NVFP4: E2M1 element codes, one E4M3 scale per 16 contiguous elements, and a
//! per-tensor f32 power-of-two normalizer that keeps the block scales inside
//! E4M3 range.
//!
//! Code layout: bit 3 is the sign, bits 0..=2 index [`FP4_MAGNITUDES`]. The
//! lowest index bit is the E2M1 mantissa bit, which is what ties resolve to.
//! Both signed zeros collapse onto code 0.

use crate::quant::{Payload, QuantizedTensor};
use crate::tensor::{Element, Tensor};

pub const NVFP4_BLOCK: usize = 16;
pub const FP4_MAX: f64 = 6.0;
pub const E4M3_MAX: f64 = 448.0;
pub const FP4_MAGNITUDES: [f64; 8] = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0];

const E4M3_MAX_BITS: u8 = 0x7E;
const E4M3_MIN_NORMAL: f64 = 1.0 / 64.0;

#[inline]
pub fn fp4_value(code: u8) -> f64 {
    let mag = FP4_MAGNITUDES[(code & 7) as usize];
    if code & 8 != 0 {
        -mag
    } else {
        mag
    }
}

/// Nearest E2M1 code with ties to the even mantissa, saturating at ±6.
#[inline]
pub fn fp4_code(v: f64) -> u8 {
    let a = v.abs();
    let idx = if a <= 0.25 {
        0
    } else if a < 0.75 {
        1
    } else if a <= 1.25 {
        2
    } else if a < 1.75 {
        3
    } else if a <= 2.5 {
        4
    } else if a < 3.5 {
        5
    } else if a <= 5.0 {
        6
    } else {
        7
    };
    if idx != 0 && v < 0.0 {
        8 | idx
    } else {
        idx
    }
}

/// Reference nearest-code search: scans all 16 codes.
pub fn oracle_nearest_fp4(v: f64) -> u8 {
    let mut best = 0u8;
    let mut best_dist = f64::INFINITY;
    for code in 0u8..16 {
        if code == 8 {
            // negative zero duplicates code 0
            continue;
        }
        let dist = (fp4_value(code) - v).abs();
        let better = dist < best_dist || (dist == best_dist && code & 1 == 0 && best & 1 == 1);
        if better {
            best = code;
            best_dist = dist;
        }
    }
    best
}

/// Decodes an E4M3 (FN variant) byte. Returns `None` for the NaN encodings.
pub fn e4m3_decode(bits: u8) -> Option<f64> {
    let sign = if bits & 0x80 != 0 { -1.0 } else { 1.0 };
    let exp = ((bits >> 3) & 0x0F) as i32;
    let mant = (bits & 0x07) as f64;
    if exp == 15 && bits & 0x07 == 7 {
        return None;
    }
    let mag = if exp == 0 {
        mant * 2f64.powi(-9)
    } else {
        (1.0 + mant / 8.0) * 2f64.powi(exp - 7)
    };
    Some(sign * mag)
}

/// Rounds a non-negative scale to the nearest E4M3 value, ties to even,
/// saturating at 448.
pub fn e4m3_encode(v: f64) -> u8 {
    if v.is_nan() || v <= 0.0 {
        return 0;
    }
    if v >= E4M3_MAX {
        return E4M3_MAX_BITS;
    }
    if v < E4M3_MIN_NORMAL {
        let m = (v * 512.0).round_ties_even();
        return if m >= 8.0 { 0x08 } else { m as u8 };
    }
    let mut e = ((v.to_bits() >> 52) & 0x7FF) as i32 - 1023;
    let frac = v / 2f64.powi(e);
    let mut mant = ((frac - 1.0) * 8.0).round_ties_even() as i32;
    if mant == 8 {
        mant = 0;
        e += 1;
    }
    let bits = (((e + 7) as u32) << 3) | mant as u32;
    bits.min(E4M3_MAX_BITS as u32) as u8
}

/// Per-tensor normalizer: the smallest power of two `g` with
/// `max|x| <= 6 * 448 * g`, floored at the smallest normal f32. A power of two
/// keeps `code * e4m3 * g` exact. An all-zero tensor uses `g = 1`.
pub fn nvfp4_global_scale(amax: f64) -> f32 {
    if amax == 0.0 {
        return 1.0;
    }
    let ratio = amax / (FP4_MAX * E4M3_MAX);
    if ratio <= f32::MIN_POSITIVE as f64 {
        return f32::MIN_POSITIVE;
    }
    let bits = ratio.to_bits();
    let exp = ((bits >> 52) & 0x7FF) as i32 - 1023;
    let is_pow2 = bits & ((1u64 << 52) - 1) == 0;
    let k = if is_pow2 { exp } else { exp + 1 };
    2f32.powi(k.min(127))
}

pub fn quantize_nvfp4<E: Element>(x: &Tensor<E>) -> QuantizedTensor {
    let amax = x.data().iter().fold(0.0f64, |m, v| m.max(v.as_f64().abs()));
    let g = nvfp4_global_scale(amax);
    let g64 = g as f64;
    let n_blocks = x.numel().div_ceil(NVFP4_BLOCK);
    let mut block_scales = Vec::with_capacity(n_blocks);
    let mut codes = vec![0u8; n_blocks * NVFP4_BLOCK];
    for (b, block) in x.data().chunks(NVFP4_BLOCK).enumerate() {
        let bmax = block.iter().fold(0.0f64, |m, v| m.max(v.as_f64().abs()));
        if bmax == 0.0 {
            block_scales.push(e4m3_encode(1.0));
            continue;
        }
        let mut bits = e4m3_encode(bmax / (FP4_MAX * g64));
        if bits == 0 {
            bits = 1; // a nonzero block never gets a zero scale
        }
        block_scales.push(bits);
        let eff = e4m3_decode(bits).expect("encoder never emits NaN") * g64;
        for (slot, v) in codes[b * NVFP4_BLOCK..].iter_mut().zip(block) {
            *slot = fp4_code(v.as_f64() / eff);
        }
    }
    QuantizedTensor::from_parts(
        x.dims().to_vec(),
        Payload::Nvfp4 {
            global_scale: g,
            block_scales,
            codes,
        },
    )
    .expect("nvfp4 layout is consistent by construction")
}
