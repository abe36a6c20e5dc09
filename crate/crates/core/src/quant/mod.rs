//! Quantization codecs: symmetric and asymmetric INT8, NVFP4 (E2M1 codes with
//! E4M3 block scales and an f32 tensor normalizer), and an FP16 passthrough.
//!
//! Every codec is a pure function of its input bytes. Block-wise codecs walk
//! the flattened row-major element order in contiguous runs.

mod fp16;
mod int8;
pub mod nvfp4;

use std::fmt;
use std::str::FromStr;

pub use fp16::{fp16_roundtrip, quantize_fp16, round_to_f16};
pub use int8::{
    quantize_int8_asym, quantize_int8_asym_blocked, quantize_int8_sym, quantize_int8_sym_blocked,
    round_half_even,
};
pub use nvfp4::{
    e4m3_decode, e4m3_encode, fp4_code, fp4_value, oracle_nearest_fp4, quantize_nvfp4,
    E4M3_MAX, FP4_MAGNITUDES, NVFP4_BLOCK,
};

use crate::error::{Error, Result};
use crate::tensor::{checked_numel, Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum QuantFormat {
    Int8Sym,
    Int8Asym,
    Nvfp4,
    /// No quantization beyond rounding onto the binary16 grid.
    Fp16Passthrough,
}

impl QuantFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            QuantFormat::Int8Sym => "int8_sym",
            QuantFormat::Int8Asym => "int8_asym",
            QuantFormat::Nvfp4 => "nvfp4",
            QuantFormat::Fp16Passthrough => "fp16",
        }
    }

    /// QDT1 dtype code used when a tensor in this format is serialized.
    pub fn dtype_code(self) -> u8 {
        match self {
            QuantFormat::Int8Sym => 16,
            QuantFormat::Int8Asym => 17,
            QuantFormat::Nvfp4 => 18,
            QuantFormat::Fp16Passthrough => 2,
        }
    }
}

impl fmt::Display for QuantFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QuantFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "int8_sym" | "int8" => Ok(QuantFormat::Int8Sym),
            "int8_asym" => Ok(QuantFormat::Int8Asym),
            "nvfp4" => Ok(QuantFormat::Nvfp4),
            "fp16" | "fp16_passthrough" => Ok(QuantFormat::Fp16Passthrough),
            other => Err(Error::Config(format!("unknown quant format '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Int8Sym {
        block_len: usize,
        scales: Vec<f64>,
        codes: Vec<i8>,
    },
    Int8Asym {
        block_len: usize,
        scales: Vec<f64>,
        zero_points: Vec<i64>,
        codes: Vec<u8>,
    },
    /// `codes` holds one E2M1 code (0..=15) per element, padded with zeros to
    /// a whole number of 16-element blocks.
    Nvfp4 {
        global_scale: f32,
        block_scales: Vec<u8>,
        codes: Vec<u8>,
    },
    Fp16 {
        bits: Vec<u16>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    dims: Vec<usize>,
    payload: Payload,
}

impl QuantizedTensor {
    /// Assembles a quantized tensor, checking that the metadata is consistent
    /// with `dims`. Code values are checked on dequantization.
    pub fn from_parts(dims: Vec<usize>, payload: Payload) -> Result<Self> {
        let numel = checked_numel(&dims)?;
        if dims.contains(&0) {
            return Err(Error::Malformed("zero extent".into()));
        }
        let blocks = |block_len: usize| -> Result<usize> {
            if block_len == 0 {
                return Err(Error::Malformed("zero block length".into()));
            }
            Ok(numel.div_ceil(block_len))
        };
        match &payload {
            Payload::Int8Sym {
                block_len,
                scales,
                codes,
            } => {
                if codes.len() != numel || scales.len() != blocks(*block_len)? {
                    return Err(Error::Malformed("int8_sym metadata mismatch".into()));
                }
            }
            Payload::Int8Asym {
                block_len,
                scales,
                zero_points,
                codes,
            } => {
                let n = blocks(*block_len)?;
                if codes.len() != numel || scales.len() != n || zero_points.len() != n {
                    return Err(Error::Malformed("int8_asym metadata mismatch".into()));
                }
            }
            Payload::Nvfp4 {
                block_scales,
                codes,
                ..
            } => {
                let n = numel.div_ceil(NVFP4_BLOCK);
                if block_scales.len() != n || codes.len() != n * NVFP4_BLOCK {
                    return Err(Error::Malformed("nvfp4 metadata mismatch".into()));
                }
            }
            Payload::Fp16 { bits } => {
                if bits.len() != numel {
                    return Err(Error::Malformed("fp16 payload mismatch".into()));
                }
            }
        }
        Ok(Self { dims, payload })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn payload(&self) -> &Payload {
        &self.payload
    }

    pub fn format(&self) -> QuantFormat {
        match self.payload {
            Payload::Int8Sym { .. } => QuantFormat::Int8Sym,
            Payload::Int8Asym { .. } => QuantFormat::Int8Asym,
            Payload::Nvfp4 { .. } => QuantFormat::Nvfp4,
            Payload::Fp16 { .. } => QuantFormat::Fp16Passthrough,
        }
    }

    /// Per-block effective scales for NVFP4 (`E4M3 scale * normalizer`).
    pub fn nvfp4_effective_scales(&self) -> Option<Vec<f64>> {
        match &self.payload {
            Payload::Nvfp4 {
                global_scale,
                block_scales,
                ..
            } => Some(
                block_scales
                    .iter()
                    .map(|&b| e4m3_decode(b).unwrap_or(f64::NAN) * *global_scale as f64)
                    .collect(),
            ),
            _ => None,
        }
    }

    pub fn dequantize<E: Element>(&self) -> Result<Tensor<E>> {
        dequantize(self)
    }
}

/// Per-tensor quantization in the given format.
pub fn quantize<E: Element>(x: &Tensor<E>, format: QuantFormat) -> QuantizedTensor {
    match format {
        QuantFormat::Int8Sym => quantize_int8_sym(x),
        QuantFormat::Int8Asym => quantize_int8_asym(x),
        QuantFormat::Nvfp4 => quantize_nvfp4(x),
        QuantFormat::Fp16Passthrough => quantize_fp16(x),
    }
}

pub fn dequantize<E: Element>(q: &QuantizedTensor) -> Result<Tensor<E>> {
    let numel = q.numel();
    let data: Vec<E> = match &q.payload {
        Payload::Int8Sym {
            block_len,
            scales,
            codes,
        } => codes
            .iter()
            .enumerate()
            .map(|(i, &c)| E::from_f64_lossy(c as f64 * scales[i / block_len]))
            .collect(),
        Payload::Int8Asym {
            block_len,
            scales,
            zero_points,
            codes,
        } => codes
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let b = i / block_len;
                E::from_f64_lossy((c as i64 - zero_points[b]) as f64 * scales[b])
            })
            .collect(),
        Payload::Nvfp4 {
            global_scale,
            block_scales,
            codes,
        } => {
            let mut out = Vec::with_capacity(numel);
            for (i, &c) in codes.iter().take(numel).enumerate() {
                if c > 15 {
                    return Err(Error::Malformed(format!("nvfp4 code {c} at {i}")));
                }
                let bits = block_scales[i / NVFP4_BLOCK];
                let s = e4m3_decode(bits)
                    .ok_or_else(|| Error::Malformed(format!("e4m3 NaN scale at block {}", i / 16)))?;
                out.push(E::from_f64_lossy(fp4_value(c) * (s * *global_scale as f64)));
            }
            out
        }
        Payload::Fp16 { bits } => bits
            .iter()
            .map(|&b| E::from_f64_lossy(half::f16::from_bits(b).to_f64()))
            .collect(),
    };
    Tensor::new(q.dims.clone(), data)
}
