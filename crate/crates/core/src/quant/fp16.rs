use half::f16;

use crate::quant::{Payload, QuantizedTensor};
use crate::tensor::{Element, Tensor};

const F16_MAX: f64 = 65504.0;

/// Nearest binary16 value (ties to even), saturating at the finite range.
#[inline]
pub fn round_to_f16(v: f64) -> f16 {
    f16::from_f64(v.clamp(-F16_MAX, F16_MAX))
}

pub fn quantize_fp16<E: Element>(x: &Tensor<E>) -> QuantizedTensor {
    let bits = x
        .data()
        .iter()
        .map(|v| round_to_f16(v.as_f64()).to_bits())
        .collect();
    QuantizedTensor::from_parts(x.dims().to_vec(), Payload::Fp16 { bits })
        .expect("fp16 layout is consistent by construction")
}

/// Rounds every element onto the binary16 grid and widens back.
pub fn fp16_roundtrip<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let data = x
        .data()
        .iter()
        .map(|v| E::from_f64_lossy(round_to_f16(v.as_f64()).to_f64()))
        .collect();
    Tensor::from_parts_unchecked(x.dims().to_vec(), data)
}
