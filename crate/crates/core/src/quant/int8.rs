use crate::quant::{Payload, QuantizedTensor};
use crate::tensor::{Element, Tensor};

/// Round to nearest integer, ties to even.
#[inline]
pub fn round_half_even(v: f64) -> f64 {
    v.round_ties_even()
}

/// Symmetric INT8 with a single per-tensor scale `s = max|x| / 127`.
pub fn quantize_int8_sym<E: Element>(x: &Tensor<E>) -> QuantizedTensor {
    quantize_int8_sym_blocked(x, x.numel())
}

/// Symmetric INT8 with one scale per contiguous run of `block_len` elements.
pub fn quantize_int8_sym_blocked<E: Element>(x: &Tensor<E>, block_len: usize) -> QuantizedTensor {
    assert!(block_len > 0, "block_len must be positive");
    let mut scales = Vec::with_capacity(x.numel().div_ceil(block_len));
    let mut codes = Vec::with_capacity(x.numel());
    for block in x.data().chunks(block_len) {
        let amax = block.iter().fold(0.0f64, |m, v| m.max(v.as_f64().abs()));
        if amax == 0.0 {
            scales.push(1.0);
            codes.extend(std::iter::repeat_n(0i8, block.len()));
            continue;
        }
        scales.push(amax / 127.0);
        // x / s evaluated as (x / amax) * 127 keeps exact midpoints exact.
        codes.extend(block.iter().map(|v| {
            round_half_even(v.as_f64() / amax * 127.0).clamp(-128.0, 127.0) as i8
        }));
    }
    QuantizedTensor::from_parts(
        x.dims().to_vec(),
        Payload::Int8Sym {
            block_len,
            scales,
            codes,
        },
    )
    .expect("int8_sym layout is consistent by construction")
}

/// Asymmetric INT8 onto `[0, 255]` with a per-tensor scale and zero-point.
pub fn quantize_int8_asym<E: Element>(x: &Tensor<E>) -> QuantizedTensor {
    quantize_int8_asym_blocked(x, x.numel())
}

/// Asymmetric INT8 with `s = (max - min) / 255` and `z = -round(min / s)` per
/// block. A constant block uses `s = 1`, `z = -round(c)`.
pub fn quantize_int8_asym_blocked<E: Element>(x: &Tensor<E>, block_len: usize) -> QuantizedTensor {
    assert!(block_len > 0, "block_len must be positive");
    let n_blocks = x.numel().div_ceil(block_len);
    let mut scales = Vec::with_capacity(n_blocks);
    let mut zero_points = Vec::with_capacity(n_blocks);
    let mut codes = Vec::with_capacity(x.numel());
    for block in x.data().chunks(block_len) {
        let (lo, hi) = block.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            let v = v.as_f64();
            (lo.min(v), hi.max(v))
        });
        let range = hi - lo;
        if range == 0.0 {
            let z = -round_half_even(lo);
            scales.push(1.0);
            zero_points.push(z as i64);
            codes.extend(
                block
                    .iter()
                    .map(|v| (round_half_even(v.as_f64()) + z).clamp(0.0, 255.0) as u8),
            );
            continue;
        }
        let z = -round_half_even(lo / range * 255.0);
        scales.push(range / 255.0);
        zero_points.push(z as i64);
        codes.extend(
            block
                .iter()
                .map(|v| (round_half_even(v.as_f64() / range * 255.0) + z).clamp(0.0, 255.0) as u8),
        );
    }
    QuantizedTensor::from_parts(
        x.dims().to_vec(),
        Payload::Int8Asym {
            block_len,
            scales,
            zero_points,
            codes,
        },
    )
    .expect("int8_asym layout is consistent by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::dequantize;
    use proptest::prelude::*;

    fn sym_parts(q: &QuantizedTensor) -> (&[f64], &[i8]) {
        match q.payload() {
            Payload::Int8Sym { scales, codes, .. } => (scales, codes),
            _ => unreachable!(),
        }
    }

    fn asym_parts(q: &QuantizedTensor) -> (&[f64], &[i64], &[u8]) {
        match q.payload() {
            Payload::Int8Asym {
                scales,
                zero_points,
                codes,
                ..
            } => (scales, zero_points, codes),
            _ => unreachable!(),
        }
    }

    #[test]
    fn sym_midpoint_rounds_to_even() {
        let x = Tensor::<f64>::from_vec(vec![-1.27, 0.635, 1.27]).unwrap();
        let q = quantize_int8_sym(&x);
        let (s, codes) = sym_parts(&q);
        assert!((s[0] - 0.01).abs() < 1e-17);
        assert_eq!(codes, &[-127, 64, 127]);
    }

    #[test]
    fn sym_all_zero_uses_unit_scale() {
        let x = Tensor::<f32>::zeros(&[5]).unwrap();
        let q = quantize_int8_sym(&x);
        assert_eq!(sym_parts(&q), (&[1.0][..], &[0i8; 5][..]));
        assert_eq!(dequantize::<f32>(&q).unwrap(), x);
    }

    #[test]
    fn sym_singleton_extremum_is_exact() {
        for v in [1.27f32, -3.5, 1e-3, 42.0] {
            let x = Tensor::from_vec(vec![v]).unwrap();
            let q = quantize_int8_sym(&x);
            assert_eq!(sym_parts(&q).1[0], if v > 0.0 { 127 } else { -127 });
            assert_eq!(dequantize::<f32>(&q).unwrap().data(), &[v]);
        }
    }

    #[test]
    fn sym_dequant_example() {
        let q = QuantizedTensor::from_parts(
            vec![1],
            Payload::Int8Sym {
                block_len: 1,
                scales: vec![0.01],
                codes: vec![127],
            },
        )
        .unwrap();
        assert_eq!(dequantize::<f32>(&q).unwrap().data(), &[1.27f32]);
    }

    #[test]
    fn asym_integer_range_is_lossless() {
        let x = Tensor::<f64>::from_fn(&[256], |i| i as f64).unwrap();
        let q = quantize_int8_asym(&x);
        let (s, z, codes) = asym_parts(&q);
        assert_eq!((s[0], z[0]), (1.0, 0));
        assert!(codes.iter().enumerate().all(|(i, &c)| c as usize == i));
        assert_eq!(dequantize::<f64>(&q).unwrap(), x);
    }

    #[test]
    fn asym_constant_tensor() {
        let x = Tensor::<f64>::full(&[4], -7.0).unwrap();
        let q = quantize_int8_asym(&x);
        let (s, z, _) = asym_parts(&q);
        assert_eq!((s[0], z[0]), (1.0, 7));
        assert_eq!(dequantize::<f64>(&q).unwrap(), x);
    }

    #[test]
    fn asym_symmetric_range_midpoint() {
        let x = Tensor::<f64>::from_vec(vec![-1.0, 0.0, 1.0]).unwrap();
        let q = quantize_int8_asym(&x);
        let (s, z, codes) = asym_parts(&q);
        assert_eq!(s[0], 2.0 / 255.0);
        assert_eq!(z[0], 128);
        assert_eq!(codes, &[0, 128, 255]);
    }

    #[test]
    fn blocked_scales_are_independent() {
        let x = Tensor::<f32>::from_vec(vec![1.0, -2.0, 100.0, 50.0]).unwrap();
        let q = quantize_int8_sym_blocked(&x, 2);
        let (s, codes) = sym_parts(&q);
        assert_eq!(s.len(), 2);
        assert_eq!(codes, &[64, -127, 127, 64]);
    }

    fn bound_holds(x: &[f64], dq: &[f64], s: f64) -> bool {
        x.iter().zip(dq).all(|(a, b)| {
            let ulp = f64::EPSILON * a.abs().max(b.abs()).max(s);
            (a - b).abs() <= s / 2.0 + 4.0 * ulp
        })
    }

    proptest! {
        #[test]
        fn sym_roundtrip_bound(v in prop::collection::vec(-1e4f64..1e4, 1..200)) {
            let x = Tensor::from_vec(v.clone()).unwrap();
            let q = quantize_int8_sym(&x);
            let s = sym_parts(&q).0[0];
            let dq = dequantize::<f64>(&q).unwrap();
            prop_assert!(bound_holds(&v, dq.data(), s));
        }

        #[test]
        fn asym_roundtrip_bound(v in prop::collection::vec(-1e4f64..1e4, 1..200)) {
            let x = Tensor::from_vec(v.clone()).unwrap();
            let q = quantize_int8_asym(&x);
            let s = asym_parts(&q).0[0];
            let dq = dequantize::<f64>(&q).unwrap();
            prop_assert!(bound_holds(&v, dq.data(), s));
        }
    }
}
