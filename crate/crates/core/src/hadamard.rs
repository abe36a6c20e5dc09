//! Block Walsh–Hadamard transform along the last tensor axis.
//!
//! Each contiguous run of `block` elements is rotated independently by the
//! Sylvester-ordered Hadamard matrix, using the standard radix-2 butterfly.
//! With `normalize` the rotation is orthonormal and therefore self-inverse.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const DEFAULT_BLOCK: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HadamardConfig {
    block: usize,
    normalize: bool,
}

impl Default for HadamardConfig {
    fn default() -> Self {
        Self {
            block: DEFAULT_BLOCK,
            normalize: true,
        }
    }
}

impl HadamardConfig {
    pub fn new(block: usize, normalize: bool) -> Result<Self> {
        if block == 0 || !block.is_power_of_two() {
            return Err(Error::Hadamard(format!("block size {block} is not a power of two")));
        }
        Ok(Self { block, normalize })
    }

    pub fn block(&self) -> usize {
        self.block
    }

    pub fn normalize(&self) -> bool {
        self.normalize
    }

    fn check(&self, last: usize) -> Result<()> {
        if last % self.block != 0 {
            return Err(Error::Hadamard(format!(
                "last extent {last} is not padded to a multiple of {}",
                self.block
            )));
        }
        Ok(())
    }
}

/// Unnormalized in-place butterfly over a power-of-two slice.
pub fn fwht_in_place<E: Element>(data: &mut [E]) {
    let n = data.len();
    debug_assert!(n.is_power_of_two());
    let mut half = 1;
    while half < n {
        for start in (0..n).step_by(2 * half) {
            for i in start..start + half {
                let a = data[i];
                let b = data[i + half];
                data[i] = a + b;
                data[i + half] = a - b;
            }
        }
        half *= 2;
    }
}

fn transform<E: Element>(x: &Tensor<E>, cfg: HadamardConfig, post_scale: E) -> Result<Tensor<E>> {
    cfg.check(x.last_dim())?;
    let mut out = x.clone();
    for run in out.data_mut().chunks_mut(cfg.block) {
        fwht_in_place(run);
        if post_scale != E::one() {
            run.iter_mut().for_each(|v| *v = *v * post_scale);
        }
    }
    out.validated()
}

fn forward_scale<E: Element>(cfg: HadamardConfig) -> E {
    if cfg.normalize {
        E::from_f64_lossy(1.0 / (cfg.block as f64).sqrt())
    } else {
        E::one()
    }
}

pub fn fht_blocks<E: Element>(x: &Tensor<E>, cfg: HadamardConfig) -> Result<Tensor<E>> {
    transform(x, cfg, forward_scale(cfg))
}

/// Inverse of [`fht_blocks`]: the same rotation when normalized, otherwise
/// the butterfly followed by division by the block size.
pub fn fht_inverse<E: Element>(x: &Tensor<E>, cfg: HadamardConfig) -> Result<Tensor<E>> {
    let scale = if cfg.normalize {
        forward_scale(cfg)
    } else {
        E::from_f64_lossy(1.0 / cfg.block as f64)
    };
    transform(x, cfg, scale)
}

/// Zero-pads the last axis up to a multiple of `multiple`.
pub fn pad_last_dim<E: Element>(x: &Tensor<E>, multiple: usize) -> Tensor<E> {
    let last = x.last_dim();
    let padded = last.div_ceil(multiple) * multiple;
    if padded == last {
        return x.clone();
    }
    let rows = x.rows();
    let mut data = Vec::with_capacity(rows * padded);
    for r in 0..rows {
        data.extend_from_slice(x.row(r));
        data.extend(std::iter::repeat_n(E::zero(), padded - last));
    }
    let mut dims = x.dims().to_vec();
    match dims.last_mut() {
        Some(d) => *d = padded,
        None => dims.push(padded),
    }
    Tensor::from_parts_unchecked(dims, data)
}

/// Drops trailing padding, keeping the first `len` entries of each row.
pub fn unpad_last_dim<E: Element>(x: &Tensor<E>, len: usize) -> Result<Tensor<E>> {
    let last = x.last_dim();
    if len > last || len == 0 {
        return Err(Error::Hadamard(format!("cannot unpad {last} to {len}")));
    }
    if len == last {
        return Ok(x.clone());
    }
    let data = (0..x.rows()).flat_map(|r| x.row(r)[..len].to_vec()).collect();
    let mut dims = x.dims().to_vec();
    *dims.last_mut().expect("rank >= 1 since last > len") = len;
    Ok(Tensor::from_parts_unchecked(dims, data))
}
