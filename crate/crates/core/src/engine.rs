//! Simulated low-precision execution of one linear layer.
//!
//! Weights are prepared once per model: the last (input) axis is zero-padded
//! to the Hadamard block, rotated, and NVFP4 round-tripped. Activations are
//! padded and rotated the same way at run time, so `(xH)(WH)ᵀ = xWᵀ` up to
//! quantization error.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::hadamard::{fht_blocks, pad_last_dim, HadamardConfig};
use crate::layer::{LayerId, Precision};
use crate::model::{linear, ToyModel};
use crate::quant::{
    fp16_roundtrip, quantize_int8_asym_blocked, quantize_int8_sym_blocked, quantize_nvfp4,
};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Int8Mode {
    Sym,
    Asym,
}

impl Int8Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Int8Mode::Sym => "sym",
            Int8Mode::Asym => "asym",
        }
    }
}

impl fmt::Display for Int8Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Int8Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sym" => Ok(Int8Mode::Sym),
            "asym" => Ok(Int8Mode::Asym),
            other => Err(Error::Config(format!("unknown activation_int8_mode '{other}'"))),
        }
    }
}

/// Which operands an NVFP4 probe quantizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum QuantTarget {
    Both,
    Weights,
    Activations,
}

impl QuantTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            QuantTarget::Both => "both",
            QuantTarget::Weights => "weights",
            QuantTarget::Activations => "activations",
        }
    }
}

impl fmt::Display for QuantTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QuantTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(QuantTarget::Both),
            "weights" => Ok(QuantTarget::Weights),
            "activations" => Ok(QuantTarget::Activations),
            other => Err(Error::Config(format!("unknown calib_quantize '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantSettings {
    /// Padding granularity and INT8 activation block length.
    pub block: usize,
    pub hadamard_enabled: bool,
    pub int8_mode: Int8Mode,
    pub fp16_bypass_hadamard: bool,
}

impl Default for QuantSettings {
    fn default() -> Self {
        Self {
            block: crate::hadamard::DEFAULT_BLOCK,
            hadamard_enabled: true,
            int8_mode: Int8Mode::Sym,
            fp16_bypass_hadamard: true,
        }
    }
}

impl QuantSettings {
    fn hadamard(&self) -> Result<HadamardConfig> {
        HadamardConfig::new(self.block, true)
    }
}

#[derive(Clone, Debug)]
pub struct LayerWeights<E: Element> {
    pub full: Tensor<E>,
    pub fp16: Tensor<E>,
    /// Padded and, when enabled, rotated.
    pub rotated: Tensor<E>,
    pub fp16_rotated: Tensor<E>,
    /// NVFP4 round trip of `rotated`; the resident weight for both INT8 and
    /// NVFP4 activations.
    pub nvfp4: Tensor<E>,
}

#[derive(Clone, Debug)]
pub struct QuantModel<E: Element> {
    settings: QuantSettings,
    layers: Vec<[LayerWeights<E>; 6]>,
}

impl<E: Element> QuantModel<E> {
    pub fn new(model: &ToyModel<E>, settings: QuantSettings) -> Result<Self> {
        let hcfg = settings.hadamard()?;
        let prep = |w: &Tensor<E>| -> Result<Tensor<E>> {
            let p = pad_last_dim(w, hcfg.block());
            if settings.hadamard_enabled {
                fht_blocks(&p, hcfg)
            } else {
                Ok(p)
            }
        };
        let layers = model
            .blocks()
            .iter()
            .map(|p| {
                let build = |layer: LayerId| -> Result<LayerWeights<E>> {
                    let full = p.weight(layer).clone();
                    let rotated = prep(&full)?;
                    let nvfp4 = quantize_nvfp4(&rotated).dequantize()?;
                    let fp16 = fp16_roundtrip(&full);
                    let fp16_rotated = fp16_roundtrip(&rotated);
                    Ok(LayerWeights {
                        full,
                        fp16,
                        rotated,
                        fp16_rotated,
                        nvfp4,
                    })
                };
                Ok([
                    build(LayerId::Q)?,
                    build(LayerId::K)?,
                    build(LayerId::V)?,
                    build(LayerId::O)?,
                    build(LayerId::Fc1)?,
                    build(LayerId::Fc2)?,
                ])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { settings, layers })
    }

    pub fn settings(&self) -> &QuantSettings {
        &self.settings
    }

    pub fn weights(&self, block: usize, layer: LayerId) -> &LayerWeights<E> {
        &self.layers[block][layer.index()]
    }

    /// Pads and optionally rotates an activation.
    pub fn prepare_activation(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let p = pad_last_dim(x, self.settings.block);
        if self.settings.hadamard_enabled {
            fht_blocks(&p, self.settings.hadamard()?)
        } else {
            Ok(p)
        }
    }

    /// Runs `layer` of `block` on `x` with activations at `precision`.
    pub fn exec(&self, block: usize, layer: LayerId, precision: Precision, x: &Tensor<E>) -> Result<Tensor<E>> {
        let w = self.weights(block, layer);
        match precision {
            Precision::Full => linear(x, &w.full),
            Precision::Fp16 if self.settings.fp16_bypass_hadamard => linear(&fp16_roundtrip(x), &w.fp16),
            Precision::Fp16 => linear(&fp16_roundtrip(&self.prepare_activation(x)?), &w.fp16_rotated),
            Precision::Int8 => {
                let xr = self.prepare_activation(x)?;
                let q = match self.settings.int8_mode {
                    Int8Mode::Sym => quantize_int8_sym_blocked(&xr, self.settings.block),
                    Int8Mode::Asym => quantize_int8_asym_blocked(&xr, self.settings.block),
                };
                linear(&q.dequantize()?, &w.nvfp4)
            }
            Precision::Nvfp4 => self.exec_nvfp4(block, layer, QuantTarget::Both, x),
        }
    }

    /// NVFP4 execution with a choice of quantized operands.
    pub fn exec_nvfp4(&self, block: usize, layer: LayerId, target: QuantTarget, x: &Tensor<E>) -> Result<Tensor<E>> {
        let w = self.weights(block, layer);
        let xr = self.prepare_activation(x)?;
        let xr = match target {
            QuantTarget::Both | QuantTarget::Activations => quantize_nvfp4(&xr).dequantize()?,
            QuantTarget::Weights => xr,
        };
        let wq = match target {
            QuantTarget::Both | QuantTarget::Weights => &w.nvfp4,
            QuantTarget::Activations => &w.rotated,
        };
        linear(&xr, wq)
    }
}
