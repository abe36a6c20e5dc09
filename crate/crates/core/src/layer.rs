//! Identifiers for the six routable linear layers of a block and the
//! activation precisions they can run at.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerId {
    Q,
    K,
    V,
    O,
    Fc1,
    Fc2,
}

impl LayerId {
    pub const ALL: [LayerId; 6] = [
        LayerId::Q,
        LayerId::K,
        LayerId::V,
        LayerId::O,
        LayerId::Fc1,
        LayerId::Fc2,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LayerId::Q => "q",
            LayerId::K => "k",
            LayerId::V => "v",
            LayerId::O => "o",
            LayerId::Fc1 => "fc1",
            LayerId::Fc2 => "fc2",
        }
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LayerId::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown layer '{s}'")))
    }
}

/// Precision a linear layer's activation runs at on one step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Precision {
    Nvfp4,
    Int8,
    Fp16,
    /// Unquantized f32/f64 arithmetic with the original weights.
    Full,
}

impl Precision {
    pub const ALL: [Precision; 4] = [
        Precision::Nvfp4,
        Precision::Int8,
        Precision::Fp16,
        Precision::Full,
    ];

    /// Nominal activation bit-width used for accounting.
    pub fn bits(self) -> u32 {
        match self {
            Precision::Nvfp4 => 4,
            Precision::Int8 => 8,
            Precision::Fp16 => 16,
            Precision::Full => 32,
        }
    }

    /// Relative MAC cost in the desk-scale cost model.
    pub fn cost_weight(self) -> f64 {
        match self {
            Precision::Nvfp4 => 0.25,
            Precision::Int8 => 0.5,
            Precision::Fp16 | Precision::Full => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Precision::Nvfp4 => "nvfp4",
            Precision::Int8 => "int8",
            Precision::Fp16 => "fp16",
            Precision::Full => "full",
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Precision::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown precision '{s}'")))
    }
}
