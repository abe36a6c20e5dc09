//! Distance and similarity metrics. All accumulation happens in f64.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MetricKind {
    RelL1,
    RelL2,
    /// `1 - cos(a, b)`, in `[0, 2]`.
    CosineDissim,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::RelL1 => "rel_l1",
            MetricKind::RelL2 => "rel_l2",
            MetricKind::CosineDissim => "cosine",
        }
    }

    /// Evaluates the metric with `reference` as the normalizing argument.
    pub fn eval<E: Element>(self, reference: &Tensor<E>, other: &Tensor<E>) -> Result<f64> {
        match self {
            MetricKind::RelL1 => rel_l1(reference, other),
            MetricKind::RelL2 => rel_l2(reference, other),
            MetricKind::CosineDissim => cosine_dissim(reference, other),
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rel_l1" => Ok(MetricKind::RelL1),
            "rel_l2" => Ok(MetricKind::RelL2),
            "cosine" | "cosine_dissim" => Ok(MetricKind::CosineDissim),
            other => Err(Error::Config(format!("unknown metric '{other}'"))),
        }
    }
}

pub fn l1_norm<E: Element>(x: &Tensor<E>) -> f64 {
    x.data().iter().map(|v| v.as_f64().abs()).sum()
}

pub fn l2_norm<E: Element>(x: &Tensor<E>) -> f64 {
    x.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
}

/// `||other - reference||_1 / ||reference||_1`.
pub fn rel_l1<E: Element>(reference: &Tensor<E>, other: &Tensor<E>) -> Result<f64> {
    reference.same_dims(other)?;
    let denom = l1_norm(reference);
    if denom == 0.0 {
        return Err(Error::ZeroNorm("reference"));
    }
    let num: f64 = reference
        .data()
        .iter()
        .zip(other.data())
        .map(|(r, o)| (o.as_f64() - r.as_f64()).abs())
        .sum();
    Ok(num / denom)
}

/// `||reference - other||_2 / ||reference||_2`.
pub fn rel_l2<E: Element>(reference: &Tensor<E>, other: &Tensor<E>) -> Result<f64> {
    reference.same_dims(other)?;
    let denom = l2_norm(reference);
    if denom == 0.0 {
        return Err(Error::ZeroNorm("reference"));
    }
    let num: f64 = reference
        .data()
        .iter()
        .zip(other.data())
        .map(|(r, o)| {
            let d = r.as_f64() - o.as_f64();
            d * d
        })
        .sum();
    Ok(num.sqrt() / denom)
}

pub fn cosine_dissim<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<f64> {
    a.same_dims(b)?;
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x.as_f64(), y.as_f64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("cosine argument"));
    }
    let cos = (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0);
    Ok(1.0 - cos)
}
