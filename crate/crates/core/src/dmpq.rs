//! Dynamic mixed-precision routing.
//!
//! During calibration each linear layer's relative output error under NVFP4
//! is paired with the enclosing block's input/output distance Γ from the
//! previous timestep. A per-layer least-squares line `e = αΓ + β` is inverted
//! into a Γ threshold, and at inference time a layer whose block moved more
//! than its threshold on the previous step runs INT8 instead of NVFP4.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;

use crate::error::{Error, Result};
use crate::layer::{LayerId, Precision};

pub const DEFAULT_EPS_SLOPE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibPair {
    pub block: usize,
    pub layer: LayerId,
    pub timestep: usize,
    pub gamma_prev: f64,
    pub e_rel: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerPredictor {
    pub block: usize,
    pub layer: LayerId,
    pub alpha: f64,
    pub beta: f64,
    /// `None` when the slope admits no inversion; such layers stay INT8.
    pub tau_gamma: Option<f64>,
    pub pair_count: usize,
    pub residual_rms: f64,
}

impl LayerPredictor {
    /// `αΓ + β` without clamping.
    pub fn predict(&self, gamma_prev: f64) -> f64 {
        self.alpha * gamma_prev + self.beta
    }

    /// Prediction clamped at zero, for reporting.
    pub fn predict_reported(&self, gamma_prev: f64) -> f64 {
        self.predict(gamma_prev).max(0.0)
    }

    pub fn with_threshold(&self, tau_gamma: Option<f64>) -> Self {
        Self {
            tau_gamma,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Reason {
    Threshold,
    PostSkipFallback,
    OutlierFallback,
    /// First timestep: no previous-step Γ exists yet.
    NoHistory,
    /// Quantization switched off entirely.
    Disabled,
}

impl Reason {
    pub fn as_str(self) -> &'static str {
        match self {
            Reason::Threshold => "threshold",
            Reason::PostSkipFallback => "post_skip_fallback",
            Reason::OutlierFallback => "outlier_fallback",
            Reason::NoHistory => "no_history",
            Reason::Disabled => "disabled",
        }
    }
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Reason {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Reason::Threshold,
            Reason::PostSkipFallback,
            Reason::OutlierFallback,
            Reason::NoHistory,
            Reason::Disabled,
        ]
        .into_iter()
        .find(|r| r.as_str() == s)
        .ok_or_else(|| Error::Config(format!("unknown reason '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoutingDecision {
    pub layer: LayerId,
    pub precision: Precision,
    pub reason: Reason,
}

/// Ordinary least squares of `e_rel` on `gamma_prev`.
pub fn fit_layer(pairs: &[CalibPair]) -> Result<LayerPredictor> {
    let name = || {
        pairs
            .first()
            .map(|p| format!("block {} layer {}", p.block, p.layer))
            .unwrap_or_else(|| "<empty>".to_string())
    };
    if pairs.len() < 2 {
        return Err(Error::DegenerateFit {
            layer: name(),
            reason: format!("{} pairs, need at least 2", pairs.len()),
        });
    }
    let first = pairs[0];
    if pairs
        .iter()
        .any(|p| p.block != first.block || p.layer != first.layer)
    {
        return Err(Error::DegenerateFit {
            layer: name(),
            reason: "pairs span more than one layer".into(),
        });
    }
    let n = pairs.len() as f64;
    let mean_x = pairs.iter().map(|p| p.gamma_prev).sum::<f64>() / n;
    let mean_y = pairs.iter().map(|p| p.e_rel).sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for p in pairs {
        let dx = p.gamma_prev - mean_x;
        sxx += dx * dx;
        sxy += dx * (p.e_rel - mean_y);
    }
    // A spread below the rounding error of the mean counts as no spread.
    let max_x = pairs.iter().fold(0.0f64, |m, p| m.max(p.gamma_prev.abs()));
    if !(sxx > n * (n * f64::EPSILON * max_x).powi(2)) {
        return Err(Error::DegenerateFit {
            layer: name(),
            reason: "zero variance in gamma".into(),
        });
    }
    let alpha = sxy / sxx;
    let beta = mean_y - alpha * mean_x;
    let sse: f64 = pairs
        .iter()
        .map(|p| (p.e_rel - (alpha * p.gamma_prev + beta)).powi(2))
        .sum();
    Ok(LayerPredictor {
        block: first.block,
        layer: first.layer,
        alpha,
        beta,
        tau_gamma: None,
        pair_count: pairs.len(),
        residual_rms: (sse / n).sqrt(),
    })
}

/// `τ_Γ = (τ_rel − β) / α`, defined only for slopes above `eps_slope`.
pub fn derive_threshold(p: &LayerPredictor, tau_rel: f64, eps_slope: f64) -> Result<f64> {
    if !(p.alpha > eps_slope) {
        return Err(Error::UndefinedThreshold { alpha: p.alpha });
    }
    Ok((tau_rel - p.beta) / p.alpha)
}

/// INT8 if `Γ > τ_Γ`, NVFP4 if `Γ ≤ τ_Γ`; pinned layers always INT8.
pub fn route(gamma_prev: f64, p: &LayerPredictor) -> RoutingDecision {
    let precision = match p.tau_gamma {
        Some(tau) if gamma_prev <= tau => Precision::Nvfp4,
        _ => Precision::Int8,
    };
    RoutingDecision {
        layer: p.layer,
        precision,
        reason: Reason::Threshold,
    }
}

/// Groups pairs per (block, layer), fits each, and derives thresholds from
/// `tau_rel`. Layers whose slope is too small keep `tau_gamma = None`.
pub fn fit_all(pairs: &[CalibPair], tau_rel: f64, eps_slope: f64) -> Result<Vec<LayerPredictor>> {
    let mut groups: BTreeMap<(usize, LayerId), Vec<CalibPair>> = BTreeMap::new();
    for p in pairs {
        groups.entry((p.block, p.layer)).or_default().push(*p);
    }
    groups
        .values()
        .map(|g| {
            let mut p = fit_layer(g)?;
            p.tau_gamma = derive_threshold(&p, tau_rel, eps_slope).ok();
            Ok(p)
        })
        .collect()
}

/// Frozen predictor table indexed by block and layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorSet {
    predictors: Vec<LayerPredictor>,
}

pub const PREDICTOR_HEADER: &str = "block_id layer_id alpha beta tau_gamma pair_count residual_rms";

impl PredictorSet {
    pub fn new(mut predictors: Vec<LayerPredictor>) -> Self {
        predictors.sort_by_key(|p| (p.block, p.layer));
        Self { predictors }
    }

    pub fn iter(&self) -> impl Iterator<Item = &LayerPredictor> {
        self.predictors.iter()
    }

    pub fn len(&self) -> usize {
        self.predictors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictors.is_empty()
    }

    pub fn get(&self, block: usize, layer: LayerId) -> Result<&LayerPredictor> {
        self.predictors
            .binary_search_by_key(&(block, layer), |p| (p.block, p.layer))
            .map(|i| &self.predictors[i])
            .map_err(|_| Error::MissingPredictor {
                block,
                layer: layer.to_string(),
            })
    }

    /// Checks that every layer of `n_blocks` blocks has a predictor.
    pub fn ensure_covers(&self, n_blocks: usize) -> Result<()> {
        for b in 0..n_blocks {
            for l in LayerId::ALL {
                self.get(b, l)?;
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(PREDICTOR_HEADER);
        s.push('\n');
        for p in &self.predictors {
            let tau = p
                .tau_gamma
                .map(|t| format!("{t:e}"))
                .unwrap_or_else(|| "-".to_string());
            writeln!(
                s,
                "{} {} {:e} {:e} {} {} {:e}",
                p.block, p.layer, p.alpha, p.beta, tau, p.pair_count, p.residual_rms
            )
            .unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.split_whitespace().eq(PREDICTOR_HEADER.split_whitespace()) => {}
            _ => {
                return Err(Error::PredictorParse {
                    line: 1,
                    msg: "missing header".into(),
                })
            }
        }
        let mut out = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| Error::PredictorParse { line: i + 1, msg };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 7 {
                return Err(err(format!("expected 7 fields, got {}", f.len())));
            }
            let float = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(format!("bad number '{s}'")))
            };
            out.push(LayerPredictor {
                block: f[0].parse().map_err(|_| err(format!("bad block '{}'", f[0])))?,
                layer: f[1].parse().map_err(|_| err(format!("bad layer '{}'", f[1])))?,
                alpha: float(f[2])?,
                beta: float(f[3])?,
                tau_gamma: if f[4] == "-" { None } else { Some(float(f[4])?) },
                pair_count: f[5].parse().map_err(|_| err(format!("bad count '{}'", f[5])))?,
                residual_rms: float(f[6])?,
            });
        }
        Ok(Self::new(out))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::qdt::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}
