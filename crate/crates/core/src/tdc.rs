//! Temporal delta cache.
//!
//! Each block keeps the residual delta `Δ = X_out − X_in` of its most recent
//! computed step `t_p`. A skipped step reuses it as `X_in + Δ_{t_p}`. The
//! decision to skip is budgeted by an accumulator that starts at the
//! prediction error measured at `t_p` and grows by that error plus a penalty
//! on every skip.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::metrics::MetricKind;
use crate::quant::quantize_nvfp4;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CacheDecision {
    Compute,
    Skip,
}

impl CacheDecision {
    pub fn as_str(self) -> &'static str {
        match self {
            CacheDecision::Compute => "compute",
            CacheDecision::Skip => "skip",
        }
    }
}

impl fmt::Display for CacheDecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CacheDecision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "compute" => Ok(CacheDecision::Compute),
            "skip" => Ok(CacheDecision::Skip),
            other => Err(Error::Config(format!("unknown cache decision '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CacheCompress {
    Off,
    /// Deltas are stored NVFP4-quantized; all reads see the dequantized value.
    Nvfp4,
}

impl CacheCompress {
    pub fn as_str(self) -> &'static str {
        match self {
            CacheCompress::Off => "off",
            CacheCompress::Nvfp4 => "nvfp4",
        }
    }
}

impl fmt::Display for CacheCompress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CacheCompress {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(CacheCompress::Off),
            "nvfp4" => Ok(CacheCompress::Nvfp4),
            other => Err(Error::Config(format!("unknown cache_compress '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TdcConfig {
    pub rho: f64,
    pub tau: f64,
    pub n_max: usize,
    pub metric: MetricKind,
    pub compress: CacheCompress,
}

impl Default for TdcConfig {
    fn default() -> Self {
        Self {
            rho: 0.001,
            tau: 0.003,
            n_max: 2,
            metric: MetricKind::CosineDissim,
            compress: CacheCompress::Off,
        }
    }
}

impl TdcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 0.0) || !(self.tau >= 0.0) || self.n_max < 1 {
            return Err(Error::Config(format!(
                "tdc requires rho >= 0, tau >= 0, n_max >= 1 (got {}, {}, {})",
                self.rho, self.tau, self.n_max
            )));
        }
        Ok(())
    }
}

/// `D(d1, d2)` with `d1` as the normalizing reference. A zero-norm delta
/// yields `+inf`, which always forces the next step to compute.
pub fn prediction_error<E: Element>(d1: &Tensor<E>, d2: &Tensor<E>, metric: MetricKind) -> Result<f64> {
    match metric.eval(d1, d2) {
        Ok(v) => Ok(v.max(0.0)),
        Err(Error::ZeroNorm(_)) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

/// Per-block cache bookkeeping. Deltas are held in their stored form, i.e.
/// already passed through the compression codec.
#[derive(Clone, Debug)]
pub struct CacheState<E: Element = f32> {
    pub block: usize,
    delta_prev: Option<Tensor<E>>,
    delta_prev2: Option<Tensor<E>>,
    t_p: Option<usize>,
    e_tp: f64,
    e_acc: f64,
    last_state: Option<CacheDecision>,
}

/// What the cache saw and decided on one step, for tracing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CacheStep {
    pub decision: CacheDecision,
    /// Accumulator value the decision was based on; `None` during warm-up.
    pub e_acc: Option<f64>,
    pub e_tp: Option<f64>,
    pub gap: Option<usize>,
}

impl<E: Element> CacheState<E> {
    pub fn new(block: usize) -> Self {
        Self {
            block,
            delta_prev: None,
            delta_prev2: None,
            t_p: None,
            e_tp: 0.0,
            e_acc: 0.0,
            last_state: None,
        }
    }

    /// Delta produced at `t_p`, as it is reused on skips.
    pub fn cached_delta(&self) -> Option<&Tensor<E>> {
        self.delta_prev.as_ref()
    }

    pub fn t_p(&self) -> Option<usize> {
        self.t_p
    }

    pub fn e_tp(&self) -> f64 {
        self.e_tp
    }

    pub fn e_acc(&self) -> f64 {
        self.e_acc
    }

    pub fn last_state(&self) -> Option<CacheDecision> {
        self.last_state
    }

    /// Closes out the step just recorded in `last_state`.
    pub fn update_accumulator(&mut self, cfg: &TdcConfig) {
        match self.last_state {
            Some(CacheDecision::Compute) => self.e_acc = self.e_tp,
            Some(CacheDecision::Skip) => self.e_acc += self.e_tp + cfg.rho,
            None => {}
        }
    }

    /// Skip iff two computed deltas exist, `e_acc ≤ τ`, and `t − t_p ≤ N_max`.
    /// An infinite accumulator (zero-norm delta) computes even when `τ = ∞`.
    pub fn decide(&self, t: usize, cfg: &TdcConfig) -> CacheDecision {
        match self.t_p {
            Some(t_p) if t >= 2 && self.delta_prev2.is_some() => {
                if self.e_acc.is_finite() && self.e_acc <= cfg.tau && t - t_p <= cfg.n_max {
                    CacheDecision::Skip
                } else {
                    CacheDecision::Compute
                }
            }
            _ => CacheDecision::Compute,
        }
    }

    fn snapshot(&self, t: usize, decision: CacheDecision) -> CacheStep {
        let warm = self.t_p.is_some() && self.delta_prev2.is_some();
        CacheStep {
            decision,
            e_acc: warm.then_some(self.e_acc),
            e_tp: warm.then_some(self.e_tp),
            gap: self.t_p.map(|t_p| t - t_p),
        }
    }

    fn store(&self, delta: Tensor<E>, cfg: &TdcConfig) -> Result<Tensor<E>> {
        match cfg.compress {
            CacheCompress::Off => Ok(delta),
            CacheCompress::Nvfp4 => quantize_nvfp4(&delta).dequantize(),
        }
    }

    /// Records a computed step: refreshes `t_p`, re-measures `e_tp` from the
    /// two most recent computed deltas, and resets the accumulator.
    pub fn record_compute(&mut self, t: usize, delta: Tensor<E>, cfg: &TdcConfig) -> Result<()> {
        let stored = self.store(delta, cfg)?;
        let e_tp = match &self.delta_prev {
            Some(prev) => prediction_error(&stored, prev, cfg.metric)?,
            None => f64::INFINITY,
        };
        self.record_compute_measured(t, stored, e_tp, cfg);
        Ok(())
    }

    /// As [`record_compute`](Self::record_compute) with an externally
    /// measured prediction error and an already-stored delta.
    pub fn record_compute_measured(&mut self, t: usize, stored: Tensor<E>, e_tp: f64, cfg: &TdcConfig) {
        debug_assert!(e_tp >= 0.0);
        self.e_tp = e_tp;
        self.delta_prev2 = self.delta_prev.replace(stored);
        self.t_p = Some(t);
        self.last_state = Some(CacheDecision::Compute);
        self.update_accumulator(cfg);
    }

    pub fn record_skip(&mut self, cfg: &TdcConfig) {
        self.last_state = Some(CacheDecision::Skip);
        self.update_accumulator(cfg);
    }

    /// Decides, then either runs `block_fn` or reuses the cached delta.
    pub fn apply(
        &mut self,
        t: usize,
        x_in: &Tensor<E>,
        cfg: &TdcConfig,
        block_fn: impl FnOnce(&Tensor<E>) -> Result<Tensor<E>>,
    ) -> Result<(Tensor<E>, CacheStep)> {
        let decision = self.decide(t, cfg);
        let step = self.snapshot(t, decision);
        let out = match decision {
            CacheDecision::Skip => {
                let cached = self.delta_prev.as_ref().expect("skip implies a cached delta");
                let out = x_in.add(cached)?;
                self.record_skip(cfg);
                out
            }
            CacheDecision::Compute => {
                let out = block_fn(x_in)?;
                let delta = out.sub(x_in)?;
                self.record_compute(t, delta, cfg)?;
                out
            }
        };
        Ok((out, step))
    }
}
