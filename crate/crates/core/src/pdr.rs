//! Purified cache refresh: precision fallbacks that keep quantization noise
//! out of the deltas written to the cache.

use crate::dmpq::{Reason, RoutingDecision};
use crate::error::{Error, Result};
use crate::layer::Precision;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PurityConfig {
    pub tau_outlier: f64,
    pub sample_stride: usize,
    pub post_skip: Precision,
}

impl Default for PurityConfig {
    fn default() -> Self {
        Self {
            tau_outlier: 25.0,
            sample_stride: 1,
            post_skip: Precision::Int8,
        }
    }
}

impl PurityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_outlier > 1.0) || self.sample_stride < 1 {
            return Err(Error::Config(format!(
                "pdr requires tau_outlier > 1 and sample_stride >= 1 (got {}, {})",
                self.tau_outlier, self.sample_stride
            )));
        }
        Ok(())
    }
}

/// `max|x| / mean|x|` over every `stride`-th element starting at 0.
/// An all-zero sample has ratio 1.
pub fn outlier_ratio<E: Element>(x: &Tensor<E>, stride: usize) -> f64 {
    let (mut max, mut sum, mut n) = (0.0f64, 0.0f64, 0usize);
    for v in x.data().iter().step_by(stride.max(1)) {
        let a = v.as_f64().abs();
        max = max.max(a);
        sum += a;
        n += 1;
    }
    if sum == 0.0 {
        return 1.0;
    }
    // max * n / sum keeps the constant-magnitude case exactly 1.
    max * n as f64 / sum
}

/// Applies the fallbacks in precedence order: outlier, post-skip, base.
/// Returns the final decision and the measured ratio.
pub fn purify_route<E: Element>(
    base: RoutingDecision,
    x: &Tensor<E>,
    block_was_skipped_prev: bool,
    cfg: &PurityConfig,
) -> (RoutingDecision, f64) {
    let ratio = outlier_ratio(x, cfg.sample_stride);
    let decision = if ratio > cfg.tau_outlier {
        RoutingDecision {
            precision: Precision::Fp16,
            reason: Reason::OutlierFallback,
            ..base
        }
    } else if block_was_skipped_prev {
        RoutingDecision {
            precision: cfg.post_skip,
            reason: Reason::PostSkipFallback,
            ..base
        }
    } else {
        base
    };
    (decision, ratio)
}
