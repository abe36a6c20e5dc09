//! Flat `key = value` configuration.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Unknown or repeated keys are errors. [`Config::render`] emits every key in
//! a fixed order and parses back to an identical config.

use std::fmt::Write as _;
use std::path::Path;

use crate::engine::{Int8Mode, QuantSettings, QuantTarget};
use crate::error::{Error, Result};
use crate::layer::Precision;
use crate::metrics::MetricKind;
use crate::model::ToyModelSpec;
use crate::pdr::PurityConfig;
use crate::pipeline::{CalibProbe, RunSettings, Schedule, ThresholdMode};
use crate::tdc::{CacheCompress, TdcConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeKind {
    Nvfp4,
    Identity,
    LinearRig,
}

impl ProbeKind {
    fn as_str(self) -> &'static str {
        match self {
            ProbeKind::Nvfp4 => "nvfp4",
            ProbeKind::Identity => "identity",
            ProbeKind::LinearRig => "linear_rig",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub model_seed: u64,
    pub n_blocks: usize,
    pub hidden_dim: usize,
    pub seq_len: usize,
    pub text_len: usize,
    pub n_heads: usize,
    pub n_timesteps: usize,
    pub eta: f64,

    pub quant_enabled: bool,
    pub hadamard_enabled: bool,
    pub hadamard_block: usize,
    pub activation_int8_mode: Int8Mode,
    pub fp16_bypass_hadamard: bool,

    pub tau_rel: f64,
    /// `None` derives τ_Γ per layer from `tau_rel`.
    pub tau_gamma_override: Option<f64>,
    pub eps_slope: f64,
    pub calib_seeds: Vec<u64>,
    pub calib_quantize: QuantTarget,
    pub calib_probe: ProbeKind,
    pub rig_alpha: f64,
    pub rig_beta: f64,

    pub rho: f64,
    pub tau_cache: f64,
    pub n_max: usize,
    pub tdc_metric: MetricKind,
    pub cache_compress: CacheCompress,

    pub pdr_enabled: bool,
    pub tau_outlier: f64,
    pub sample_stride: usize,
    pub post_skip_format: Precision,

    pub dump_reference: bool,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            model_seed: 0,
            n_blocks: 4,
            hidden_dim: 64,
            seq_len: 128,
            text_len: 16,
            n_heads: 4,
            n_timesteps: 50,
            eta: 1.0,
            quant_enabled: true,
            hadamard_enabled: true,
            hadamard_block: 128,
            activation_int8_mode: Int8Mode::Sym,
            fp16_bypass_hadamard: true,
            tau_rel: 0.0025,
            tau_gamma_override: Some(0.015),
            eps_slope: 1e-8,
            calib_seeds: vec![1, 2, 3, 4],
            calib_quantize: QuantTarget::Both,
            calib_probe: ProbeKind::Nvfp4,
            rig_alpha: 0.1,
            rig_beta: 0.001,
            rho: 0.001,
            tau_cache: 0.003,
            n_max: 2,
            tdc_metric: MetricKind::CosineDissim,
            cache_compress: CacheCompress::Off,
            pdr_enabled: true,
            tau_outlier: 25.0,
            sample_stride: 1,
            post_skip_format: Precision::Int8,
            dump_reference: false,
        }
    }
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got '{v}'")),
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse '{v}'"))
}

fn parse_f64(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = parse_num(v)?;
    if x.is_nan() {
        return Err("NaN is not allowed".into());
    }
    Ok(x)
}

fn via<T: std::str::FromStr<Err = Error>>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|e: Error| e.to_string())
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", i + 1)))?;
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", i + 1)));
            }
            cfg.set(key, value)
                .map_err(|m| Error::Config(format!("line {}: {key}: {m}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "seed" => self.seed = parse_num(v)?,
            "model_seed" => self.model_seed = parse_num(v)?,
            "n_blocks" => self.n_blocks = parse_num(v)?,
            "hidden_dim" => self.hidden_dim = parse_num(v)?,
            "seq_len" => self.seq_len = parse_num(v)?,
            "text_len" => self.text_len = parse_num(v)?,
            "n_heads" => self.n_heads = parse_num(v)?,
            "n_timesteps" => self.n_timesteps = parse_num(v)?,
            "eta" => self.eta = parse_f64(v)?,
            "quant_enabled" => self.quant_enabled = parse_bool(v)?,
            "hadamard_enabled" => self.hadamard_enabled = parse_bool(v)?,
            "hadamard_block" => self.hadamard_block = parse_num(v)?,
            "activation_int8_mode" => self.activation_int8_mode = via(v)?,
            "fp16_bypass_hadamard" => self.fp16_bypass_hadamard = parse_bool(v)?,
            "tau_rel" => self.tau_rel = parse_f64(v)?,
            "tau_gamma_override" => {
                self.tau_gamma_override = if v == "none" { None } else { Some(parse_f64(v)?) }
            }
            "eps_slope" => self.eps_slope = parse_f64(v)?,
            "calib_seeds" => {
                self.calib_seeds = v
                    .split(',')
                    .map(|s| parse_num(s.trim()))
                    .collect::<std::result::Result<_, _>>()?
            }
            "calib_quantize" => self.calib_quantize = via(v)?,
            "calib_probe" => {
                self.calib_probe = match v {
                    "nvfp4" => ProbeKind::Nvfp4,
                    "identity" => ProbeKind::Identity,
                    "linear_rig" => ProbeKind::LinearRig,
                    _ => return Err(format!("unknown probe '{v}'")),
                }
            }
            "rig_alpha" => self.rig_alpha = parse_f64(v)?,
            "rig_beta" => self.rig_beta = parse_f64(v)?,
            "rho" => self.rho = parse_f64(v)?,
            "tau_cache" => self.tau_cache = parse_f64(v)?,
            "n_max" => self.n_max = parse_num(v)?,
            "tdc_metric" => self.tdc_metric = via(v)?,
            "cache_compress" => self.cache_compress = via(v)?,
            "pdr_enabled" => self.pdr_enabled = parse_bool(v)?,
            "tau_outlier" => self.tau_outlier = parse_f64(v)?,
            "sample_stride" => self.sample_stride = parse_num(v)?,
            "post_skip_format" => self.post_skip_format = via(v)?,
            "dump_reference" => self.dump_reference = parse_bool(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model_spec().validate()?;
        self.schedule().validate()?;
        self.tdc().validate()?;
        self.purity().validate()?;
        crate::hadamard::HadamardConfig::new(self.hadamard_block, true)
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.calib_seeds.is_empty() {
            return Err(Error::Config("calib_seeds must not be empty".into()));
        }
        if !(self.eps_slope >= 0.0) || !self.tau_rel.is_finite() {
            return Err(Error::Config("eps_slope must be >= 0 and tau_rel finite".into()));
        }
        Ok(())
    }

    /// Every key, in a fixed order, as parseable `key = value` lines.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("seed", self.seed.to_string());
        kv("model_seed", self.model_seed.to_string());
        kv("n_blocks", self.n_blocks.to_string());
        kv("hidden_dim", self.hidden_dim.to_string());
        kv("seq_len", self.seq_len.to_string());
        kv("text_len", self.text_len.to_string());
        kv("n_heads", self.n_heads.to_string());
        kv("n_timesteps", self.n_timesteps.to_string());
        kv("eta", self.eta.to_string());
        kv("quant_enabled", self.quant_enabled.to_string());
        kv("hadamard_enabled", self.hadamard_enabled.to_string());
        kv("hadamard_block", self.hadamard_block.to_string());
        kv("activation_int8_mode", self.activation_int8_mode.to_string());
        kv("fp16_bypass_hadamard", self.fp16_bypass_hadamard.to_string());
        kv("tau_rel", self.tau_rel.to_string());
        kv(
            "tau_gamma_override",
            self.tau_gamma_override
                .map(|v| v.to_string())
                .unwrap_or_else(|| "none".into()),
        );
        kv("eps_slope", self.eps_slope.to_string());
        kv(
            "calib_seeds",
            self.calib_seeds
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("calib_quantize", self.calib_quantize.to_string());
        kv("calib_probe", self.calib_probe.as_str().to_string());
        kv("rig_alpha", self.rig_alpha.to_string());
        kv("rig_beta", self.rig_beta.to_string());
        kv("rho", self.rho.to_string());
        kv("tau_cache", self.tau_cache.to_string());
        kv("n_max", self.n_max.to_string());
        kv("tdc_metric", self.tdc_metric.to_string());
        kv("cache_compress", self.cache_compress.to_string());
        kv("pdr_enabled", self.pdr_enabled.to_string());
        kv("tau_outlier", self.tau_outlier.to_string());
        kv("sample_stride", self.sample_stride.to_string());
        kv("post_skip_format", self.post_skip_format.to_string());
        kv("dump_reference", self.dump_reference.to_string());
        s
    }

    pub fn model_spec(&self) -> ToyModelSpec {
        ToyModelSpec {
            n_blocks: self.n_blocks,
            hidden_dim: self.hidden_dim,
            seq_len: self.seq_len,
            text_len: self.text_len,
            n_heads: self.n_heads,
            seed: self.model_seed,
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            n_timesteps: self.n_timesteps,
            eta: self.eta,
        }
    }

    pub fn quant_settings(&self) -> QuantSettings {
        QuantSettings {
            block: self.hadamard_block,
            hadamard_enabled: self.hadamard_enabled,
            int8_mode: self.activation_int8_mode,
            fp16_bypass_hadamard: self.fp16_bypass_hadamard,
        }
    }

    pub fn tdc(&self) -> TdcConfig {
        TdcConfig {
            rho: self.rho,
            tau: self.tau_cache,
            n_max: self.n_max,
            metric: self.tdc_metric,
            compress: self.cache_compress,
        }
    }

    pub fn purity(&self) -> PurityConfig {
        PurityConfig {
            tau_outlier: self.tau_outlier,
            sample_stride: self.sample_stride,
            post_skip: self.post_skip_format,
        }
    }

    pub fn probe(&self) -> CalibProbe {
        match self.calib_probe {
            ProbeKind::Nvfp4 => CalibProbe::Nvfp4(self.calib_quantize),
            ProbeKind::Identity => CalibProbe::Identity,
            ProbeKind::LinearRig => CalibProbe::LinearRig {
                alpha: self.rig_alpha,
                beta: self.rig_beta,
            },
        }
    }

    pub fn run_settings(&self) -> RunSettings {
        RunSettings {
            quant_enabled: self.quant_enabled,
            threshold: match self.tau_gamma_override {
                Some(t) => ThresholdMode::Global(t),
                None => ThresholdMode::Derived {
                    tau_rel: self.tau_rel,
                    eps_slope: self.eps_slope,
                },
            },
            tdc: self.tdc(),
            pdr: self.pdr_enabled.then(|| self.purity()),
            sample_stride: self.sample_stride,
        }
    }
}
