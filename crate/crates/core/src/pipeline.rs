//! Denoising driver, calibration, and quantized inference.
//!
//! The state is one `[seq, hidden]` sequence whose first `text_len` rows are a
//! fixed prompt prefix. Each timestep runs all blocks in order and moves the
//! visual rows by `x ← x − η·(h_L − x)`, where `h_L` is the last block output.
//! Timestep `t` sees the embedding of continuous time `η·t`, so `η = 0` is a
//! fixed point.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::dmpq::{self, CalibPair, LayerPredictor, PredictorSet, Reason, RoutingDecision};
use crate::engine::{QuantModel, QuantTarget};
use crate::error::{Error, Result};
use crate::layer::{LayerId, Precision};
use crate::metrics::{l2_norm, rel_l1, rel_l2};
use crate::model::{linear, ToyModel, ToyModelSpec};
use crate::pdr::{outlier_ratio, purify_route, PurityConfig};
use crate::qdt::write_tensor;
use crate::tdc::{CacheDecision, CacheState, TdcConfig};
use crate::tensor::{Element, Tensor};
use crate::trace::{TraceRecord, TraceSummary};

pub const BLOWUP_RATIO: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub n_timesteps: usize,
    pub eta: f64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.n_timesteps == 0 || !self.eta.is_finite() {
            return Err(Error::Config(format!(
                "schedule requires n_timesteps >= 1 and finite eta (got {}, {})",
                self.n_timesteps, self.eta
            )));
        }
        Ok(())
    }

    pub fn time(&self, t: usize) -> f64 {
        self.eta * t as f64
    }
}

/// Prompt prefix and initial noise for `seed`, drawn in f64 and rounded once.
pub fn initial_state<E: Element>(spec: &ToyModelSpec, seed: u64) -> Tensor<E> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..spec.seq_len * spec.hidden_dim)
        .map(|_| E::from_f64_lossy(<StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)))
        .collect();
    Tensor::new(vec![spec.seq_len, spec.hidden_dim], data).expect("gaussian draws are finite")
}

/// `x − η·(y − x)` on visual rows; text rows are copied from `x`.
fn advance<E: Element>(x: &Tensor<E>, y: &Tensor<E>, eta: E, text_len: usize) -> Result<Tensor<E>> {
    let d = x.last_dim();
    let mut data = x.data().to_vec();
    for (i, v) in data.iter_mut().enumerate().skip(text_len * d) {
        *v = *v - eta * (y.data()[i] - *v);
    }
    Tensor::new(x.dims().to_vec(), data)
}

fn check_blowup<E: Element>(t: usize, x: &Tensor<E>, x0_norm: f64) -> Result<()> {
    let n = l2_norm(x);
    if !(n <= BLOWUP_RATIO * x0_norm) {
        return Err(Error::BlowUp {
            timestep: t,
            ratio: n / x0_norm,
        });
    }
    Ok(())
}

/// Visual rows of a state, as their own tensor.
pub fn visual_rows<E: Element>(x: &Tensor<E>, text_len: usize) -> Tensor<E> {
    let d = x.last_dim();
    Tensor::from_parts_unchecked(vec![x.rows() - text_len, d], x.data()[text_len * d..].to_vec())
}

#[derive(Clone, Debug)]
pub struct BlockIo<E: Element> {
    pub input: Tensor<E>,
    pub output: Tensor<E>,
}

impl<E: Element> BlockIo<E> {
    pub fn delta(&self) -> Result<Tensor<E>> {
        self.output.sub(&self.input)
    }

    /// `‖out − in‖₁ / ‖in‖₁`.
    pub fn gamma(&self) -> Result<f64> {
        rel_l1(&self.input, &self.output)
    }
}

#[derive(Clone, Debug)]
pub struct ReferenceRun<E: Element> {
    /// `x_0 ..= x_T`.
    pub states: Vec<Tensor<E>>,
    /// `[t][block]`.
    pub blocks: Vec<Vec<BlockIo<E>>>,
}

impl<E: Element> ReferenceRun<E> {
    pub fn final_state(&self) -> &Tensor<E> {
        self.states.last().expect("at least x_0")
    }

    /// Writes `step_{t}/block_{l}/{in,out,delta}.qdt` under `dir`.
    pub fn dump(&self, dir: &Path) -> Result<()> {
        for (t, step) in self.blocks.iter().enumerate() {
            for (l, io) in step.iter().enumerate() {
                let d = dir.join(format!("step_{t}")).join(format!("block_{l}"));
                std::fs::create_dir_all(&d)?;
                write_tensor(d.join("in.qdt"), &io.input)?;
                write_tensor(d.join("out.qdt"), &io.output)?;
                write_tensor(d.join("delta.qdt"), &io.delta()?)?;
            }
        }
        Ok(())
    }
}

pub fn run_reference<E: Element>(model: &ToyModel<E>, schedule: &Schedule, seed: u64) -> Result<ReferenceRun<E>> {
    schedule.validate()?;
    let spec = model.spec();
    let eta = E::from_f64_lossy(schedule.eta);
    let mut x = initial_state::<E>(spec, seed);
    let x0_norm = l2_norm(&x);
    let mut states = vec![x.clone()];
    let mut blocks = Vec::with_capacity(schedule.n_timesteps);
    for t in 0..schedule.n_timesteps {
        let te = model.time_embedding(schedule.time(t));
        let mut h = x.clone();
        let mut step = Vec::with_capacity(spec.n_blocks);
        for b in 0..spec.n_blocks {
            let out = model.block_forward_full(b, &h, &te)?;
            step.push(BlockIo {
                input: h,
                output: out.clone(),
            });
            h = out;
        }
        x = advance(&x, &h, eta, spec.text_len)?;
        check_blowup(t, &x, x0_norm)?;
        states.push(x.clone());
        blocks.push(step);
    }
    Ok(ReferenceRun { states, blocks })
}

/// How calibration perturbs the probed layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CalibProbe {
    Nvfp4(QuantTarget),
    /// No perturbation; every `e_rel` is zero.
    Identity,
    /// Replaces the quantizer by `O_q = O·(1 + αΓ + β)`, evaluated in f64, so
    /// that `e_rel` is an exact linear function of Γ.
    LinearRig { alpha: f64, beta: f64 },
}

/// Dataflow depth of a layer inside a block.
fn stage(layer: LayerId) -> u8 {
    match layer {
        LayerId::Q | LayerId::K | LayerId::V => 0,
        LayerId::O => 1,
        LayerId::Fc1 => 2,
        LayerId::Fc2 => 3,
    }
}

/// One pair per (block, layer, t ≥ 1): `Γ` of the block at `t − 1` against
/// the block-output error at `t` with only that layer perturbed.
pub fn collect_pairs<E: Element>(
    model: &ToyModel<E>,
    qmodel: &QuantModel<E>,
    reference: &ReferenceRun<E>,
    schedule: &Schedule,
    probe: CalibProbe,
) -> Result<Vec<CalibPair>> {
    let n_t = reference.blocks.len();
    if n_t < 2 {
        return Err(Error::Config("calibration requires ≥ 2 timesteps".into()));
    }
    let mut pairs = Vec::with_capacity(model.spec().n_blocks * 6 * (n_t - 1));
    for t in 1..n_t {
        let te = model.time_embedding(schedule.time(t));
        for (b, io) in reference.blocks[t].iter().enumerate() {
            let gamma_prev = reference.blocks[t - 1][b].gamma()?;
            let p = model.block(b);
            // Layers not downstream of the probed one see unchanged inputs,
            // so their full-precision outputs are reused verbatim.
            let mut full_out: Vec<Option<Tensor<E>>> = vec![None; 6];
            if matches!(probe, CalibProbe::Nvfp4(_)) {
                model.block_forward(b, &io.input, &te, &mut |l, h| {
                    let y = linear(h, p.weight(l))?;
                    full_out[l.index()] = Some(y.clone());
                    Ok(y)
                })?;
            }
            for layer in LayerId::ALL {
                let e_rel = match probe {
                    CalibProbe::Identity => {
                        let o_q = model.block_forward(b, &io.input, &te, &mut |l, h| {
                            qmodel.exec(b, l, Precision::Full, h)
                        })?;
                        rel_l2(&io.output, &o_q)?
                    }
                    CalibProbe::Nvfp4(target) => {
                        let o_q = model.block_forward(b, &io.input, &te, &mut |l, h| {
                            if l == layer {
                                qmodel.exec_nvfp4(b, l, target, h)
                            } else if stage(l) <= stage(layer) {
                                Ok(full_out[l.index()].clone().expect("recorded above"))
                            } else {
                                linear(h, p.weight(l))
                            }
                        })?;
                        rel_l2(&io.output, &o_q)?
                    }
                    CalibProbe::LinearRig { alpha, beta } => {
                        let o: Tensor<f64> = io.output.cast()?;
                        let o_q = o.scale(1.0 + alpha * gamma_prev + beta)?;
                        rel_l2(&o, &o_q)?
                    }
                };
                pairs.push(CalibPair {
                    block: b,
                    layer,
                    timestep: t,
                    gamma_prev,
                    e_rel,
                });
            }
        }
    }
    Ok(pairs)
}

#[derive(Clone, Debug)]
pub struct Calibration {
    pub predictors: PredictorSet,
    pub pairs: Vec<CalibPair>,
}

/// Collects pairs for every seed (in parallel, concatenated in seed order)
/// and fits one predictor per layer.
pub fn run_calibration<E: Element>(
    model: &ToyModel<E>,
    qmodel: &QuantModel<E>,
    schedule: &Schedule,
    seeds: &[u64],
    probe: CalibProbe,
    tau_rel: f64,
    eps_slope: f64,
) -> Result<Calibration> {
    schedule.validate()?;
    if schedule.n_timesteps < 2 {
        return Err(Error::Config("calibration requires ≥ 2 timesteps".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("calibration requires at least one seed".into()));
    }
    let per_seed: Vec<Vec<CalibPair>> = seeds
        .par_iter()
        .map(|&seed| {
            let reference = run_reference(model, schedule, seed)?;
            collect_pairs(model, qmodel, &reference, schedule, probe)
        })
        .collect::<Result<_>>()?;
    let pairs: Vec<CalibPair> = per_seed.into_iter().flatten().collect();
    let predictors = PredictorSet::new(dmpq::fit_all(&pairs, tau_rel, eps_slope)?);
    Ok(Calibration { predictors, pairs })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ThresholdMode {
    /// One τ_Γ for every layer.
    Global(f64),
    /// Per-layer `(τ_rel − β)/α`; undefined thresholds pin the layer to INT8.
    Derived { tau_rel: f64, eps_slope: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunSettings {
    /// When false every layer runs unquantized with reason `disabled`.
    pub quant_enabled: bool,
    pub threshold: ThresholdMode,
    pub tdc: TdcConfig,
    /// `None` disables both fallbacks.
    pub pdr: Option<PurityConfig>,
    /// Stride used for the reported outlier ratio when PDR is off.
    pub sample_stride: usize,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            quant_enabled: true,
            threshold: ThresholdMode::Global(0.015),
            tdc: TdcConfig::default(),
            pdr: Some(PurityConfig::default()),
            sample_stride: 1,
        }
    }
}

/// One block step of a quantized run.
#[derive(Clone, Debug)]
pub struct QuantStep<E: Element> {
    pub decision: CacheDecision,
    pub io: BlockIo<E>,
    /// Delta held by the cache after this step.
    pub cached_delta: Tensor<E>,
}

#[derive(Clone, Debug)]
pub struct QuantRun<E: Element> {
    pub states: Vec<Tensor<E>>,
    /// `[t][block]`.
    pub steps: Vec<Vec<QuantStep<E>>>,
    pub trace: Vec<TraceRecord>,
}

impl<E: Element> QuantRun<E> {
    pub fn final_state(&self) -> &Tensor<E> {
        self.states.last().expect("at least x_0")
    }

    pub fn summary(&self) -> Result<TraceSummary> {
        TraceSummary::from_records(&self.trace)
    }
}

fn runtime_predictors(
    predictors: &PredictorSet,
    n_blocks: usize,
    mode: ThresholdMode,
) -> Result<Vec<[LayerPredictor; 6]>> {
    predictors.ensure_covers(n_blocks)?;
    (0..n_blocks)
        .map(|b| {
            let get = |l: LayerId| -> Result<LayerPredictor> {
                let p = predictors.get(b, l)?;
                Ok(match mode {
                    ThresholdMode::Global(tau) => p.with_threshold(Some(tau)),
                    ThresholdMode::Derived { tau_rel, eps_slope } => {
                        p.with_threshold(dmpq::derive_threshold(p, tau_rel, eps_slope).ok())
                    }
                })
            };
            Ok([
                get(LayerId::Q)?,
                get(LayerId::K)?,
                get(LayerId::V)?,
                get(LayerId::O)?,
                get(LayerId::Fc1)?,
                get(LayerId::Fc2)?,
            ])
        })
        .collect()
}

/// Quantized inference with routing, caching and refresh fallbacks.
pub fn run_quantized<E: Element>(
    model: &ToyModel<E>,
    qmodel: &QuantModel<E>,
    schedule: &Schedule,
    seed: u64,
    predictors: &PredictorSet,
    settings: &RunSettings,
) -> Result<QuantRun<E>> {
    schedule.validate()?;
    settings.tdc.validate()?;
    if let Some(p) = &settings.pdr {
        p.validate()?;
    }
    let spec = model.spec();
    let table = runtime_predictors(predictors, spec.n_blocks, settings.threshold)?;
    let eta = E::from_f64_lossy(schedule.eta);
    let block_elems: u64 = LayerId::ALL.iter().map(|&l| spec.layer_elems(l)).sum();
    let block_macs: u64 = LayerId::ALL.iter().map(|&l| spec.layer_macs(l)).sum();

    let mut x = initial_state::<E>(spec, seed);
    let x0_norm = l2_norm(&x);
    let mut states = vec![x.clone()];
    let mut caches: Vec<CacheState<E>> = (0..spec.n_blocks).map(CacheState::new).collect();
    let mut prev: Vec<Option<(BlockIo<E>, CacheDecision)>> = vec![None; spec.n_blocks];
    let mut steps = Vec::with_capacity(schedule.n_timesteps);
    let mut trace = Vec::new();

    for t in 0..schedule.n_timesteps {
        let te = model.time_embedding(schedule.time(t));
        let mut h = x.clone();
        let mut step_row = Vec::with_capacity(spec.n_blocks);
        for b in 0..spec.n_blocks {
            let gamma_prev = match &prev[b] {
                Some((io, _)) => Some(io.gamma()?),
                None => None,
            };
            let prev_skipped = matches!(prev[b], Some((_, CacheDecision::Skip)));
            let block_row_at = trace.len();
            trace.push(TraceRecord::block_row(t, b, CacheDecision::Compute, block_elems, block_macs));
            let mut layer_rows = Vec::new();
            let preds = &table[b];
            let mut exec = |layer: LayerId, input: &Tensor<E>| -> Result<Tensor<E>> {
                let p = &preds[layer.index()];
                let base = if !settings.quant_enabled {
                    RoutingDecision {
                        layer,
                        precision: Precision::Full,
                        reason: Reason::Disabled,
                    }
                } else {
                    match gamma_prev {
                        Some(g) => dmpq::route(g, p),
                        None => RoutingDecision {
                            layer,
                            precision: Precision::Int8,
                            reason: Reason::NoHistory,
                        },
                    }
                };
                let (decision, ratio) = match &settings.pdr {
                    Some(cfg) => purify_route(base, input, prev_skipped, cfg),
                    None => (base, outlier_ratio(input, settings.sample_stride)),
                };
                layer_rows.push(TraceRecord {
                    layer: Some(layer),
                    format: Some(decision.precision),
                    gamma_prev,
                    e_rel_pred: gamma_prev.map(|g| p.predict_reported(g)),
                    r_outlier: Some(ratio),
                    reason: Some(decision.reason),
                    ..TraceRecord::block_row(t, b, CacheDecision::Compute, spec.layer_elems(layer), spec.layer_macs(layer))
                });
                qmodel.exec(b, layer, decision.precision, input)
            };
            let (out, cache_step) =
                caches[b].apply(t, &h, &settings.tdc, |xin| model.block_forward(b, xin, &te, &mut exec))?;
            let row = &mut trace[block_row_at];
            row.decision = cache_step.decision;
            row.gamma_prev = gamma_prev;
            row.e_acc = cache_step.e_acc;
            row.e_tp = cache_step.e_tp;
            row.gap = cache_step.gap;
            trace.extend(layer_rows);

            let io = BlockIo {
                input: h,
                output: out.clone(),
            };
            step_row.push(QuantStep {
                decision: cache_step.decision,
                io: io.clone(),
                cached_delta: caches[b].cached_delta().expect("computed at least once").clone(),
            });
            prev[b] = Some((io, cache_step.decision));
            h = out;
        }
        x = advance(&x, &h, eta, spec.text_len)?;
        check_blowup(t, &x, x0_norm)?;
        states.push(x.clone());
        steps.push(step_row);
    }
    Ok(QuantRun { states, steps, trace })
}

/// Relative L2 error of the final visual rows against the reference.
pub fn end_to_end_error<E: Element>(reference: &Tensor<E>, other: &Tensor<E>, text_len: usize) -> Result<f64> {
    rel_l2(&visual_rows(reference, text_len), &visual_rows(other, text_len))
}
