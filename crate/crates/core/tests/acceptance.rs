//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs without the libtest harness so the report stays readable.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};

use qde::cli::{cmd_calibrate, cmd_report, cmd_run, Options, REPORT_FILE, TRACE_FILE};
use qde::config::Config;
use qde::dmpq::{self, CalibPair, LayerPredictor, PredictorSet, Reason};
use qde::engine::QuantModel;
use qde::hadamard::{fht_blocks, HadamardConfig};
use qde::metrics::rel_l2;
use qde::model::ToyModel;
use qde::pipeline::{
    end_to_end_error, initial_state, run_calibration, run_quantized, run_reference, ThresholdMode,
};
use qde::qdt::write_tensor;
use qde::quant::{
    dequantize, e4m3_decode, fp4_value, oracle_nearest_fp4, quantize_int8_asym, quantize_int8_sym,
    quantize_nvfp4, Payload, NVFP4_BLOCK,
};
use qde::tdc::{CacheDecision, CacheState, TdcConfig};
use qde::trace::{parse_trace, TraceRecord, TraceSummary};
use qde::{LayerId, Precision, Tensor};

type Check = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

fn max_consecutive(decisions: &[CacheDecision]) -> usize {
    let (mut best, mut run) = (0, 0);
    for d in decisions {
        run = if *d == CacheDecision::Skip { run + 1 } else { 0 };
        best = best.max(run);
    }
    best
}

// ---------------------------------------------------------------- 1

fn codec_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let per_tensor = 4096;
    let mut checked = 0usize;
    let mut mismatches = 0usize;
    for i in 0..(1_000_000 / per_tensor + 1) {
        let scale = 10f64.powf(rng.random_range(-4.0..4.0));
        let data: Vec<f32> = (0..per_tensor)
            .map(|_| {
                let v = match i % 3 {
                    0 => rng.random_range(-1.0..1.0),
                    1 => gauss(&mut rng),
                    // ratio of Gaussians is Cauchy-distributed
                    _ => gauss(&mut rng) / gauss(&mut rng).abs().max(1e-3),
                };
                (v * scale) as f32
            })
            .collect();
        let x = Tensor::from_vec(data).unwrap();
        let q = quantize_nvfp4(&x);
        let Payload::Nvfp4 {
            global_scale,
            block_scales,
            codes,
        } = q.payload()
        else {
            unreachable!()
        };
        let back = dequantize::<f64>(&q).unwrap();
        for (j, v) in x.data().iter().enumerate() {
            let eff = e4m3_decode(block_scales[j / NVFP4_BLOCK]).unwrap() * *global_scale as f64;
            let want = oracle_nearest_fp4(*v as f64 / eff);
            if codes[j] != want || back.data()[j] != fp4_value(want) * eff {
                mismatches += 1;
            }
            checked += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure!(checked >= 1_000_000, "only {checked} values checked");
    ensure!(mismatches == 0, "{mismatches} mismatches out of {checked}");
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:.2?}");
    Ok(format!("{checked} values, 0 mismatches, {elapsed:.2?}"))
}

// ---------------------------------------------------------------- 2

fn int8_bounds() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for i in 0..100_000 {
        let n = rng.random_range(1..=64);
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let offset = if i % 2 == 0 { 0.0 } else { rng.random_range(-2.0..2.0) * scale };
        let v: Vec<f64> = (0..n).map(|_| gauss(&mut rng) * scale + offset).collect();
        for asym in [false, true] {
            let x64 = Tensor::from_vec(v.clone()).unwrap();
            let x32: Tensor<f32> = x64.cast().unwrap();
            let (q64, q32) = if asym {
                (quantize_int8_asym(&x64), quantize_int8_asym(&x32))
            } else {
                (quantize_int8_sym(&x64), quantize_int8_sym(&x32))
            };
            let s_of = |p: &Payload| match p {
                Payload::Int8Sym { scales, .. } | Payload::Int8Asym { scales, .. } => scales[0],
                _ => unreachable!(),
            };
            let (s64, s32) = (s_of(q64.payload()), s_of(q32.payload()));
            let d64 = dequantize::<f64>(&q64).unwrap();
            let d32 = dequantize::<f32>(&q32).unwrap();
            for ((a, b), (a32, b32)) in
                x64.data().iter().zip(d64.data()).zip(x32.data().iter().zip(d32.data()))
            {
                let ulp64 = f64::EPSILON * a.abs().max(b.abs()).max(s64);
                let err = (a - b).abs();
                ensure!(err <= s64 / 2.0 + 4.0 * ulp64, "f64 asym={asym}: |{a} - {b}| > s/2 (s = {s64})");
                worst = worst.max(err / s64);
                let (a32, b32) = (*a32 as f64, *b32 as f64);
                let ulp32 = f32::EPSILON as f64 * a32.abs().max(b32.abs()).max(s32);
                ensure!(
                    (a32 - b32).abs() <= s32 / 2.0 + 4.0 * ulp32,
                    "f32 asym={asym}: |{a32} - {b32}| > s/2 (s = {s32})"
                );
            }
        }
    }
    Ok(format!("2 x 100000 tensors per dtype, worst |err|/s = {worst:.6}"))
}

// ---------------------------------------------------------------- 3

fn sylvester(n: usize) -> Vec<Vec<f64>> {
    let mut h = vec![vec![1.0]];
    while h.len() < n {
        let m = h.len();
        let mut next = vec![vec![0.0; 2 * m]; 2 * m];
        for i in 0..m {
            for j in 0..m {
                next[i][j] = h[i][j];
                next[i][j + m] = h[i][j];
                next[i + m][j] = h[i][j];
                next[i + m][j + m] = -h[i][j];
            }
        }
        h = next;
    }
    h
}

fn hadamard_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = HadamardConfig::default();

    let x = Tensor::<f32>::from_fn(&[64, 256], |_| gauss(&mut rng) as f32).unwrap();
    let y = fht_blocks(&x, cfg).unwrap();
    let back = fht_blocks(&y, cfg).unwrap();
    let inv_err = x
        .data()
        .iter()
        .zip(back.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    ensure!(inv_err <= 1e-6, "involution error {inv_err}");

    let mut worst_ulps = 0.0f64;
    for (xb, yb) in x.data().chunks(128).zip(y.data().chunks(128)) {
        let nx = xb.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        let ny = yb.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        let ulps = (nx - ny).abs() / (f32::EPSILON as f64 * nx);
        worst_ulps = worst_ulps.max(ulps);
    }
    ensure!(worst_ulps <= 8.0, "norm drift {worst_ulps} ulp");

    for b in [2usize, 4, 8, 16] {
        let h = sylvester(b);
        let c = HadamardConfig::new(b, true).unwrap();
        let x = Tensor::<f64>::from_fn(&[3, 2 * b], |_| gauss(&mut rng)).unwrap();
        let y = fht_blocks(&x, c).unwrap();
        for (xb, yb) in x.data().chunks(b).zip(y.data().chunks(b)) {
            for i in 0..b {
                let dense: f64 = (0..b).map(|j| h[i][j] * xb[j]).sum::<f64>() / (b as f64).sqrt();
                ensure!((dense - yb[i]).abs() <= 1e-12, "B = {b}: dense {dense} vs fht {}", yb[i]);
            }
        }
    }

    let (mut with, mut without) = (0.0, 0.0);
    let n_tensors = 100;
    let student = StudentT::new(3.0).unwrap();
    for _ in 0..n_tensors {
        // Student-t bulk with one spike of magnitude 1000 per rotation block.
        let mut v: Vec<f32> = (0..8 * 128).map(|_| student.sample(&mut rng) as f32).collect();
        for block in v.chunks_mut(cfg.block()) {
            let i = rng.random_range(0..block.len());
            block[i] = if rng.random_bool(0.5) { 1000.0 } else { -1000.0 };
        }
        let x = Tensor::new(vec![8, 128], v).unwrap();
        let plain = dequantize::<f32>(&quantize_nvfp4(&x)).unwrap();
        without += rel_l2(&x, &plain).unwrap();
        let rot = fht_blocks(&x, cfg).unwrap();
        let rt = fht_blocks(&dequantize::<f32>(&quantize_nvfp4(&rot)).unwrap(), cfg).unwrap();
        with += rel_l2(&x, &rt).unwrap();
    }
    let (with, without) = (with / n_tensors as f64, without / n_tensors as f64);
    ensure!(with < without, "FHT mean error {with} not below plain {without}");
    Ok(format!(
        "involution {inv_err:.1e}, norm {worst_ulps:.2} ulp, spike rel_l2 {with:.4} vs {without:.4}"
    ))
}

// ---------------------------------------------------------------- 4

fn ols_exactness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let alpha = rng.random_range(-5.0..5.0);
        let beta = rng.random_range(-0.1..0.1);
        let pairs: Vec<CalibPair> = (0..rng.random_range(2..40))
            .map(|t| {
                let g = rng.random_range(0.001..0.1);
                CalibPair {
                    block: 0,
                    layer: LayerId::V,
                    timestep: t + 1,
                    gamma_prev: g,
                    e_rel: alpha * g + beta,
                }
            })
            .collect();
        let p = dmpq::fit_layer(&pairs).map_err(|e| e.to_string())?;
        let err = (p.alpha - alpha).abs().max((p.beta - beta).abs());
        worst = worst.max(err);
        ensure!(err <= 1e-9, "fit ({}, {}) vs truth ({alpha}, {beta})", p.alpha, p.beta);
    }
    let mut disagreements = 0;
    for _ in 0..10_000 {
        let alpha = 10f64.powf(rng.random_range(-3.0..1.0));
        let beta = rng.random_range(-0.01..0.01);
        let tau_rel = rng.random_range(0.0..0.02);
        let gamma = rng.random_range(0.0..0.2);
        let p = LayerPredictor {
            block: 0,
            layer: LayerId::Q,
            alpha,
            beta,
            tau_gamma: None,
            pair_count: 2,
            residual_rms: 0.0,
        };
        let tau = dmpq::derive_threshold(&p, tau_rel, 1e-12).map_err(|e| e.to_string())?;
        let routed = dmpq::route(gamma, &p.with_threshold(Some(tau)));
        let int8 = routed.precision == Precision::Int8;
        if int8 != (alpha * gamma + beta > tau_rel) || routed.reason != Reason::Threshold {
            disagreements += 1;
        }
    }
    ensure!(disagreements == 0, "{disagreements} routing disagreements");
    Ok(format!("1000 fits, worst coefficient error {worst:.1e}; 10000 routes agree"))
}

// ---------------------------------------------------------------- 5

fn tdc_golden() -> Check {
    use CacheDecision::{Compute, Skip};
    let cfg = TdcConfig::default();
    ensure!((cfg.rho, cfg.tau, cfg.n_max) == (0.001, 0.003, 2), "default TDC constants changed");
    let d = Tensor::<f64>::from_vec(vec![1.0, -1.0]).unwrap();
    let mut s = CacheState::<f64>::new(0);
    let mut decisions = Vec::new();
    let mut acc = Vec::new();
    for t in 0..8 {
        let dec = s.decide(t, &cfg);
        match dec {
            Compute => s.record_compute_measured(t, d.clone(), 0.001, &cfg),
            Skip => s.record_skip(&cfg),
        }
        decisions.push(dec);
        acc.push(s.e_acc());
    }
    // t = 0, 1 warm up; t = 1 is the reference compute step.
    ensure!(
        decisions[1..5] == [Compute, Skip, Skip, Compute],
        "decisions {decisions:?}"
    );
    ensure!(
        acc[1] == 0.001 && acc[2] == 0.003 && acc[3] == 0.005,
        "e_acc phases {:?}",
        &acc[1..4]
    );

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut total = 0;
    while total < 100_000 {
        let cfg = TdcConfig {
            rho: rng.random_range(0.0..0.002),
            tau: rng.random_range(0.0..0.02),
            n_max: rng.random_range(1..=5),
            ..TdcConfig::default()
        };
        let mut s = CacheState::<f64>::new(0);
        let mut decisions = Vec::with_capacity(1000);
        for t in 0..1000 {
            let dec = s.decide(t, &cfg);
            match dec {
                Compute => s.record_compute_measured(t, d.clone(), rng.random_range(0.0..0.004), &cfg),
                Skip => s.record_skip(&cfg),
            }
            decisions.push(dec);
        }
        let run = max_consecutive(&decisions);
        ensure!(run <= cfg.n_max, "{run} consecutive skips with n_max = {}", cfg.n_max);
        total += decisions.len();
    }
    Ok(format!("C,S,S,C with e_acc 0.001/0.003/0.005; {total} random steps within n_max"))
}

// ---------------------------------------------------------------- 6

fn drift_linearity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let dims = [8usize, 16];
    let mut worst = 0.0f64;
    for n in 1..=3usize {
        let x0 = Tensor::<f64>::from_fn(&dims, |_| gauss(&mut rng)).unwrap();
        let delta = Tensor::<f64>::from_fn(&dims, |_| 0.1 * gauss(&mut rng)).unwrap();
        let eps = Tensor::<f64>::from_fn(&dims, |_| 1e-3 * gauss(&mut rng)).unwrap();
        let cfg = TdcConfig {
            rho: 0.0,
            tau: f64::INFINITY,
            n_max: n,
            ..TdcConfig::default()
        };
        let block = |x: &Tensor<f64>| x.add(&delta);
        let mut cache = CacheState::<f64>::new(0);
        let (x1, _) = cache.apply(0, &x0, &cfg, block).map_err(|e| e.to_string())?;
        // The second computed delta is stored with cache noise ε_q.
        ensure!(cache.decide(1, &cfg) == CacheDecision::Compute, "warm-up step skipped");
        let x2 = block(&x1).unwrap();
        cache.record_compute_measured(1, delta.add(&eps).unwrap(), 0.0, &cfg);

        let (mut cached, mut exact) = (x2.clone(), x2);
        for k in 0..n {
            let mut called = false;
            let (out, step) = cache
                .apply(2 + k, &cached, &cfg, |x| {
                    called = true;
                    block(x)
                })
                .map_err(|e| e.to_string())?;
            ensure!(!called && step.decision == CacheDecision::Skip, "skip {k} of {n} recomputed");
            cached = out;
            exact = block(&exact).unwrap();
        }
        let dev = cached.sub(&exact).unwrap();
        let dev_norm = dev.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let eps_norm = eps.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let rel = (dev_norm - n as f64 * eps_norm).abs() / (n as f64 * eps_norm);
        worst = worst.max(rel);
        ensure!(rel <= 1e-6, "N = {n}: ‖dev‖ = {dev_norm}, N‖ε‖ = {}", n as f64 * eps_norm);
        ensure!(
            cache.decide(2 + n, &cfg) == CacheDecision::Compute,
            "N = {n}: skipping beyond n_max"
        );
    }
    Ok(format!("N = 1..3, worst relative deviation {worst:.1e}"))
}

// ---------------------------------------------------------------- 7

fn covering_predictors(n_blocks: usize) -> PredictorSet {
    PredictorSet::new(
        (0..n_blocks)
            .flat_map(|b| {
                LayerId::ALL.map(|layer| LayerPredictor {
                    block: b,
                    layer,
                    alpha: 1.0,
                    beta: 0.0,
                    tau_gamma: None,
                    pair_count: 2,
                    residual_rms: 0.0,
                })
            })
            .collect(),
    )
}

fn same_bits(a: &Tensor<f32>, b: &Tensor<f32>) -> bool {
    a.dims() == b.dims() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn purity_guarantee() -> Check {
    let mut cfg = Config::default();
    cfg.tau_outlier = 1.0 + 1e-9;
    let spec = cfg.model_spec();
    let model = ToyModel::<f32>::new(spec.clone()).unwrap();
    let qmodel = QuantModel::new(&model, cfg.quant_settings()).unwrap();
    let schedule = cfg.schedule();
    let preds = covering_predictors(spec.n_blocks);
    let run = run_quantized(&model, &qmodel, &schedule, cfg.seed, &preds, &cfg.run_settings())
        .map_err(|e| e.to_string())?;

    for r in run.trace.iter().filter(|r| !r.is_block_row()) {
        ensure!(
            r.format == Some(Precision::Fp16) && r.reason == Some(Reason::OutlierFallback),
            "t = {} block {} layer {:?} routed {:?}",
            r.timestep,
            r.block,
            r.layer,
            r.format
        );
    }

    // Independent replay of the FP16 pipeline along the same cache schedule.
    let eta = schedule.eta as f32;
    let mut x = initial_state::<f32>(&spec, cfg.seed);
    let mut deltas: Vec<Option<Tensor<f32>>> = vec![None; spec.n_blocks];
    let mut skips = 0;
    for (t, row) in run.steps.iter().enumerate() {
        let te = model.time_embedding(schedule.time(t));
        let mut h = x.clone();
        for (b, step) in row.iter().enumerate() {
            let out = match step.decision {
                CacheDecision::Compute => {
                    let out = model
                        .block_forward(b, &h, &te, &mut |l, a| qmodel.exec(b, l, Precision::Fp16, a))
                        .unwrap();
                    deltas[b] = Some(out.sub(&h).unwrap());
                    out
                }
                CacheDecision::Skip => {
                    skips += 1;
                    h.add(deltas[b].as_ref().unwrap()).unwrap()
                }
            };
            ensure!(
                same_bits(deltas[b].as_ref().unwrap(), &step.cached_delta),
                "cached delta differs at t = {t}, block {b}"
            );
            h = out;
        }
        let d = x.last_dim();
        let data = x
            .data()
            .iter()
            .zip(h.data())
            .enumerate()
            .map(|(i, (&v, &y))| if i < spec.text_len * d { v } else { v - eta * (y - v) })
            .collect();
        x = Tensor::new(x.dims().to_vec(), data).unwrap();
    }
    ensure!(skips > 0, "no skips exercised");
    ensure!(same_bits(&x, run.final_state()), "final state drifted from the FP16 replay");
    Ok(format!("all layers fp16, {skips} skips, cached deltas and final state bit-exact"))
}

// ---------------------------------------------------------------- 8

fn transparency() -> Check {
    let start = Instant::now();
    let mut cfg = Config::default();
    cfg.quant_enabled = false;
    cfg.tau_cache = 0.0;
    cfg.pdr_enabled = false;
    ensure!(cfg.n_timesteps == 50, "default T changed");
    let model = ToyModel::<f32>::new(cfg.model_spec()).unwrap();
    let qmodel = QuantModel::new(&model, cfg.quant_settings()).unwrap();
    let schedule = cfg.schedule();
    let reference = run_reference(&model, &schedule, cfg.seed).map_err(|e| e.to_string())?;
    let preds = covering_predictors(cfg.n_blocks);
    let run = run_quantized(&model, &qmodel, &schedule, cfg.seed, &preds, &cfg.run_settings())
        .map_err(|e| e.to_string())?;
    ensure!(reference.states.len() == run.states.len(), "state count differs");
    for (t, (a, b)) in reference.states.iter().zip(&run.states).enumerate() {
        ensure!(same_bits(a, b), "state {t} differs");
    }
    for (t, (ra, rb)) in reference.blocks.iter().zip(&run.steps).enumerate() {
        for (b, (a, s)) in ra.iter().zip(rb).enumerate() {
            ensure!(s.decision == CacheDecision::Compute, "t = {t} block {b} skipped");
            ensure!(same_bits(&a.output, &s.io.output), "t = {t} block {b} output differs");
        }
    }
    let err = end_to_end_error(reference.final_state(), run.final_state(), cfg.text_len).unwrap();
    ensure!(err == 0.0, "rel_l2 {err}");
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:.2?}");
    Ok(format!("T = 50 bit-identical, {elapsed:.2?}"))
}

// ---------------------------------------------------------------- 9

/// One-sided sign test for `a < b`, ties dropped. Returns (wins, losses, p).
fn sign_test(a: &[f64], b: &[f64]) -> (usize, usize, f64) {
    let wins = a.iter().zip(b).filter(|(x, y)| x < y).count();
    let losses = a.iter().zip(b).filter(|(x, y)| x > y).count();
    let n = wins + losses;
    let choose = |n: usize, k: usize| -> f64 { (0..k).fold(1.0, |c, i| c * (n - i) as f64 / (i + 1) as f64) };
    let p = (wins..=n).map(|k| choose(n, k)).sum::<f64>() / 2f64.powi(n as i32);
    (wins, losses, if n == 0 { 0.0 } else { p })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn ablation_ordering() -> Check {
    let cfg = Config::default();
    let model = ToyModel::<f32>::new(cfg.model_spec()).unwrap();
    let qmodel = QuantModel::new(&model, cfg.quant_settings()).unwrap();
    let schedule = cfg.schedule();
    let cal = run_calibration(
        &model,
        &qmodel,
        &schedule,
        &cfg.calib_seeds,
        cfg.probe(),
        cfg.tau_rel,
        cfg.eps_slope,
    )
    .map_err(|e| e.to_string())?;

    let full = cfg.run_settings();
    let no_pdr = qde::pipeline::RunSettings { pdr: None, ..full };
    let static_route = |tau_gamma: f64| qde::pipeline::RunSettings {
        threshold: ThresholdMode::Global(tau_gamma),
        tdc: TdcConfig { tau: 0.0, ..full.tdc },
        pdr: None,
        ..full
    };
    let variants = [
        ("dmpq+tdc+pdr", full),
        ("dmpq+tdc", no_pdr),
        ("int8", static_route(-1.0)),
        ("dmpq", static_route(cfg.tau_gamma_override.unwrap_or(0.015))),
        ("nvfp4", static_route(f64::INFINITY)),
    ];
    let seeds: Vec<u64> = (100..110).collect();
    let mut errs = vec![Vec::new(); variants.len()];
    let mut skip_fractions = Vec::new();
    for &seed in &seeds {
        let reference = run_reference(&model, &schedule, seed).map_err(|e| e.to_string())?;
        for (i, (_, settings)) in variants.iter().enumerate() {
            let run = run_quantized(&model, &qmodel, &schedule, seed, &cal.predictors, settings)
                .map_err(|e| e.to_string())?;
            errs[i].push(end_to_end_error(reference.final_state(), run.final_state(), cfg.text_len).unwrap());
            if i == 0 {
                skip_fractions.push(run.summary().unwrap().skip_fraction);
            }
        }
    }
    for f in &skip_fractions {
        ensure!(*f > 0.0 && *f <= 2.0 / 3.0, "skip fraction {f} outside (0, 2/3]");
    }
    let mut notes = Vec::new();
    for (lo, hi, strict) in [(0usize, 1usize, true), (2, 3, false), (3, 4, false)] {
        let (ma, mb) = (mean(&errs[lo]), mean(&errs[hi]));
        let (w, l, p) = sign_test(&errs[lo], &errs[hi]);
        let (na, nb) = (variants[lo].0, variants[hi].0);
        let mean_ok = if strict { ma < mb } else { ma <= mb };
        ensure!(mean_ok, "mean {na} {ma:.4e} vs {nb} {mb:.4e}");
        ensure!(p < 0.05, "{na} vs {nb}: sign test {w}/{l}, p = {p:.4}");
        notes.push(format!("{na} {ma:.4} < {nb} {mb:.4} ({w}/{} p={p:.4})", w + l));
    }
    Ok(notes.join("; "))
}

// ---------------------------------------------------------------- 10

fn small_config() -> Config {
    Config {
        n_blocks: 2,
        seq_len: 32,
        text_len: 4,
        n_timesteps: 8,
        calib_seeds: vec![1, 2],
        ..Config::default()
    }
}

fn bit_accounting() -> Check {
    let elems = 100u64;
    let mut records = Vec::new();
    for t in 0..4 {
        for b in 0..2 {
            records.push(TraceRecord::block_row(t, b, CacheDecision::Compute, 2 * elems, 2 * elems));
            for (i, layer) in [LayerId::Q, LayerId::Fc1].into_iter().enumerate() {
                let precision = if (t + b + i) % 2 == 0 { Precision::Int8 } else { Precision::Nvfp4 };
                records.push(TraceRecord {
                    layer: Some(layer),
                    format: Some(precision),
                    reason: Some(Reason::Threshold),
                    ..TraceRecord::block_row(t, b, CacheDecision::Compute, elems, elems)
                });
            }
        }
    }
    let crafted = TraceSummary::from_records(&records).map_err(|e| e.to_string())?;
    ensure!(crafted.avg_bits == 6.0, "crafted avg bits {}", crafted.avg_bits);

    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("qde.conf");
    std::fs::write(&cfg_path, small_config().render()).unwrap();
    let preds = dir.path().join("predictors.txt");
    let opts = Options::default();
    cmd_calibrate(&cfg_path, &preds, &opts).map_err(|e| e.to_string())?;
    let out = dir.path().join("run");
    cmd_run(&cfg_path, &preds, &out, &opts).map_err(|e| e.to_string())?;
    let report = std::fs::read_to_string(out.join(REPORT_FILE)).unwrap();
    let recomputed = cmd_report(&out.join(TRACE_FILE), &opts).map_err(|e| e.to_string())?;
    let section = report
        .split_once("[trace_summary]\n")
        .map(|(_, s)| s)
        .ok_or("report has no trace_summary section")?;
    ensure!(section == recomputed, "report section differs from cmd_report output");

    // Average bits by hand from the trace file alone.
    let rows = parse_trace(&std::fs::read_to_string(out.join(TRACE_FILE)).unwrap()).unwrap();
    let (mut num, mut den) = (0u64, 0u64);
    for r in &rows {
        match (r.is_block_row(), r.decision) {
            (true, CacheDecision::Skip) => den += r.elems,
            (false, _) => {
                num += r.format.unwrap().bits() as u64 * r.elems;
                den += r.elems;
            }
            _ => {}
        }
    }
    let by_hand = num as f64 / den as f64;
    ensure!(
        section.contains(&format!("avg_activation_bits = {by_hand}\n")),
        "hand-computed avg bits {by_hand} not in report"
    );
    Ok(format!("crafted 6.0; run avg bits {by_hand} recomputed exactly"))
}

// ---------------------------------------------------------------- 11

fn run_cli(threads: &str, args: &[&std::ffi::OsStr]) -> std::result::Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_qde"))
        .args(args)
        .env("QDE_THREADS", threads)
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        out.status.success(),
        "qde {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(out.stdout)
}

fn cli_session(dir: &Path, threads: &str) -> std::result::Result<Vec<(String, Vec<u8>)>, String> {
    let cfg = dir.join("qde.conf");
    std::fs::write(&cfg, small_config().render()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let t = Tensor::<f32>::from_fn(&[16, 48], |_| gauss(&mut rng) as f32).unwrap();
    let input = dir.join("x.qdt");
    write_tensor(&input, &t).unwrap();
    let preds = dir.join("predictors.txt");
    let run = dir.join("run");
    let quant = dir.join("x.nvfp4.qdt");
    let os = |s: &'static str| std::ffi::OsStr::new(s);

    let mut outputs = Vec::new();
    let stdout = run_cli(threads, &[os("--config"), cfg.as_os_str(), os("--out"), preds.as_os_str(), os("calibrate")])?;
    outputs.push(("calibrate stdout".into(), stdout));
    let stdout = run_cli(
        threads,
        &[
            os("--config"),
            cfg.as_os_str(),
            os("--out"),
            run.as_os_str(),
            os("--seed"),
            os("7"),
            os("run"),
            os("--predictors"),
            preds.as_os_str(),
        ],
    )?;
    outputs.push(("run stdout".into(), stdout));
    let trace = run.join(TRACE_FILE);
    let stdout = run_cli(threads, &[os("report"), trace.as_os_str()])?;
    outputs.push(("report stdout".into(), stdout));
    let stdout = run_cli(
        threads,
        &[os("--out"), quant.as_os_str(), os("quantize-tensor"), input.as_os_str(), os("--format"), os("nvfp4")],
    )?;
    outputs.push(("quantize-tensor stdout".into(), stdout));
    for (name, path) in [
        ("predictors", preds.clone()),
        ("trace", trace),
        ("report", run.join(REPORT_FILE)),
        ("quantized", quant),
    ] {
        outputs.push((name.into(), std::fs::read(path).map_err(|e| e.to_string())?));
    }
    Ok(outputs)
}

fn determinism() -> Check {
    let root = tempfile::tempdir().unwrap();
    let mut sessions = Vec::new();
    for threads in ["1", "4"] {
        for rep in 0..2 {
            let dir = root.path().join(format!("t{threads}_{rep}"));
            std::fs::create_dir_all(&dir).unwrap();
            sessions.push((threads, cli_session(&dir, threads)?));
        }
    }
    let (_, first) = &sessions[0];
    for (threads, s) in &sessions[1..] {
        for ((name, a), (_, b)) in first.iter().zip(s) {
            ensure!(a == b, "{name} differs with QDE_THREADS = {threads}");
        }
    }
    Ok(format!("4 sessions x {} artifacts byte-identical", first.len()))
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Check); 11] = [
        ("codec oracle equivalence", codec_oracle),
        ("int8 round-trip bounds", int8_bounds),
        ("hadamard suite", hadamard_suite),
        ("ols exactness", ols_exactness),
        ("tdc golden trace", tdc_golden),
        ("drift linearity", drift_linearity),
        ("purity guarantee", purity_guarantee),
        ("end-to-end transparency", transparency),
        ("ablation ordering", ablation_ordering),
        ("bit-width accounting", bit_accounting),
        ("determinism", determinism),
    ];
    let only: Option<usize> = std::env::var("QDE_ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {n:>2} {name} ({secs:.1} s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {n:>2} {name} ({secs:.1} s): {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
