//! Command implementations behind the `qde` binary.
//!
//! Each command returns the text destined for stdout; diagnostics go to
//! stderr only when `verbose` is set. Errors carry their exit status via
//! [`Error::exit_code`].

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::config::Config;
use crate::dmpq::PredictorSet;
use crate::engine::QuantModel;
use crate::error::{Error, Result};
use crate::metrics::rel_l2;
use crate::model::ToyModel;
use crate::pipeline::{end_to_end_error, run_calibration, run_quantized, run_reference};
use crate::qdt::{read_tensor, write_atomic, write_quantized, AnyTensor};
use crate::quant::{quantize, QuantFormat, QuantizedTensor};
use crate::tensor::Element;
use crate::trace::{parse_trace, render_trace, TraceSummary};

pub const REPORT_FILE: &str = "report.txt";
pub const TRACE_FILE: &str = "trace.tsv";

#[derive(Clone, Copy, Debug, Default)]
pub struct Options {
    pub seed: Option<u64>,
    pub verbose: bool,
}

fn diag(opts: &Options, msg: impl FnOnce() -> String) {
    if opts.verbose {
        eprintln!("{}", msg());
    }
}

fn load_config(path: &Path, opts: &Options) -> Result<Config> {
    let mut cfg = Config::load(path)?;
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:e}")).unwrap_or_else(|| "-".into())
}

pub fn cmd_calibrate(config: &Path, out: &Path, opts: &Options) -> Result<String> {
    let cfg = load_config(config, opts)?;
    if cfg.n_timesteps < 2 {
        return Err(Error::Config("calibration requires ≥ 2 timesteps".into()));
    }
    let start = Instant::now();
    let model = ToyModel::<f32>::new(cfg.model_spec())?;
    let qmodel = QuantModel::new(&model, cfg.quant_settings())?;
    let cal = run_calibration(
        &model,
        &qmodel,
        &cfg.schedule(),
        &cfg.calib_seeds,
        cfg.probe(),
        cfg.tau_rel,
        cfg.eps_slope,
    )?;
    cal.predictors.write(out)?;
    diag(opts, || {
        format!(
            "calibrated {} layers from {} pairs in {:.2?}",
            cal.predictors.len(),
            cal.pairs.len(),
            start.elapsed()
        )
    });
    let mut s = String::from("block layer alpha beta tau_gamma residual_rms\n");
    for p in cal.predictors.iter() {
        writeln!(
            s,
            "{} {} {:e} {:e} {} {:e}",
            p.block,
            p.layer,
            p.alpha,
            p.beta,
            fmt_opt(p.tau_gamma),
            p.residual_rms
        )
        .unwrap();
    }
    Ok(s)
}

/// Structured report; the `[trace_summary]` section is exactly what
/// [`cmd_report`] prints for the accompanying trace.
pub fn render_report(cfg: &Config, rel_l2: f64, summary: &TraceSummary) -> String {
    format!(
        "[config]\n{}\n[run]\nrel_l2 = {rel_l2}\n\n[trace_summary]\n{}",
        cfg.render(),
        summary.render()
    )
}

pub fn summary_line(rel_l2: f64, s: &TraceSummary) -> String {
    format!(
        "rel_l2={rel_l2:e} skip_fraction={} avg_bits={} cost_ratio={}\n",
        s.skip_fraction, s.avg_bits, s.cost_ratio
    )
}

pub fn cmd_run(config: &Path, predictors: &Path, out: &Path, opts: &Options) -> Result<String> {
    let cfg = load_config(config, opts)?;
    let preds = PredictorSet::read(predictors).map_err(|e| match e {
        Error::Io(io) => Error::PredictorFile(format!("{}: {io}", predictors.display())),
        other => other,
    })?;
    preds.ensure_covers(cfg.n_blocks)?;
    let start = Instant::now();
    let model = ToyModel::<f32>::new(cfg.model_spec())?;
    let qmodel = QuantModel::new(&model, cfg.quant_settings())?;
    let schedule = cfg.schedule();
    let reference = run_reference(&model, &schedule, cfg.seed)?;
    let run = run_quantized(&model, &qmodel, &schedule, cfg.seed, &preds, &cfg.run_settings())?;
    let err = end_to_end_error(reference.final_state(), run.final_state(), cfg.text_len)?;
    let summary = run.summary()?;
    diag(opts, || format!("run finished in {:.2?}", start.elapsed()));

    std::fs::create_dir_all(out)?;
    write_atomic(&out.join(TRACE_FILE), render_trace(&run.trace).as_bytes())?;
    write_atomic(&out.join(REPORT_FILE), render_report(&cfg, err, &summary).as_bytes())?;
    if cfg.dump_reference {
        reference.dump(&out.join("reference"))?;
    }
    Ok(summary_line(err, &summary))
}

pub fn cmd_report(trace: &Path, _opts: &Options) -> Result<String> {
    let text = std::fs::read_to_string(trace)?;
    let records = parse_trace(&text)?;
    Ok(TraceSummary::from_records(&records)?.render())
}

fn quantize_stats<E: Element>(
    x: &crate::tensor::Tensor<E>,
    format: QuantFormat,
) -> Result<(QuantizedTensor, String)> {
    let q = quantize(x, format);
    let back = q.dequantize::<E>()?;
    let err = match rel_l2(x, &back) {
        Ok(e) => e,
        Err(Error::ZeroNorm(_)) => 0.0,
        Err(e) => return Err(e),
    };
    let mut s = format!("format = {format}\nelements = {}\nrel_l2 = {err:e}\n", x.numel());
    if let Some(scales) = q.nvfp4_effective_scales() {
        let n = scales.len();
        let min = scales.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = scales.iter().cloned().fold(0.0f64, f64::max);
        let mean = scales.iter().sum::<f64>() / n as f64;
        write!(
            s,
            "blocks = {n}\nscale_min = {min:e}\nscale_max = {max:e}\nscale_mean = {mean:e}\n"
        )
        .unwrap();
    }
    Ok((q, s))
}

pub fn cmd_quantize_tensor(input: &Path, format: &str, out: &Path, _opts: &Options) -> Result<String> {
    let format: QuantFormat = format.parse()?;
    let (q, s) = match read_tensor(input)? {
        AnyTensor::F32(t) => quantize_stats(&t, format)?,
        AnyTensor::F64(t) => quantize_stats(&t, format)?,
    };
    write_quantized(out, &q)?;
    Ok(s)
}
