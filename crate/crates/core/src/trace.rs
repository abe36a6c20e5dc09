//! Tab-separated run traces and the summary derived from them.
//!
//! A trace has one block row per (timestep, block) and, on computed steps,
//! one layer row per routed projection. Block rows carry the block's total
//! activation elements and MACs so that skipped work can be accounted for
//! from the trace alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::dmpq::Reason;
use crate::error::{Error, Result};
use crate::layer::{LayerId, Precision};
use crate::tdc::CacheDecision;

pub const TRACE_HEADER: [&str; 14] = [
    "timestep",
    "block",
    "layer",
    "decision",
    "format",
    "gamma_prev",
    "e_rel_pred",
    "e_acc",
    "e_tp",
    "gap",
    "r_outlier",
    "reason",
    "elems",
    "macs",
];

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub timestep: usize,
    pub block: usize,
    /// `None` on block rows.
    pub layer: Option<LayerId>,
    pub decision: CacheDecision,
    pub format: Option<Precision>,
    pub gamma_prev: Option<f64>,
    pub e_rel_pred: Option<f64>,
    pub e_acc: Option<f64>,
    pub e_tp: Option<f64>,
    pub gap: Option<usize>,
    pub r_outlier: Option<f64>,
    pub reason: Option<Reason>,
    pub elems: u64,
    pub macs: u64,
}

impl TraceRecord {
    pub fn block_row(timestep: usize, block: usize, decision: CacheDecision, elems: u64, macs: u64) -> Self {
        Self {
            timestep,
            block,
            layer: None,
            decision,
            format: None,
            gamma_prev: None,
            e_rel_pred: None,
            e_acc: None,
            e_tp: None,
            gap: None,
            r_outlier: None,
            reason: None,
            elems,
            macs,
        }
    }

    pub fn is_block_row(&self) -> bool {
        self.layer.is_none()
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_else(|| "-".to_string())
}

fn opt_f(v: Option<f64>) -> String {
    v.map(|v| format!("{v:e}")).unwrap_or_else(|| "-".to_string())
}

pub fn render_trace(records: &[TraceRecord]) -> String {
    let mut s = TRACE_HEADER.join("\t");
    s.push('\n');
    for r in records {
        let fields = [
            r.timestep.to_string(),
            r.block.to_string(),
            opt(r.layer),
            r.decision.to_string(),
            opt(r.format),
            opt_f(r.gamma_prev),
            opt_f(r.e_rel_pred),
            opt_f(r.e_acc),
            opt_f(r.e_tp),
            opt(r.gap),
            opt_f(r.r_outlier),
            opt(r.reason),
            r.elems.to_string(),
            r.macs.to_string(),
        ];
        s.push_str(&fields.join("\t"));
        s.push('\n');
    }
    s
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.split('\t').eq(TRACE_HEADER) => {}
        Some(_) => {
            return Err(Error::TraceParse {
                line: 1,
                msg: "unexpected header".into(),
            })
        }
        None => return Err(Error::NoRecords),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::TraceParse { line: i + 1, msg };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != TRACE_HEADER.len() {
            return Err(err(format!("expected {} fields, got {}", TRACE_HEADER.len(), f.len())));
        }
        fn parse<T: std::str::FromStr>(s: &str, name: &str) -> std::result::Result<T, String> {
            s.parse().map_err(|_| format!("bad {name} '{s}'"))
        }
        fn parse_opt<T: std::str::FromStr>(s: &str, name: &str) -> std::result::Result<Option<T>, String> {
            if s == "-" {
                Ok(None)
            } else {
                parse(s, name).map(Some)
            }
        }
        let rec = (|| -> std::result::Result<TraceRecord, String> {
            Ok(TraceRecord {
                timestep: parse(f[0], "timestep")?,
                block: parse(f[1], "block")?,
                layer: parse_opt(f[2], "layer")?,
                decision: parse(f[3], "decision")?,
                format: parse_opt(f[4], "format")?,
                gamma_prev: parse_opt(f[5], "gamma_prev")?,
                e_rel_pred: parse_opt(f[6], "e_rel_pred")?,
                e_acc: parse_opt(f[7], "e_acc")?,
                e_tp: parse_opt(f[8], "e_tp")?,
                gap: parse_opt(f[9], "gap")?,
                r_outlier: parse_opt(f[10], "r_outlier")?,
                reason: parse_opt(f[11], "reason")?,
                elems: parse(f[12], "elems")?,
                macs: parse(f[13], "macs")?,
            })
        })()
        .map_err(err)?;
        if rec.layer.is_some() && rec.format.is_none() {
            return Err(err("layer row without format".into()));
        }
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Error::NoRecords);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockSkips {
    pub skipped: usize,
    pub longest_run: usize,
}

/// Aggregates that are fully determined by a trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceSummary {
    pub block_steps: usize,
    pub skipped_steps: usize,
    pub skip_fraction: f64,
    pub avg_bits: f64,
    pub format_counts: BTreeMap<Precision, usize>,
    pub reason_counts: BTreeMap<&'static str, usize>,
    pub per_block: BTreeMap<usize, BlockSkips>,
    pub full_cost: f64,
    pub modeled_cost: f64,
    pub cost_ratio: f64,
}

impl TraceSummary {
    /// Average bits are `Σ bits·elems / (Σ layer elems + Σ skipped elems)`,
    /// in integer arithmetic up to the final division.
    pub fn from_records(records: &[TraceRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::NoRecords);
        }
        let (mut block_steps, mut skipped) = (0usize, 0usize);
        let (mut bit_elems, mut elems) = (0u128, 0u128);
        let (mut full_macs, mut modeled) = (0u128, 0.0f64);
        let mut format_counts: BTreeMap<Precision, usize> = Precision::ALL.iter().map(|&p| (p, 0)).collect();
        let mut reason_counts: BTreeMap<&'static str, usize> = BTreeMap::new();
        let mut per_block: BTreeMap<usize, BlockSkips> = BTreeMap::new();
        let mut run: BTreeMap<usize, usize> = BTreeMap::new();

        let mut sorted: Vec<&TraceRecord> = records.iter().filter(|r| r.is_block_row()).collect();
        sorted.sort_by_key(|r| (r.block, r.timestep));
        for r in sorted {
            let entry = per_block.entry(r.block).or_insert(BlockSkips {
                skipped: 0,
                longest_run: 0,
            });
            let cur = run.entry(r.block).or_insert(0);
            if r.decision == CacheDecision::Skip {
                entry.skipped += 1;
                *cur += 1;
                entry.longest_run = entry.longest_run.max(*cur);
            } else {
                *cur = 0;
            }
        }
        for r in records {
            match r.layer {
                None => {
                    block_steps += 1;
                    full_macs += r.macs as u128;
                    if r.decision == CacheDecision::Skip {
                        skipped += 1;
                        elems += r.elems as u128;
                    }
                }
                Some(_) => {
                    let p = r.format.expect("validated at parse/build time");
                    bit_elems += p.bits() as u128 * r.elems as u128;
                    elems += r.elems as u128;
                    modeled += p.cost_weight() * r.macs as f64;
                    *format_counts.get_mut(&p).expect("all formats seeded") += 1;
                    if let Some(reason) = r.reason {
                        *reason_counts.entry(reason.as_str()).or_insert(0) += 1;
                    }
                }
            }
        }
        let full_cost = full_macs as f64;
        Ok(Self {
            block_steps,
            skipped_steps: skipped,
            skip_fraction: if block_steps == 0 { 0.0 } else { skipped as f64 / block_steps as f64 },
            avg_bits: if elems == 0 { 0.0 } else { bit_elems as f64 / elems as f64 },
            format_counts,
            reason_counts,
            per_block,
            full_cost,
            modeled_cost: modeled,
            cost_ratio: if modeled == 0.0 { f64::INFINITY } else { full_cost / modeled },
        })
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        writeln!(s, "block_steps = {}", self.block_steps).unwrap();
        writeln!(s, "skipped_steps = {}", self.skipped_steps).unwrap();
        writeln!(s, "skip_fraction = {}", self.skip_fraction).unwrap();
        writeln!(s, "avg_activation_bits = {}", self.avg_bits).unwrap();
        writeln!(s, "full_cost_macs = {}", self.full_cost).unwrap();
        writeln!(s, "modeled_cost_macs = {}", self.modeled_cost).unwrap();
        writeln!(s, "cost_ratio = {}", self.cost_ratio).unwrap();
        for (p, n) in &self.format_counts {
            writeln!(s, "layer_steps.{p} = {n}").unwrap();
        }
        for (r, n) in &self.reason_counts {
            writeln!(s, "reason.{r} = {n}").unwrap();
        }
        for (b, k) in &self.per_block {
            writeln!(s, "block.{b}.skipped = {}", k.skipped).unwrap();
            writeln!(s, "block.{b}.longest_skip_run = {}", k.longest_run).unwrap();
        }
        s
    }
}
