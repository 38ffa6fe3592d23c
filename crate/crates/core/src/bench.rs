//! Sequence-length scaling benchmark, attention-std diagnostic, and CSV
//! output for benchmark records, training metrics and diagnostics.

use std::io::{Read, Write};
use std::time::Instant;

use crate::attention::{attention_forward, flop_count, AttentionConfig, AttentionKind, AttentionParams};
use crate::model::Model;
use crate::optim::MetricRow;
use crate::tasks::Batch;
use crate::tensor::{alloc_stats, no_grad, reset_alloc_peak, Element, Rng, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub kind: AttentionKind,
    pub len: usize,
    pub n_heads: usize,
    /// Head width.
    pub d: usize,
    pub repeats: usize,
    /// Median forward time; `None` when timing is off or the point failed.
    pub wall_ms: Option<f64>,
    /// Allocation high-water mark of one forward pass above the baseline.
    pub peak_bytes: usize,
    /// Analytic operation count of the attention products.
    pub flops: u64,
    pub status: PointStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointStatus {
    Ok,
    /// Estimated to exceed the memory budget; not run.
    OverBudget,
}

impl PointStatus {
    fn name(self) -> &'static str {
        match self {
            PointStatus::Ok => "ok",
            PointStatus::OverBudget => "over_budget",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "ok" => Ok(PointStatus::Ok),
            "over_budget" => Ok(PointStatus::OverBudget),
            _ => Err(Error::Parse(format!("unknown status `{s}`"))),
        }
    }
}

pub const BENCH_COLUMNS: [&str; 9] = ["kind", "L", "n_heads", "d", "repeats", "wall_ms", "peak_bytes", "flops", "status"];
pub const METRIC_COLUMNS: [&str; 6] = ["step", "split", "loss", "accuracy", "lr", "wall_ms"];

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub kinds: Vec<AttentionKind>,
    /// Ascending, at least three points.
    pub lengths: Vec<usize>,
    pub d_embed: usize,
    pub n_heads: usize,
    pub repeats: usize,
    pub timing: bool,
    pub memory_budget_bytes: usize,
    pub seed: u64,
}

impl BenchConfig {
    pub fn new(kinds: Vec<AttentionKind>, lengths: Vec<usize>, seed: u64) -> Self {
        BenchConfig {
            kinds,
            lengths,
            d_embed: 64,
            n_heads: 4,
            repeats: 3,
            timing: true,
            memory_budget_bytes: 2 << 30,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.lengths.len() < 3 || self.lengths.windows(2).any(|w| w[0] >= w[1]) || self.lengths[0] == 0 {
            return Err(Error::Config("length sweep must be strictly ascending with at least 3 points".into()));
        }
        if self.repeats < 3 {
            return Err(Error::Config("at least 3 repeats are needed for a median".into()));
        }
        if self.kinds.is_empty() {
            return Err(Error::Config("no attention kinds to benchmark".into()));
        }
        if self.n_heads == 0 || self.d_embed % self.n_heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide width {}", self.n_heads, self.d_embed)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub records: Vec<BenchRecord>,
    /// Log-log slope of median time against L per kind, when at least two
    /// timed points exist.
    pub slopes: Vec<(AttentionKind, Option<f64>)>,
}

/// Rough upper bound of one forward pass: inputs, projections and outputs,
/// plus two live L×L matrices per softmax head.
fn estimate_bytes(kind: AttentionKind, len: usize, d_embed: usize, elem: usize) -> usize {
    let linear = 12 * len * d_embed * elem;
    match kind {
        AttentionKind::Simple => linear,
        AttentionKind::Softmax => linear + 2 * len * len * elem,
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Forward-only timing of one attention layer (f32, output linear on) per
/// kind and length. Each point: one discarded warmup pass, `repeats` timed
/// passes, and one pass measured for peak allocation.
pub fn bench_scaling(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let d = cfg.d_embed / cfg.n_heads;
    let mut records = Vec::new();
    for (ki, &kind) in cfg.kinds.iter().enumerate() {
        let mut rng = root.split(ki as u64);
        let params = AttentionParams::<f32>::init(cfg.d_embed, cfg.d_embed, true, &mut rng);
        let acfg = AttentionConfig::new(kind, cfg.n_heads);
        for &len in &cfg.lengths {
            let flops = flop_count(kind, len, d, cfg.n_heads).total();
            let mut record = BenchRecord {
                kind,
                len,
                n_heads: cfg.n_heads,
                d,
                repeats: cfg.repeats,
                wall_ms: None,
                peak_bytes: 0,
                flops,
                status: PointStatus::Ok,
            };
            if estimate_bytes(kind, len, cfg.d_embed, 4) > cfg.memory_budget_bytes {
                record.status = PointStatus::OverBudget;
                records.push(record);
                continue;
            }
            let x: Tensor<f32> = Tensor::from_f64(
                &(0..len * cfg.d_embed).map(|_| rng.normal()).collect::<Vec<_>>(),
                &[len, cfg.d_embed],
            )?;
            no_grad(|| -> Result<()> {
                let run = || attention_forward(&x, &params, &acfg, None);
                reset_alloc_peak();
                let base = alloc_stats().current_bytes;
                drop(run()?);
                record.peak_bytes = alloc_stats().peak_bytes - base;
                if cfg.timing {
                    let mut times = Vec::with_capacity(cfg.repeats);
                    for _ in 0..cfg.repeats {
                        let t = Instant::now();
                        drop(run()?);
                        times.push(t.elapsed().as_secs_f64() * 1e3);
                    }
                    record.wall_ms = Some(median(times).max(1e-6));
                }
                Ok(())
            })?;
            records.push(record);
        }
    }
    let slopes = cfg
        .kinds
        .iter()
        .map(|&k| {
            let (xs, ys): (Vec<f64>, Vec<f64>) = records
                .iter()
                .filter(|r| r.kind == k)
                .filter_map(|r| r.wall_ms.map(|w| (r.len as f64, w)))
                .unzip();
            (k, loglog_slope(&xs, &ys))
        })
        .collect();
    Ok(BenchReport { records, slopes })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Per-block standard deviation of the attention product, softmax omitted.
pub fn attention_std_diagnostic<T: Element>(model: &Model<T>, probe: &Batch) -> Result<Vec<f64>> {
    model.attention_std(probe)
}

/// Nine significant digits, `%.9g` style.
pub fn fmt_g9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let m = if mantissa.contains('.') {
            mantissa.trim_end_matches('0').trim_end_matches('.')
        } else {
            mantissa
        };
        format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

pub fn write_bench_csv(records: &[BenchRecord], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(BENCH_COLUMNS)?;
    for r in records {
        out.write_record([
            r.kind.name().to_string(),
            r.len.to_string(),
            r.n_heads.to_string(),
            r.d.to_string(),
            r.repeats.to_string(),
            r.wall_ms.map(fmt_g9).unwrap_or_default(),
            r.peak_bytes.to_string(),
            r.flops.to_string(),
            r.status.name().to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

fn field<'a>(rec: &'a csv::StringRecord, i: usize) -> Result<&'a str> {
    rec.get(i).ok_or_else(|| Error::Parse(format!("missing column {i}")))
}

fn num<N: std::str::FromStr>(rec: &csv::StringRecord, i: usize) -> Result<N> {
    let s = field(rec, i)?;
    s.parse().map_err(|_| Error::Parse(format!("bad number `{s}` in column {i}")))
}

fn check_header(r: &mut csv::Reader<impl Read>, want: &[&str]) -> Result<()> {
    let header = r.headers()?;
    if header.iter().ne(want.iter().copied()) {
        return Err(Error::Parse(format!("unexpected header {header:?}")));
    }
    Ok(())
}

pub fn read_bench_csv(r: impl Read) -> Result<Vec<BenchRecord>> {
    let mut reader = csv::Reader::from_reader(r);
    check_header(&mut reader, &BENCH_COLUMNS)?;
    reader
        .records()
        .map(|rec| {
            let rec = rec?;
            let wall = field(&rec, 5)?;
            Ok(BenchRecord {
                kind: AttentionKind::parse(field(&rec, 0)?)?,
                len: num(&rec, 1)?,
                n_heads: num(&rec, 2)?,
                d: num(&rec, 3)?,
                repeats: num(&rec, 4)?,
                wall_ms: if wall.is_empty() { None } else { Some(num(&rec, 5)?) },
                peak_bytes: num(&rec, 6)?,
                flops: num(&rec, 7)?,
                status: PointStatus::parse(field(&rec, 8)?)?,
            })
        })
        .collect()
}

pub fn write_metrics_csv(rows: &[MetricRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(METRIC_COLUMNS)?;
    for r in rows {
        out.write_record([
            r.step.to_string(),
            r.split.clone(),
            fmt_g9(r.loss),
            fmt_g9(r.accuracy),
            fmt_g9(r.lr),
            fmt_g9(r.wall_ms),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics_csv(r: impl Read) -> Result<Vec<MetricRow>> {
    let mut reader = csv::Reader::from_reader(r);
    check_header(&mut reader, &METRIC_COLUMNS)?;
    reader
        .records()
        .map(|rec| {
            let rec = rec?;
            Ok(MetricRow {
                step: num(&rec, 0)?,
                split: field(&rec, 1)?.to_string(),
                loss: num(&rec, 2)?,
                accuracy: num(&rec, 3)?,
                lr: num(&rec, 4)?,
                wall_ms: num(&rec, 5)?,
            })
        })
        .collect()
}

/// One row per (label, block): `label,block,std`.
pub fn write_std_csv(rows: &[(String, Vec<f64>)], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["model", "block", "std"])?;
    for (label, stds) in rows {
        for (b, s) in stds.iter().enumerate() {
            out.write_record([label.clone(), b.to_string(), fmt_g9(*s)])?;
        }
    }
    out.flush()?;
    Ok(())
}
