//! Evaluation: MAE, median/mean translation and rotation errors, per-sample
//! processing time over batches of ten, improvement tables against a declared
//! baseline, and CSV/markdown report rendering.

use std::fmt;
use std::time::Instant;

use crate::geometry::{rotation_error_deg, translation_error_m, Pose};
use crate::nn::{Mode, NnError, PoseNetModel, TensorBatch};

#[derive(Debug)]
pub enum EvalError {
    LengthMismatch { left: usize, right: usize },
    Empty,
    InsufficientSamples { got: usize, need: usize },
    ZeroBaseline,
    Nn(NnError),
    ParseReport { line: usize, reason: String },
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::LengthMismatch { left, right } => {
                write!(f, "length mismatch: {left} vs {right}")
            }
            EvalError::Empty => write!(f, "empty input"),
            EvalError::InsufficientSamples { got, need } => {
                write!(f, "insufficient samples: got {got}, need {need}")
            }
            EvalError::ZeroBaseline => write!(f, "baseline medians must be positive"),
            EvalError::Nn(e) => e.fmt(f),
            EvalError::ParseReport { line, reason } => {
                write!(f, "report parse error at line {line}: {reason}")
            }
        }
    }
}

impl std::error::Error for EvalError {}

impl From<NnError> for EvalError {
    fn from(e: NnError) -> Self {
        EvalError::Nn(e)
    }
}

/// Mean absolute error `(1/n) * sum |pred_i - gt_i|`.
pub fn mae(preds: &[f64], gts: &[f64]) -> Result<f64, EvalError> {
    if preds.len() != gts.len() {
        return Err(EvalError::LengthMismatch { left: preds.len(), right: gts.len() });
    }
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    let sum: f64 = preds.iter().zip(gts.iter()).map(|(p, g)| (p - g).abs()).sum();
    Ok(sum / preds.len() as f64)
}

/// Median under the lower-of-two-central-values rule: after sorting,
/// element `(n - 1) / 2`.
pub fn median_lower(values: &[f64]) -> Result<f64, EvalError> {
    if values.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite error value"));
    Ok(sorted[(sorted.len() - 1) / 2])
}

/// Aggregate pose errors of aligned prediction/ground-truth lists.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseErrorStats {
    pub median_et: f64,
    pub mean_et: f64,
    pub median_er: f64,
    pub mean_er: f64,
}

/// Per-sample translation error (Euclidean meters) and rotation error
/// (geodesic degrees), reduced to medians and means.
pub fn pose_error_stats(preds: &[Pose], gts: &[Pose]) -> Result<PoseErrorStats, EvalError> {
    if preds.len() != gts.len() {
        return Err(EvalError::LengthMismatch { left: preds.len(), right: gts.len() });
    }
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    let et: Vec<f64> = preds
        .iter()
        .zip(gts.iter())
        .map(|(p, g)| translation_error_m(&p.translation, &g.translation))
        .collect();
    let er: Vec<f64> = preds
        .iter()
        .zip(gts.iter())
        .map(|(p, g)| rotation_error_deg(&p.quaternion, &g.quaternion))
        .collect();
    let n = preds.len() as f64;
    Ok(PoseErrorStats {
        median_et: median_lower(&et)?,
        mean_et: et.iter().sum::<f64>() / n,
        median_er: median_lower(&er)?,
        mean_er: er.iter().sum::<f64>() / n,
    })
}

/// Anything that predicts a pose batch; implemented by single models and by
/// fusion pipelines so the timing harness treats them uniformly.
pub trait BatchPredictor {
    fn predict_batch(&self, inputs: &TensorBatch) -> Result<TensorBatch, NnError>;
}

impl BatchPredictor for PoseNetModel {
    fn predict_batch(&self, inputs: &TensorBatch) -> Result<TensorBatch, NnError> {
        self.forward(inputs, Mode::Eval, None)
    }
}

pub const MAPST_BATCH: usize = 10;

/// Mean average per-sample processing time, seconds.
///
/// Runs the predictor over full batches of ten, repeats the sweep
/// `max(reps, 3)` times, discards the slowest repetition, and averages the
/// rest. Requires at least ten samples.
pub fn measure_mapst<P: BatchPredictor + ?Sized>(
    predictor: &P,
    samples: &TensorBatch,
    reps: usize,
) -> Result<f64, EvalError> {
    let n = samples.batch_size();
    if n < MAPST_BATCH {
        return Err(EvalError::InsufficientSamples { got: n, need: MAPST_BATCH });
    }
    let n_batches = n / MAPST_BATCH;
    let processed = n_batches * MAPST_BATCH;
    let batches: Vec<TensorBatch> = (0..n_batches)
        .map(|b| {
            let idx: Vec<usize> = (b * MAPST_BATCH..(b + 1) * MAPST_BATCH).collect();
            samples.gather(&idx)
        })
        .collect();
    let reps = reps.max(3);
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        for batch in &batches {
            let out = predictor.predict_batch(batch)?;
            std::hint::black_box(&out);
        }
        times.push(start.elapsed().as_secs_f64());
    }
    // Drop the slowest repetition.
    let slowest = times
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    times.remove(slowest);
    let total: f64 = times.iter().sum();
    Ok(total / (times.len() as f64 * processed as f64))
}

/// One report row mirroring the benchmark table layout.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub model: String,
    pub median_et: f64,
    pub mean_et: f64,
    pub median_er: f64,
    pub mean_er: f64,
    /// Mean average per-sample processing time, seconds; absent when timing
    /// was not measured.
    pub mapst: Option<f64>,
}

impl MetricsReport {
    pub fn from_stats(model: impl Into<String>, stats: &PoseErrorStats, mapst: Option<f64>) -> Self {
        Self {
            model: model.into(),
            median_et: stats.median_et,
            mean_et: stats.mean_et,
            median_er: stats.median_er,
            mean_er: stats.mean_er,
            mapst,
        }
    }
}

/// Improvement of one model against the declared baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct ImprovementRow {
    pub model: String,
    /// Percent drop of the median translation error, rounded to integer.
    pub et_improvement_pct: i64,
    /// Percent drop of the median rotation error, rounded to integer.
    pub er_improvement_pct: i64,
    /// Extra processing time versus the baseline, milliseconds.
    pub timing_overhead_ms: Option<f64>,
}

/// Percent improvement of medians relative to the baseline:
/// `round(100 * (baseline - model) / baseline)`, with the timing overhead in
/// milliseconds. Requires strictly positive baseline medians.
pub fn improvement_table(
    baseline: &MetricsReport,
    others: &[&MetricsReport],
) -> Result<Vec<ImprovementRow>, EvalError> {
    if baseline.median_et <= 0.0 || baseline.median_er <= 0.0 {
        return Err(EvalError::ZeroBaseline);
    }
    let pct = |base: f64, model: f64| (100.0 * (base - model) / base).round() as i64;
    Ok(others
        .iter()
        .map(|m| ImprovementRow {
            model: m.model.clone(),
            et_improvement_pct: pct(baseline.median_et, m.median_et),
            er_improvement_pct: pct(baseline.median_er, m.median_er),
            timing_overhead_ms: match (m.mapst, baseline.mapst) {
                (Some(a), Some(b)) => Some((a - b) * 1000.0),
                _ => None,
            },
        })
        .collect())
}

/// Output format of [`render_report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Some(ReportFormat::Csv),
            "markdown" | "md" => Some(ReportFormat::Markdown),
            _ => None,
        }
    }
}

pub const REPORT_CSV_HEADER: &str = "model,median_et_m,mean_et_m,median_er_deg,mean_er_deg,mapst_s";

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.3}"),
        None => "-".to_string(),
    }
}

/// Renders rows with fixed 3-decimal formatting and a stable column order.
pub fn render_report(reports: &[MetricsReport], format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => {
            let mut out = String::from(REPORT_CSV_HEADER);
            out.push('\n');
            for r in reports {
                out.push_str(&format!(
                    "{},{:.3},{:.3},{:.3},{:.3},{}\n",
                    r.model,
                    r.median_et,
                    r.mean_et,
                    r.median_er,
                    r.mean_er,
                    fmt_opt(r.mapst)
                ));
            }
            out
        }
        ReportFormat::Markdown => {
            let mut out = String::new();
            out.push_str(
                "| Model Name | Median e_t (m) | Mean e_t (m) | Median e_r (deg) | Mean e_r (deg) | MAPST (s) |\n",
            );
            out.push_str("|---|---|---|---|---|---|\n");
            for r in reports {
                out.push_str(&format!(
                    "| {} | {:.3} | {:.3} | {:.3} | {:.3} | {} |\n",
                    r.model, r.median_et, r.mean_et, r.median_er, r.mean_er, fmt_opt(r.mapst)
                ));
            }
            out
        }
    }
}

/// Renders an improvement table.
pub fn render_improvement(rows: &[ImprovementRow], format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => {
            let mut out = String::from("model,et_improvement_pct,er_improvement_pct,timing_overhead_ms\n");
            for r in rows {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    r.model,
                    r.et_improvement_pct,
                    r.er_improvement_pct,
                    fmt_opt(r.timing_overhead_ms)
                ));
            }
            out
        }
        ReportFormat::Markdown => {
            let mut out = String::new();
            out.push_str("| Model Name | e_t (%) | e_r (%) | Timing Overhead (ms) |\n");
            out.push_str("|---|---|---|---|\n");
            for r in rows {
                out.push_str(&format!(
                    "| {} | {} | {} | {} |\n",
                    r.model,
                    r.et_improvement_pct,
                    r.er_improvement_pct,
                    fmt_opt(r.timing_overhead_ms)
                ));
            }
            out
        }
    }
}

/// Parses the CSV emitted by [`render_report`]; `render(parse(render(x)))`
/// is a fixpoint at the printed precision.
pub fn parse_report(csv: &str) -> Result<Vec<MetricsReport>, EvalError> {
    let mut lines = csv.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == REPORT_CSV_HEADER => {}
        Some((_, other)) => {
            return Err(EvalError::ParseReport {
                line: 1,
                reason: format!("unexpected header `{other}`"),
            })
        }
        None => return Err(EvalError::Empty),
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(EvalError::ParseReport {
                line: idx + 1,
                reason: format!("expected 6 fields, got {}", fields.len()),
            });
        }
        let num = |s: &str| -> Result<f64, EvalError> {
            s.parse().map_err(|_| EvalError::ParseReport {
                line: idx + 1,
                reason: format!("invalid number `{s}`"),
            })
        };
        out.push(MetricsReport {
            model: fields[0].to_string(),
            median_et: num(fields[1])?,
            mean_et: num(fields[2])?,
            median_er: num(fields[3])?,
            mean_er: num(fields[4])?,
            mapst: if fields[5] == "-" { None } else { Some(num(fields[5])?) },
        });
    }
    Ok(out)
}
