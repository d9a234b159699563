use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HarnessError, Mode, RunConfig};
use crate::dsp::{self, BvpSignal, EvalMetrics, HrvMetrics};

/// Column names of the per-step CSV report, in order.
pub const REPORT_HEADER: [&str; 19] = [
    "step",
    "cycle",
    "instance",
    "gt_hr_bpm",
    "pre_hr_bpm",
    "post_hr_bpm",
    "l_stfc",
    "l_stti",
    "delta_bpm",
    "gate_open",
    "lambda1",
    "lambda2",
    "conflict",
    "g1",
    "g2",
    "dot",
    "updated",
    "delta_t",
    "flags",
];

/// One adaptation step. `lambda1`/`g1` refer to the STTI gradient and
/// `lambda2`/`g2` to the STFC gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtaRow {
    pub step: usize,
    pub cycle: usize,
    pub instance: usize,
    pub gt_hr_bpm: f64,
    pub pre_hr_bpm: f64,
    pub post_hr_bpm: f64,
    pub l_stfc: f64,
    pub l_stti: f64,
    pub delta_bpm: f64,
    pub gate_open: bool,
    pub lambda1: f64,
    pub lambda2: f64,
    pub conflict: bool,
    pub g1: f64,
    pub g2: f64,
    pub dot: f64,
    pub updated: bool,
    pub delta_t: usize,
    pub flags: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub seed: u64,
    pub steps: usize,
    pub pre: EvalMetrics,
    pub post: EvalMetrics,
    pub updates: usize,
    pub conflicts: usize,
    /// HRV of the stitched predictions of the last pass, when enough beats
    /// were found.
    pub hrv: Option<HrvMetrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TtaReport {
    pub config: RunConfig,
    pub seed: u64,
    pub rows: Vec<TtaRow>,
    pub summary: RunSummary,
}

fn nan_metrics() -> EvalMetrics {
    EvalMetrics {
        mae: f64::NAN,
        rmse: f64::NAN,
        pearson: None,
    }
}

/// Joins per-window predictions into one signal. Consecutive windows of
/// one stream (increasing `t0`) contribute only frames not yet covered; a
/// window that does not advance `t0` starts a new segment.
fn stitch(windows: &[(usize, Vec<f64>)]) -> Vec<f64> {
    let mut out = Vec::new();
    let mut prev: Option<(usize, usize)> = None;
    for (t0, samples) in windows {
        let end = t0 + samples.len();
        match prev {
            Some((p0, pend)) if *t0 > p0 => {
                let skip = pend.saturating_sub(*t0).min(samples.len());
                out.extend_from_slice(&samples[skip..]);
                prev = Some((*t0, end.max(pend)));
            }
            _ => {
                out.extend_from_slice(samples);
                prev = Some((*t0, end));
            }
        }
    }
    out
}

impl TtaReport {
    pub(crate) fn new(
        config: RunConfig,
        seed: u64,
        rows: Vec<TtaRow>,
        final_bvp: &[(usize, Vec<f64>)],
        frame_rate_hz: f64,
    ) -> Self {
        let gt: Vec<f64> = rows.iter().map(|r| r.gt_hr_bpm).collect();
        let pre: Vec<f64> = rows.iter().map(|r| r.pre_hr_bpm).collect();
        let post: Vec<f64> = rows.iter().map(|r| r.post_hr_bpm).collect();
        let stitched = BvpSignal::new(stitch(final_bvp), frame_rate_hz);
        let hrv = dsp::detect_beats(&stitched)
            .and_then(|b| dsp::hrv_metrics(&b, frame_rate_hz))
            .ok();
        let summary = RunSummary {
            mode: config.mode,
            seed,
            steps: rows.len(),
            pre: dsp::metrics(&pre, &gt).unwrap_or_else(|_| nan_metrics()),
            post: dsp::metrics(&post, &gt).unwrap_or_else(|_| nan_metrics()),
            updates: rows.iter().filter(|r| r.updated).count(),
            conflicts: rows.iter().filter(|r| r.conflict).count(),
            hrv,
        };
        Self {
            config,
            seed,
            rows,
            summary,
        }
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        if self.rows.is_empty() {
            w.write_record(REPORT_HEADER)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), HarnessError> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Reads the rows of a CSV report, checking the header.
pub fn read_report_rows(path: &Path) -> Result<Vec<TtaRow>, HarnessError> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != REPORT_HEADER {
        return Err(HarnessError::InvalidConfig(format!(
            "{} is not a step report (unexpected header)",
            path.display()
        )));
    }
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Trailing mean of `|post - gt|` over up to `window` steps ending at each row.
pub fn running_mae(rows: &[TtaRow], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let err: Vec<f64> = rows
        .iter()
        .map(|r| (r.post_hr_bpm - r.gt_hr_bpm).abs())
        .collect();
    let mut out = Vec::with_capacity(err.len());
    let mut sum = 0.0;
    for i in 0..err.len() {
        sum += err[i];
        if i >= window {
            sum -= err[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// Running MAE whose window is one full pass over the stream (the rows of
/// the first cycle). Only complete windows are returned, so entry `i`
/// covers every instance exactly once regardless of stream content.
pub fn pass_running_mae(rows: &[TtaRow]) -> Vec<f64> {
    let window = rows.iter().filter(|r| r.cycle == 0).count();
    if window == 0 {
        return Vec::new();
    }
    running_mae(rows, window).split_off(window - 1)
}

/// Aggregate over the seeds of one run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub label: String,
    pub mode: Mode,
    pub seeds: Vec<u64>,
    pub mae_pre_mean: f64,
    pub mae_post_mean: f64,
    pub mae_post_std: f64,
    pub rmse_post_mean: f64,
    pub rmse_post_std: f64,
    /// Over the seeds where Pearson was defined.
    pub pearson_post_mean: Option<f64>,
    pub pearson_post_std: Option<f64>,
}

/// Mean and sample standard deviation (zero for a single value).
pub(crate) fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl ModeSummary {
    pub fn from_runs(label: String, mode: Mode, runs: &[&RunSummary]) -> Self {
        let pick = |f: &dyn Fn(&RunSummary) -> f64| -> Vec<f64> { runs.iter().map(|r| f(r)).collect() };
        let (mae_pre_mean, _) = mean_std(&pick(&|r| r.pre.mae));
        let (mae_post_mean, mae_post_std) = mean_std(&pick(&|r| r.post.mae));
        let (rmse_post_mean, rmse_post_std) = mean_std(&pick(&|r| r.post.rmse));
        let pearsons: Vec<f64> = runs.iter().filter_map(|r| r.post.pearson).collect();
        let (pm, ps) = if pearsons.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_std(&pearsons);
            (Some(m), Some(s))
        };
        Self {
            label,
            mode,
            seeds: runs.iter().map(|r| r.seed).collect(),
            mae_pre_mean,
            mae_post_mean,
            mae_post_std,
            rmse_post_mean,
            rmse_post_std,
            pearson_post_mean: pm,
            pearson_post_std: ps,
        }
    }
}
