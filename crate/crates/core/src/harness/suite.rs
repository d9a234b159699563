use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::ModeSummary;
use super::{run_tta, HarnessError, RunConfig, TtaReport};
use crate::model::BvpNetMini;
use crate::synth::LabeledInstance;

/// A run that failed; the rest of the suite still completes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRunError {
    pub label: String,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    /// `(label, report)` in config-major, seed-minor order.
    pub reports: Vec<(String, TtaReport)>,
    pub failures: Vec<SuiteRunError>,
    pub summaries: Vec<ModeSummary>,
}

/// Report labels: the mode name, disambiguated by config index when two
/// configs share a mode.
fn labels(configs: &[RunConfig]) -> Vec<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for c in configs {
        *counts.entry(c.mode.as_str()).or_default() += 1;
    }
    configs
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if counts[c.mode.as_str()] > 1 {
                format!("{}-{i}", c.mode)
            } else {
                c.mode.to_string()
            }
        })
        .collect()
}

/// Runs every config with every seed on the same pretrained model and
/// target stream. Runs execute in parallel; outputs are ordered.
pub fn run_suite(
    model: &BvpNetMini,
    stream: &[LabeledInstance],
    configs: &[RunConfig],
    seeds: &[u64],
) -> Result<SuiteOutcome, HarnessError> {
    if configs.is_empty() || seeds.is_empty() {
        return Err(HarnessError::InvalidConfig(
            "a suite needs at least one config and one seed".into(),
        ));
    }
    let labels = labels(configs);
    let jobs: Vec<(usize, u64)> = (0..configs.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let results: Vec<(usize, u64, Result<TtaReport, HarnessError>)> = jobs
        .par_iter()
        .map(|&(c, s)| (c, s, run_tta(model, stream, &configs[c], s)))
        .collect();

    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (c, seed, result) in results {
        match result {
            Ok(r) => reports.push((labels[c].clone(), r)),
            Err(e) => failures.push(SuiteRunError {
                label: labels[c].clone(),
                seed,
                message: e.to_string(),
            }),
        }
    }
    let summaries = configs
        .iter()
        .enumerate()
        .filter_map(|(c, cfg)| {
            let runs: Vec<_> = reports
                .iter()
                .filter(|(l, _)| *l == labels[c])
                .map(|(_, r)| &r.summary)
                .collect();
            (!runs.is_empty()).then(|| ModeSummary::from_runs(labels[c].clone(), cfg.mode, &runs))
        })
        .collect();
    Ok(SuiteOutcome {
        reports,
        failures,
        summaries,
    })
}

#[derive(Serialize)]
struct SummaryJson<'a> {
    summaries: &'a [ModeSummary],
    runs: Vec<RunJson<'a>>,
    failures: &'a [SuiteRunError],
}

#[derive(Serialize)]
struct RunJson<'a> {
    label: &'a str,
    report: String,
    config: &'a RunConfig,
    summary: &'a super::RunSummary,
}

#[derive(Serialize)]
struct SummaryCsvRow<'a> {
    label: &'a str,
    mode: &'a str,
    seeds: usize,
    mae_pre_mean: f64,
    mae_post_mean: f64,
    mae_post_std: f64,
    rmse_post_mean: f64,
    rmse_post_std: f64,
    pearson_post_mean: Option<f64>,
    pearson_post_std: Option<f64>,
}

pub fn report_file_name(label: &str, seed: u64) -> String {
    format!("report_{label}_seed{seed}.csv")
}

/// Writes `report_<label>_seed<seed>.csv` per run plus `summary.csv` and
/// `summary.json` into `dir`.
pub fn write_suite_outputs(outcome: &SuiteOutcome, dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    let mut runs = Vec::new();
    for (label, report) in &outcome.reports {
        let name = report_file_name(label, report.seed);
        report.save_csv(&dir.join(&name))?;
        runs.push(RunJson {
            label,
            report: name,
            config: &report.config,
            summary: &report.summary,
        });
    }
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    for s in &outcome.summaries {
        w.serialize(SummaryCsvRow {
            label: &s.label,
            mode: s.mode.as_str(),
            seeds: s.seeds.len(),
            mae_pre_mean: s.mae_pre_mean,
            mae_post_mean: s.mae_post_mean,
            mae_post_std: s.mae_post_std,
            rmse_post_mean: s.rmse_post_mean,
            rmse_post_std: s.rmse_post_std,
            pearson_post_mean: s.pearson_post_mean,
            pearson_post_std: s.pearson_post_std,
        })?;
    }
    w.flush()?;
    let json = SummaryJson {
        summaries: &outcome.summaries,
        runs,
        failures: &outcome.failures,
    };
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&json)?)?;
    Ok(())
}
