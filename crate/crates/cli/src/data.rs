//! On-disk suite directories written by `cici synth`.
//!
//! ```text
//! <dir>/suite.json               suite specification
//! <dir>/labels.csv               instance,scenario,t0,gt_hr_bpm
//! <dir>/gt_bvp.csv               instance followed by T reference samples
//! <dir>/windows/instance_NNNN.stm1
//! <dir>/roi/scenario_NNN.csv     full ROI-trace stream of each scenario
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use cici_core::synth::{gen_traces, read_stm1, write_roi_csv, write_stm1};
use cici_core::{BvpSignal, LabeledInstance, SuiteSpec};

use crate::CliError;

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    instance: usize,
    scenario: usize,
    t0: usize,
    gt_hr_bpm: f64,
}

fn window_name(i: usize) -> String {
    format!("instance_{i:04}.stm1")
}

/// Writes every instance of `spec` into `dir`; returns the instance count.
pub fn write_suite(spec: &SuiteSpec, dir: &Path) -> Result<usize, CliError> {
    let instances = spec.instances().map_err(CliError::runtime)?;
    fs::create_dir_all(dir.join("windows")).map_err(CliError::runtime)?;
    fs::create_dir_all(dir.join("roi")).map_err(CliError::runtime)?;
    let json = serde_json::to_string_pretty(spec).map_err(CliError::runtime)?;
    fs::write(dir.join("suite.json"), json).map_err(CliError::runtime)?;

    for s in 0..spec.scenarios {
        let traces = gen_traces(&spec.scenario(s), 0, spec.scenario_frames()).map_err(CliError::runtime)?;
        write_roi_csv(&dir.join("roi").join(format!("scenario_{s:03}.csv")), &traces)
            .map_err(CliError::runtime)?;
    }

    let mut labels = csv::Writer::from_path(dir.join("labels.csv")).map_err(CliError::runtime)?;
    let mut bvp = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(dir.join("gt_bvp.csv"))
        .map_err(CliError::runtime)?;
    for (i, inst) in instances.iter().enumerate() {
        write_stm1(&dir.join("windows").join(window_name(i)), &inst.window).map_err(CliError::runtime)?;
        labels
            .serialize(LabelRow {
                instance: i,
                scenario: i / spec.instances_per_scenario.max(1),
                t0: inst.window.t0,
                gt_hr_bpm: inst.gt_hr_bpm,
            })
            .map_err(CliError::runtime)?;
        let mut rec = vec![i.to_string()];
        rec.extend(inst.gt_bvp.samples.iter().map(|v| v.to_string()));
        bvp.write_record(&rec).map_err(CliError::runtime)?;
    }
    labels.flush().map_err(CliError::runtime)?;
    bvp.flush().map_err(CliError::runtime)?;
    Ok(instances.len())
}

/// Loads a directory written by [`write_suite`]. Window values come back
/// at `f32` precision.
pub fn read_suite(dir: &Path) -> Result<Vec<LabeledInstance>, CliError> {
    let labels_path = dir.join("labels.csv");
    if !labels_path.is_file() {
        return Err(CliError::Usage(format!(
            "{} is not a suite directory (missing labels.csv)",
            dir.display()
        )));
    }
    let bad = |e: &dyn std::fmt::Display| CliError::Usage(format!("{}: {e}", dir.display()));
    let labels: Vec<LabelRow> = csv::Reader::from_path(&labels_path)
        .map_err(|e| bad(&e))?
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| bad(&e))?;
    let mut bvp_rows = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(dir.join("gt_bvp.csv"))
        .map_err(|e| bad(&e))?;
    let bvps: Vec<Vec<f64>> = bvp_rows
        .records()
        .map(|r| {
            let r = r.map_err(|e| bad(&e))?;
            r.iter()
                .skip(1)
                .map(|v| v.parse::<f64>().map_err(|e| bad(&e)))
                .collect()
        })
        .collect::<Result<_, _>>()?;
    if bvps.len() != labels.len() {
        return Err(bad(&format!(
            "{} labels but {} reference pulses",
            labels.len(),
            bvps.len()
        )));
    }
    labels
        .into_iter()
        .zip(bvps)
        .map(|(row, samples)| {
            let mut window = read_stm1(&dir.join("windows").join(window_name(row.instance))).map_err(|e| bad(&e))?;
            window.t0 = row.t0;
            let fs = window.frame_rate_hz;
            Ok(LabeledInstance {
                window,
                gt_bvp: BvpSignal::new(samples, fs),
                gt_hr_bpm: row.gt_hr_bpm,
            })
        })
        .collect()
}
