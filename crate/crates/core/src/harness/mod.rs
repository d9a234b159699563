//! Online test-time adaptation over a stream of target windows.
//!
//! The model is updated once per step with batch size one and is never
//! reset between instances, so results depend on stream order.

mod experiment;
mod report;
mod suite;

pub use experiment::{suite_digest, ExperimentConfig};

pub use report::{pass_running_mae, read_report_rows, running_mae, ModeSummary, RunSummary, TtaReport, TtaRow, REPORT_HEADER};
pub use suite::{report_file_name, run_suite, write_suite_outputs, SuiteOutcome, SuiteRunError};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{augment, AugmentError};
use crate::dsp::{self, DftBasis, DspError, Temperature, HR_BAND_BPM};
use crate::gdc::{
    combine, dot, grads_for, GdcError, GradientBundle, OptimConfig, OptimState, DEFAULT_LAMBDA,
    DEFAULT_LR, DEFAULT_MOMENTUM,
};
use crate::graph::Graph;
use crate::losses::{
    self_sim_matrix, stfc_loss, stti_loss, LossError, StfcConfig, DEFAULT_PSI_BPM,
    DEFAULT_SIM_WINDOW,
};
use crate::model::{BvpNetMini, ModelError};
use crate::synth::LabeledInstance;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("target stream is empty")]
    EmptyStream,
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Which gradients drive the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    NoAdapt,
    StfcOnly,
    SttiOnly,
    /// Fixed `lambda_hp * g_stti + g_stfc`, conflict or not.
    BothNoGdc,
    Cici,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::NoAdapt,
        Mode::StfcOnly,
        Mode::SttiOnly,
        Mode::BothNoGdc,
        Mode::Cici,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::NoAdapt => "no-adapt",
            Mode::StfcOnly => "stfc-only",
            Mode::SttiOnly => "stti-only",
            Mode::BothNoGdc => "both-no-gdc",
            Mode::Cici => "cici",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: Mode,
    pub lr: f64,
    pub momentum: f64,
    pub lambda_hp: f64,
    pub psi_bpm: f64,
    /// Self-similarity window length in frames.
    pub sim_window: usize,
    pub temperature: Temperature,
    pub steps_per_instance: usize,
    /// Passes over the target stream.
    pub cycles: usize,
    /// Multiplier on the STTI gradient before combination.
    pub stti_weight: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Cici,
            lr: DEFAULT_LR,
            momentum: DEFAULT_MOMENTUM,
            lambda_hp: DEFAULT_LAMBDA,
            psi_bpm: DEFAULT_PSI_BPM,
            sim_window: DEFAULT_SIM_WINDOW,
            temperature: Temperature::default(),
            steps_per_instance: 1,
            cycles: 1,
            stti_weight: 1.0,
        }
    }
}

impl RunConfig {
    pub fn with_mode(mode: Mode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidConfig(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.psi_bpm >= 0.0 && self.psi_bpm.is_finite()) {
            return bad(format!("psi_bpm must be finite and non-negative, got {}", self.psi_bpm));
        }
        if !self.lambda_hp.is_finite() || !self.stti_weight.is_finite() {
            return bad("lambda_hp and stti_weight must be finite".into());
        }
        if self.sim_window < 2 {
            return bad(format!("sim_window must be at least 2, got {}", self.sim_window));
        }
        if self.steps_per_instance == 0 || self.cycles == 0 {
            return bad("steps_per_instance and cycles must be positive".into());
        }
        Ok(())
    }
}

/// Row flags, joined with `;` in reports.
pub mod flags {
    pub const DEGENERATE_SIGNAL: &str = "degenerate_signal";
    pub const DEGENERATE_GRADIENTS: &str = "degenerate_gradients";
    pub const NON_FINITE_GRADIENT: &str = "non_finite_gradient";
    pub const STFC_DISCONNECTED: &str = "stfc_disconnected";
    pub const STTI_DISCONNECTED: &str = "stti_disconnected";
}

fn hr_of(basis: &DftBasis, samples: &[f64]) -> f64 {
    basis
        .psd(samples)
        .and_then(|p| dsp::peak_hr_bpm(&p))
        .unwrap_or(f64::NAN)
}

struct StepLosses {
    l_stfc: f64,
    l_stti: f64,
    delta: f64,
    gate: bool,
    g_stfc: GradientBundle,
    g_stti: GradientBundle,
}

/// Adapts a copy of `model` on `stream`, logging one row per step.
/// `seed` drives the augmentation draws.
pub fn run_tta(
    model: &BvpNetMini,
    stream: &[LabeledInstance],
    config: &RunConfig,
    seed: u64,
) -> Result<TtaReport, HarnessError> {
    config.validate()?;
    let Some(first) = stream.first() else {
        return Err(HarnessError::EmptyStream);
    };
    let t = first.gt_bvp.len();
    let fs = first.gt_bvp.frame_rate_hz;
    if stream.iter().any(|i| i.gt_bvp.len() != t) {
        return Err(HarnessError::InvalidConfig("instances differ in window length".into()));
    }
    if config.sim_window > t {
        return Err(HarnessError::InvalidConfig(format!(
            "sim_window {} exceeds window length {t}",
            config.sim_window
        )));
    }
    let basis = DftBasis::new(t, fs, HR_BAND_BPM)?;
    let stfc_cfg = StfcConfig {
        psi_bpm: config.psi_bpm,
        temperature: config.temperature,
        band_bpm: HR_BAND_BPM,
    };
    let mut model = model.clone();
    let mut optim = OptimState::new(
        &model,
        OptimConfig {
            lr: config.lr,
            momentum: config.momentum,
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(stream.len() * config.cycles * config.steps_per_instance);
    let mut final_bvp: Vec<(usize, Vec<f64>)> = Vec::new();

    for cycle in 0..config.cycles {
        for (index, inst) in stream.iter().enumerate() {
            for step in 0..config.steps_per_instance {
                let keep_bvp = cycle + 1 == config.cycles && step + 1 == config.steps_per_instance;
                let pair = augment(&inst.window, t, rng.random())?;
                let mut graph = Graph::new();
                let bound = model.bind(&mut graph);
                let y = model.forward(&mut graph, &bound, &pair.x)?;
                let ya = model.forward(&mut graph, &bound, &pair.x_aug)?;
                let pre_hr = hr_of(&basis, graph.value(y).data());

                let mut row_flags: Vec<&str> = Vec::new();
                let losses = (|| -> Result<StepLosses, LossError> {
                    let stfc = stfc_loss(&mut graph, &basis, y, ya, &stfc_cfg)?;
                    let m = self_sim_matrix(&mut graph, y, config.sim_window)?;
                    let ma = self_sim_matrix(&mut graph, ya, config.sim_window)?;
                    let stti = stti_loss(&mut graph, m, ma)?;
                    let g_stfc = grads_for(&graph, stfc.loss, &bound)?;
                    let mut g_stti = grads_for(&graph, stti, &bound)?;
                    if config.stti_weight != 1.0 {
                        let disconnected = g_stti.disconnected;
                        g_stti = GradientBundle::from_values(
                            g_stti.values.iter().map(|v| v * config.stti_weight).collect(),
                        );
                        g_stti.disconnected = disconnected;
                    }
                    Ok(StepLosses {
                        l_stfc: graph.scalar(stfc.loss),
                        l_stti: graph.scalar(stti),
                        delta: stfc.delta_bpm,
                        gate: stfc.gate_open,
                        g_stfc,
                        g_stti,
                    })
                })();

                let mut row = TtaRow {
                    step: rows.len(),
                    cycle,
                    instance: index,
                    gt_hr_bpm: inst.gt_hr_bpm,
                    pre_hr_bpm: pre_hr,
                    post_hr_bpm: pre_hr,
                    l_stfc: f64::NAN,
                    l_stti: f64::NAN,
                    delta_bpm: f64::NAN,
                    gate_open: false,
                    lambda1: 0.0,
                    lambda2: 0.0,
                    conflict: false,
                    g1: 0.0,
                    g2: 0.0,
                    dot: 0.0,
                    updated: false,
                    delta_t: pair.meta.delta_t,
                    flags: String::new(),
                };
                match losses {
                    Err(LossError::Dsp(DspError::DegenerateSignal)) => {
                        row_flags.push(flags::DEGENERATE_SIGNAL);
                    }
                    Err(e) => return Err(HarnessError::InvalidConfig(e.to_string())),
                    Ok(l) => {
                        row.l_stfc = l.l_stfc;
                        row.l_stti = l.l_stti;
                        row.delta_bpm = l.delta;
                        row.gate_open = l.gate;
                        row.g1 = l.g_stti.norm;
                        row.g2 = l.g_stfc.norm;
                        row.dot = dot(&l.g_stfc, &l.g_stti).expect("bundles share the parameter order");
                        row.conflict = row.dot < 0.0;
                        if l.g_stfc.disconnected {
                            row_flags.push(flags::STFC_DISCONNECTED);
                        }
                        if l.g_stti.disconnected {
                            row_flags.push(flags::STTI_DISCONNECTED);
                        }
                        let combined = match config.mode {
                            Mode::NoAdapt => None,
                            Mode::StfcOnly => Some((l.g_stfc.values.clone(), 0.0, 1.0)),
                            Mode::SttiOnly => Some((l.g_stti.values.clone(), 1.0, 0.0)),
                            Mode::BothNoGdc => {
                                let c = combine(&l.g_stfc, &l.g_stti, false, config.lambda_hp)
                                    .expect("lengths match");
                                Some((c.gradient, c.lambda_stti, c.lambda_stfc))
                            }
                            Mode::Cici => {
                                match combine(&l.g_stfc, &l.g_stti, row.conflict, config.lambda_hp) {
                                    Ok(c) => Some((c.gradient, c.lambda_stti, c.lambda_stfc)),
                                    Err(GdcError::DegenerateGradients) => {
                                        row_flags.push(flags::DEGENERATE_GRADIENTS);
                                        None
                                    }
                                    Err(e) => unreachable!("{e}"),
                                }
                            }
                        };
                        if let Some((gradient, l1, l2)) = combined {
                            row.lambda1 = l1;
                            row.lambda2 = l2;
                            match optim.step(&mut model, &gradient) {
                                Ok(()) => row.updated = true,
                                Err(GdcError::NonFiniteGradient) => {
                                    row_flags.push(flags::NON_FINITE_GRADIENT)
                                }
                                Err(e) => unreachable!("{e}"),
                            }
                        }
                    }
                }
                if row.updated {
                    let bvp = model.predict(&pair.x)?;
                    row.post_hr_bpm = hr_of(&basis, &bvp.samples);
                    if keep_bvp {
                        final_bvp.push((inst.window.t0, bvp.samples));
                    }
                } else if keep_bvp {
                    final_bvp.push((inst.window.t0, graph.value(y).data().to_vec()));
                }
                row.flags = row_flags.join(";");
                rows.push(row);
            }
        }
    }
    Ok(TtaReport::new(config.clone(), seed, rows, &final_bvp, fs))
}
