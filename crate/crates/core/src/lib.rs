//! Test-time adaptation of a pulse-estimation model from unlabeled
//! spatio-temporal maps, driven by a frequency-consistency loss, a
//! time-inconsistency loss and gradient dynamic control.

pub mod augment;
pub mod dsp;
pub mod gdc;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod losses;
pub mod model;
pub mod synth;
pub mod tensor;

pub use augment::{augment, AugmentMeta, AugmentedPair};
pub use dsp::{BvpSignal, EvalMetrics, HrvMetrics, Psd, Temperature};
pub use gdc::{GradientBundle, OptimConfig, OptimState};
pub use graph::{Graph, Var};
pub use harness::{run_suite, run_tta, Mode, RunConfig, TtaReport, TtaRow};
pub use losses::StfcConfig;
pub use model::{BvpNetMini, Checkpoint, ModelConfig, PretrainConfig};
pub use synth::{LabeledInstance, ScenarioConfig, Stmap, SuiteSpec};
pub use tensor::{Tensor, TensorError};
