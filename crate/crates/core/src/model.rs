//! `BvpNetMini`: a small convolutional BVP estimator, its supervised
//! pretraining and checkpoint persistence.
//!
//! Architecture, for an input map of `T` frames and `W` regions:
//!
//! ```text
//! [3, T, W] --conv2d (k x W)--> [C, T] --2 x residual conv1d--> [C, T] --1x1 conv--> [T]
//! ```
//!
//! Each residual block computes `h + conv(tanh(conv(h)))`. The last block's
//! outer conv and the head carry no bias: a bias there only shifts the output
//! by a constant, which every pulse loss ignores.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{self, BvpSignal, DspError};
use crate::gdc::{grads_for, OptimConfig, OptimState};
use crate::graph::{Graph, Var};
use crate::synth::{LabeledInstance, Stmap, CHANNELS, MODEL_WIDTH};
use crate::tensor::{Tensor, TensorError};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 2;
pub const MAX_PARAMS: usize = 20_000;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error("input has {actual} regions, model expects {expected}")]
    WidthMismatch { expected: usize, actual: usize },
    #[error("input has {frames} frames, need at least {min}")]
    TooShort { frames: usize, min: usize },
    #[error("no training instances")]
    EmptySuite,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("unsupported checkpoint schema version {found} (this build reads version {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature channels after the stem.
    pub channels: usize,
    /// Temporal extent of the stem kernel (odd).
    pub stem_kernel: usize,
    /// Temporal extent of the residual block kernels (odd).
    pub block_kernel: usize,
    pub width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            stem_kernel: 5,
            block_kernel: 5,
            width: MODEL_WIDTH,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.channels == 0 || self.width == 0 {
            return Err(ModelError::InvalidConfig("channels and width must be positive".into()));
        }
        if self.stem_kernel % 2 == 0 || self.block_kernel % 2 == 0 {
            return Err(ModelError::InvalidConfig("kernel sizes must be odd".into()));
        }
        let n = self.param_count();
        if n > MAX_PARAMS {
            return Err(ModelError::InvalidConfig(format!(
                "{n} parameters exceed the {MAX_PARAMS} budget"
            )));
        }
        Ok(())
    }

    /// Names, shapes and fan-in of every parameter tensor in global order.
    fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let (c, ks, kb, w) = (self.channels, self.stem_kernel, self.block_kernel, self.width);
        let mut out = vec![
            ("stem.weight".to_string(), vec![c, CHANNELS, ks, w], CHANNELS * ks * w),
            ("stem.bias".to_string(), vec![c], CHANNELS * ks * w),
        ];
        for b in 0..2 {
            for l in 0..2 {
                out.push((format!("block{b}.conv{l}.weight"), vec![c, c, kb], c * kb));
                if (b, l) != (1, 1) {
                    out.push((format!("block{b}.conv{l}.bias"), vec![c], c * kb));
                }
            }
        }
        out.push(("head.weight".to_string(), vec![1, c, 1], c));
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout()
            .iter()
            .map(|(_, s, _)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BvpNetMini {
    config: ModelConfig,
    params: Vec<Param>,
}

impl BvpNetMini {
    /// Uniform `±1/sqrt(fan_in)` initialization from a seeded stream.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .layout()
            .into_iter()
            .map(|(name, shape, fan_in)| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                Param {
                    name,
                    value: Tensor::new(shape, data).expect("layout shape matches count"),
                }
            })
            .collect();
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// All parameters concatenated in global order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<(), ModelError> {
        if flat.len() != self.param_count() {
            return Err(TensorError::DataLength {
                shape: vec![self.param_count()],
                expected: self.param_count(),
                actual: flat.len(),
            }
            .into());
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.value.numel();
            p.value.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Adds every parameter tensor to `graph` as a trainable leaf.
    pub fn bind(&self, graph: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| graph.param(p.value.clone())).collect()
    }

    /// Predicted BVP (`[T]`) for a normalized map, using parameters bound
    /// with [`BvpNetMini::bind`].
    pub fn forward(&self, graph: &mut Graph, bound: &[Var], input: &Stmap) -> Result<Var, ModelError> {
        if input.width != self.config.width {
            return Err(ModelError::WidthMismatch {
                expected: self.config.width,
                actual: input.width,
            });
        }
        let t = input.frames;
        if t == 0 {
            return Err(ModelError::TooShort { frames: 0, min: 1 });
        }
        let c = self.config.channels;
        let x = graph.constant(Tensor::new(vec![CHANNELS, t, input.width], input.to_chw())?);
        let stem = graph.conv2d(x, bound[0], Some(bound[1]), (self.config.stem_kernel / 2, 0))?;
        let mut h = graph.reshape(stem, &[c, t])?;
        let pad = self.config.block_kernel / 2;
        // Indices follow `ModelConfig::layout`.
        for (w0, b0, w1, b1) in [(2, 3, 4, Some(5)), (6, 7, 8, None)] {
            let a = graph.conv1d(h, bound[w0], Some(bound[b0]), (pad, pad))?;
            let a = graph.tanh(a);
            let a = graph.conv1d(a, bound[w1], b1.map(|i| bound[i]), (pad, pad))?;
            h = graph.add(h, a)?;
        }
        let out = graph.conv1d(h, bound[9], None, (0, 0))?;
        Ok(graph.reshape(out, &[t])?)
    }

    /// Forward pass outside any training graph.
    pub fn predict(&self, input: &Stmap) -> Result<BvpSignal, ModelError> {
        let mut graph = Graph::new();
        let bound = self.bind(&mut graph);
        let out = self.forward(&mut graph, &bound, input)?;
        Ok(BvpSignal::new(graph.value(out).data().to_vec(), input.frame_rate_hz))
    }

    /// Heart rate from the spectral peak of the predicted BVP.
    pub fn predict_hr(&self, input: &Stmap) -> Result<f64, ModelError> {
        let bvp = self.predict(input)?;
        Ok(dsp::peak_hr_bpm(&dsp::psd(&bvp, dsp::HR_BAND_BPM)?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Weight of the MSE anchor added to the negative Pearson term.
    pub mse_weight: f64,
    /// Seeds the per-epoch shuffle of the training set.
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            momentum: 0.9,
            mse_weight: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: BvpNetMini,
    pub optim: OptimState,
    /// Mean training loss per epoch.
    pub loss_trace: Vec<f64>,
}

/// Zero-mean, unit-variance copy (constant input maps to zeros).
pub fn standardize(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd == 0.0 {
        return vec![0.0; x.len()];
    }
    x.iter().map(|v| (v - mean) / sd).collect()
}

/// `(1 - pearson(pred, target)) + mse_weight * mse(pred, target)` on the graph.
pub fn supervised_loss(
    graph: &mut Graph,
    pred: Var,
    target: &[f64],
    mse_weight: f64,
) -> Result<Var, TensorError> {
    let target = graph.constant(Tensor::vector(target.to_vec()));
    let pc = graph.center(pred);
    let tc = graph.center(target);
    let r = graph.cosine_similarity(pc, tc)?;
    let neg = graph.scalar_mul(r, -1.0);
    let one = graph.constant(Tensor::scalar(1.0));
    let pearson_term = graph.add(one, neg)?;
    let diff = graph.sub(pred, target)?;
    let sq = graph.square(diff);
    let mse = graph.mean(sq);
    let mse = graph.scalar_mul(mse, mse_weight);
    graph.add(pearson_term, mse)
}

/// Supervised training on labeled windows, one SGD-momentum step per
/// instance. Targets are the standardized ground-truth pulses and the model
/// sees the first `T` frames of each window.
pub fn pretrain(
    model: BvpNetMini,
    instances: &[LabeledInstance],
    config: &PretrainConfig,
) -> Result<PretrainOutcome, ModelError> {
    if instances.is_empty() {
        return Err(ModelError::EmptySuite);
    }
    let mut model = model;
    let mut optim = OptimState::new(
        &model,
        OptimConfig {
            lr: config.lr,
            momentum: config.momentum,
        },
    );
    let inputs: Vec<(Stmap, Vec<f64>)> = instances
        .iter()
        .map(|inst| {
            let t = inst.gt_bvp.len();
            let x = inst
                .window
                .frames_slice(0, t)
                .map_err(|e| ModelError::InvalidConfig(e.to_string()))?
                .normalized();
            Ok((x, standardize(&inst.gt_bvp.samples)))
        })
        .collect::<Result<_, ModelError>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut loss_trace = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let (x, target) = &inputs[i];
            let mut graph = Graph::new();
            let bound = model.bind(&mut graph);
            let pred = model.forward(&mut graph, &bound, x)?;
            let loss = supervised_loss(&mut graph, pred, target, config.mse_weight)?;
            total += graph.scalar(loss);
            let bundle = grads_for(&graph, loss, &bound)?;
            // Non-finite steps are skipped; the loss trace still records them.
            let _ = optim.step(&mut model, &bundle.values);
        }
        loss_trace.push(total / inputs.len() as f64);
    }
    Ok(PretrainOutcome {
        model,
        optim,
        loss_trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainMeta {
    pub seed: u64,
    pub epochs: usize,
    /// SHA-256 of the source suite specification.
    pub source_digest: String,
}

/// Serialized model state. Field order in the JSON file: `schema_version`,
/// `config`, `params`, `momentum`, `meta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub config: ModelConfig,
    pub params: Vec<Param>,
    /// Momentum buffers in parameter order, empty when not saved.
    pub momentum: Vec<Tensor>,
    pub meta: Option<PretrainMeta>,
}

#[derive(Deserialize)]
struct VersionProbe {
    schema_version: u32,
}

impl Checkpoint {
    pub fn new(model: &BvpNetMini, optim: Option<&OptimState>, meta: Option<PretrainMeta>) -> Self {
        Self {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            config: model.config,
            params: model.params.clone(),
            momentum: optim.map(|o| o.velocity().to_vec()).unwrap_or_default(),
            meta,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let probe: VersionProbe =
            serde_json::from_str(text).map_err(|e| ModelError::Corrupt(e.to_string()))?;
        if probe.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(ModelError::UnsupportedVersion {
                found: probe.schema_version,
                expected: CHECKPOINT_SCHEMA_VERSION,
            });
        }
        let ckpt: Checkpoint =
            serde_json::from_str(text).map_err(|e| ModelError::Corrupt(e.to_string()))?;
        ckpt.model()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Rebuilds the model, checking names and shapes against the config.
    pub fn model(&self) -> Result<BvpNetMini, ModelError> {
        self.config.validate()?;
        let layout = self.config.layout();
        if layout.len() != self.params.len() {
            return Err(ModelError::Corrupt(format!(
                "{} parameter tensors, expected {}",
                self.params.len(),
                layout.len()
            )));
        }
        for ((name, shape, _), p) in layout.iter().zip(&self.params) {
            let n: usize = shape.iter().product();
            if &p.name != name || p.value.shape() != shape.as_slice() || p.value.numel() != n {
                return Err(ModelError::Corrupt(format!(
                    "parameter {:?} with shape {:?} does not match {name:?} {shape:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        if !self.momentum.is_empty()
            && (self.momentum.len() != self.params.len()
                || self
                    .momentum
                    .iter()
                    .zip(&self.params)
                    .any(|(m, p)| m.shape() != p.value.shape() || m.numel() != p.value.numel()))
        {
            return Err(ModelError::Corrupt("momentum buffers do not match parameters".into()));
        }
        Ok(BvpNetMini {
            config: self.config,
            params: self.params.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(frames: usize, seed: u64) -> Stmap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..frames * MODEL_WIDTH * CHANNELS)
            .map(|_| rng.random_range(0.0..1.0))
            .collect();
        Stmap::new(frames, MODEL_WIDTH, 30.0, 0, data).unwrap()
    }

    #[test]
    fn default_config_fits_budget() {
        let cfg = ModelConfig::default();
        assert!(cfg.param_count() <= MAX_PARAMS);
        let m = BvpNetMini::init(cfg, 0).unwrap();
        assert_eq!(m.param_count(), cfg.param_count());
    }

    #[test]
    fn init_is_seeded() {
        let a = BvpNetMini::init(ModelConfig::default(), 1).unwrap();
        let b = BvpNetMini::init(ModelConfig::default(), 1).unwrap();
        let c = BvpNetMini::init(ModelConfig::default(), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.flat_params(), c.flat_params());
    }

    #[test]
    fn output_length_matches_frames() {
        let m = BvpNetMini::init(ModelConfig::default(), 3).unwrap();
        for t in [128, 256] {
            let out = m.predict(&input(t, t as u64)).unwrap();
            assert_eq!(out.len(), t);
            assert!(out.samples.iter().all(|v| v.is_finite()));
        }
        let zero = Stmap::new(64, MODEL_WIDTH, 30.0, 0, vec![0.0; 64 * MODEL_WIDTH * 3]).unwrap();
        assert!(m.predict(&zero).unwrap().samples.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn forward_is_deterministic() {
        let m = BvpNetMini::init(ModelConfig::default(), 4).unwrap();
        let x = input(128, 9);
        assert_eq!(m.predict(&x).unwrap(), m.predict(&x).unwrap());
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let m = BvpNetMini::init(ModelConfig::default(), 5).unwrap();
        let mut g = Graph::new();
        let bound = m.bind(&mut g);
        let out = m.forward(&mut g, &bound, &input(128, 1)).unwrap();
        let loss = g.mean(out);
        let grads = g.backward(loss).unwrap();
        for (p, v) in m.params().iter().zip(&bound) {
            let gt = grads.get_or_zeros(*v);
            assert!(gt.data().iter().any(|x| *x != 0.0), "{}", p.name);
        }
    }

    #[test]
    fn wrong_width_is_rejected() {
        let m = BvpNetMini::init(ModelConfig::default(), 0).unwrap();
        let x = Stmap::new(10, 5, 30.0, 0, vec![0.0; 150]).unwrap();
        assert!(matches!(m.predict(&x), Err(ModelError::WidthMismatch { .. })));
    }

    #[test]
    fn flat_params_round_trip() {
        let mut m = BvpNetMini::init(ModelConfig::default(), 6).unwrap();
        let mut flat = m.flat_params();
        flat[0] += 1.0;
        m.set_flat_params(&flat).unwrap();
        assert_eq!(m.flat_params(), flat);
        assert!(m.set_flat_params(&flat[1..]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let m = BvpNetMini::init(ModelConfig::default(), 7).unwrap();
        let ckpt = Checkpoint::new(&m, None, None);
        let back = Checkpoint::from_json(&ckpt.to_json()).unwrap().model().unwrap();
        assert_eq!(back, m);
        let x = input(64, 2);
        assert_eq!(back.predict(&x).unwrap(), m.predict(&x).unwrap());
    }

    #[test]
    fn checkpoint_version_and_corruption() {
        let m = BvpNetMini::init(ModelConfig::default(), 8).unwrap();
        let json = Checkpoint::new(&m, None, None)
            .to_json()
            .replacen(
                &format!("\"schema_version\": {CHECKPOINT_SCHEMA_VERSION}"),
                "\"schema_version\": 9",
                1,
            );
        let err = Checkpoint::from_json(&json).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains('9') && msg.contains(&CHECKPOINT_SCHEMA_VERSION.to_string()),
            "{msg}"
        );
        assert!(matches!(Checkpoint::from_json("{\"schema"), Err(ModelError::Corrupt(_))));
    }

    #[test]
    fn supervised_loss_is_zero_at_target() {
        let target = standardize(&[1.0, 3.0, 2.0, 5.0, 4.0]);
        let mut g = Graph::new();
        let pred = g.param(Tensor::vector(target.clone()));
        let loss = supervised_loss(&mut g, pred, &target, 0.1).unwrap();
        assert!(g.scalar(loss).abs() < 1e-12);
    }
}
