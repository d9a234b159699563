//! Self-supervised consistency objectives for a pair of predicted pulses.
//!
//! * STFC: the spectral peaks of the original and augmented predictions
//!   should agree; the loss is their gated absolute difference in bpm.
//! * STTI: the self-similarity matrices of the two predictions should
//!   differ; the loss is the cosine similarity of the flattened matrices.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{DftBasis, DspError, Temperature, HR_BAND_BPM};
use crate::graph::{Graph, Var};
use crate::tensor::{Tensor, TensorError};

/// Default STFC threshold, in bpm.
pub const DEFAULT_PSI_BPM: f64 = 1.0;
/// Default self-similarity window, in frames.
pub const DEFAULT_SIM_WINDOW: usize = 32;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("similarity window {window} must lie in [2, {len}]")]
    BadWindow { window: usize, len: usize },
    #[error("psi must be a finite non-negative bpm value, got {0}")]
    BadPsi(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StfcConfig {
    pub psi_bpm: f64,
    pub temperature: Temperature,
    pub band_bpm: (f64, f64),
}

impl Default for StfcConfig {
    fn default() -> Self {
        Self {
            psi_bpm: DEFAULT_PSI_BPM,
            temperature: Temperature::default(),
            band_bpm: HR_BAND_BPM,
        }
    }
}

/// STFC loss node plus the detached quantities it was built from.
#[derive(Debug, Clone, Copy)]
pub struct StfcTerms {
    pub loss: Var,
    pub peak_bpm: f64,
    pub peak_aug_bpm: f64,
    pub delta_bpm: f64,
    pub gate_open: bool,
}

fn soft_peak(
    graph: &mut Graph,
    basis: &DftBasis,
    bvp: Var,
    temperature: Temperature,
) -> Result<Var, DspError> {
    let power = basis.psd_var(graph, bvp)?;
    let max = graph
        .value(power)
        .data()
        .iter()
        .fold(0.0f64, |m, &p| m.max(p));
    if !(max > 0.0) {
        return Err(DspError::DegenerateSignal);
    }
    let tau = temperature.resolve(max)?;
    basis.soft_peak_var(graph, power, tau)
}

/// `g * |p_a - p|`, where `p` and `p_a` are soft spectral peaks and the gate
/// `g = [|p_a - p| >= psi]` is evaluated on detached values.
pub fn stfc_loss(
    graph: &mut Graph,
    basis: &DftBasis,
    bvp: Var,
    bvp_aug: Var,
    config: &StfcConfig,
) -> Result<StfcTerms, LossError> {
    if !(config.psi_bpm >= 0.0 && config.psi_bpm.is_finite()) {
        return Err(LossError::BadPsi(config.psi_bpm));
    }
    let p = soft_peak(graph, basis, bvp, config.temperature)?;
    let pa = soft_peak(graph, basis, bvp_aug, config.temperature)?;
    let diff = graph.sub(pa, p)?;
    let delta = graph.abs(diff);
    let delta_bpm = graph.scalar(delta);
    let gate_open = delta_bpm >= config.psi_bpm;
    let loss = graph.scalar_mul(delta, if gate_open { 1.0 } else { 0.0 });
    Ok(StfcTerms {
        loss,
        peak_bpm: graph.scalar(p),
        peak_aug_bpm: graph.scalar(pa),
        delta_bpm,
        gate_open,
    })
}

/// Mean of per-pair scalar losses.
pub fn batch_mean(graph: &mut Graph, losses: &[Var]) -> Result<Var, TensorError> {
    if losses.is_empty() {
        return Err(TensorError::InvalidArgument("empty batch".into()));
    }
    let flat = losses
        .iter()
        .map(|&l| graph.reshape(l, &[1]))
        .collect::<Result<Vec<_>, _>>()?;
    let all = graph.concat(&flat)?;
    Ok(graph.mean(all))
}

/// `[n, n]` cosine similarities between all length-`window` stride-1
/// windows of `bvp`, `n = T - window + 1`. Zero windows give zero rows.
pub fn self_sim_matrix(graph: &mut Graph, bvp: Var, window: usize) -> Result<Var, LossError> {
    let len = graph.value(bvp).numel();
    if window < 2 || window > len {
        return Err(LossError::BadWindow { window, len });
    }
    let flat = graph.reshape(bvp, &[len])?;
    let u = graph.unfold(flat, window)?;
    let u = graph.row_normalize(u)?;
    let ut = graph.transpose(u)?;
    Ok(graph.matmul(u, ut)?)
}

/// Cosine similarity of two flattened self-similarity matrices.
pub fn stti_loss(graph: &mut Graph, m: Var, m_aug: Var) -> Result<Var, LossError> {
    let (a, b) = (graph.value(m), graph.value(m_aug));
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "stti",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }
        .into());
    }
    let n = a.numel();
    let fa = graph.reshape(m, &[n])?;
    let fb = graph.reshape(m_aug, &[n])?;
    Ok(graph.cosine_similarity(fa, fb)?)
}

/// Plain-value self-similarity matrix, row-major.
pub fn self_sim_values(signal: &[f64], window: usize) -> Result<Tensor, LossError> {
    let mut g = Graph::new();
    let v = g.constant(Tensor::vector(signal.to_vec()));
    let m = self_sim_matrix(&mut g, v, window)?;
    Ok(g.value(m).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn tone(bpm: f64, len: usize) -> Vec<f64> {
        (0..len)
            .map(|t| (2.0 * PI * bpm / 60.0 * t as f64 / 30.0).sin())
            .collect()
    }

    #[test]
    fn identical_pair_has_zero_loss_and_gradient() {
        let basis = DftBasis::new(256, 30.0, HR_BAND_BPM).unwrap();
        let mut g = Graph::new();
        let a = g.param(Tensor::vector(tone(84.375, 256)));
        let b = g.param(Tensor::vector(tone(84.375, 256)));
        let t = stfc_loss(&mut g, &basis, a, b, &StfcConfig::default()).unwrap();
        assert_eq!(g.scalar(t.loss), 0.0);
        assert!(!t.gate_open);
        let grads = g.backward(t.loss).unwrap();
        for v in [a, b] {
            assert!(grads.get_or_zeros(v).data().iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn bin_aligned_tones_differ_by_two_bins() {
        let basis = DftBasis::new(256, 30.0, HR_BAND_BPM).unwrap();
        let cfg = StfcConfig {
            temperature: Temperature::RelativeToPeak(1e-3),
            ..StfcConfig::default()
        };
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(tone(84.375, 256)));
        let b = g.constant(Tensor::vector(tone(98.4375, 256)));
        let t = stfc_loss(&mut g, &basis, a, b, &cfg).unwrap();
        assert!((g.scalar(t.loss) - 14.0625).abs() < 0.05);
        let closed = StfcConfig { psi_bpm: 20.0, ..cfg };
        let t = stfc_loss(&mut g, &basis, a, b, &closed).unwrap();
        assert_eq!(g.scalar(t.loss), 0.0);
        let t2 = stfc_loss(&mut g, &basis, b, a, &cfg).unwrap();
        let t1 = stfc_loss(&mut g, &basis, a, b, &cfg).unwrap();
        assert_eq!(g.scalar(t1.loss), g.scalar(t2.loss));
    }

    #[test]
    fn degenerate_signal_is_reported() {
        let basis = DftBasis::new(128, 30.0, HR_BAND_BPM).unwrap();
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[128]));
        let b = g.constant(Tensor::vector(tone(90.0, 128)));
        assert!(matches!(
            stfc_loss(&mut g, &basis, a, b, &StfcConfig::default()),
            Err(LossError::Dsp(DspError::DegenerateSignal))
        ));
    }

    #[test]
    fn self_sim_special_cases() {
        let m = self_sim_values(&[1.0; 10], 3).unwrap();
        assert_eq!(m.shape(), &[8, 8]);
        assert!(m.data().iter().all(|v| (v - 1.0).abs() < 1e-12));

        let alt: Vec<f64> = (0..12).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let m = self_sim_values(&alt, 4).unwrap();
        let n = 9;
        for i in 0..n {
            for j in 0..n {
                let want = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
                assert!((m.data()[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bad_window_is_rejected() {
        assert!(matches!(
            self_sim_values(&[1.0, 2.0, 3.0], 4),
            Err(LossError::BadWindow { window: 4, len: 3 })
        ));
        assert!(self_sim_values(&[1.0, 2.0, 3.0], 1).is_err());
    }

    #[test]
    fn stti_reference_values() {
        let mut g = Graph::new();
        let m = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.5, 0.5, 1.0]).unwrap());
        let neg = g.scalar_mul(m, -1.0);
        let orth = g.constant(Tensor::new(vec![2, 2], vec![0.0, 1.0, -1.0, 0.0]).unwrap());
        let same = stti_loss(&mut g, m, m).unwrap();
        let anti = stti_loss(&mut g, m, neg).unwrap();
        let zero = stti_loss(&mut g, m, orth).unwrap();
        assert!((g.scalar(same) - 1.0).abs() < 1e-12);
        assert!((g.scalar(anti) + 1.0).abs() < 1e-12);
        assert!(g.scalar(zero).abs() < 1e-12);
        let small = g.constant(Tensor::zeros(&[3, 3]));
        assert!(stti_loss(&mut g, m, small).is_err());
    }

    #[test]
    fn batch_mean_of_single_pair_is_identity() {
        let mut g = Graph::new();
        let l = g.param(Tensor::scalar(2.5));
        let m = batch_mean(&mut g, &[l]).unwrap();
        assert_eq!(g.scalar(m), 2.5);
        let l2 = g.param(Tensor::scalar(0.5));
        let m = batch_mean(&mut g, &[l, l2]).unwrap();
        assert_eq!(g.scalar(m), 1.5);
    }
}
