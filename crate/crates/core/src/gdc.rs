//! Gradient dynamic control: per-loss parameter gradients, conflict
//! detection, inverse-norm weighting and the SGD-momentum update.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, Var};
use crate::model::BvpNetMini;
use crate::tensor::{Tensor, TensorError};

pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_LAMBDA: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GdcError {
    #[error("gradient length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("degenerate gradients: conflict with both norms zero")]
    DegenerateGradients,
    #[error("non-finite gradient")]
    NonFiniteGradient,
}

/// Flattened parameter gradient of one loss.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientBundle {
    pub values: Vec<f64>,
    pub norm: f64,
    /// The loss reached no parameter.
    pub disconnected: bool,
}

impl GradientBundle {
    pub fn from_values(values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        Self {
            values,
            norm,
            disconnected: false,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Runs a backward pass from `loss` and concatenates the gradients of
/// `params` in order.
pub fn grads_for(graph: &Graph, loss: Var, params: &[Var]) -> Result<GradientBundle, TensorError> {
    let grads = graph.backward(loss)?;
    let disconnected = !params.iter().any(|p| grads.is_reachable(*p));
    let values = params
        .iter()
        .flat_map(|p| grads.get_or_zeros(*p).into_data())
        .collect();
    let mut bundle = GradientBundle::from_values(values);
    bundle.disconnected = disconnected;
    Ok(bundle)
}

pub fn dot(a: &GradientBundle, b: &GradientBundle) -> Result<f64, GdcError> {
    if a.len() != b.len() {
        return Err(GdcError::LengthMismatch(a.len(), b.len()));
    }
    Ok(a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum())
}

/// The two gradients conflict when their dot product is strictly negative.
pub fn detect_conflict(g_stfc: &GradientBundle, g_stti: &GradientBundle) -> Result<bool, GdcError> {
    Ok(dot(g_stfc, g_stti)? < 0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Combined {
    pub gradient: Vec<f64>,
    /// Weight on the STTI gradient.
    pub lambda_stti: f64,
    /// Weight on the STFC gradient.
    pub lambda_stfc: f64,
}

/// Under conflict each gradient is weighted by the other's share of the
/// total norm (`G1` = STTI norm, `G2` = STFC norm); otherwise the STTI
/// gradient is scaled by `lambda_hp` and added to the STFC gradient.
pub fn combine(
    g_stfc: &GradientBundle,
    g_stti: &GradientBundle,
    conflict: bool,
    lambda_hp: f64,
) -> Result<Combined, GdcError> {
    if g_stfc.len() != g_stti.len() {
        return Err(GdcError::LengthMismatch(g_stfc.len(), g_stti.len()));
    }
    let (l1, l2) = if conflict {
        let (g1, g2) = (g_stti.norm, g_stfc.norm);
        let total = g1 + g2;
        if !(total > 0.0) {
            return Err(GdcError::DegenerateGradients);
        }
        (g2 / total, g1 / total)
    } else {
        (lambda_hp, 1.0)
    };
    let gradient = g_stti
        .values
        .iter()
        .zip(&g_stfc.values)
        .map(|(a, b)| l1 * a + l2 * b)
        .collect();
    Ok(Combined {
        gradient,
        lambda_stti: l1,
        lambda_stfc: l2,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            momentum: DEFAULT_MOMENTUM,
        }
    }
}

/// Heavy-ball momentum: `v <- mu v + g`, `theta <- theta - lr v`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: OptimConfig,
    velocity: Vec<Tensor>,
    steps: u64,
}

impl OptimState {
    pub fn new(model: &BvpNetMini, config: OptimConfig) -> Self {
        Self {
            config,
            velocity: model
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
            steps: 0,
        }
    }

    /// Restores saved momentum buffers; shapes must match the model.
    pub fn with_velocity(
        model: &BvpNetMini,
        config: OptimConfig,
        velocity: Vec<Tensor>,
    ) -> Result<Self, TensorError> {
        let mut state = Self::new(model, config);
        if velocity.len() != state.velocity.len() {
            return Err(TensorError::InvalidArgument(format!(
                "{} momentum buffers for {} parameters",
                velocity.len(),
                state.velocity.len()
            )));
        }
        for (v, s) in velocity.iter().zip(&state.velocity) {
            if v.shape() != s.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "momentum",
                    lhs: v.shape().to_vec(),
                    rhs: s.shape().to_vec(),
                });
            }
        }
        state.velocity = velocity;
        Ok(state)
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from a flattened gradient. Non-finite gradients
    /// leave parameters, buffers and the step counter untouched.
    pub fn step(&mut self, model: &mut BvpNetMini, gradient: &[f64]) -> Result<(), GdcError> {
        let n = model.param_count();
        if gradient.len() != n {
            return Err(GdcError::LengthMismatch(gradient.len(), n));
        }
        if !gradient.iter().all(|g| g.is_finite()) {
            return Err(GdcError::NonFiniteGradient);
        }
        let OptimConfig { lr, momentum } = self.config;
        let mut offset = 0;
        for (p, v) in model.params_mut().iter_mut().zip(&mut self.velocity) {
            let len = v.numel();
            let g = &gradient[offset..offset + len];
            for ((theta, vel), gi) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(g) {
                *vel = momentum * *vel + gi;
                *theta -= lr * *vel;
            }
            offset += len;
        }
        self.steps += 1;
        Ok(())
    }
}
