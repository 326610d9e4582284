//! Per-level optimizers: proximal momentum and Evolvable Adam.
//!
//! Both optimizers return the additive change to apply to a level's
//! parameters, so the training loop does not care which one is configured.

use serde::{Deserialize, Serialize};

use crate::error::{DnhError, Result};
use crate::numerics::{normal_sample, Matrix, RngState};

/// Upper clamp for the evolvable decay rates.
pub const BETA_CAP: f64 = 1.0 - 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Eadam,
    ProximalMomentum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub bias_correction: bool,
    /// Initial exploration variance for the decay rates.
    pub sigma2: f64,
    /// Step size of the meta-gradient drive on the decay rates.
    pub eta_beta: f64,
    /// Step size of the proximal momentum problem.
    pub momentum_eta: f64,
    /// Momentum retained between steps before the proximal update.
    pub momentum_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Eadam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            bias_correction: true,
            sigma2: 1e-6,
            eta_beta: 0.0,
            momentum_eta: 0.005,
            momentum_decay: 0.9,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DnhError::Config(format!("optimizer: {msg}")));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return bad("eps must be > 0".into());
        }
        if !(self.sigma2 >= 0.0) || !self.sigma2.is_finite() || !(self.eta_beta >= 0.0) || !self.eta_beta.is_finite() {
            return bad("sigma2 and eta_beta must be finite and >= 0".into());
        }
        if !(self.momentum_eta > 0.0) || !self.momentum_eta.is_finite() {
            return bad("momentum_eta must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.momentum_decay) {
            return bad("momentum_decay must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// Momentum buffer for the proximal rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentumState {
    pub m: Matrix,
    pub eta: f64,
}

impl MomentumState {
    pub fn new(rows: usize, cols: usize, eta: f64) -> Self {
        MomentumState { m: Matrix::zeros(rows, cols), eta }
    }

    /// Minimiser of `−⟨m', grad⟩ + ‖m' − m‖² / (2·eta)`, which is `m + eta·grad`.
    pub fn proximal_step(&self, grad: &Matrix) -> Result<MomentumState> {
        self.m.ensure_same_shape(grad, "momentum gradient")?;
        let mut m = self.m.clone();
        m.add_scaled(grad, self.eta);
        Ok(MomentumState { m, eta: self.eta })
    }

    /// Value of the proximal objective at `candidate`.
    pub fn objective(&self, candidate: &Matrix, grad: &Matrix) -> f64 {
        -candidate.dot(grad) + candidate.sub(&self.m).frobenius_sq() / (2.0 * self.eta)
    }
}

/// Adam whose decay rates drift under a meta-gradient plus Gaussian exploration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EAdamState {
    pub m: Matrix,
    pub v: Matrix,
    pub beta1: f64,
    pub beta2: f64,
    pub sigma2: f64,
    pub eta_beta: f64,
    pub step_count: u64,
    pub lr: f64,
    pub eps: f64,
    pub bias_correction: bool,
}

impl EAdamState {
    pub fn new(rows: usize, cols: usize, cfg: &OptimizerConfig) -> Self {
        EAdamState {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            sigma2: cfg.sigma2,
            eta_beta: cfg.eta_beta,
            step_count: 0,
            lr: cfg.lr,
            eps: cfg.eps,
            bias_correction: cfg.bias_correction,
        }
    }

    /// Updates the moments with `grad` and returns the parameter change
    /// `−lr · m̂ / (√v̂ + eps)`.
    pub fn step(&mut self, grad: &Matrix) -> Result<Matrix> {
        self.m.ensure_same_shape(grad, "adam gradient")?;
        self.step_count += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let (c1, c2) = if self.bias_correction {
            let t = self.step_count.min(i32::MAX as u64) as i32;
            (1.0 - b1.powi(t), 1.0 - b2.powi(t))
        } else {
            (1.0, 1.0)
        };
        let mut update = Matrix::zeros(grad.rows(), grad.cols());
        let g = grad.as_slice();
        let m = self.m.as_mut_slice();
        let v = self.v.as_mut_slice();
        for (i, u) in update.as_mut_slice().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *u = -self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(update)
    }

    /// Drifts the decay rates by `−eta_beta · grad + ζ` with `ζ ~ N(0, sigma2)`,
    /// then shrinks the exploration variance by `exp(−gamma · lss)`.
    pub fn evolve(&mut self, lss: f64, beta_fd_grads: (f64, f64), gamma: f64, rng: &mut RngState) -> Result<()> {
        if !(lss >= 0.0) {
            return Err(DnhError::InvalidParameter(format!("surprise must be >= 0, got {lss}")));
        }
        let z1 = normal_sample(rng, 0.0, self.sigma2)?;
        let z2 = normal_sample(rng, 0.0, self.sigma2)?;
        self.beta1 = (self.beta1 - self.eta_beta * beta_fd_grads.0 + z1).clamp(0.0, BETA_CAP);
        self.beta2 = (self.beta2 - self.eta_beta * beta_fd_grads.1 + z2).clamp(0.0, BETA_CAP);
        self.sigma2 *= (-gamma * lss).exp();
        Ok(())
    }
}

/// The optimizer attached to one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LevelOptimizer {
    Eadam(EAdamState),
    Momentum { state: MomentumState, decay: f64 },
}

impl LevelOptimizer {
    pub fn new(rows: usize, cols: usize, cfg: &OptimizerConfig) -> Self {
        match cfg.kind {
            OptimizerKind::Eadam => LevelOptimizer::Eadam(EAdamState::new(rows, cols, cfg)),
            OptimizerKind::ProximalMomentum => LevelOptimizer::Momentum {
                state: MomentumState::new(rows, cols, cfg.momentum_eta),
                decay: cfg.momentum_decay,
            },
        }
    }

    /// Returns the change to add to the level parameters.
    pub fn update(&mut self, grad: &Matrix) -> Result<Matrix> {
        match self {
            LevelOptimizer::Eadam(s) => s.step(grad),
            LevelOptimizer::Momentum { state, decay } => {
                state.m = state.m.scale(*decay);
                *state = state.proximal_step(grad)?;
                Ok(state.m.scale(-1.0))
            }
        }
    }

    /// First-moment buffer, mirrored into the level's momentum field.
    pub fn momentum(&self) -> &Matrix {
        match self {
            LevelOptimizer::Eadam(s) => &s.m,
            LevelOptimizer::Momentum { state, .. } => &state.m,
        }
    }

    pub fn eadam_mut(&mut self) -> Option<&mut EAdamState> {
        match self {
            LevelOptimizer::Eadam(s) => Some(s),
            LevelOptimizer::Momentum { .. } => None,
        }
    }
}
