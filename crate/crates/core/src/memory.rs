//! One level of the hierarchy, viewed as an associative memory.
//!
//! A level stores a square map `theta` from keys to values. Reads are the
//! linear readout `theta · k`; the self-modifying read adds an elementwise
//! modulation produced by a small [`MetaNet`]. Writes are either optimizer
//! steps on the squared-error level loss or gated delta-rule stores.

use serde::{Deserialize, Serialize};

use crate::error::{DnhError, Result};
use crate::numerics::{Matrix, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryModule {
    pub id: u64,
    /// 1 = outermost.
    pub level: usize,
    pub theta: Matrix,
    pub freq: f64,
    /// Gradient momentum on `theta`, used by the proximal-momentum optimizer.
    pub momentum: Matrix,
    /// Scheduler accumulator in `[0, 1)`.
    pub phase: f64,
    /// Most recent input seen by this level during a forward pass.
    pub context: Vector,
    pub last_lss: f64,
}

impl MemoryModule {
    pub fn new(id: u64, level: usize, theta: Matrix, freq: f64) -> Result<Self> {
        if theta.rows() != theta.cols() {
            return Err(DnhError::Shape(format!(
                "level parameters must be square, got {}x{}",
                theta.rows(),
                theta.cols()
            )));
        }
        if !theta.is_finite() {
            return Err(DnhError::NumericDomain("non-finite level parameters".into()));
        }
        let d = theta.rows();
        Ok(MemoryModule {
            id,
            level,
            momentum: Matrix::zeros(d, d),
            theta,
            freq,
            phase: 0.0,
            context: Vector::zeros(d),
            last_lss: 0.0,
        })
    }

    pub fn identity(id: u64, level: usize, d: usize, freq: f64) -> Self {
        MemoryModule::new(id, level, Matrix::identity(d), freq).expect("identity is well formed")
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.theta.rows()
    }

    /// Linear readout `theta · k`.
    pub fn query(&self, k: &Vector) -> Result<Vector> {
        k.ensure_dim(self.dim(), "query key")?;
        Ok(self.theta.matvec(k))
    }

    /// Self-modifying read: `theta · k + g(k, v, c) ⊙ v`.
    pub fn smm_forward(&self, net: &MetaNet, k: &Vector, v: &Vector, c: &Vector) -> Result<Vector> {
        let d = self.dim();
        k.ensure_dim(d, "smm key")?;
        v.ensure_dim(d, "smm value")?;
        c.ensure_dim(d, "smm context")?;
        net.ensure_dim(d)?;
        let delta = net.modulation(k, v, c);
        Ok(self.theta.matvec(k).add(&delta.hadamard(v)))
    }

    /// Delta-rule write `theta ← theta + v kᵀ + alpha · meta_grad`.
    pub fn delta_rule_update(&self, k: &Vector, v: &Vector, alpha: f64, meta_grad: &Matrix) -> Result<MemoryModule> {
        let d = self.dim();
        k.ensure_dim(d, "delta-rule key")?;
        v.ensure_dim(d, "delta-rule value")?;
        self.theta.ensure_same_shape(meta_grad, "delta-rule meta gradient")?;
        if !(0.0..=1.0).contains(&alpha) {
            return Err(DnhError::InvalidParameter(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        let mut next = self.clone();
        next.theta.add_outer(v, k, 1.0);
        next.theta.add_scaled(meta_grad, alpha);
        if !next.theta.is_finite() {
            return Err(DnhError::NumericDomain("delta-rule update produced non-finite parameters".into()));
        }
        Ok(next)
    }

    /// Norm of the level-loss gradient at the level output, `‖theta·q − target‖`.
    /// The value is also stored in `last_lss`.
    pub fn local_surprise(&mut self, q: &Vector, target: &Vector) -> Result<f64> {
        target.ensure_dim(self.dim(), "surprise target")?;
        let y = self.query(q)?;
        let lss = y.sub(target).norm();
        if !lss.is_finite() {
            return Err(DnhError::NumericDomain("non-finite surprise".into()));
        }
        self.last_lss = lss;
        Ok(lss)
    }

    /// Gradient of `½‖theta·input − target‖²` with respect to `theta`.
    pub fn level_loss_grad(&self, input: &Vector, target: &Vector) -> Result<Matrix> {
        target.ensure_dim(self.dim(), "level-loss target")?;
        let residual = self.query(input)?.sub(target);
        let mut g = Matrix::zeros(self.dim(), self.dim());
        g.add_outer(&residual, input, 1.0);
        Ok(g)
    }

    pub fn level_loss(&self, input: &Vector, target: &Vector) -> Result<f64> {
        target.ensure_dim(self.dim(), "level-loss target")?;
        Ok(0.5 * self.query(input)?.sub(target).norm_sq())
    }
}

/// Meta-network producing the elementwise modulation
/// `Δ_i = tanh(psi_w · [k; v; c] + psi_b_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaNet {
    pub psi_w: Vector,
    pub psi_b: Vector,
    pub prev_w: Vector,
    pub prev_b: Vector,
}

impl MetaNet {
    pub fn zeros(d: usize) -> Self {
        MetaNet {
            psi_w: Vector::zeros(3 * d),
            psi_b: Vector::zeros(d),
            prev_w: Vector::zeros(3 * d),
            prev_b: Vector::zeros(d),
        }
    }

    pub fn new(psi_w: Vector, psi_b: Vector) -> Result<Self> {
        if psi_w.dim() != 3 * psi_b.dim() {
            return Err(DnhError::Shape(format!(
                "meta-net weights need 3d = {} entries, got {}",
                3 * psi_b.dim(),
                psi_w.dim()
            )));
        }
        Ok(MetaNet {
            prev_w: psi_w.clone(),
            prev_b: psi_b.clone(),
            psi_w,
            psi_b,
        })
    }

    pub fn dim(&self) -> usize {
        self.psi_b.dim()
    }

    fn ensure_dim(&self, d: usize) -> Result<()> {
        if self.psi_b.dim() != d || self.psi_w.dim() != 3 * d || self.prev_b.dim() != d || self.prev_w.dim() != 3 * d {
            return Err(DnhError::Shape(format!("meta-net is not sized for dim {d}")));
        }
        Ok(())
    }

    pub fn modulation(&self, k: &Vector, v: &Vector, c: &Vector) -> Vector {
        let s = self.psi_w.dot(&Vector::concat(&[k, v, c]));
        Vector::from(self.psi_b.as_slice().iter().map(|b| (s + b).tanh()).collect::<Vec<_>>())
    }

    /// `‖M(k) − v‖² + beta ‖psi − psi_prev‖²` for the module's current `theta`.
    pub fn fit_objective(&self, theta: &Matrix, k: &Vector, v: &Vector, c: &Vector, beta_reg: f64) -> f64 {
        let delta = self.modulation(k, v, c);
        let out = theta.matvec(k).add(&delta.hadamard(v));
        let fit = out.sub(v).norm_sq();
        let reg = self.psi_w.sub(&self.prev_w).norm_sq() + self.psi_b.sub(&self.prev_b).norm_sq();
        fit + beta_reg * reg
    }

    /// Analytic gradient of [`MetaNet::fit_objective`], returned as `(d/dpsi_w, d/dpsi_b)`.
    pub fn fit_gradient(&self, theta: &Matrix, k: &Vector, v: &Vector, c: &Vector, beta_reg: f64) -> (Vector, Vector) {
        let z = Vector::concat(&[k, v, c]);
        let s = self.psi_w.dot(&z);
        let base = theta.matvec(k);
        let d = self.dim();
        let mut grad_b = Vector::zeros(d);
        let mut common = 0.0;
        for i in 0..d {
            let t = (s + self.psi_b[i]).tanh();
            let r = base[i] + t * v[i] - v[i];
            let g = 2.0 * r * v[i] * (1.0 - t * t);
            grad_b[i] = g + 2.0 * beta_reg * (self.psi_b[i] - self.prev_b[i]);
            common += g;
        }
        let grad_w = z.scale(common).add(&self.psi_w.sub(&self.prev_w).scale(2.0 * beta_reg));
        (grad_w, grad_b)
    }

    /// Gradient descent on the fit objective, anchored at the parameters held
    /// before the first step.
    #[allow(clippy::too_many_arguments)]
    pub fn fit(&self, k: &Vector, v: &Vector, c: &Vector, theta: &Matrix, beta_reg: f64, eta: f64, steps: usize) -> Result<MetaNet> {
        let d = theta.rows();
        self.ensure_dim(d)?;
        for (x, name) in [(k, "key"), (v, "value"), (c, "context")] {
            x.ensure_dim(d, name)?;
        }
        if !(beta_reg >= 0.0) || !(eta > 0.0) || steps == 0 {
            return Err(DnhError::InvalidParameter(format!(
                "meta-net fit needs beta_reg >= 0, eta > 0, steps >= 1 (got {beta_reg}, {eta}, {steps})"
            )));
        }
        let mut net = self.clone();
        net.prev_w = net.psi_w.clone();
        net.prev_b = net.psi_b.clone();
        let start = net.fit_objective(theta, k, v, c, beta_reg);
        for _ in 0..steps {
            let (gw, gb) = net.fit_gradient(theta, k, v, c, beta_reg);
            net.psi_w = net.psi_w.sub(&gw.scale(eta));
            net.psi_b = net.psi_b.sub(&gb.scale(eta));
            let current = net.fit_objective(theta, k, v, c, beta_reg);
            if !current.is_finite() || current > 10.0 * start.max(f64::MIN_POSITIVE) {
                return Err(DnhError::StepSize { start, current });
            }
        }
        Ok(net)
    }
}

/// Surprise gate `alpha = sigmoid(w · lss + b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub w: f64,
    pub b: f64,
}

impl GateParams {
    pub fn alpha(&self, lss: f64) -> f64 {
        sigmoid(self.w * lss + self.b)
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
