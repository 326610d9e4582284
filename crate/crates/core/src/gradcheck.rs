//! Analytic-versus-finite-difference gradient checks over random instances.

use serde::{Deserialize, Serialize};

use crate::error::{DnhError, Result};
use crate::memory::{MemoryModule, MetaNet};
use crate::meta::finite_difference;
use crate::numerics::{central_fd, Matrix, RngState, Vector};

/// Tolerance on the normwise relative error.
pub const GRADCHECK_TOL: f64 = 1e-5;
const FD_STEP: f64 = 1e-5;
const MAX_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub trials: usize,
    pub worst_rel_err: f64,
    pub passed: bool,
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Test hook that perturbs every analytic gradient before comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Corruption {
    #[default]
    None,
    Perturb,
}

impl Corruption {
    fn apply(self, g: &mut [f64]) {
        if self == Corruption::Perturb {
            if let Some(first) = g.first_mut() {
                *first += 1e-3 * (1.0 + first.abs());
            }
        }
    }
}

fn finish(name: &str, trials: usize, errs: impl Iterator<Item = f64>) -> CheckReport {
    let worst = errs.fold(0.0, f64::max);
    CheckReport { name: name.into(), trials, worst_rel_err: worst, passed: worst < GRADCHECK_TOL }
}

fn level_loss_grad_check(rng: &mut RngState, trials: usize, corrupt: Corruption) -> Result<CheckReport> {
    let mut errs = Vec::with_capacity(trials);
    for _ in 0..trials {
        let d = 1 + rng.below(MAX_DIM);
        let theta = rng.normal_matrix(d, d, 1.0);
        let input = rng.normal_vector(d, 1.0);
        let target = rng.normal_vector(d, 1.0);
        let module = MemoryModule::new(0, 1, theta.clone(), 1.0)?;
        let mut analytic = module.level_loss_grad(&input, &target)?.as_slice().to_vec();
        corrupt.apply(&mut analytic);
        let f = |p: &Vector| {
            let m = MemoryModule::new(0, 1, Matrix::new(d, d, p.as_slice().to_vec()).expect("shape"), 1.0).expect("finite");
            m.level_loss(&input, &target).expect("shapes agree")
        };
        let numeric = central_fd(f, &Vector::from(theta.as_slice().to_vec()), FD_STEP)?;
        errs.push(relative_error(&analytic, numeric.as_slice()));
    }
    Ok(finish("level_loss_grad", trials, errs.into_iter()))
}

fn meta_net_fit_check(rng: &mut RngState, trials: usize, corrupt: Corruption) -> Result<CheckReport> {
    let mut errs = Vec::with_capacity(trials);
    for _ in 0..trials {
        let d = 1 + rng.below(MAX_DIM);
        let theta = rng.normal_matrix(d, d, 1.0);
        let (k, v, c) = (rng.normal_vector(d, 1.0), rng.normal_vector(d, 1.0), rng.normal_vector(d, 1.0));
        let mut net = MetaNet::new(rng.normal_vector(3 * d, 0.3), rng.normal_vector(d, 0.3))?;
        net.prev_w = rng.normal_vector(3 * d, 0.3);
        net.prev_b = rng.normal_vector(d, 0.3);
        let beta_reg = rng.uniform();
        let (gw, gb) = net.fit_gradient(&theta, &k, &v, &c, beta_reg);
        let mut analytic = Vector::concat(&[&gw, &gb]).into_inner();
        corrupt.apply(&mut analytic);
        let f = |p: &Vector| {
            let mut n = net.clone();
            n.psi_w = Vector::from(p.as_slice()[..3 * d].to_vec());
            n.psi_b = Vector::from(p.as_slice()[3 * d..].to_vec());
            n.fit_objective(&theta, &k, &v, &c, beta_reg)
        };
        let numeric = central_fd(f, &Vector::concat(&[&net.psi_w, &net.psi_b]), FD_STEP)?;
        errs.push(relative_error(&analytic, numeric.as_slice()));
    }
    Ok(finish("meta_net_fit_objective", trials, errs.into_iter()))
}

/// Planted quadratics `a (f − b)²` on the frequency interval; the estimator
/// must recover `2a(f − b)` and `2a`, including at the bounds.
fn frequency_quadratic_check(rng: &mut RngState, trials: usize, corrupt: Corruption) -> Result<CheckReport> {
    let (lo, hi, h) = (0.05, 1.0, 0.01);
    let mut errs = Vec::with_capacity(trials);
    for i in 0..trials {
        let a = 0.1 + 5.0 * rng.uniform();
        let b = rng.uniform();
        let f = match i % 4 {
            0 => lo,
            1 => hi,
            _ => lo + (hi - lo) * rng.uniform(),
        };
        let est = finite_difference(|x| Ok(a * (x - b).powi(2)), f, h, lo, hi, true)?;
        let hess = est.hess.ok_or_else(|| DnhError::InvalidState("second difference missing".into()))?;
        let mut analytic = vec![2.0 * a * (f - b), 2.0 * a];
        corrupt.apply(&mut analytic);
        errs.push(relative_error(&analytic, &[est.grad, hess]));
    }
    Ok(finish("frequency_quadratic", trials, errs.into_iter()))
}

/// Runs every check with `trials` random instances each.
pub fn run_gradchecks(seed: u64, trials: usize, corrupt: Corruption) -> Result<Vec<CheckReport>> {
    if trials == 0 {
        return Err(DnhError::Config("trials must be at least 1".into()));
    }
    let mut rng = RngState::new(seed);
    Ok(vec![
        level_loss_grad_check(&mut rng, trials, corrupt)?,
        meta_net_fit_check(&mut rng, trials, corrupt)?,
        frequency_quadratic_check(&mut rng, trials, corrupt)?,
    ])
}
