//! The inner training loop: one forward pass, per-level gradients and
//! surprise signals, and optimizer steps on the levels that are due.
//!
//! Each level `ℓ` is trained on its own squared-error problem. The level's
//! local target is chosen so that the level-loss gradient equals the
//! backpropagated gradient of the task loss: with `δ¹ = y − target` and
//! `δ^{ℓ+1} = (θ^ℓ)ᵀ δ^ℓ`, the target for level `ℓ` is `θ^ℓ c^ℓ − δ^ℓ`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{DnhError, Result};
use crate::hierarchy::{FreqBounds, Hierarchy};
use crate::meta::{finite_difference, FdEstimate};
use crate::numerics::{Matrix, Vector};
use crate::optim::{LevelOptimizer, OptimizerConfig};
use crate::streams::Sample;

/// Everything one inner step produced.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// `½‖y − target‖²` on the pre-update parameters.
    pub task_loss: f64,
    /// Level-loss gradient per level, outermost first.
    pub grads: Vec<Matrix>,
    /// Local surprise per level, outermost first.
    pub lss: Vec<f64>,
    /// Levels updated this step.
    pub due: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Learner {
    pub hierarchy: Hierarchy,
    pub optimizers: BTreeMap<u64, LevelOptimizer>,
    pub optimizer_config: OptimizerConfig,
}

impl Learner {
    pub fn new(hierarchy: Hierarchy, optimizer_config: OptimizerConfig) -> Self {
        let mut l = Learner { hierarchy, optimizers: BTreeMap::new(), optimizer_config };
        l.sync_optimizers();
        l
    }

    /// Creates optimizer state for new levels and drops state of removed ones.
    pub fn sync_optimizers(&mut self) {
        let d = self.hierarchy.dim();
        let live: Vec<u64> = self.hierarchy.modules.iter().map(|m| m.id).collect();
        self.optimizers.retain(|id, _| live.contains(id));
        for id in live {
            self.optimizers.entry(id).or_insert_with(|| LevelOptimizer::new(d, d, &self.optimizer_config));
        }
    }

    /// Task loss of the current parameters without touching any state.
    pub fn loss(&self, x: &Vector, target: &Vector) -> Result<f64> {
        Ok(0.5 * self.hierarchy.predict(x)?.sub(target).norm_sq())
    }

    /// Mean task loss over a batch of samples.
    pub fn mean_loss(&self, samples: &[Sample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(DnhError::InsufficientData("empty evaluation set".into()));
        }
        let mut total = 0.0;
        for s in samples {
            total += self.loss(&s.x, &s.target)?;
        }
        Ok(total / samples.len() as f64)
    }

    /// One inner step on `(x, target)`.
    pub fn step(&mut self, x: &Vector, target: &Vector) -> Result<StepOutcome> {
        let h = &mut self.hierarchy;
        let y = h.forward(x)?;
        target.ensure_dim(y.dim(), "task target")?;
        let mut delta = y.sub(target);
        let task_loss = 0.5 * delta.norm_sq();

        let levels = h.levels();
        let mut grads = Vec::with_capacity(levels);
        let mut lss = Vec::with_capacity(levels);
        for m in h.modules.iter_mut() {
            let c = m.context.clone();
            let local_target = m.theta.matvec(&c).sub(&delta);
            grads.push(m.level_loss_grad(&c, &local_target)?);
            lss.push(m.local_surprise(&c, &local_target)?);
            delta = m.theta.matvec_t(&delta);
        }

        let due = h.due_modules();
        for &l in &due {
            let m = &mut h.modules[l - 1];
            let opt = self.optimizers.get_mut(&m.id).ok_or_else(|| DnhError::InvalidState(format!("no optimizer for level {l}")))?;
            let update = opt.update(&grads[l - 1])?;
            m.theta.add_scaled(&update, 1.0);
            m.momentum = opt.momentum().clone();
        }
        h.t += 1;

        if !task_loss.is_finite() || h.modules.iter().any(|m| !m.theta.is_finite()) {
            return Err(DnhError::NumericDomain("training step produced non-finite values".into()));
        }
        Ok(StepOutcome { task_loss, grads, lss, due })
    }

    /// Mean task loss of `samples.len()` inner steps on a copy, measured
    /// before each step's update. The live learner is untouched.
    pub fn rollout_loss(&self, samples: &[Sample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(DnhError::InvalidParameter("empty rollout".into()));
        }
        let mut copy = self.clone();
        let mut total = 0.0;
        for s in samples {
            total += copy.step(&s.x, &s.target)?.task_loss;
        }
        Ok(total / samples.len() as f64)
    }

    /// Finite-difference sensitivity of the rollout loss to the frequency of
    /// `level`, holding structure fixed during the rollouts.
    pub fn fd_frequency_gradient(&self, level: usize, samples: &[Sample], fd_h: f64, second_order: bool) -> Result<FdEstimate> {
        let f = self.hierarchy.level(level)?.freq;
        let bounds: FreqBounds = self.hierarchy.bounds;
        let objective = |freq: f64| {
            let mut copy = self.clone();
            copy.hierarchy.modules[level - 1].freq = freq;
            copy.rollout_loss(samples)
        };
        finite_difference(objective, f, fd_h, bounds.min, bounds.max, second_order)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::MemoryModule;
    use crate::numerics::{central_fd, RngState};
    use crate::optim::OptimizerKind;

    fn bounds() -> FreqBounds {
        FreqBounds::new(0.05, 1.0).unwrap()
    }

    fn learner(thetas: Vec<Matrix>, cfg: OptimizerConfig) -> Learner {
        let modules = thetas.into_iter().enumerate().map(|(i, t)| MemoryModule::new(i as u64, i + 1, t, 1.0).unwrap()).collect();
        Learner::new(Hierarchy::from_modules(modules, 5, bounds()).unwrap(), cfg)
    }

    #[test]
    fn level_gradients_match_finite_differences_of_task_loss() {
        let mut rng = RngState::new(11);
        for _ in 0..20 {
            let d = 3;
            let thetas: Vec<Matrix> = (0..3).map(|_| rng.normal_matrix(d, d, 0.7)).collect();
            let x = rng.normal_vector(d, 1.0);
            let target = rng.normal_vector(d, 1.0);
            let mut l = learner(thetas.clone(), OptimizerConfig::default());
            let out = l.step(&x, &target).unwrap();
            for level in 0..3 {
                let flat = Vector::from(thetas[level].as_slice().to_vec());
                let f = |p: &Vector| {
                    let mut th = thetas.clone();
                    th[level] = Matrix::new(d, d, p.as_slice().to_vec()).unwrap();
                    learner(th, OptimizerConfig::default()).loss(&x, &target).unwrap()
                };
                let fd = central_fd(f, &flat, 1e-5).unwrap();
                let analytic = out.grads[level].as_slice();
                for (a, b) in analytic.iter().zip(fd.as_slice()) {
                    assert!((a - b).abs() <= 1e-6 * (1.0 + a.abs()), "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn surprise_is_backpropagated_output_gradient_norm() {
        let mut rng = RngState::new(12);
        let thetas: Vec<Matrix> = (0..2).map(|_| rng.normal_matrix(2, 2, 1.0)).collect();
        let x = rng.normal_vector(2, 1.0);
        let target = rng.normal_vector(2, 1.0);
        let mut l = learner(thetas.clone(), OptimizerConfig::default());
        let out = l.step(&x, &target).unwrap();
        let y = thetas[0].matvec(&thetas[1].matvec(&x));
        let d1 = y.sub(&target);
        assert!((out.lss[0] - d1.norm()).abs() < 1e-12);
        assert!((out.lss[1] - thetas[0].matvec_t(&d1).norm()).abs() < 1e-12);
        assert!((out.task_loss - 0.5 * d1.norm_sq()).abs() < 1e-15);
    }

    #[test]
    fn only_due_levels_move() {
        let cfg = OptimizerConfig { sigma2: 0.0, ..Default::default() };
        let mut l = learner(vec![Matrix::identity(2), Matrix::identity(2)], cfg);
        l.hierarchy.modules[1].freq = 0.5;
        let x = Vector::from(vec![1.0, 0.5]);
        let t = Vector::from(vec![2.0, 0.0]);
        let out = l.step(&x, &t).unwrap();
        assert_eq!(out.due, vec![1]);
        assert_eq!(l.hierarchy.modules[1].theta, Matrix::identity(2));
        assert_ne!(l.hierarchy.modules[0].theta, Matrix::identity(2));
        let out = l.step(&x, &t).unwrap();
        assert_eq!(out.due, vec![1, 2]);
        assert_ne!(l.hierarchy.modules[1].theta, Matrix::identity(2));
        assert_eq!(l.hierarchy.t, 2);
    }

    #[test]
    fn realizable_target_is_learned() {
        let mut rng = RngState::new(13);
        let teacher = Matrix::identity(3).add(&rng.normal_matrix(3, 3, 0.2));
        for kind in [OptimizerKind::Eadam, OptimizerKind::ProximalMomentum] {
            let cfg = OptimizerConfig { kind, lr: 1e-3, sigma2: 0.0, momentum_eta: 0.01, ..Default::default() };
            let mut l = learner(vec![Matrix::identity(3), Matrix::identity(3)], cfg);
            let mut last = 0.0;
            for _ in 0..10_000 {
                let x = rng.normal_vector(3, 1.0);
                last = l.step(&x, &teacher.matvec(&x)).unwrap().task_loss;
            }
            assert!(last < 1e-3, "{kind:?}: {last}");
        }
    }

    #[test]
    fn rollouts_leave_learner_untouched() {
        let mut rng = RngState::new(14);
        let l = learner(vec![Matrix::identity(2), Matrix::identity(2)], OptimizerConfig::default());
        let samples: Vec<Sample> = (0..5)
            .map(|t| Sample { x: rng.normal_vector(2, 1.0), target: rng.normal_vector(2, 1.0), t, segment_id: 0 })
            .collect();
        let before = l.clone();
        l.rollout_loss(&samples).unwrap();
        l.fd_frequency_gradient(2, &samples, 0.1, true).unwrap();
        assert_eq!(l, before);
        assert!(matches!(l.rollout_loss(&[]), Err(DnhError::InvalidParameter(_))));
    }

    #[test]
    fn optimizers_follow_structure() {
        let mut l = learner(vec![Matrix::identity(2), Matrix::identity(2)], OptimizerConfig::default());
        l.hierarchy.add_level(0.0).unwrap();
        l.sync_optimizers();
        assert_eq!(l.optimizers.len(), 3);
        l.hierarchy.prune_level(2).unwrap();
        l.sync_optimizers();
        assert_eq!(l.optimizers.keys().copied().collect::<Vec<_>>(), vec![0, 2]);
    }
}
