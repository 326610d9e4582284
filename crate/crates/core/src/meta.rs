//! The evolution operator: shift estimation, the composite meta-loss,
//! growth and pruning triggers, and frequency modulation.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{DnhError, Result};
use crate::hierarchy::{EventKind, Hierarchy, StructuralEvent};
use crate::memory::GateParams;
use crate::numerics::{diagonal_moments, gaussian_kl, Matrix, Vector};

/// Two adjacent FIFO windows of inputs compared by diagonal-Gaussian KL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftEstimator {
    window_old: VecDeque<Vector>,
    window_new: VecDeque<Vector>,
    capacity: usize,
}

impl ShiftEstimator {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(DnhError::Config("shift window must be positive".into()));
        }
        Ok(ShiftEstimator {
            window_old: VecDeque::with_capacity(capacity),
            window_new: VecDeque::with_capacity(capacity + 1),
            capacity,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn is_warm(&self) -> bool {
        self.window_old.len() == self.capacity && self.window_new.len() == self.capacity
    }

    /// Pushes `x` and returns `KL(new ‖ old)`, or 0 until both windows are full.
    pub fn observe(&mut self, x: &Vector) -> Result<f64> {
        if let Some(first) = self.window_new.front().or(self.window_old.front()) {
            x.ensure_dim(first.dim(), "shift observation")?;
        }
        self.window_new.push_back(x.clone());
        if self.window_new.len() > self.capacity {
            let moved = self.window_new.pop_front().expect("non-empty");
            self.window_old.push_back(moved);
            if self.window_old.len() > self.capacity {
                self.window_old.pop_front();
            }
        }
        if !self.is_warm() {
            return Ok(0.0);
        }
        let d = x.dim();
        let (mu_new, var_new) = diagonal_moments(self.window_new.iter(), d);
        let (mu_old, var_old) = diagonal_moments(self.window_old.iter(), d);
        gaussian_kl(&mu_new, &var_new, &mu_old, &var_old)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Growth {
    /// Copy of the innermost level plus a gated outer product of its context.
    Hebbian,
    /// Proximal step from the innermost level along its descent direction.
    Proximal,
}

/// Meta-level configuration. Thresholds stay fixed; `gamma` and `gate` are
/// the continuous entries adjusted by [`update_meta_params`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaParams {
    /// Growth threshold on the smoothed meta-loss.
    pub tau: f64,
    /// Pruning threshold on a level's smoothed gradient norm.
    pub epsilon: f64,
    /// Scale of the surprise drive on frequencies.
    pub gamma: f64,
    /// Step size of the meta-gradient drive on frequencies.
    pub eta_f: f64,
    pub beta_momentum: f64,
    /// Weight of structural change in the meta-loss.
    pub lambda: f64,
    /// Weight of the shift estimate in the meta-loss.
    pub mu: f64,
    /// Growth threshold on the shift estimate.
    pub delta_threshold: f64,
    pub f_min: f64,
    pub f_max: f64,
    pub rollout_k: usize,
    pub fd_h: f64,
    /// Capacity of each shift-estimator window.
    pub window: usize,
    /// Minimum steps between structural events.
    pub cooldown: u64,
    /// Steps between finite-difference meta-gradient estimates.
    pub meta_interval: u64,
    pub second_order: bool,
    /// Floor on the curvature magnitude in the second-order rule.
    pub h_floor: f64,
    pub growth: Growth,
    /// Step size of the proximal growth rule.
    pub proximal_eta: f64,
    pub gate: GateParams,
    pub eta_phi: f64,
    /// EMA factor for the task-loss signal fed to the triggers.
    pub loss_smoothing: f64,
    /// EMA factor for the per-level gradients fed to the pruning rule.
    pub grad_smoothing: f64,
    /// Frequency movement since the last report that emits a frequency event.
    pub freq_event_threshold: f64,
}

impl Default for MetaParams {
    fn default() -> Self {
        MetaParams {
            tau: 0.08,
            epsilon: 0.03,
            gamma: 0.1,
            eta_f: 0.01,
            beta_momentum: 0.9,
            lambda: 0.01,
            mu: 0.1,
            delta_threshold: 0.05,
            f_min: 0.05,
            f_max: 1.0,
            rollout_k: 20,
            fd_h: 0.1,
            window: 1000,
            cooldown: 200,
            meta_interval: 10,
            second_order: false,
            h_floor: 1e-3,
            growth: Growth::Hebbian,
            proximal_eta: 0.1,
            gate: GateParams { w: 1.0, b: -5.0 },
            eta_phi: 1e-4,
            loss_smoothing: 0.95,
            grad_smoothing: 0.99,
            freq_event_threshold: 0.1,
        }
    }
}

impl MetaParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(DnhError::Config(format!("meta: {msg}")));
        let nonneg = |v: f64| v >= 0.0;
        if self.tau.is_nan() {
            return bad("tau must be a number");
        }
        if !nonneg(self.epsilon) || !nonneg(self.gamma) || !self.gamma.is_finite() || !nonneg(self.lambda) || !nonneg(self.mu) {
            return bad("epsilon, gamma, lambda and mu must be >= 0");
        }
        if !nonneg(self.eta_f) || !self.eta_f.is_finite() || !nonneg(self.eta_phi) || !self.eta_phi.is_finite() {
            return bad("eta_f and eta_phi must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.beta_momentum) {
            return bad("beta_momentum must lie in [0, 1)");
        }
        if !(self.delta_threshold > 0.0) {
            return bad("delta_threshold must be > 0");
        }
        if !(self.f_min > 0.0) || !(self.f_max >= self.f_min) || !self.f_max.is_finite() {
            return bad("need 0 < f_min <= f_max");
        }
        if self.rollout_k == 0 || self.window == 0 || self.meta_interval == 0 {
            return bad("rollout_k, window and meta_interval must be positive");
        }
        if !(self.fd_h > 0.0) || !(self.h_floor > 0.0) || !(self.proximal_eta > 0.0) {
            return bad("fd_h, h_floor and proximal_eta must be > 0");
        }
        if !self.gate.w.is_finite() || !self.gate.b.is_finite() {
            return bad("gate parameters must be finite");
        }
        if !(0.0..1.0).contains(&self.loss_smoothing) || !(0.0..1.0).contains(&self.grad_smoothing) {
            return bad("smoothing factors must lie in [0, 1)");
        }
        if !(self.freq_event_threshold > 0.0) {
            return bad("freq_event_threshold must be > 0");
        }
        Ok(())
    }

    /// Disables every adaptive mechanism, leaving a fixed hierarchy.
    pub fn with_adaptation_disabled(&self) -> Self {
        MetaParams {
            tau: f64::INFINITY,
            delta_threshold: f64::INFINITY,
            epsilon: 0.0,
            gamma: 0.0,
            eta_f: 0.0,
            eta_phi: 0.0,
            ..self.clone()
        }
    }
}

/// `task_loss + λ·struct_delta + μ·shift`.
pub fn meta_loss(task_loss: f64, struct_delta: u32, shift: f64, p: &MetaParams) -> f64 {
    task_loss + p.lambda * struct_delta as f64 + p.mu * shift
}

/// Vertices plus edges added or removed by the events.
pub fn structural_delta(events: &[StructuralEvent]) -> u32 {
    events.iter().filter(|e| e.is_structural()).map(|e| 1 + e.edge_changes).sum()
}

/// Finite-difference estimate of a scalar objective's slope in one coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdEstimate {
    pub grad: f64,
    /// Second difference, when requested.
    pub hess: Option<f64>,
    /// True when a bound forced a one-sided difference.
    pub one_sided: bool,
}

/// Differences `objective` around `x` with step `h`, staying inside `[lo, hi]`.
///
/// Uses central differences when both probes fit and falls back to the
/// one-sided stencil on the feasible side otherwise.
pub fn finite_difference<F>(objective: F, x: f64, h: f64, lo: f64, hi: f64, second_order: bool) -> Result<FdEstimate>
where
    F: Fn(f64) -> Result<f64>,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(DnhError::InvalidParameter(format!("fd step must be > 0, got {h}")));
    }
    let span = hi - lo;
    if !(span > 0.0) {
        return Ok(FdEstimate { grad: 0.0, hess: second_order.then_some(0.0), one_sided: true });
    }
    let h = h.min(span / 2.0);
    let finite = |v: f64| {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(DnhError::NumericDomain("finite-difference objective is not finite".into()))
        }
    };
    let up_ok = x + h <= hi;
    let down_ok = x - h >= lo;
    if up_ok && down_ok {
        let plus = finite(objective(x + h)?)?;
        let minus = finite(objective(x - h)?)?;
        let hess = if second_order {
            let mid = finite(objective(x)?)?;
            Some((plus - 2.0 * mid + minus) / (h * h))
        } else {
            None
        };
        return Ok(FdEstimate { grad: (plus - minus) / (2.0 * h), hess, one_sided: false });
    }
    // One-sided: s = +1 probes upward, s = −1 downward. The three-point
    // stencil is exact on quadratics; two points are used only when the far
    // probe leaves the interval.
    let s = if up_ok { 1.0 } else { -1.0 };
    let mid = finite(objective(x)?)?;
    let near = finite(objective(x + s * h)?)?;
    let far_x = x + 2.0 * s * h;
    let far = if far_x >= lo && far_x <= hi { Some(finite(objective(far_x)?)?) } else { None };
    let grad = match far {
        Some(far) => s * (-3.0 * mid + 4.0 * near - far) / (2.0 * h),
        None => s * (near - mid) / h,
    };
    let hess = second_order.then(|| far.map_or(0.0, |far| (far - 2.0 * near + mid) / (h * h)));
    Ok(FdEstimate { grad, hess, one_sided: true })
}

/// Momentum rule with a surprise drive. Returns `(f', m')`.
///
/// `g = −fd_grad`, `m' = β·m + (1−β)·g`, `f' = clamp(f + η_f·g + m' + γ·lss)`.
pub fn modulate_frequency_first_order(f: f64, lss: f64, fd_grad: f64, mom: f64, p: &MetaParams) -> (f64, f64) {
    let g = -fd_grad;
    let m = p.beta_momentum * mom + (1.0 - p.beta_momentum) * g;
    let next = f + p.eta_f * g + m + p.gamma * lss;
    (next.clamp(p.f_min, p.f_max), m)
}

/// Damped Newton step `f' = clamp(f − η_f·fd_grad / max(|fd_hess|, h_floor))`.
pub fn modulate_frequency_second_order(f: f64, fd_grad: f64, fd_hess: f64, p: &MetaParams) -> f64 {
    let curvature = fd_hess.abs().max(p.h_floor);
    let curvature = if curvature.is_finite() { curvature } else { p.h_floor };
    (f - p.eta_f * fd_grad / curvature).clamp(p.f_min, p.f_max)
}

/// Gradient step on the learnable meta-parameters `gamma`, `gate_w`, `gate_b`.
pub fn update_meta_params(phi: &MetaParams, fd_grads: &BTreeMap<String, f64>, eta_phi: f64) -> Result<MetaParams> {
    const GATE_RANGE: f64 = 50.0;
    let mut out = phi.clone();
    for (name, &g) in fd_grads {
        if !g.is_finite() {
            continue;
        }
        match name.as_str() {
            "gamma" => out.gamma = (out.gamma - eta_phi * g).max(0.0),
            "gate_w" => out.gate.w = (out.gate.w - eta_phi * g).clamp(-GATE_RANGE, GATE_RANGE),
            "gate_b" => out.gate.b = (out.gate.b - eta_phi * g).clamp(-GATE_RANGE, GATE_RANGE),
            other => return Err(DnhError::InvalidParameter(format!("{other} is not a learnable meta-parameter"))),
        }
    }
    Ok(out)
}

/// Inputs to one evolution step.
#[derive(Debug, Clone, Copy)]
pub struct EvolveInput<'a> {
    pub x: &'a Vector,
    pub task_loss: f64,
    /// One gradient per level, outermost first.
    pub grads_per_level: &'a [Matrix],
    /// Meta-gradient estimates by module id; levels without one get no gradient drive this step.
    pub freq_grads: &'a BTreeMap<u64, FdEstimate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvolveOutcome {
    pub meta_loss: f64,
    pub shift: f64,
    pub events: Vec<StructuralEvent>,
}

/// State carried by the evolution operator between steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaController {
    pub params: MetaParams,
    pub shift: ShiftEstimator,
    pub freq_momentum: BTreeMap<u64, f64>,
    /// Frequency of each module at its last reported frequency event.
    pub reported_freq: BTreeMap<u64, f64>,
    pub last_structural: Option<u64>,
}

impl MetaController {
    pub fn new(params: MetaParams) -> Result<Self> {
        params.validate()?;
        Ok(MetaController {
            shift: ShiftEstimator::new(params.window)?,
            params,
            freq_momentum: BTreeMap::new(),
            reported_freq: BTreeMap::new(),
            last_structural: None,
        })
    }

    pub fn cooldown_elapsed(&self, t: u64) -> bool {
        self.last_structural.is_none_or(|s| t.saturating_sub(s) >= self.params.cooldown)
    }

    /// Shift estimate and meta-loss without any structural or frequency change.
    pub fn observe(&mut self, x: &Vector, task_loss: f64) -> Result<(f64, f64)> {
        let shift = self.shift.observe(x)?;
        Ok((shift, meta_loss(task_loss, 0, shift, &self.params)))
    }

    /// One application of the evolution operator to `h`.
    pub fn evolve(&mut self, h: &mut Hierarchy, input: &EvolveInput) -> Result<EvolveOutcome> {
        if input.grads_per_level.len() != h.levels() {
            return Err(DnhError::Shape(format!(
                "{} gradients for {} levels",
                input.grads_per_level.len(),
                h.levels()
            )));
        }
        let p = self.params.clone();
        let t = h.t;
        let (shift, provisional) = self.observe(input.x, input.task_loss)?;
        let mut events = Vec::new();

        let cooled = self.cooldown_elapsed(t);
        let wants_growth = provisional > p.tau || shift > p.delta_threshold;
        if wants_growth && cooled && h.levels() < h.l_max {
            let inner = h.modules.last().expect("non-empty");
            let added = match p.growth {
                Growth::Hebbian => h.add_level(p.gate.alpha(inner.last_lss)),
                Growth::Proximal => {
                    let descent = input.grads_per_level.last().expect("aligned").scale(-1.0);
                    let prev = inner.theta.clone();
                    h.add_meta_level(&descent, &prev, p.proximal_eta)
                }
            };
            // Numeric failures of the initialiser are skipped like capacity limits.
            if let Ok(ev) = added {
                events.push(ev);
                self.last_structural = Some(t);
            }
        } else if cooled && h.levels() >= 2 {
            let candidate = input
                .grads_per_level
                .iter()
                .enumerate()
                .skip(1)
                .map(|(i, g)| (g.frobenius(), i + 1))
                .filter(|(n, _)| *n < p.epsilon)
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            if let Some((norm, level)) = candidate {
                let id = h.modules[level - 1].id;
                if let Ok(mut ev) = h.prune_level(level) {
                    ev.detail = norm;
                    events.push(ev);
                    self.freq_momentum.remove(&id);
                    self.reported_freq.remove(&id);
                    self.last_structural = Some(t);
                }
            }
        }

        for m in h.modules.iter_mut() {
            let estimate = input.freq_grads.get(&m.id);
            let old = m.freq;
            m.freq = if p.second_order {
                let stepped = match estimate {
                    Some(e) => modulate_frequency_second_order(m.freq, e.grad, e.hess.unwrap_or(0.0), &p),
                    None => m.freq,
                };
                (stepped + p.gamma * m.last_lss).clamp(p.f_min, p.f_max)
            } else {
                match estimate {
                    Some(e) => {
                        let mom = self.freq_momentum.get(&m.id).copied().unwrap_or(0.0);
                        let (f, mom) = modulate_frequency_first_order(m.freq, m.last_lss, e.grad, mom, &p);
                        self.freq_momentum.insert(m.id, mom);
                        f
                    }
                    None => (m.freq + p.gamma * m.last_lss).clamp(p.f_min, p.f_max),
                }
            };
            let reported = *self.reported_freq.entry(m.id).or_insert(old);
            if (m.freq - reported).abs() >= p.freq_event_threshold {
                self.reported_freq.insert(m.id, m.freq);
                events.push(StructuralEvent {
                    step: t,
                    kind: EventKind::FreqChange,
                    level: m.level,
                    detail: m.freq,
                    edge_changes: 0,
                });
            }
        }

        let final_loss = meta_loss(input.task_loss, structural_delta(&events), shift, &p);
        Ok(EvolveOutcome { meta_loss: final_loss, shift, events })
    }
}
