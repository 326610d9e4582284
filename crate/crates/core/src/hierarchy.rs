//! The time-varying level graph.
//!
//! Levels are stored outermost first (`modules[0]` is level 1). The forward
//! pass applies the innermost level first and the outermost last, so
//! `y = θ¹ · θ² · … · θᴸ · x`. Edges always form the chain
//! `{(ℓ, ℓ+1)}`; growth appends a new innermost level and pruning rebuilds
//! the chain over the survivors.

use std::fmt;

use petgraph::algo::toposort;
use petgraph::graphmap::DiGraphMap;
use serde::{Deserialize, Serialize};

use crate::error::{DnhError, Result};
use crate::memory::MemoryModule;
use crate::numerics::{Matrix, Vector};

pub const SNAPSHOT_SCHEMA: &str = "dnh-hierarchy/1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreqBounds {
    pub min: f64,
    pub max: f64,
}

impl FreqBounds {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min > 0.0) || !(max >= min) || !max.is_finite() {
            return Err(DnhError::Config(format!(
                "frequency bounds need 0 < f_min <= f_max, got [{min}, {max}]"
            )));
        }
        Ok(FreqBounds { min, max })
    }

    pub fn clamp(&self, f: f64) -> f64 {
        f.clamp(self.min, self.max)
    }

    pub fn contains(&self, f: f64) -> bool {
        f >= self.min && f <= self.max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Add,
    Prune,
    FreqChange,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventKind::Add => "add",
            EventKind::Prune => "prune",
            EventKind::FreqChange => "freq_change",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralEvent {
    pub step: u64,
    pub kind: EventKind,
    pub level: usize,
    /// New frequency for additions and frequency changes; removed-gradient norm for prunes.
    pub detail: f64,
    /// Edges added plus edges removed by this event.
    pub edge_changes: u32,
}

impl StructuralEvent {
    pub fn is_structural(&self) -> bool {
        matches!(self.kind, EventKind::Add | EventKind::Prune)
    }
}

impl fmt::Display for StructuralEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind, self.level)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Empty,
    TooManyLevels { levels: usize, l_max: usize },
    Cycle,
    NonContiguous { index: usize, level: usize },
    DuplicateId(u64),
    DanglingEdge(usize, usize),
    Degree { level: usize, degree: usize, d_max: usize },
    FrequencyOutOfBounds { level: usize, freq: f64 },
    Shape { level: usize },
    NonFinite { level: usize },
    Phase { level: usize, phase: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Empty => write!(f, "hierarchy has no levels"),
            Violation::TooManyLevels { levels, l_max } => write!(f, "{levels} levels exceeds cap {l_max}"),
            Violation::Cycle => write!(f, "edge set contains a cycle"),
            Violation::NonContiguous { index, level } => write!(f, "slot {index} holds level {level}"),
            Violation::DuplicateId(id) => write!(f, "duplicate module id {id}"),
            Violation::DanglingEdge(a, b) => write!(f, "edge ({a}, {b}) references a missing level"),
            Violation::Degree { level, degree, d_max } => write!(f, "level {level} has degree {degree} > {d_max}"),
            Violation::FrequencyOutOfBounds { level, freq } => write!(f, "level {level} frequency {freq} out of bounds"),
            Violation::Shape { level } => write!(f, "level {level} has inconsistent shapes"),
            Violation::NonFinite { level } => write!(f, "level {level} holds non-finite parameters"),
            Violation::Phase { level, phase } => write!(f, "level {level} phase {phase} outside [0, 1)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hierarchy {
    pub modules: Vec<MemoryModule>,
    pub edges: Vec<(usize, usize)>,
    pub t: u64,
    pub l_max: usize,
    pub next_id: u64,
    pub bounds: FreqBounds,
    pub d_max: usize,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    schema: String,
    dim: usize,
    hierarchy: Hierarchy,
}

fn chain_edges(levels: usize) -> Vec<(usize, usize)> {
    (1..levels).map(|l| (l, l + 1)).collect()
}

impl Hierarchy {
    /// Chain of identity levels with the given frequencies (outermost first).
    pub fn new(d: usize, freqs: &[f64], l_max: usize, bounds: FreqBounds) -> Result<Self> {
        if d == 0 {
            return Err(DnhError::Config("dimension must be positive".into()));
        }
        if freqs.is_empty() || freqs.len() > l_max {
            return Err(DnhError::Config(format!(
                "need 1 <= initial levels ({}) <= l_max ({l_max})",
                freqs.len()
            )));
        }
        let modules = freqs
            .iter()
            .enumerate()
            .map(|(i, &f)| MemoryModule::identity(i as u64, i + 1, d, bounds.clamp(f)))
            .collect();
        Hierarchy::from_modules(modules, l_max, bounds)
    }

    /// Wraps hand-built modules in a chain. Levels and ids are taken as given.
    pub fn from_modules(modules: Vec<MemoryModule>, l_max: usize, bounds: FreqBounds) -> Result<Self> {
        if modules.is_empty() {
            return Err(DnhError::InvalidState("hierarchy needs at least one level".into()));
        }
        let next_id = modules.iter().map(|m| m.id).max().unwrap_or(0) + 1;
        Ok(Hierarchy {
            edges: chain_edges(modules.len()),
            modules,
            t: 0,
            l_max,
            next_id,
            bounds,
            d_max: 2,
        })
    }

    #[inline]
    pub fn levels(&self) -> usize {
        self.modules.len()
    }

    pub fn dim(&self) -> usize {
        self.modules.first().map_or(0, MemoryModule::dim)
    }

    pub fn level(&self, level: usize) -> Result<&MemoryModule> {
        level
            .checked_sub(1)
            .and_then(|i| self.modules.get(i))
            .ok_or(DnhError::Range { index: level, len: self.levels() })
    }

    pub fn freqs(&self) -> Vec<f64> {
        self.modules.iter().map(|m| m.freq).collect()
    }

    /// Applies level L first and level 1 last, recording each level's input as its context.
    pub fn forward(&mut self, x: &Vector) -> Result<Vector> {
        if self.modules.is_empty() {
            return Err(DnhError::InvalidState("forward on empty hierarchy".into()));
        }
        x.ensure_dim(self.dim(), "forward input")?;
        let mut h = x.clone();
        for m in self.modules.iter_mut().rev() {
            let next = m.theta.matvec(&h);
            m.context = h;
            h = next;
        }
        Ok(h)
    }

    /// Forward pass without recording contexts.
    pub fn predict(&self, x: &Vector) -> Result<Vector> {
        if self.modules.is_empty() {
            return Err(DnhError::InvalidState("forward on empty hierarchy".into()));
        }
        x.ensure_dim(self.dim(), "forward input")?;
        Ok(self.modules.iter().rev().fold(x.clone(), |h, m| m.theta.matvec(&h)))
    }

    /// Advances every level's phase accumulator and returns the levels due this step.
    ///
    /// Rates are relative to the fastest level, which is therefore due every step.
    pub fn due_modules(&mut self) -> Vec<usize> {
        let f_top = self.modules.iter().map(|m| m.freq).fold(0.0, f64::max);
        if f_top <= 0.0 {
            return Vec::new();
        }
        let mut due = Vec::new();
        for (i, m) in self.modules.iter_mut().enumerate() {
            m.phase += m.freq / f_top;
            if m.phase >= 1.0 {
                m.phase -= 1.0;
                // Guard against the accumulator creeping to exactly 1.0 through rounding.
                if m.phase >= 1.0 {
                    m.phase = 0.0;
                }
                due.push(i + 1);
            }
        }
        due
    }

    fn ensure_capacity(&self) -> Result<()> {
        if self.levels() >= self.l_max {
            return Err(DnhError::Capacity(self.levels()));
        }
        Ok(())
    }

    fn push_level(&mut self, theta: Matrix, freq: f64) -> StructuralEvent {
        let level = self.levels() + 1;
        let id = self.next_id;
        self.next_id += 1;
        let mut m = MemoryModule::new(id, level, theta, freq).expect("shapes checked by caller");
        m.context = Vector::zeros(m.dim());
        self.modules.push(m);
        self.edges.push((level - 1, level));
        StructuralEvent {
            step: self.t,
            kind: EventKind::Add,
            level,
            detail: freq,
            edge_changes: 1,
        }
    }

    /// Hebbian growth: appends `θᴸ + alpha · cᴸ (cᴸ)ᵀ` as the new innermost
    /// level, running at the mean of the existing frequencies.
    pub fn add_level(&mut self, alpha: f64) -> Result<StructuralEvent> {
        self.ensure_capacity()?;
        if !alpha.is_finite() {
            return Err(DnhError::InvalidParameter(format!("plasticity must be finite, got {alpha}")));
        }
        let inner = self.modules.last().expect("non-empty");
        let mut theta = inner.theta.clone();
        theta.add_outer(&inner.context, &inner.context, alpha);
        if !theta.is_finite() {
            return Err(DnhError::NumericDomain("hebbian initialisation overflowed".into()));
        }
        let mean = self.modules.iter().map(|m| m.freq).sum::<f64>() / self.levels() as f64;
        let freq = self.bounds.clamp(mean);
        Ok(self.push_level(theta, freq))
    }

    /// Proximal growth: appends the minimiser of
    /// `−⟨M, meta_grad⟩ + ‖M − m_prev‖² / (2·eta)`, i.e. `m_prev + eta · meta_grad`,
    /// at half the innermost frequency.
    pub fn add_meta_level(&mut self, meta_grad: &Matrix, m_prev: &Matrix, eta: f64) -> Result<StructuralEvent> {
        self.ensure_capacity()?;
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(DnhError::InvalidParameter(format!("eta must be > 0, got {eta}")));
        }
        let d = self.dim();
        let shape = Matrix::zeros(d, d);
        shape.ensure_same_shape(meta_grad, "meta gradient")?;
        shape.ensure_same_shape(m_prev, "projected memory")?;
        let mut theta = m_prev.clone();
        theta.add_scaled(meta_grad, eta);
        if !theta.is_finite() {
            return Err(DnhError::NumericDomain("proximal initialisation overflowed".into()));
        }
        let freq = self.bounds.clamp(self.modules.last().expect("non-empty").freq / 2.0);
        Ok(self.push_level(theta, freq))
    }

    /// Removes `level` (never level 1) and rebuilds the chain over the survivors.
    pub fn prune_level(&mut self, level: usize) -> Result<StructuralEvent> {
        let levels = self.levels();
        if levels < 2 {
            return Err(DnhError::InvalidOperation("cannot prune the only level".into()));
        }
        if level == 1 {
            return Err(DnhError::InvalidOperation("level 1 carries the task loss and is never pruned".into()));
        }
        if level > levels {
            return Err(DnhError::Range { index: level, len: levels });
        }
        let interior = level < levels;
        self.modules.remove(level - 1);
        for (i, m) in self.modules.iter_mut().enumerate() {
            m.level = i + 1;
        }
        self.edges = chain_edges(self.levels());
        if let Err(v) = self.validate() {
            return Err(DnhError::InvalidState(format!("prune left an invalid graph: {}", v[0])));
        }
        Ok(StructuralEvent {
            step: self.t,
            kind: EventKind::Prune,
            level,
            detail: 0.0,
            edge_changes: if interior { 3 } else { 1 },
        })
    }

    /// Checks structural and numeric invariants, collecting every violation.
    pub fn validate(&self) -> std::result::Result<(), Vec<Violation>> {
        let mut out = Vec::new();
        let n = self.levels();
        if n == 0 {
            out.push(Violation::Empty);
            return Err(out);
        }
        if n > self.l_max {
            out.push(Violation::TooManyLevels { levels: n, l_max: self.l_max });
        }

        let mut graph: DiGraphMap<usize, ()> = DiGraphMap::new();
        for l in 1..=n {
            graph.add_node(l);
        }
        for &(a, b) in &self.edges {
            if a == 0 || b == 0 || a > n || b > n {
                out.push(Violation::DanglingEdge(a, b));
            }
            graph.add_edge(a, b, ());
        }
        if toposort(&graph, None).is_err() {
            out.push(Violation::Cycle);
        }
        for l in 1..=n {
            let degree = graph.neighbors_directed(l, petgraph::Direction::Incoming).count()
                + graph.neighbors_directed(l, petgraph::Direction::Outgoing).count();
            if degree > self.d_max {
                out.push(Violation::Degree { level: l, degree, d_max: self.d_max });
            }
        }

        let d = self.dim();
        let mut ids = std::collections::BTreeSet::new();
        for (i, m) in self.modules.iter().enumerate() {
            if m.level != i + 1 {
                out.push(Violation::NonContiguous { index: i, level: m.level });
            }
            if !ids.insert(m.id) {
                out.push(Violation::DuplicateId(m.id));
            }
            if !self.bounds.contains(m.freq) {
                out.push(Violation::FrequencyOutOfBounds { level: i + 1, freq: m.freq });
            }
            if m.theta.rows() != d || m.theta.cols() != d || !m.momentum.same_shape(&m.theta) || m.context.dim() != d {
                out.push(Violation::Shape { level: i + 1 });
            }
            if !m.theta.is_finite() || !m.momentum.is_finite() || !m.context.is_finite() || !m.last_lss.is_finite() || m.last_lss < 0.0 {
                out.push(Violation::NonFinite { level: i + 1 });
            }
            if !(0.0..1.0).contains(&m.phase) {
                out.push(Violation::Phase { level: i + 1, phase: m.phase });
            }
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(out)
        }
    }

    pub fn to_snapshot(&self) -> String {
        let snap = Snapshot {
            schema: SNAPSHOT_SCHEMA.to_string(),
            dim: self.dim(),
            hierarchy: self.clone(),
        };
        serde_json::to_string_pretty(&snap).expect("hierarchy serializes")
    }

    pub fn from_snapshot(text: &str) -> Result<Self> {
        let snap: Snapshot = serde_json::from_str(text).map_err(|e| DnhError::Config(format!("bad snapshot: {e}")))?;
        if snap.schema != SNAPSHOT_SCHEMA {
            return Err(DnhError::Config(format!("unsupported snapshot schema {}", snap.schema)));
        }
        let h = snap.hierarchy;
        if h.dim() != snap.dim {
            return Err(DnhError::Config("snapshot dim does not match its levels".into()));
        }
        if let Err(v) = h.validate() {
            return Err(DnhError::Config(format!("snapshot fails validation: {}", v[0])));
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;
    use proptest::prelude::*;

    fn bounds() -> FreqBounds {
        FreqBounds::new(0.05, 4.0).unwrap()
    }

    fn v(x: &[f64]) -> Vector {
        Vector::from(x.to_vec())
    }

    fn with_thetas(thetas: Vec<Matrix>, l_max: usize) -> Hierarchy {
        let modules = thetas
            .into_iter()
            .enumerate()
            .map(|(i, th)| MemoryModule::new(i as u64, i + 1, th, 1.0).unwrap())
            .collect();
        Hierarchy::from_modules(modules, l_max, bounds()).unwrap()
    }

    #[test]
    fn forward_examples() {
        let mut one = Hierarchy::new(3, &[1.0], 5, bounds()).unwrap();
        assert_eq!(one.forward(&v(&[1.0, -2.0, 0.5])).unwrap(), v(&[1.0, -2.0, 0.5]));

        let mut two = with_thetas(vec![Matrix::scaled_identity(2, 3.0), Matrix::scaled_identity(2, 2.0)], 5);
        assert_eq!(two.forward(&v(&[1.0, 0.0])).unwrap(), v(&[6.0, 0.0]));
        assert_eq!(two.modules[1].context, v(&[1.0, 0.0]));
        assert_eq!(two.modules[0].context, v(&[2.0, 0.0]));

        let mut rng = RngState::new(1);
        let mut h = with_thetas((0..4).map(|_| rng.normal_matrix(3, 3, 1.0)).collect(), 5);
        assert_eq!(h.forward(&Vector::zeros(3)).unwrap(), Vector::zeros(3));
    }

    #[test]
    fn forward_on_empty_is_error() {
        let mut h = Hierarchy::new(2, &[1.0], 3, bounds()).unwrap();
        h.modules.clear();
        assert!(matches!(h.forward(&v(&[1.0, 1.0])), Err(DnhError::InvalidState(_))));
    }

    #[test]
    fn composition_order_is_innermost_first() {
        // Non-commuting factors distinguish θ¹θ² from θ²θ¹.
        let a = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let x = v(&[1.0, 0.0]);
        let mut h = with_thetas(vec![a.clone(), b.clone()], 3);
        assert_eq!(h.forward(&x).unwrap(), a.matmul(&b).matvec(&x));
    }

    #[test]
    fn due_modules_examples() {
        let mut eq = Hierarchy::new(2, &[0.7, 0.7, 0.7], 5, bounds()).unwrap();
        for _ in 0..10 {
            assert_eq!(eq.due_modules(), vec![1, 2, 3]);
        }
        let mut half = Hierarchy::new(2, &[1.0, 0.5], 5, bounds()).unwrap();
        let t = 101;
        let level2 = (0..t).filter(|_| half.due_modules().contains(&2)).count();
        assert_eq!(level2, t / 2);
        let mut single = Hierarchy::new(2, &[0.3], 5, bounds()).unwrap();
        assert!((0..20).all(|_| single.due_modules() == vec![1]));
    }

    #[test]
    fn due_rates_track_frequency_ratios() {
        let freqs = [2.0, 1.3, 0.37, 0.05];
        let mut h = Hierarchy::new(2, &freqs, 5, bounds()).unwrap();
        let t = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..t {
            for l in h.due_modules() {
                counts[l - 1] += 1;
            }
        }
        for (c, f) in counts.iter().zip(freqs) {
            let rate = *c as f64 / t as f64;
            let expected = f / 2.0;
            assert!((rate - expected).abs() <= 0.01 * expected, "rate {rate} vs {expected}");
        }
    }

    #[test]
    fn add_level_examples() {
        let mut h = Hierarchy::new(2, &[2.0, 4.0], 5, bounds()).unwrap();
        h.forward(&v(&[1.0, 0.0])).unwrap();
        let ev = h.add_level(0.1).unwrap();
        assert_eq!(ev.kind, EventKind::Add);
        assert_eq!(ev.level, 3);
        assert_eq!(h.modules[2].theta, Matrix::from_rows(&[vec![1.1, 0.0], vec![0.0, 1.0]]).unwrap());
        assert_eq!(h.modules[2].freq, 3.0);
        assert_eq!(h.modules[2].phase, 0.0);
        assert_eq!(h.modules[2].momentum, Matrix::zeros(2, 2));
        assert_eq!(h.edges, vec![(1, 2), (2, 3)]);

        let mut rng = RngState::new(2);
        let mut g = with_thetas(vec![Matrix::identity(2), rng.normal_matrix(2, 2, 1.0)], 5);
        g.forward(&v(&[0.3, 0.9])).unwrap();
        g.add_level(0.0).unwrap();
        assert_eq!(g.modules[2].theta, g.modules[1].theta);

        let mut z = with_thetas(vec![Matrix::identity(2), rng.normal_matrix(2, 2, 1.0)], 5);
        z.forward(&Vector::zeros(2)).unwrap();
        z.add_level(0.7).unwrap();
        assert_eq!(z.modules[2].theta, z.modules[1].theta);
    }

    #[test]
    fn add_level_respects_capacity() {
        let mut h = Hierarchy::new(2, &[1.0, 1.0], 2, bounds()).unwrap();
        assert!(matches!(h.add_level(0.1), Err(DnhError::Capacity(2))));
        assert_eq!(h.levels(), 2);
    }

    #[test]
    fn add_meta_level_examples() {
        let mut rng = RngState::new(3);
        let m_prev = rng.normal_matrix(3, 3, 1.0);
        let mut h = Hierarchy::new(3, &[2.0, 1.0], 5, bounds()).unwrap();
        h.add_meta_level(&Matrix::zeros(3, 3), &m_prev, 0.7).unwrap();
        assert_eq!(h.modules[2].theta, m_prev);
        assert_eq!(h.modules[2].freq, 0.5);

        let grad = rng.normal_matrix(3, 3, 1.0);
        let mut h = Hierarchy::new(3, &[2.0, 1.0], 5, bounds()).unwrap();
        h.add_meta_level(&grad, &m_prev, 1e-9).unwrap();
        assert!(h.modules[2].theta.sub(&m_prev).frobenius() < 1e-6 * grad.frobenius());

        let mut h = Hierarchy::new(2, &[2.0, 1.0], 5, bounds()).unwrap();
        h.add_meta_level(&Matrix::identity(2), &Matrix::zeros(2, 2), 0.5).unwrap();
        assert_eq!(h.modules[2].theta, Matrix::scaled_identity(2, 0.5));
        assert!(h.add_meta_level(&Matrix::identity(2), &Matrix::zeros(2, 2), 0.0).is_err());
    }

    #[test]
    fn proximal_minimiser_beats_grid() {
        // Objective for a 1x1 level: −m·g + (m − m0)² / (2η).
        let (g, m0, eta) = (1.7, -0.4, 0.3);
        let obj = |m: f64| -m * g + (m - m0).powi(2) / (2.0 * eta);
        let mut h = Hierarchy::new(1, &[1.0], 3, bounds()).unwrap();
        let m_prev = Matrix::new(1, 1, vec![m0]).unwrap();
        h.add_meta_level(&Matrix::new(1, 1, vec![g]).unwrap(), &m_prev, eta).unwrap();
        let closed = h.modules[1].theta.get(0, 0);
        let best_grid = (0..=20_000).map(|i| -5.0 + i as f64 * 5e-4).map(obj).fold(f64::INFINITY, f64::min);
        assert!(obj(closed) <= best_grid + 1e-12);
    }

    #[test]
    fn prune_examples() {
        let mut h = Hierarchy::new(2, &[1.0, 1.0, 1.0], 5, bounds()).unwrap();
        let old3 = h.modules[2].id;
        let ev = h.prune_level(2).unwrap();
        assert_eq!(ev.edge_changes, 3);
        assert_eq!(h.levels(), 2);
        assert_eq!(h.modules[1].id, old3);
        assert_eq!(h.modules[1].level, 2);
        assert_eq!(h.edges, vec![(1, 2)]);

        let ev = h.prune_level(2).unwrap();
        assert_eq!(ev.edge_changes, 1);
        assert!(matches!(h.prune_level(1), Err(DnhError::InvalidOperation(_))));

        let mut two = Hierarchy::new(2, &[1.0, 1.0], 5, bounds()).unwrap();
        assert!(matches!(two.prune_level(1), Err(DnhError::InvalidOperation(_))));
        assert!(matches!(two.prune_level(3), Err(DnhError::Range { .. })));
    }

    #[test]
    fn prune_matches_fresh_build() {
        let mut rng = RngState::new(4);
        let thetas: Vec<Matrix> = (0..4).map(|_| rng.normal_matrix(3, 3, 0.8)).collect();
        let mut h = with_thetas(thetas.clone(), 5);
        h.prune_level(3).unwrap();
        let mut fresh = with_thetas(vec![thetas[0].clone(), thetas[1].clone(), thetas[3].clone()], 5);
        for _ in 0..10 {
            let x = rng.normal_vector(3, 1.0);
            assert_eq!(h.forward(&x).unwrap(), fresh.forward(&x).unwrap());
        }
    }

    #[test]
    fn pruning_identity_innermost_leaves_output() {
        let mut rng = RngState::new(6);
        let mut h = with_thetas(vec![rng.normal_matrix(3, 3, 1.0), rng.normal_matrix(3, 3, 1.0), Matrix::identity(3)], 5);
        let x = rng.normal_vector(3, 1.0);
        let before = h.forward(&x).unwrap();
        h.prune_level(3).unwrap();
        assert_eq!(h.forward(&x).unwrap(), before);
    }

    #[test]
    fn validate_examples() {
        let h = Hierarchy::new(2, &[1.0, 0.5], 5, bounds()).unwrap();
        assert!(h.validate().is_ok());

        let mut cyc = h.clone();
        cyc.edges.push((2, 1));
        let v = cyc.validate().unwrap_err();
        assert!(v.contains(&Violation::Cycle));

        let mut fast = h.clone();
        fast.modules[1].freq = 100.0;
        let v = fast.validate().unwrap_err();
        assert!(matches!(v[0], Violation::FrequencyOutOfBounds { level: 2, .. }));

        let mut nan = h;
        nan.modules[0].theta.set(0, 0, f64::NAN);
        assert!(nan.validate().unwrap_err().contains(&Violation::NonFinite { level: 1 }));
    }

    #[test]
    fn snapshot_roundtrip() {
        let mut rng = RngState::new(8);
        let mut h = with_thetas(vec![rng.normal_matrix(2, 2, 1.0), rng.normal_matrix(2, 2, 1.0)], 4);
        h.forward(&v(&[0.5, -0.25])).unwrap();
        h.add_level(0.01).unwrap();
        let text = h.to_snapshot();
        assert!(text.contains(SNAPSHOT_SCHEMA));
        assert_eq!(Hierarchy::from_snapshot(&text).unwrap(), h);
        assert!(Hierarchy::from_snapshot("{\"schema\": \"other\"}").is_err());
    }

    #[derive(Debug, Clone)]
    enum Op {
        Add(f64),
        Prune(usize),
        Forward(u64),
        Due,
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (-0.2f64..0.2).prop_map(Op::Add),
            (1usize..6).prop_map(Op::Prune),
            any::<u64>().prop_map(Op::Forward),
            Just(Op::Due),
        ]
    }

    proptest! {
        #[test]
        fn random_edit_sequences_stay_valid(ops in prop::collection::vec(op(), 1..60), l_max in 1usize..6) {
            let mut h = Hierarchy::new(3, &[1.0], l_max, bounds()).unwrap();
            for o in ops {
                match o {
                    Op::Add(a) => { let _ = h.add_level(a); }
                    Op::Prune(l) => { let _ = h.prune_level(l); }
                    Op::Forward(s) => { h.forward(&RngState::new(s).normal_vector(3, 1.0)).unwrap(); }
                    Op::Due => { h.due_modules(); }
                }
                prop_assert!(h.validate().is_ok(), "{:?}", h.validate());
                prop_assert!(h.levels() >= 1 && h.levels() <= l_max);
            }
        }

        #[test]
        fn add_then_prune_restores_output(seed in any::<u64>(), alpha in -0.5f64..0.5) {
            let mut rng = RngState::new(seed);
            let mut h = with_thetas(vec![rng.normal_matrix(3, 3, 1.0), rng.normal_matrix(3, 3, 1.0)], 4);
            h.forward(&rng.normal_vector(3, 1.0)).unwrap();
            let before = h.clone();
            h.add_level(alpha).unwrap();
            h.prune_level(3).unwrap();
            for _ in 0..5 {
                let x = rng.normal_vector(3, 1.0);
                prop_assert_eq!(h.predict(&x).unwrap(), before.predict(&x).unwrap());
            }
        }
    }
}
