//! Metrics log, its serialized forms, and the statistics computed from
//! finished runs: regret, gradient-norm trend, average accuracy and
//! backward transfer, and replica frequency variance.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{DnhError, Result};
use crate::hierarchy::StructuralEvent;
use crate::numerics::linear_fit;

pub const METRICS_SCHEMA: &str = "dnh-metrics/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub schema: String,
    pub config_hash: String,
    /// Hash of the configuration with the seed removed.
    pub replica_hash: String,
    pub seed: u64,
    pub code_version: String,
    /// Number of frequency columns in the delimited form.
    pub l_max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub t: u64,
    pub task_loss: f64,
    pub meta_loss: f64,
    pub levels: usize,
    pub freqs: Vec<f64>,
    /// Squared Frobenius norm of the outermost level's gradient plus the
    /// squared finite-difference frequency gradients estimated this step.
    pub grad_norm_sq: f64,
    pub shift_estimate: f64,
    pub events: Vec<StructuralEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub header: LogHeader,
    /// One record every `log_every` steps plus one at every event step.
    pub records: Vec<MetricsRecord>,
    /// Task loss of every step.
    pub task_loss_trace: Vec<f64>,
    /// Squared gradient norm of every step.
    pub grad_norm_sq_trace: Vec<f64>,
    pub events: Vec<StructuralEvent>,
}

impl MetricsLog {
    /// Delimited text with a leading `#` metadata line and a header row.
    pub fn to_csv(&self) -> String {
        let h = &self.header;
        let mut out = format!(
            "# schema={} config_hash={} seed={} code_version={}\n",
            h.schema, h.config_hash, h.seed, h.code_version
        );
        out.push_str("t,task_loss,meta_loss,L_t");
        for l in 1..=h.l_max {
            write!(out, ",freq_{l}").expect("string write");
        }
        out.push_str(",grad_norm_sq,shift_estimate,event\n");
        for r in &self.records {
            write!(out, "{},{},{},{}", r.t, r.task_loss, r.meta_loss, r.levels).expect("string write");
            for l in 0..h.l_max {
                match r.freqs.get(l) {
                    Some(f) => write!(out, ",{f}").expect("string write"),
                    None => out.push(','),
                }
            }
            let events: Vec<String> = r.events.iter().map(ToString::to_string).collect();
            writeln!(out, ",{},{},{}", r.grad_norm_sq, r.shift_estimate, events.join(";")).expect("string write");
        }
        out
    }

    pub fn structural_events(&self) -> impl Iterator<Item = &StructuralEvent> {
        self.events.iter().filter(|e| e.is_structural())
    }
}

/// Prefix sums of `task_loss_t − oracle_t`.
pub fn cumulative_regret(log: &MetricsLog, oracle: &[f64]) -> Result<Vec<f64>> {
    regret_of(&log.task_loss_trace, oracle)
}

pub fn regret_of(losses: &[f64], oracle: &[f64]) -> Result<Vec<f64>> {
    if losses.len() != oracle.len() {
        return Err(DnhError::Shape(format!("{} losses against {} oracle losses", losses.len(), oracle.len())));
    }
    let mut acc = 0.0;
    Ok(losses
        .iter()
        .zip(oracle)
        .map(|(l, o)| {
            acc += l - o;
            acc
        })
        .collect())
}

/// Running mean `(1/t) Σ_{s≤t} v_s` for `t = 1..=len`.
pub fn running_mean(values: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            acc += v;
            acc / (i + 1) as f64
        })
        .collect()
}

/// Least-squares fit of `log(running mean of v)` against `log t`. Returns `(slope, intercept)`.
pub fn power_law_trend(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 10 {
        return Err(DnhError::InsufficientData(format!("{} points, need at least 10", values.len())));
    }
    let means = running_mean(values);
    let mut xs = Vec::with_capacity(means.len());
    let mut ys = Vec::with_capacity(means.len());
    for (i, m) in means.iter().enumerate() {
        if *m > 0.0 && m.is_finite() {
            xs.push(((i + 1) as f64).ln());
            ys.push(m.ln());
        }
    }
    if xs.len() < 10 {
        return Err(DnhError::InsufficientData("fewer than 10 positive running-mean points".into()));
    }
    let (slope, intercept, _) = linear_fit(&xs, &ys);
    Ok((slope, intercept))
}

/// Log-log trend of the running-mean squared gradient norm of a run.
pub fn grad_norm_trend(log: &MetricsLog) -> Result<(f64, f64)> {
    power_law_trend(&log.grad_norm_sq_trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    /// Higher is better.
    Accuracy,
    /// Lower is better; negated before averaging.
    Loss,
}

/// `values[i][j]`: performance on task `j` after training through task `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMatrix {
    pub kind: EntryKind,
    pub values: Vec<Vec<f64>>,
}

/// Average final performance and backward transfer.
///
/// Loss entries are negated first, so in both cases a more negative
/// backward transfer means more forgetting.
pub fn aa_bwt(tm: &TaskMatrix) -> Result<(f64, f64)> {
    let n = tm.values.len();
    if n < 2 {
        return Err(DnhError::InsufficientData(format!("task matrix of size {n}, need at least 2")));
    }
    if tm.values.iter().any(|row| row.len() != n) {
        return Err(DnhError::Shape("task matrix must be square".into()));
    }
    let sign = match tm.kind {
        EntryKind::Accuracy => 1.0,
        EntryKind::Loss => -1.0,
    };
    let at = |i: usize, j: usize| sign * tm.values[i][j];
    let last = n - 1;
    let aa = (0..n).map(|j| at(last, j)).sum::<f64>() / n as f64;
    let bwt = (0..last).map(|j| at(last, j) - at(j, j)).sum::<f64>() / last as f64;
    Ok((aa, bwt))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceSeries {
    pub t: Vec<u64>,
    pub variance: Vec<f64>,
}

/// Sample variance of one level's frequency across replicas, at every
/// logged step where all replicas recorded that level.
pub fn freq_variance_across_replicas(logs: &[MetricsLog], level: usize) -> Result<VarianceSeries> {
    if logs.len() < 3 {
        return Err(DnhError::InsufficientData(format!("{} replicas, need at least 3", logs.len())));
    }
    if level == 0 {
        return Err(DnhError::InvalidParameter("levels are numbered from 1".into()));
    }
    let key = &logs[0].header.replica_hash;
    if logs.iter().any(|l| &l.header.replica_hash != key) {
        return Err(DnhError::Config("replica logs come from different configurations".into()));
    }
    let lookup = |log: &MetricsLog, t: u64| {
        log.records
            .binary_search_by_key(&t, |r| r.t)
            .ok()
            .and_then(|i| log.records[i].freqs.get(level - 1).copied())
    };
    let n = logs.len() as f64;
    let mut series = VarianceSeries { t: Vec::new(), variance: Vec::new() };
    for r in &logs[0].records {
        let vals: Option<Vec<f64>> = logs.iter().map(|l| lookup(l, r.t)).collect();
        if let Some(vals) = vals {
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            series.t.push(r.t);
            series.variance.push(var);
        }
    }
    Ok(series)
}

/// Slope and its standard error for `v ≈ a + b·t`.
pub fn linear_growth(t: &[f64], v: &[f64]) -> Result<(f64, f64)> {
    if t.len() != v.len() || t.len() < 3 {
        return Err(DnhError::InsufficientData("need at least 3 aligned points".into()));
    }
    let (slope, _, se) = linear_fit(t, v);
    Ok((slope, se))
}

/// Curvature `c` and its standard error for `v ≈ a + b·t + c·t²`.
///
/// Time is rescaled to `[0, 1]` before fitting; the returned values refer to that scale.
pub fn quadratic_growth(t: &[f64], v: &[f64]) -> Result<(f64, f64)> {
    let n = t.len();
    if n != v.len() || n < 4 {
        return Err(DnhError::InsufficientData("need at least 4 aligned points".into()));
    }
    let t_max = t.iter().cloned().fold(0.0, f64::max).max(1e-300);
    let x = DMatrix::from_fn(n, 3, |i, j| (t[i] / t_max).powi(j as i32));
    let y = DVector::from_column_slice(v);
    let xtx = x.transpose() * &x;
    let inv = xtx.clone().try_inverse().ok_or_else(|| DnhError::NumericDomain("singular design in growth fit".into()))?;
    let beta = &inv * x.transpose() * &y;
    let resid = &y - &x * &beta;
    let sigma2 = resid.norm_squared() / (n as f64 - 3.0);
    Ok((beta[2], (sigma2 * inv[(2, 2)]).max(0.0).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::EventKind;

    fn header(hash: &str) -> LogHeader {
        LogHeader {
            schema: METRICS_SCHEMA.into(),
            config_hash: format!("{hash}-full"),
            replica_hash: hash.into(),
            seed: 0,
            code_version: "test".into(),
            l_max: 3,
        }
    }

    fn log_with(freqs: &[(u64, Vec<f64>)], hash: &str) -> MetricsLog {
        MetricsLog {
            header: header(hash),
            records: freqs
                .iter()
                .map(|(t, f)| MetricsRecord {
                    t: *t,
                    task_loss: 0.0,
                    meta_loss: 0.0,
                    levels: f.len(),
                    freqs: f.clone(),
                    grad_norm_sq: 0.0,
                    shift_estimate: 0.0,
                    events: vec![],
                })
                .collect(),
            task_loss_trace: vec![],
            grad_norm_sq_trace: vec![],
            events: vec![],
        }
    }

    #[test]
    fn regret_examples() {
        let oracle = vec![0.2; 100];
        assert!(regret_of(&oracle, &oracle).unwrap().iter().all(|&r| r == 0.0));
        let losses = vec![0.3; 100];
        let r = regret_of(&losses, &oracle).unwrap();
        assert!((r[99] - 10.0).abs() < 1e-9);
        assert!(r.windows(2).all(|w| w[1] >= w[0]));
        assert!(matches!(regret_of(&losses[..5], &oracle), Err(DnhError::Shape(_))));
    }

    #[test]
    fn trend_examples() {
        // g² = c/t² has running mean ≈ c·ζ(2)/t.
        let planted: Vec<f64> = (1..=20_000).map(|t| 3.0 / (t as f64 * t as f64)).collect();
        let (slope, _) = power_law_trend(&planted).unwrap();
        assert!((slope + 1.0).abs() < 0.05, "{slope}");
        let (flat, intercept) = power_law_trend(&[2.0; 50]).unwrap();
        assert!(flat.abs() < 1e-12 && (intercept - 2f64.ln()).abs() < 1e-12);
        assert!(matches!(power_law_trend(&[]), Err(DnhError::InsufficientData(_))));
    }

    #[test]
    fn harmonic_decay_gives_shallower_fit() {
        // g² = c/t has running mean c·H_t/t, whose log-log slope is −1 + 1/H_t.
        let planted: Vec<f64> = (1..=20_000).map(|t| 3.0 / t as f64).collect();
        let (slope, _) = power_law_trend(&planted).unwrap();
        assert!(slope > -0.95 && slope < -0.85, "{slope}");
    }

    #[test]
    fn aa_bwt_examples() {
        let flat = TaskMatrix { kind: EntryKind::Accuracy, values: vec![vec![0.6; 3]; 3] };
        let (aa, bwt) = aa_bwt(&flat).unwrap();
        assert!((aa - 0.6).abs() < 1e-15 && bwt == 0.0);
        let tm = TaskMatrix { kind: EntryKind::Accuracy, values: vec![vec![0.9, 0.1], vec![0.7, 0.8]] };
        let (aa, bwt) = aa_bwt(&tm).unwrap();
        assert!((aa - 0.75).abs() < 1e-12 && (bwt + 0.2).abs() < 1e-12);
        let loss = TaskMatrix { kind: EntryKind::Loss, values: vec![vec![0.1, 0.5], vec![0.4, 0.2]] };
        let (aa, bwt) = aa_bwt(&loss).unwrap();
        assert!((aa + 0.3).abs() < 1e-12 && (bwt + 0.3).abs() < 1e-12);
        assert!(aa_bwt(&TaskMatrix { kind: EntryKind::Loss, values: vec![vec![1.0]] }).is_err());
    }

    #[test]
    fn replica_variance() {
        let a = log_with(&[(0, vec![1.0, 0.5]), (10, vec![1.0, 0.7]), (15, vec![1.0])], "k");
        let b = log_with(&[(0, vec![1.0, 0.5]), (10, vec![1.0, 0.5]), (15, vec![1.0])], "k");
        let c = log_with(&[(0, vec![1.0, 0.5]), (10, vec![1.0, 0.3])], "k");
        let v = freq_variance_across_replicas(&[a.clone(), b.clone(), c.clone()], 2).unwrap();
        assert_eq!(v.t, vec![0, 10]);
        assert_eq!(v.variance[0], 0.0);
        assert!((v.variance[1] - 0.04).abs() < 1e-12);
        assert!(v.variance.iter().all(|&x| x >= 0.0));
        let other = log_with(&[(0, vec![1.0])], "other");
        assert!(matches!(freq_variance_across_replicas(&[a.clone(), b.clone(), other], 1), Err(DnhError::Config(_))));
        assert!(freq_variance_across_replicas(&[a, b], 1).is_err());
    }

    #[test]
    fn growth_fits() {
        let t: Vec<f64> = (0..50).map(|i| i as f64 * 10.0).collect();
        let lin: Vec<f64> = t.iter().map(|x| 1.0 + 0.5 * x).collect();
        let (slope, se) = linear_growth(&t, &lin).unwrap();
        assert!((slope - 0.5).abs() < 1e-12 && se < 1e-9);
        let (c, _) = quadratic_growth(&t, &lin).unwrap();
        assert!(c.abs() < 1e-6);
        let quad: Vec<f64> = t.iter().map(|x| 1.0 + x * x).collect();
        let (c, se) = quadratic_growth(&t, &quad).unwrap();
        assert!(c > 0.0 && c > 2.0 * se);
    }

    #[test]
    fn csv_layout() {
        let mut log = log_with(&[(0, vec![1.0, 0.5]), (5, vec![1.0, 0.5, 0.75])], "k");
        log.records[1].events.push(StructuralEvent { step: 5, kind: EventKind::Add, level: 3, detail: 0.75, edge_changes: 1 });
        let csv = log.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[0].starts_with("# schema=dnh-metrics/1 config_hash=k-full seed=0"));
        assert_eq!(lines[1], "t,task_loss,meta_loss,L_t,freq_1,freq_2,freq_3,grad_norm_sq,shift_estimate,event");
        assert_eq!(lines[2], "0,0,0,2,1,0.5,,0,0,");
        assert_eq!(lines[3], "5,0,0,3,1,0.5,0.75,0,0,add:3");
    }
}
