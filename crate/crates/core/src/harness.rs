//! The experiment loop, the hindsight comparator, and the multi-seed
//! comparison and sweep drivers built on top of them.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Mode};
use crate::error::{DnhError, Result};
use crate::hierarchy::{Hierarchy, StructuralEvent};
use crate::learner::Learner;
use crate::meta::{finite_difference, update_meta_params, EvolveInput, FdEstimate, MetaController};
use crate::metrics::{aa_bwt, grad_norm_trend, regret_of, EntryKind, LogHeader, MetricsLog, MetricsRecord, TaskMatrix, METRICS_SCHEMA};
use crate::numerics::{Matrix, RngState};
use crate::optim::BETA_CAP;
use crate::streams::{Sample, Stream, StreamSpec};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const SUMMARY_SCHEMA: &str = "dnh-summary/1";
pub const REPORT_SCHEMA: &str = "dnh-compare/1";
pub const SWEEP_SCHEMA: &str = "dnh-sweep/1";

/// Seeds used by multi-seed comparisons.
pub const DEFAULT_SEEDS: [u64; 3] = [1, 2, 3];

const EXPLORATION_STREAM: u64 = 7;
const GAMMA_FD_STEP: f64 = 1e-2;
const BETA_FD_STEP: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub log: MetricsLog,
    /// Rows for every completed segment; square once the stream is drained.
    pub task_matrix: TaskMatrix,
    pub hierarchy: Hierarchy,
    /// Meta-parameters after online adjustment.
    pub meta: crate::meta::MetaParams,
}

fn ema(prev: Option<f64>, value: f64, keep: f64) -> f64 {
    match prev {
        Some(p) => keep * p + (1.0 - keep) * value,
        None => value,
    }
}

/// Rollout loss as a function of `gamma`, with frequencies driven by the
/// surprise term after every rollout step.
fn gamma_rollout(learner: &Learner, samples: &[Sample], gamma: f64, f_min: f64, f_max: f64) -> Result<f64> {
    let mut copy = learner.clone();
    let mut total = 0.0;
    for s in samples {
        let out = copy.step(&s.x, &s.target)?;
        total += out.task_loss;
        for (m, lss) in copy.hierarchy.modules.iter_mut().zip(&out.lss) {
            m.freq = (m.freq + gamma * lss).clamp(f_min, f_max);
        }
    }
    Ok(total / samples.len() as f64)
}

fn beta_gradients(learner: &Learner, id: u64, samples: &[Sample]) -> Result<(f64, f64)> {
    let Some(state) = learner.optimizers.get(&id).and_then(|o| match o {
        crate::optim::LevelOptimizer::Eadam(s) => Some(s.clone()),
        crate::optim::LevelOptimizer::Momentum { .. } => None,
    }) else {
        return Ok((0.0, 0.0));
    };
    let probe = |which: usize| {
        let objective = |b: f64| {
            let mut copy = learner.clone();
            let s = copy.optimizers.get_mut(&id).and_then(|o| o.eadam_mut()).expect("checked above");
            if which == 0 {
                s.beta1 = b;
            } else {
                s.beta2 = b;
            }
            copy.rollout_loss(samples)
        };
        let at = if which == 0 { state.beta1 } else { state.beta2 };
        finite_difference(objective, at, BETA_FD_STEP, 0.0, BETA_CAP, false).map(|e| e.grad)
    };
    Ok((probe(0)?, probe(1)?))
}

/// Runs one experiment to completion.
///
/// Per step: draw a sample, run the inner step (forward, task loss, updates
/// of due levels), then in evolving mode apply the evolution operator, and
/// log. Numeric failures abort with the offending step.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let spec = cfg.stream_spec();
    let mut stream = Stream::new(&spec)?;
    let heldout: Vec<Vec<Sample>> = (0..spec.num_segments).map(|s| stream.heldout(s, cfg.eval_samples)).collect::<Result<_>>()?;

    let hierarchy = Hierarchy::new(spec.dim, &cfg.initial_freqs(), cfg.l_max, cfg.freq_bounds()?)?;
    let mut learner = Learner::new(hierarchy, cfg.optimizer.clone());
    let mut controller = MetaController::new(cfg.meta.clone())?;
    let mut rng = RngState::with_stream(cfg.seed, EXPLORATION_STREAM);
    let evolving = cfg.mode == Mode::Dnh;

    let steps = cfg.steps();
    let mut log = MetricsLog {
        header: LogHeader {
            schema: METRICS_SCHEMA.into(),
            config_hash: cfg.config_hash(),
            replica_hash: cfg.replica_hash(),
            seed: cfg.seed,
            code_version: CODE_VERSION.into(),
            l_max: cfg.l_max,
        },
        records: Vec::new(),
        task_loss_trace: Vec::with_capacity(steps),
        grad_norm_sq_trace: Vec::with_capacity(steps),
        events: Vec::new(),
    };
    let mut task_rows: Vec<Vec<f64>> = Vec::new();
    let mut smoothed_loss: Option<f64> = None;
    let mut smoothed_grads: BTreeMap<u64, Matrix> = BTreeMap::new();
    let mut replay: VecDeque<Sample> = VecDeque::with_capacity(cfg.meta.rollout_k + 1);

    for _ in 0..steps {
        let sample = stream.next_sample().ok_or_else(|| DnhError::InvalidState("stream ended early".into()))?;
        let t = sample.t;
        let abort = |e: DnhError| match e {
            DnhError::RunAborted { .. } => e,
            other => DnhError::RunAborted { step: t, message: other.to_string() },
        };

        let out = learner.step(&sample.x, &sample.target).map_err(abort)?;
        let p = controller.params.clone();
        let loss_signal = ema(smoothed_loss, out.task_loss, p.loss_smoothing);
        smoothed_loss = Some(loss_signal);
        for (m, g) in learner.hierarchy.modules.iter().zip(&out.grads) {
            match smoothed_grads.get_mut(&m.id) {
                Some(s) => {
                    *s = s.scale(p.grad_smoothing);
                    s.add_scaled(g, 1.0 - p.grad_smoothing);
                }
                None => {
                    smoothed_grads.insert(m.id, g.clone());
                }
            }
        }
        replay.push_back(sample.clone());
        if replay.len() > p.rollout_k {
            replay.pop_front();
        }

        let mut grad_norm_sq = out.grads[0].frobenius_sq();
        let (meta_loss, shift, events) = if evolving {
            let meta_step = (t + 1) % p.meta_interval == 0 && replay.len() == p.rollout_k;
            let window: Vec<Sample> = if meta_step { replay.iter().cloned().collect() } else { Vec::new() };
            let mut freq_grads: BTreeMap<u64, FdEstimate> = BTreeMap::new();
            if meta_step && p.eta_f > 0.0 {
                for level in 1..=learner.hierarchy.levels() {
                    let est = learner.fd_frequency_gradient(level, &window, p.fd_h, p.second_order).map_err(abort)?;
                    grad_norm_sq += est.grad * est.grad;
                    freq_grads.insert(learner.hierarchy.modules[level - 1].id, est);
                }
            }
            if meta_step && p.eta_phi > 0.0 {
                let objective = |g: f64| gamma_rollout(&learner, &window, g, p.f_min, p.f_max);
                let est = finite_difference(objective, p.gamma, GAMMA_FD_STEP, 0.0, f64::MAX, false).map_err(abort)?;
                let grads: BTreeMap<String, f64> = [("gamma".to_string(), est.grad)].into();
                controller.params = update_meta_params(&controller.params, &grads, p.eta_phi)?;
            }

            let level_grads: Vec<Matrix> = learner.hierarchy.modules.iter().map(|m| smoothed_grads[&m.id].clone()).collect();
            let outcome = controller
                .evolve(
                    &mut learner.hierarchy,
                    &EvolveInput { x: &sample.x, task_loss: loss_signal, grads_per_level: &level_grads, freq_grads: &freq_grads },
                )
                .map_err(abort)?;
            learner.sync_optimizers();
            smoothed_grads.retain(|id, _| learner.optimizers.contains_key(id));

            let gamma = controller.params.gamma;
            let ids: Vec<(u64, f64)> = learner.hierarchy.modules.iter().map(|m| (m.id, m.last_lss)).collect();
            for (id, lss) in ids {
                let beta_grads = if meta_step && learner.optimizer_config.eta_beta > 0.0 {
                    beta_gradients(&learner, id, &window).map_err(abort)?
                } else {
                    (0.0, 0.0)
                };
                if let Some(s) = learner.optimizers.get_mut(&id).and_then(|o| o.eadam_mut()) {
                    s.evolve(lss, beta_grads, gamma, &mut rng)?;
                }
            }
            (outcome.meta_loss, outcome.shift, outcome.events)
        } else {
            let (shift, meta_loss) = controller.observe(&sample.x, loss_signal).map_err(abort)?;
            (meta_loss, shift, Vec::new())
        };

        if !meta_loss.is_finite() || !grad_norm_sq.is_finite() {
            return Err(DnhError::RunAborted { step: t, message: "non-finite meta-loss".into() });
        }
        log.task_loss_trace.push(out.task_loss);
        log.grad_norm_sq_trace.push(grad_norm_sq);
        let last_step = t as usize + 1 == steps;
        if t % cfg.log_every == 0 || !events.is_empty() || last_step {
            log.records.push(MetricsRecord {
                t,
                task_loss: out.task_loss,
                meta_loss,
                levels: learner.hierarchy.levels(),
                freqs: learner.hierarchy.freqs(),
                grad_norm_sq,
                shift_estimate: shift,
                events: events.clone(),
            });
        }
        log.events.extend(events);

        if (t as usize + 1).is_multiple_of(spec.segment_len) {
            let row = heldout.iter().map(|set| learner.mean_loss(set)).collect::<Result<Vec<f64>>>().map_err(abort)?;
            task_rows.push(row);
        }
    }

    Ok(RunOutput {
        log,
        task_matrix: TaskMatrix { kind: EntryKind::Loss, values: task_rows },
        hierarchy: learner.hierarchy,
        meta: controller.params,
    })
}

/// Per-step losses of the best fixed linear predictors in hindsight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparator {
    /// Losses of the single best matrix over the whole run.
    pub losses: Vec<f64>,
    /// Losses of the best matrix fitted separately on each segment.
    pub per_segment_losses: Vec<f64>,
    /// True when a normal-equation system needed the ridge fallback.
    pub regularized: bool,
}

const COMPARATOR_RIDGE: f64 = 1e-8;

/// Solves `min_W Σ ½‖W x − y‖²`; returns `W` and whether a ridge was needed.
fn least_squares(xtx: &DMatrix<f64>, xty: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    if let Some(ch) = xtx.clone().cholesky() {
        return (ch.solve(xty).transpose(), false);
    }
    let d = xtx.nrows();
    let ridged = xtx + DMatrix::identity(d, d) * COMPARATOR_RIDGE;
    let solved = ridged
        .clone()
        .cholesky()
        .map(|c| c.solve(xty))
        .unwrap_or_else(|| ridged.pseudo_inverse(1e-12).expect("pseudo-inverse of a symmetric matrix") * xty);
    (solved.transpose(), true)
}

fn accumulate(stats: &mut (DMatrix<f64>, DMatrix<f64>), s: &Sample) {
    let x = DVector::from_column_slice(s.x.as_slice());
    let y = DVector::from_column_slice(s.target.as_slice());
    stats.0 += &x * x.transpose();
    stats.1 += &x * y.transpose();
}

fn sample_loss(w: &DMatrix<f64>, s: &Sample) -> f64 {
    let x = DVector::from_column_slice(s.x.as_slice());
    let y = DVector::from_column_slice(s.target.as_slice());
    0.5 * (w * x - y).norm_squared()
}

/// Fits the comparators over the first `steps` samples of the stream.
pub fn hindsight_comparator(spec: &StreamSpec, steps: usize) -> Result<Comparator> {
    let d = spec.dim;
    let zero = || (DMatrix::zeros(d, d), DMatrix::zeros(d, d));
    let mut all = zero();
    let mut per: Vec<(DMatrix<f64>, DMatrix<f64>)> = (0..spec.num_segments).map(|_| zero()).collect();
    for s in Stream::new(spec)?.take(steps) {
        accumulate(&mut all, &s);
        accumulate(&mut per[s.segment_id], &s);
    }
    let (w, mut regularized) = least_squares(&all.0, &all.1);
    let mut seg_w = Vec::with_capacity(per.len());
    for (xtx, xty) in &per {
        let (ws, r) = least_squares(xtx, xty);
        regularized |= r && xtx.iter().any(|v| *v != 0.0);
        seg_w.push(ws);
    }
    let mut losses = Vec::with_capacity(steps);
    let mut per_segment_losses = Vec::with_capacity(steps);
    for s in Stream::new(spec)?.take(steps) {
        losses.push(sample_loss(&w, &s));
        per_segment_losses.push(sample_loss(&seg_w[s.segment_id], &s));
    }
    Ok(Comparator { losses, per_segment_losses, regularized })
}

/// Loss of an arbitrary fixed matrix over the same samples.
pub fn fixed_predictor_losses(spec: &StreamSpec, steps: usize, w: &Matrix) -> Result<Vec<f64>> {
    let wm = DMatrix::from_row_slice(w.rows(), w.cols(), w.as_slice());
    Ok(Stream::new(spec)?.take(steps).map(|s| sample_loss(&wm, &s)).collect())
}

/// Headline numbers of one finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub mode: Mode,
    pub steps: usize,
    pub mean_task_loss: f64,
    /// Mean task loss over the last `log_every` steps.
    pub final_task_loss: f64,
    pub final_levels: usize,
    pub regret: f64,
    /// Regret against the per-segment comparators.
    pub segment_regret: f64,
    pub comparator_regularized: bool,
    pub aa: Option<f64>,
    pub bwt: Option<f64>,
    pub grad_norm_slope: Option<f64>,
    pub adds: usize,
    pub prunes: usize,
}

pub fn summarize(cfg: &ExperimentConfig, out: &RunOutput, comparator: &Comparator) -> Result<RunSummary> {
    let trace = &out.log.task_loss_trace;
    let n = trace.len();
    let tail = (cfg.log_every as usize).min(n).max(1);
    let regret = regret_of(trace, &comparator.losses)?.last().copied().unwrap_or(0.0);
    let segment_regret = regret_of(trace, &comparator.per_segment_losses)?.last().copied().unwrap_or(0.0);
    let square = out.task_matrix.values.len() == cfg.stream.num_segments;
    let (aa, bwt) = if square && cfg.stream.num_segments >= 2 {
        let (a, b) = aa_bwt(&out.task_matrix)?;
        (Some(a), Some(b))
    } else {
        (None, None)
    };
    let count = |k: crate::hierarchy::EventKind| out.log.events.iter().filter(|e| e.kind == k).count();
    Ok(RunSummary {
        seed: cfg.seed,
        mode: cfg.mode,
        steps: n,
        mean_task_loss: trace.iter().sum::<f64>() / n.max(1) as f64,
        final_task_loss: trace[n - tail..].iter().sum::<f64>() / tail as f64,
        final_levels: out.hierarchy.levels(),
        regret,
        segment_regret,
        comparator_regularized: comparator.regularized,
        aa,
        bwt,
        grad_norm_slope: grad_norm_trend(&out.log).ok().map(|t| t.0),
        adds: count(crate::hierarchy::EventKind::Add),
        prunes: count(crate::hierarchy::EventKind::Prune),
    })
}

/// Structured summary of one run: headline numbers, events, configuration
/// echo, and the final hierarchy.
pub fn summary_json(cfg: &ExperimentConfig, out: &RunOutput, summary: &RunSummary) -> serde_json::Value {
    let hierarchy: serde_json::Value = serde_json::from_str(&out.hierarchy.to_snapshot()).expect("snapshot is JSON");
    serde_json::json!({
        "schema": SUMMARY_SCHEMA,
        "config_hash": out.log.header.config_hash,
        "seed": cfg.seed,
        "code_version": CODE_VERSION,
        "final": summary,
        "events": out.log.events,
        "task_matrix": out.task_matrix,
        "config_toml": cfg.to_toml_string(),
        "hierarchy": hierarchy,
    })
}

/// Runs `cfgs` on at most `jobs` threads; results keep the input order.
pub fn run_many(cfgs: &[ExperimentConfig], jobs: usize) -> Result<Vec<RunOutput>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| DnhError::Config(format!("cannot build worker pool: {e}")))?;
    pool.install(|| cfgs.par_iter().map(run_experiment).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub runs: Vec<RunSummary>,
    pub mean_regret: f64,
    pub mean_aa: Option<f64>,
    pub mean_bwt: Option<f64>,
    /// Mean `L_t` across seeds at each multiple of `log_every`.
    pub mean_levels: Vec<(u64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub schema: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub dnh: ModeReport,
    #[serde(rename = "static")]
    pub static_mode: ModeReport,
    /// Mean evolving regret divided by mean static regret.
    pub regret_ratio: f64,
    /// `mean evolving regret ≤ 0.8 · mean static regret`.
    pub regret_dominance: bool,
    /// Structural events of every evolving run, tagged with the seed.
    pub timeline: Vec<(u64, StructuralEvent)>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn mode_report(cfgs: &[ExperimentConfig], outs: &[RunOutput], comps: &[Comparator]) -> Result<ModeReport> {
    let runs = cfgs
        .iter()
        .zip(outs)
        .zip(comps)
        .map(|((c, o), k)| summarize(c, o, k))
        .collect::<Result<Vec<_>>>()?;
    let opt_mean = |f: &dyn Fn(&RunSummary) -> Option<f64>| -> Option<f64> {
        let v: Option<Vec<f64>> = runs.iter().map(f).collect();
        v.map(|v| mean(v.into_iter()))
    };
    let every = cfgs[0].log_every;
    let mut mean_levels = Vec::new();
    for r in outs[0].log.records.iter().filter(|r| r.t % every == 0) {
        let at: Option<Vec<f64>> = outs
            .iter()
            .map(|o| o.log.records.iter().find(|x| x.t == r.t).map(|x| x.levels as f64))
            .collect();
        if let Some(at) = at {
            mean_levels.push((r.t, mean(at.into_iter())));
        }
    }
    Ok(ModeReport {
        mean_regret: mean(runs.iter().map(|r| r.regret)),
        mean_aa: opt_mean(&|r| r.aa),
        mean_bwt: opt_mean(&|r| r.bwt),
        mean_levels,
        runs,
    })
}

/// Runs `cfg` in both modes over `seeds` and compares them.
pub fn compare(cfg: &ExperimentConfig, seeds: &[u64], jobs: usize) -> Result<CompareReport> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(DnhError::Config("comparison needs at least one seed".into()));
    }
    let dnh_cfgs: Vec<ExperimentConfig> = seeds.iter().map(|&s| ExperimentConfig { mode: Mode::Dnh, ..cfg.with_seed(s) }).collect();
    let static_cfgs: Vec<ExperimentConfig> = seeds.iter().map(|&s| ExperimentConfig { mode: Mode::Static, ..cfg.with_seed(s) }).collect();
    let all: Vec<ExperimentConfig> = dnh_cfgs.iter().chain(&static_cfgs).cloned().collect();
    let outs = run_many(&all, jobs)?;
    let comps = dnh_cfgs
        .iter()
        .map(|c| hindsight_comparator(&c.stream_spec(), c.steps()))
        .collect::<Result<Vec<_>>>()?;
    let (dnh_outs, static_outs) = outs.split_at(seeds.len());
    let dnh = mode_report(&dnh_cfgs, dnh_outs, &comps)?;
    let static_mode = mode_report(&static_cfgs, static_outs, &comps)?;
    let timeline = seeds
        .iter()
        .zip(dnh_outs)
        .flat_map(|(&s, o)| o.log.structural_events().map(move |e| (s, e.clone())))
        .collect();
    Ok(CompareReport {
        schema: REPORT_SCHEMA.into(),
        config_hash: cfg.config_hash(),
        seeds: seeds.to_vec(),
        regret_ratio: dnh.mean_regret / static_mode.mean_regret,
        regret_dominance: dnh.mean_regret <= 0.8 * static_mode.mean_regret,
        dnh,
        static_mode,
        timeline,
    })
}

/// Fields that can be swept.
pub const SWEEP_PARAMS: [&str; 4] = ["delta_threshold", "gamma", "l_max", "eta_f"];

/// Copy of `cfg` with one sweepable field replaced.
pub fn with_param(cfg: &ExperimentConfig, param: &str, value: f64) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    match param {
        "delta_threshold" => c.meta.delta_threshold = value,
        "gamma" => c.meta.gamma = value,
        "eta_f" => c.meta.eta_f = value,
        "l_max" => {
            if value.fract() != 0.0 || value < 1.0 {
                return Err(DnhError::Config(format!("l_max must be a positive integer, got {value}")));
            }
            c.l_max = value as usize;
        }
        other => {
            return Err(DnhError::Config(format!(
                "unknown sweep parameter {other}; expected one of {}",
                SWEEP_PARAMS.join(", ")
            )))
        }
    }
    c.validate()?;
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub config_hash: String,
    pub regret_ratio: f64,
    pub dnh_aa: Option<f64>,
    pub dnh_bwt: Option<f64>,
    pub static_aa: Option<f64>,
    pub static_bwt: Option<f64>,
}

/// One comparison per value, run concurrently.
pub fn sweep(cfg: &ExperimentConfig, param: &str, values: &[f64], seeds: &[u64], jobs: usize) -> Result<Vec<(SweepRow, CompareReport)>> {
    let cfgs = values.iter().map(|&v| with_param(cfg, param, v)).collect::<Result<Vec<_>>>()?;
    let outer = (jobs / (2 * seeds.len()).max(1)).max(1).min(cfgs.len().max(1));
    let inner = (jobs / outer).max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(outer)
        .build()
        .map_err(|e| DnhError::Config(format!("cannot build worker pool: {e}")))?;
    let reports: Vec<CompareReport> = pool.install(|| cfgs.par_iter().map(|c| compare(c, seeds, inner)).collect::<Result<_>>())?;
    Ok(values
        .iter()
        .zip(reports)
        .map(|(&value, r)| {
            (
                SweepRow {
                    value,
                    config_hash: r.config_hash.clone(),
                    regret_ratio: r.regret_ratio,
                    dnh_aa: r.dnh.mean_aa,
                    dnh_bwt: r.dnh.mean_bwt,
                    static_aa: r.static_mode.mean_aa,
                    static_bwt: r.static_mode.mean_bwt,
                },
                r,
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::streams::StreamKind;

    fn small() -> ExperimentConfig {
        let mut c = ExperimentConfig {
            stream: StreamSpec { dim: 3, segment_len: 300, num_segments: 3, ..Default::default() },
            ..ExperimentConfig::default()
        };
        c.meta.window = 50;
        c.eval_samples = 50;
        c.log_every = 25;
        c.seed = 5;
        c
    }

    #[test]
    fn run_is_deterministic() {
        let a = run_experiment(&small()).unwrap();
        let b = run_experiment(&small()).unwrap();
        assert_eq!(a.log.to_csv(), b.log.to_csv());
        assert_eq!(a.log.task_loss_trace.len(), 900);
        assert_eq!(a.task_matrix.values.len(), 3);
        assert!(a.log.records.windows(2).all(|w| w[0].t < w[1].t));
    }

    #[test]
    fn static_equals_disabled_evolution() {
        let base = small();
        let stat = run_experiment(&ExperimentConfig { mode: Mode::Static, ..base.clone() }).unwrap();
        let off = run_experiment(&base.with_adaptation_disabled()).unwrap();
        assert_eq!(stat.log.to_csv(), off.log.to_csv());
    }

    #[test]
    fn truncated_runs_stop_early() {
        let c = ExperimentConfig { total_steps: Some(310), ..small() };
        let out = run_experiment(&c).unwrap();
        assert_eq!(out.log.task_loss_trace.len(), 310);
        assert_eq!(out.task_matrix.values.len(), 1);
        assert_eq!(out.log.records.last().unwrap().t, 309);
    }

    #[test]
    fn comparator_examples() {
        let spec = StreamSpec { dim: 3, segment_len: 200, num_segments: 1, noise_std: 0.0, seed: Some(2), ..Default::default() };
        let c = hindsight_comparator(&spec, 200).unwrap();
        assert!(c.losses.iter().all(|&l| l < 1e-10));
        assert!(!c.regularized);

        let two = StreamSpec { num_segments: 2, shift_magnitude: 1.0, ..spec.clone() };
        let c = hindsight_comparator(&two, 400).unwrap();
        let seg0: f64 = c.losses[..200].iter().sum();
        let seg1: f64 = c.losses[200..].iter().sum();
        assert!(seg0 > 0.0 || seg1 > 0.0);
        assert!(c.per_segment_losses.iter().all(|&l| l < 1e-10));

        let noisy = StreamSpec { noise_std: 0.3, ..two };
        let c = hindsight_comparator(&noisy, 400).unwrap();
        let best: f64 = c.losses.iter().sum();
        let mut rng = RngState::new(3);
        let center = Stream::new(&noisy).unwrap().teacher(0).unwrap();
        for _ in 0..100 {
            let probe = center.add(&rng.normal_matrix(3, 3, 0.3));
            let total: f64 = fixed_predictor_losses(&noisy, 400, &probe).unwrap().iter().sum();
            assert!(best <= total);
        }
    }

    #[test]
    fn rank_deficient_inputs_use_ridge() {
        // A single sample cannot determine a 3x3 map.
        let spec = StreamSpec { dim: 3, segment_len: 1, num_segments: 1, seed: Some(1), ..Default::default() };
        let c = hindsight_comparator(&spec, 1).unwrap();
        assert!(c.regularized);
        assert!(c.losses[0].is_finite());
    }

    #[test]
    fn sweep_params() {
        let c = small();
        assert_eq!(with_param(&c, "gamma", 0.3).unwrap().meta.gamma, 0.3);
        assert_eq!(with_param(&c, "l_max", 4.0).unwrap().l_max, 4);
        assert!(with_param(&c, "l_max", 2.5).is_err());
        assert!(matches!(with_param(&c, "tau", 1.0), Err(DnhError::Config(_))));
    }

    #[test]
    fn compare_of_disabled_config_has_unit_ratio() {
        let c = ExperimentConfig { total_steps: Some(300), ..small() }.with_adaptation_disabled();
        let r = compare(&c, &[1, 2], 2).unwrap();
        assert_eq!(r.regret_ratio, 1.0);
        assert_eq!(r.dnh.runs[0].regret, r.static_mode.runs[0].regret);
    }

    #[test]
    fn classification_stream_runs() {
        let mut c = small();
        c.stream.kind = StreamKind::RotatingGaussian;
        let out = run_experiment(&c).unwrap();
        assert!(out.hierarchy.validate().is_ok());
    }
}
