//! `dnh`: runs experiments, comparisons, sweeps and gradient checks.
//!
//! Exit codes: 0 success, 1 check failure, 2 configuration error, 3 numeric
//! failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dnh_core::config::ExperimentConfig;
use dnh_core::error::DnhError;
use dnh_core::gradcheck::{run_gradchecks, Corruption, GRADCHECK_TOL};
use dnh_core::harness::{compare, hindsight_comparator, run_experiment, summarize, summary_json, sweep, CompareReport, DEFAULT_SEEDS, SWEEP_SCHEMA};
use dnh_core::streams::Stream;

#[derive(Debug, Parser)]
#[command(name = "dnh", version, about = "Dynamic nested hierarchy experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configured step count.
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Debug, Args)]
struct Jobs {
    /// Concurrent jobs.
    #[arg(long, env = "DNH_JOBS", default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Runs one experiment and writes `metrics.csv` and `summary.json`.
    Run {
        #[command(flatten)]
        common: Common,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Runs evolving and static modes over three seeds and writes `compare.json`
    /// and `levels.csv`.
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        jobs: Jobs,
        /// First of three consecutive seeds (default 1, 2, 3).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compares analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Perturbs analytic gradients to exercise the failure path.
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Runs a comparison per value of one parameter and writes `sweep.csv`
    /// and `sweep.json`.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        jobs: Jobs,
        /// One of delta_threshold, gamma, l_max, eta_f.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Writes the configured stream to `stream.csv`.
    DumpStream {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// CLI failure carrying its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl From<DnhError> for Failure {
    fn from(e: DnhError) -> Self {
        Failure { code: e.exit_code() as u8, message: e.to_string() }
    }
}

fn config_failure(message: String) -> Failure {
    Failure { code: 2, message }
}

fn load(common: &Common, seed: Option<u64>) -> Result<ExperimentConfig, Failure> {
    let text = fs::read_to_string(&common.config)
        .map_err(|e| config_failure(format!("cannot read config {}: {e}", common.config.display())))?;
    let mut cfg = ExperimentConfig::from_toml_str(&text)
        .map_err(|e| config_failure(format!("{}: {e}", common.config.display())))?;
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(n) = common.steps {
        cfg.total_steps = Some(n);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Writes every file only after all of them have been computed.
fn write_outputs(dir: &Path, files: &[(&str, String)]) -> Result<(), Failure> {
    let io = |e: std::io::Error| config_failure(format!("cannot write to {}: {e}", dir.display()));
    fs::create_dir_all(dir).map_err(io)?;
    for (name, body) in files {
        fs::write(dir.join(name), body).map_err(io)?;
    }
    Ok(())
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s
}

fn seeds_from(seed: Option<u64>) -> Vec<u64> {
    seed.map_or(DEFAULT_SEEDS.to_vec(), |s| vec![s, s + 1, s + 2])
}

fn levels_csv(report: &CompareReport) -> String {
    let seeds: Vec<String> = report.seeds.iter().map(ToString::to_string).collect();
    let mut out = format!("# config_hash={} seeds={}\nt,dnh_mean_levels,static_mean_levels\n", report.config_hash, seeds.join(";"));
    for ((t, a), (_, b)) in report.dnh.mean_levels.iter().zip(&report.static_mode.mean_levels) {
        writeln!(out, "{t},{a},{b}").expect("string write");
    }
    out
}

fn cmd_run(common: &Common, seed: Option<u64>) -> Result<(), Failure> {
    let cfg = load(common, seed)?;
    let out = run_experiment(&cfg)?;
    let comparator = hindsight_comparator(&cfg.stream_spec(), cfg.steps())?;
    let summary = summarize(&cfg, &out, &comparator)?;
    let json = summary_json(&cfg, &out, &summary);
    write_outputs(&common.out, &[("metrics.csv", out.log.to_csv()), ("summary.json", to_json(&json))])?;
    println!(
        "run seed={} steps={} mean_task_loss={:.6} regret={:.4} levels={} config_hash={}",
        cfg.seed, summary.steps, summary.mean_task_loss, summary.regret, summary.final_levels, out.log.header.config_hash
    );
    Ok(())
}

fn cmd_compare(common: &Common, jobs: usize, seed: Option<u64>) -> Result<(), Failure> {
    let cfg = load(common, None)?;
    let report = compare(&cfg, &seeds_from(seed), jobs)?;
    write_outputs(&common.out, &[("compare.json", to_json(&report)), ("levels.csv", levels_csv(&report))])?;
    println!(
        "compare regret_ratio={:.4} dominance={} dnh_regret={:.4} static_regret={:.4}",
        report.regret_ratio, report.regret_dominance, report.dnh.mean_regret, report.static_mode.mean_regret
    );
    Ok(())
}

fn cmd_gradcheck(seed: u64, trials: usize, corrupt: bool) -> Result<(), Failure> {
    let mode = if corrupt { Corruption::Perturb } else { Corruption::None };
    let reports = run_gradchecks(seed, trials, mode)?;
    let mut failed = Vec::new();
    for r in &reports {
        let verdict = if r.passed { "ok" } else { "FAIL" };
        println!("{verdict} {} trials={} worst_rel_err={:.3e} tol={GRADCHECK_TOL:e}", r.name, r.trials, r.worst_rel_err);
        if !r.passed {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure { code: 1, message: format!("gradient check failed: {}", failed.join(", ")) })
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

fn cmd_sweep(common: &Common, jobs: usize, param: &str, values: &[f64], seed: Option<u64>) -> Result<(), Failure> {
    let cfg = load(common, None)?;
    let seeds = seeds_from(seed);
    let rows = sweep(&cfg, param, values, &seeds, jobs)?;
    let seed_list: Vec<String> = seeds.iter().map(ToString::to_string).collect();
    let mut table = format!(
        "# schema={SWEEP_SCHEMA} param={param} base_config_hash={} seeds={}\nvalue,config_hash,regret_ratio,dnh_aa,dnh_bwt,static_aa,static_bwt\n",
        cfg.config_hash(),
        seed_list.join(";")
    );
    for (r, _) in &rows {
        writeln!(
            table,
            "{},{},{},{},{},{},{}",
            r.value,
            r.config_hash,
            r.regret_ratio,
            opt(r.dnh_aa),
            opt(r.dnh_bwt),
            opt(r.static_aa),
            opt(r.static_bwt)
        )
        .expect("string write");
    }
    let reports: Vec<&CompareReport> = rows.iter().map(|(_, r)| r).collect();
    let json = serde_json::json!({
        "schema": SWEEP_SCHEMA,
        "param": param,
        "base_config_hash": cfg.config_hash(),
        "seeds": seeds,
        "reports": reports,
    });
    write_outputs(&common.out, &[("sweep.csv", table), ("sweep.json", to_json(&json))])?;
    for (r, _) in &rows {
        println!("sweep {param}={} regret_ratio={:.4}", r.value, r.regret_ratio);
    }
    Ok(())
}

fn cmd_dump_stream(common: &Common, seed: Option<u64>) -> Result<(), Failure> {
    let cfg = load(common, seed)?;
    let spec = cfg.stream_spec();
    let mut body = format!(
        "# config_hash={} seed={} stream_seed={}\n",
        cfg.config_hash(),
        cfg.seed,
        spec.seed.unwrap_or(cfg.seed)
    )
    .into_bytes();
    let mut stream = Stream::new(&spec)?;
    let mut limited = Vec::new();
    stream.dump_csv(&mut limited).expect("in-memory write");
    // Keep the header plus the configured number of steps.
    let text = String::from_utf8(limited).expect("utf-8 csv");
    for line in text.lines().take(cfg.steps() + 1) {
        body.extend_from_slice(line.as_bytes());
        body.push(b'\n');
    }
    write_outputs(&common.out, &[("stream.csv", String::from_utf8(body).expect("utf-8 csv"))])
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { common, seed } => cmd_run(common, *seed),
        Command::Compare { common, jobs, seed } => cmd_compare(common, jobs.jobs, *seed),
        Command::Gradcheck { seed, trials, corrupt } => cmd_gradcheck(*seed, *trials, *corrupt),
        Command::Sweep { common, jobs, param, values, seed } => cmd_sweep(common, jobs.jobs, param, values, *seed),
        Command::DumpStream { common, seed } => cmd_dump_stream(common, *seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
