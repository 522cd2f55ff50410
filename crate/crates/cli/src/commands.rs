use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::json;

use opl_core::optimize::{optimize, OptimizeConfig};
use opl_core::seed::mix;
use opl_core::sim::{
    markdown_table, oracle_search, replicate_experiment, simulate, write_rows_csv, Actor, EnvSpec, EvalProtocol, ExperimentConfig,
    ExperimentReport, OracleConfig, SummaryLine, TuningMode,
};
use opl_core::tuner::{cv_select, TuningGrid};
use opl_core::{load_dataset, write_dataset, KernelConfig, PolicyParams, TuningPair, Tunings};

use crate::config::{merge, require, usage};
use crate::manifest::RunManifest;

fn parse_env(name: &str) -> Result<EnvSpec> {
    EnvSpec::parse(name).ok_or_else(|| usage(format!("unknown environment '{name}' (expected scenario1, scenario2, vlearning or tabular)")))
}

fn parse_protocol(name: &str) -> Result<EvalProtocol> {
    match name {
        "long-run" => Ok(EvalProtocol::LONG_RUN),
        "single-chain" => Ok(EvalProtocol::SINGLE_CHAIN),
        "short-runs" => Ok(EvalProtocol::SHORT_RUNS),
        _ => Err(usage(format!("unknown protocol '{name}' (expected long-run, single-chain or short-runs)"))),
    }
}

fn prepare_out(out: &Option<PathBuf>) -> Result<PathBuf> {
    let dir = out.clone().ok_or_else(|| usage("missing required argument --out"))?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// scenario1, scenario2, vlearning or tabular
    #[arg(long)]
    pub env: Option<String>,
    /// Number of trajectories.
    #[arg(long)]
    pub n: Option<usize>,
    /// Trajectory length.
    #[arg(long = "T")]
    #[serde(rename = "T")]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; receives data.jsonl and manifest.json.
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

pub fn simulate_cmd(args: &SimulateArgs) -> Result<()> {
    let (cfg, merged) = merge(args, args.config.as_deref())?;
    let env = parse_env(&require(&cfg.env, "env")?)?;
    let (n, horizon, seed) = (require(&cfg.n, "n")?, require(&cfg.horizon, "T")?, require(&cfg.seed, "seed")?);
    let dir = prepare_out(&args.out)?;
    let mut manifest = RunManifest::start("simulate", merged, Some(seed));
    let data = simulate(env.build().as_ref(), Actor::Behavior, n, horizon, seed)?;
    let path = dir.join("data.jsonl");
    write_dataset(&data, &path)?;
    manifest.outputs.push(path);
    manifest.finish(&dir)?;
    eprintln!("wrote {n} trajectories of length {horizon} to {}", dir.display());
    Ok(())
}

/// Arguments shared by `tune` and `learn` that shape cross-validation.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CvArgs {
    /// Candidate policies for the max-over-policies criterion.
    #[arg(long)]
    pub candidates: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
}

impl CvArgs {
    fn grid(&self) -> TuningGrid {
        let d = TuningGrid::default();
        TuningGrid { n_candidates: self.candidates.unwrap_or(d.n_candidates), n_folds: self.folds.unwrap_or(d.n_folds), ..d }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TuneArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// JSON-lines dataset.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub cv: CvArgs,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

pub fn tune_cmd(args: &TuneArgs) -> Result<()> {
    let (cfg, merged) = merge(args, args.config.as_deref())?;
    let data_path = require(&cfg.data, "data")?;
    let seed = cfg.seed.unwrap_or(0);
    let dir = prepare_out(&args.out)?;
    let mut manifest = RunManifest::start("tune", merged, Some(seed));
    let data = load_dataset(&data_path).with_context(|| format!("loading {}", data_path.display()))?;
    let kernel = KernelConfig::from_tuples(&opl_core::flatten(&data))?;
    let template = PolicyParams::zeros(data.state_dim(), OptimizeConfig::default().box_bound, OptimizeConfig::default().features);
    let cv = cv_select(&data, &cfg.cv.grid(), &kernel, seed, &template)?;
    let path = dir.join("tuning.json");
    write_json(&path, &cv)?;
    manifest.inputs.push(data_path);
    manifest.outputs.push(path);
    manifest.finish(&dir)?;
    println!("{}", serde_json::to_string(&json!({ "value": cv.chosen_value, "ratio": cv.chosen_ratio }))?);
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct LearnArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Required: every random choice derives from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Explicit penalty; with --mu skips cross-validation.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub starts: Option<usize>,
    /// Validate the analytic gradient against finite differences.
    #[arg(long)]
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub check_gradient: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub cv: CvArgs,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

pub fn learn_cmd(args: &LearnArgs) -> Result<()> {
    let (cfg, merged) = merge(args, args.config.as_deref())?;
    let data_path = require(&cfg.data, "data")?;
    let seed = require(&cfg.seed, "seed")?;
    let dir = prepare_out(&args.out)?;
    let mut manifest = RunManifest::start("learn", merged, Some(seed));
    let data = load_dataset(&data_path).with_context(|| format!("loading {}", data_path.display()))?;
    let kernel = KernelConfig::from_tuples(&opl_core::flatten(&data))?;
    let base = OptimizeConfig { seed, check_gradient: cfg.check_gradient, n_starts: cfg.starts.unwrap_or(OptimizeConfig::default().n_starts), ..OptimizeConfig::default() };
    let (tunings, label) = match (cfg.lambda, cfg.mu) {
        (Some(lambda), Some(mu)) => {
            let pair = TuningPair { lambda, mu };
            (Tunings { value: pair, ratio: pair }, "explicit")
        }
        (None, None) => {
            let template = PolicyParams::zeros(data.state_dim(), base.box_bound, base.features);
            (cv_select(&data, &cfg.cv.grid(), &kernel, seed, &template)?.tunings(), "cross_validated")
        }
        _ => return Err(usage("--lambda and --mu must be given together")),
    };
    let opt = OptimizeConfig { tuning_value: tunings.value, tuning_ratio: tunings.ratio, ..base };
    let result = optimize(&data, &opt, &kernel)?;
    if let Some(check) = &result.gradient_check {
        eprintln!("gradient check: max relative error {:.3e}", check.max_rel_err);
    }
    let policy_path = dir.join("policy.json");
    let diag_path = dir.join("learn.json");
    write_json(&policy_path, &result.theta_hat)?;
    write_json(&diag_path, &result)?;
    manifest.tuning = Some(label.to_string());
    manifest.inputs.push(data_path);
    manifest.outputs.extend([policy_path, diag_path]);
    manifest.finish(&dir)?;
    println!("{}", serde_json::to_string(&json!({ "theta": result.theta_hat.theta, "objective": result.objective, "tuning": label }))?);
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Policy JSON as written by `learn`.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    #[arg(long)]
    pub env: Option<String>,
    #[arg(long = "n-test")]
    pub n_test: Option<usize>,
    #[arg(long = "T-test")]
    #[serde(rename = "T_test")]
    pub t_test: Option<usize>,
    #[arg(long = "burn-in")]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Optional output directory for evaluation.json and a manifest.
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

pub fn evaluate_cmd(args: &EvaluateArgs) -> Result<()> {
    let (cfg, merged) = merge(args, args.config.as_deref())?;
    let policy_path = require(&cfg.policy, "policy")?;
    let env = parse_env(&require(&cfg.env, "env")?)?;
    let seed = cfg.seed.unwrap_or(0);
    let manifest = RunManifest::start("evaluate", merged, Some(seed));
    let text = fs::read_to_string(&policy_path).with_context(|| format!("reading {}", policy_path.display()))?;
    let policy: PolicyParams = serde_json::from_str(&text).with_context(|| format!("parsing {}", policy_path.display()))?;
    let protocol = EvalProtocol { n_test: cfg.n_test.unwrap_or(1000), t_test: cfg.t_test.unwrap_or(100), burn_in: cfg.burn_in.unwrap_or(0) };
    let est = protocol.run(env.build().as_ref(), &policy, seed)?;
    if !est.mean.is_finite() {
        bail!("policy value is not finite ({} trajectories escaped)", est.escaped);
    }
    let report = json!({ "mean": est.mean, "sd": est.sd, "escaped": est.escaped });
    if args.out.is_some() {
        let dir = prepare_out(&args.out)?;
        let path = dir.join("evaluation.json");
        write_json(&path, &report)?;
        let mut manifest = manifest;
        manifest.inputs.push(policy_path);
        manifest.outputs.push(path);
        manifest.finish(&dir)?;
    }
    println!("{report}");
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct OracleArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub env: Option<String>,
    /// long-run, single-chain or short-runs
    #[arg(long)]
    pub protocol: Option<String>,
    #[arg(long)]
    pub starts: Option<usize>,
    /// Grid points per coordinate for the initial screen.
    #[arg(long = "grid-points")]
    pub grid_points: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

pub fn oracle_cmd(args: &OracleArgs) -> Result<()> {
    let (cfg, merged) = merge(args, args.config.as_deref())?;
    let env = parse_env(&require(&cfg.env, "env")?)?;
    let d = OracleConfig::default();
    let protocol = cfg.protocol.as_deref().map(parse_protocol).transpose()?.unwrap_or(d.protocol);
    let seed = cfg.seed.unwrap_or(0);
    let oc = OracleConfig { protocol, n_starts: cfg.starts.unwrap_or(d.n_starts), grid_points: cfg.grid_points.unwrap_or(d.grid_points), seed, ..d };
    let manifest = RunManifest::start("oracle", merged, Some(seed));
    let result = oracle_search(env.build().as_ref(), &oc)?;
    eprintln!("oracle eta* = {:.4} at theta {:?}", result.eta_star, result.theta_star.theta);
    if args.out.is_some() {
        let dir = prepare_out(&args.out)?;
        let path = dir.join("oracle.json");
        write_json(&path, &result)?;
        let mut manifest = manifest;
        manifest.outputs.push(path);
        manifest.finish(&dir)?;
    }
    println!("{}", serde_json::to_string(&json!({ "eta_star": result.eta_star, "search_value": result.search_value, "theta": result.theta_star.theta }))?);
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReproduceArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// table1, table2 or table3-ours
    #[arg(long)]
    pub table: Option<String>,
    /// Replications per setting.
    #[arg(long)]
    pub reps: Option<usize>,
    /// Required: all replication seeds derive from it.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

struct Setting {
    env: EnvSpec,
    n: usize,
    horizon: usize,
    reference: &'static str,
}

fn setting(env: EnvSpec, n: usize, horizon: usize, reference: &'static str) -> Setting {
    Setting { env, n, horizon, reference }
}

fn table_settings(table: &str) -> Result<Vec<Setting>> {
    use EnvSpec::{Scenario1, Scenario2, Vlearning};
    Ok(match table {
        "table1" => vec![
            setting(Scenario1, 40, 50, "9.215 (0.133)"),
            setting(Scenario1, 40, 100, "9.913 (0.005)"),
            setting(Scenario1, 80, 50, "9.834 (0.052)"),
            setting(Scenario2, 40, 50, "9.243 (0.133)"),
            setting(Scenario2, 40, 100, "9.905 (0.006)"),
            setting(Scenario2, 80, 50, "9.919 (0.005)"),
        ],
        "table2" => vec![
            setting(Vlearning, 25, 24, "0.027 (0.003)"),
            setting(Vlearning, 25, 48, "0.012 (0.007)"),
            setting(Vlearning, 50, 24, "0.017 (0.002)"),
            setting(Vlearning, 50, 48, "0.009 (0.003)"),
        ],
        "table3-ours" => vec![
            setting(Vlearning, 25, 24, "0.898 (0.003); Gaussian VL 0.612 (0.007)"),
            setting(Vlearning, 25, 48, "0.900 (0.007); Gaussian VL 0.613 (0.005)"),
            setting(Vlearning, 50, 24, "0.913 (0.002); Gaussian VL 0.614 (0.005)"),
            setting(Vlearning, 50, 48, "0.914 (0.003); Gaussian VL 0.615 (0.003)"),
        ],
        other => return Err(usage(format!("unknown table '{other}' (expected table1, table2 or table3-ours)"))),
    })
}

fn experiment_config(table: &str, s: &Setting, reps: usize, seed_root: u64) -> ExperimentConfig {
    let (eval, regret_eval, oracle) = match table {
        "table1" => (EvalProtocol::LONG_RUN, None, None),
        "table2" => (
            EvalProtocol::SHORT_RUNS,
            Some(EvalProtocol::SINGLE_CHAIN),
            Some(OracleConfig { protocol: EvalProtocol::SINGLE_CHAIN, grid_points: 21, seed: mix(seed_root, 0x0A), ..OracleConfig::default() }),
        ),
        _ => (EvalProtocol::SHORT_RUNS, None, None),
    };
    ExperimentConfig {
        env: s.env.clone(),
        n: s.n,
        horizon: s.horizon,
        n_reps: reps,
        eval,
        regret_eval,
        optimizer: OptimizeConfig::default(),
        tuning: TuningMode::CrossValidated { grid: TuningGrid::default() },
        oracle,
        seed_root,
    }
}

pub fn reproduce_cmd(args: &ReproduceArgs) -> Result<()> {
    let (cfg, merged) = merge(args, args.config.as_deref())?;
    let table = require(&cfg.table, "table")?;
    let seed = require(&cfg.seed, "seed")?;
    let reps = cfg.reps.unwrap_or(20);
    if reps == 0 {
        return Err(usage("--reps must be at least 1"));
    }
    let settings = table_settings(&table)?;
    let dir = prepare_out(&args.out)?;
    let mut manifest = RunManifest::start("reproduce", merged, Some(seed));
    let regret = table == "table2";
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    let mut failures = 0;
    for (i, s) in settings.iter().enumerate() {
        eprintln!("{} (n={}, T={}): {reps} replications", s.env.name(), s.n, s.horizon);
        let report: ExperimentReport = replicate_experiment(&experiment_config(&table, s, reps, mix(seed, i as u64)))?;
        let summary = if regret { report.regret_summary() } else { report.value_summary() };
        failures += report.failures();
        for row in report.rows.iter().filter(|r| r.error.is_some()) {
            eprintln!("  rep {} failed: {}", row.rep, row.error.as_deref().unwrap_or(""));
        }
        lines.push(SummaryLine {
            label: s.env.name().to_string(),
            n: s.n,
            horizon: s.horizon,
            mean: summary.map(|m| m.0),
            sd: summary.map(|m| m.1),
            reference: Some(s.reference.to_string()),
            failures: report.failures(),
        });
        rows.extend(report.rows);
    }
    let metric = if regret { "regret" } else { "value" };
    let md = markdown_table(&format!("{table} ({reps} replications)"), metric, &lines);
    let csv_path = dir.join("rows.csv");
    let md_path = dir.join("table.md");
    write_rows_csv(&rows, &csv_path)?;
    fs::write(&md_path, &md)?;
    manifest.outputs.extend([csv_path, md_path]);
    manifest.finish(&dir)?;
    println!("{md}");
    if failures > 0 {
        bail!("{failures} replications failed");
    }
    Ok(())
}
