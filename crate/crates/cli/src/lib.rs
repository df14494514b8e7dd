//! Command implementations behind the `prefrobust` binary.
//!
//! Each `cmd_*` function is callable in-process; `main` only parses flags,
//! sets up logging and maps errors to exit codes (see [`exit_code`]).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use prefrobust::bench::{self, BenchConfig, Prepared};
use prefrobust::config::KvConfig;
use prefrobust::dro::{regularizer_coefficient, Direction};
use prefrobust::evalmetrics::Evaluator;
use prefrobust::noise::{NoiseKind, NoiseSpec};
use prefrobust::policy::{Checkpoint, LogLinearPolicy, RewardFeaturizer};
use prefrobust::prefdata::{generate_dataset, load_jsonl, task_judges, write_jsonl, DatasetManifest};
use prefrobust::rmab::whittle::{WhittleParams, WhittleTable};
use prefrobust::rmab::{parse_reward, RmabInstance};
use prefrobust::trainer::{train, write_metrics_csv, Method, TrainConfig};
use prefrobust::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "prefrobust", version, about = "Robust preference optimization toolkit")]
pub struct Cli {
    /// Worker threads (default: all cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic preference dataset (JSONL).
    GenData(GenDataArgs),
    /// Train a log-linear policy on a dataset.
    Train(TrainArgs),
    /// Judge a trained checkpoint on held-out candidate pools.
    Eval(EvalArgs),
    /// Run the method × noise × seed benchmark grid.
    Sweep(SweepArgs),
    /// Per-arm Whittle index table for a reward expression.
    Whittle(WhittleArgs),
    /// Regularizer coefficient over a q grid, as CSV.
    Curve(CurveArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Manifest (`manifest.*` keys).
    #[arg(long)]
    pub config: PathBuf,
    /// Environment file; defaults to the desk preset.
    #[arg(long)]
    pub env: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `manifest.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training config (`train.*`, method section, optional `noise.*`).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoint.json and metrics.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Environment whose features define the featurizer; defaults to the
    /// desk catalog.
    #[arg(long)]
    pub env: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset the references are drawn from.
    #[arg(long)]
    pub data: PathBuf,
    /// Benchmark config (`manifest.*`, `eval.*`); optional.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub env: Option<PathBuf>,
    /// Output directory for report.json and per_task.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Seed the dataset was generated with (judges and eval pools derive
    /// from it).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Benchmark config (`manifest.*`, `train.*` without method, `dro.*`,
    /// `rdpo.*`, `drdpo.*`, `eval.*`, `noise.kind`); optional.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub env: Option<PathBuf>,
    /// Noise levels, comma separated.
    #[arg(long, default_value = "0,0.1,0.3")]
    pub alphas: String,
    /// Methods, comma separated.
    #[arg(long, default_value = "dpo,dpo-pro,rdpo,drdpo")]
    pub methods: String,
    /// Seeds: a list `0,1,2` or a half-open range `0..10`.
    #[arg(long, default_value = "0..10")]
    pub seed: String,
    /// Output directory for sweep.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct WhittleArgs {
    #[arg(long)]
    pub env: PathBuf,
    /// File holding a single-line reward expression.
    #[arg(long)]
    pub program: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CurveArgs {
    /// Radii, comma separated.
    #[arg(long, default_value = "0.1,0.5,1,4")]
    pub rho: String,
    #[arg(long, default_value_t = 1e-3)]
    pub step: f64,
    #[arg(long)]
    pub out: PathBuf,
}

/// 0 success, 2 input error, 3 numeric failure, 4 model-assumption
/// violation.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numeric(_) | Error::Invariant(_) => 3,
        Error::ModelAssumption(_) => 4,
        _ => 2,
    }
}

/// Provenance sidecar written next to every output.
#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub command_line: Vec<String>,
    pub config_hash: Option<String>,
    pub seed: Option<String>,
    /// SHA-256 over the input files' contents, in argument order.
    pub input_hash: String,
    pub outputs: Vec<RecordedOutput>,
    pub wall_time_seconds: f64,
}

#[derive(Debug, Serialize)]
pub struct RecordedOutput {
    pub path: String,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Recorder {
    started: Instant,
    command_line: Vec<String>,
    config_hash: Option<String>,
    seed: Option<String>,
    inputs: Sha256,
}

impl Recorder {
    fn new(seed: Option<String>) -> Self {
        Self {
            started: Instant::now(),
            command_line: std::env::args().collect(),
            config_hash: None,
            seed,
            inputs: Sha256::new(),
        }
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path)?;
        self.inputs.update((bytes.len() as u64).to_le_bytes());
        self.inputs.update(&bytes);
        Ok(())
    }

    fn config(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path)?;
        self.config_hash = Some(sha256_hex(&bytes));
        self.input(path)
    }

    /// Writes `<sidecar>` describing `outputs`.
    fn finish(self, sidecar: &Path, outputs: &[&Path]) -> Result<()> {
        let outputs = outputs
            .iter()
            .map(|p| Ok(RecordedOutput { path: p.display().to_string(), sha256: sha256_hex(&fs::read(p)?) }))
            .collect::<Result<Vec<_>>>()?;
        let record = RunRecord {
            command_line: self.command_line,
            config_hash: self.config_hash,
            seed: self.seed,
            input_hash: hex::encode(self.inputs.finalize()),
            outputs,
            wall_time_seconds: self.started.elapsed().as_secs_f64(),
        };
        fs::write(sidecar, serde_json::to_string_pretty(&record)? + "\n")?;
        Ok(())
    }
}

fn sidecar_for(file: &Path) -> PathBuf {
    let mut name = file.as_os_str().to_owned();
    name.push(".run.json");
    PathBuf::from(name)
}

fn create_file(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(fs::File::create(path)?))
}

/// Rejects keys outside the given sections, catching typos early.
fn check_sections(cfg: &KvConfig, allowed: &[&str]) -> Result<()> {
    for key in cfg.keys() {
        let section = key.split('.').next().unwrap_or("");
        if !key.contains('.') || !allowed.contains(&section) {
            return Err(Error::Config(format!("unexpected key {key:?} (allowed sections: {})", allowed.join(", "))));
        }
    }
    Ok(())
}

fn load_env(path: Option<&Path>, rec: &mut Recorder) -> Result<RmabInstance> {
    match path {
        Some(p) => {
            rec.input(p)?;
            // an arms file referenced from a key=value env is an input too
            if let Ok(cfg) = KvConfig::load(p) {
                if let Some(arms) = cfg.get_str("env.arms") {
                    rec.input(&p.parent().unwrap_or(Path::new("")).join(arms))?;
                }
            }
            RmabInstance::load(p)
        }
        None => RmabInstance::desk(
            prefrobust::rmab::DESK_ARMS,
            prefrobust::rmab::DESK_BUDGET,
            prefrobust::rmab::DESK_HORIZON,
            prefrobust::rmab::DEFAULT_DISCOUNT,
            prefrobust::rmab::DESK_ENV_SEED,
        ),
    }
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let mut rec = Recorder::new(None);
    rec.config(&args.config)?;
    let cfg = KvConfig::load(&args.config)?;
    check_sections(&cfg, &["manifest"])?;
    let mut manifest = DatasetManifest::from_config(&cfg)?;
    if let Some(s) = args.seed {
        manifest.seed = s;
    }
    rec.seed = Some(manifest.seed.to_string());
    let env = load_env(args.env.as_deref(), &mut rec)?;
    let judges = task_judges(manifest.n_tasks, manifest.seed);
    let data = generate_dataset(&manifest, &env, &judges)?;
    let mut w = create_file(&args.out)?;
    write_jsonl(&mut w, &data)?;
    w.flush()?;
    drop(w);
    log::info!("wrote {} samples to {}", data.len(), args.out.display());
    rec.finish(&sidecar_for(&args.out), &[&args.out])
}

fn featurizer(env: Option<&Path>, rec: &mut Recorder) -> Result<RewardFeaturizer> {
    Ok(match env {
        Some(_) => RewardFeaturizer::new(&load_env(env, rec)?.known_features()),
        None => RewardFeaturizer::desk(),
    })
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut rec = Recorder::new(None);
    rec.config(&args.config)?;
    let cfg = KvConfig::load(&args.config)?;
    check_sections(&cfg, &["train", "dro", "rdpo", "drdpo", "noise"])?;
    let mut config = TrainConfig::from_config(&cfg)?;
    if let Some(s) = args.seed {
        config.seed = s;
    }
    rec.seed = Some(config.seed.to_string());
    let noise = NoiseSpec::from_config(&cfg)?;
    rec.input(&args.data)?;
    let data = bench::corrupt(&load_jsonl(&args.data)?, &noise)?;
    let mut policy = LogLinearPolicy::new(featurizer(args.env.as_deref(), &mut rec)?);
    let outcome = train(&config, &data, &mut policy)?;

    fs::create_dir_all(&args.out)?;
    let ckpt_path = args.out.join("checkpoint.json");
    let metrics_path = args.out.join("metrics.csv");
    policy.checkpoint().save(&ckpt_path)?;
    let mut w = create_file(&metrics_path)?;
    write_metrics_csv(&mut w, &outcome.log)?;
    w.flush()?;
    drop(w);
    rec.finish(&args.out.join("run.json"), &[&ckpt_path, &metrics_path])
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let mut rec = Recorder::new(Some(args.seed.to_string()));
    let cfg = match &args.config {
        Some(p) => {
            rec.config(p)?;
            KvConfig::load(p)?
        }
        None => KvConfig::default(),
    };
    check_sections(&cfg, &["manifest", "train", "dro", "rdpo", "drdpo", "eval", "noise"])?;
    let bench_cfg = BenchConfig::from_config(&cfg)?;
    let env = load_env(args.env.as_deref(), &mut rec)?;
    rec.input(&args.checkpoint)?;
    rec.input(&args.data)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let policy = LogLinearPolicy::from_checkpoint(RewardFeaturizer::new(&env.known_features()), ckpt)?;
    let data = load_jsonl(&args.data)?;
    let judges = task_judges(bench_cfg.manifest.n_tasks, args.seed);
    let tasks = bench::eval_tasks(&bench_cfg, &env, &judges, &data, args.seed)?;
    let report = Evaluator::new(&env, tasks, bench_cfg.eval_rollouts)?.evaluate(&policy)?;

    fs::create_dir_all(&args.out)?;
    let json_path = args.out.join("report.json");
    let csv_path = args.out.join("per_task.csv");
    let mut w = create_file(&json_path)?;
    report.write_json(&mut w)?;
    writeln!(w)?;
    w.flush()?;
    drop(w);
    let mut w = create_file(&csv_path)?;
    report.write_csv(&mut w)?;
    w.flush()?;
    drop(w);
    rec.finish(&args.out.join("run.json"), &[&json_path, &csv_path])
}

/// Parses `0,1,2` or a half-open range `0..10`.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("cannot parse seed list {text:?}"));
    let seeds: Vec<u64> = if let Some((a, b)) = text.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        (a..b).collect()
    } else {
        parse_list(text)?
    };
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

fn parse_list<T: std::str::FromStr>(text: &str) -> Result<Vec<T>> {
    let out = text
        .split(',')
        .map(|s| s.trim().parse::<T>().map_err(|_| Error::Config(format!("cannot parse {s:?} in {text:?}"))))
        .collect::<Result<Vec<T>>>()?;
    if out.is_empty() {
        return Err(Error::Config("empty list".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub method: Method,
    pub noise: NoiseKind,
    pub alpha: f64,
    pub seed: u64,
    pub win_rate: f64,
    pub win_rate_se: f64,
    pub eval_reward: f64,
    pub eval_reward_se: f64,
    pub status: String,
}

pub const SWEEP_HEADER: &str = "method,noise,alpha,seed,win_rate,win_rate_se,eval_reward,eval_reward_se,status";

impl SweepRow {
    fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.method,
            self.noise,
            self.alpha,
            self.seed,
            self.win_rate,
            self.win_rate_se,
            self.eval_reward,
            self.eval_reward_se,
            self.status.replace([',', '\n'], ";")
        )
    }
}

/// Runs the full grid on the current rayon pool. A failing cell is reported
/// in its row and does not stop the sweep; a seed whose data cannot be
/// prepared fails all its cells.
pub fn run_sweep(
    config: &BenchConfig,
    env: &RmabInstance,
    noise_kind: NoiseKind,
    alphas: &[f64],
    methods: &[Method],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    let noises = alphas.iter().map(|a| NoiseSpec::new(noise_kind, *a, 0)).collect::<Result<Vec<_>>>()?;
    let prepared: Vec<std::result::Result<Prepared, String>> = seeds
        .par_iter()
        .map(|s| {
            let p = bench::prepare(config, env, *s).map_err(|e| e.to_string());
            log::info!("seed {s} prepared");
            p
        })
        .collect();
    let cells: Vec<(usize, usize, usize)> = (0..seeds.len())
        .flat_map(|s| (0..noises.len()).flat_map(move |a| (0..methods.len()).map(move |m| (s, a, m))))
        .collect();
    Ok(cells
        .par_iter()
        .map(|&(s, a, m)| {
            let mut row = SweepRow {
                method: methods[m],
                noise: noise_kind,
                alpha: alphas[a],
                seed: seeds[s],
                win_rate: f64::NAN,
                win_rate_se: f64::NAN,
                eval_reward: f64::NAN,
                eval_reward_se: f64::NAN,
                status: "ok".into(),
            };
            let result = prepared[s]
                .as_ref()
                .map_err(|e| format!("prepare failed: {e}"))
                .and_then(|p| bench::run_cell(config, p, methods[m], &noises[a]).map_err(|e| e.to_string()));
            match result {
                Ok(r) => {
                    row.win_rate = r.win_rate.mean;
                    row.win_rate_se = r.win_rate.se;
                    row.eval_reward = r.eval_reward.mean;
                    row.eval_reward_se = r.eval_reward.se;
                }
                Err(e) => {
                    log::warn!("cell {} α={} seed {}: {e}", methods[m], alphas[a], seeds[s]);
                    row.status = e;
                }
            }
            log::debug!("cell {} α={} seed {} done", methods[m], alphas[a], seeds[s]);
            row
        })
        .collect())
}

pub fn write_sweep_csv(mut w: impl Write, rows: &[SweepRow]) -> Result<()> {
    writeln!(w, "{SWEEP_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv())?;
    }
    Ok(())
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let seeds = parse_seeds(&args.seed)?;
    let mut rec = Recorder::new(Some(args.seed.clone()));
    let cfg = match &args.config {
        Some(p) => {
            rec.config(p)?;
            KvConfig::load(p)?
        }
        None => KvConfig::default(),
    };
    check_sections(&cfg, &["manifest", "train", "dro", "rdpo", "drdpo", "eval", "noise"])?;
    if cfg.contains("noise.alpha") || cfg.contains("noise.seed") {
        return Err(Error::Config("noise levels come from --alphas and seeds from --seed".into()));
    }
    let noise_kind: NoiseKind = cfg.get_or("noise.kind", NoiseKind::Flip)?;
    let config = BenchConfig::from_config(&cfg)?;
    let alphas: Vec<f64> = parse_list(&args.alphas)?;
    let methods: Vec<Method> = parse_list(&args.methods)?;
    let env = load_env(args.env.as_deref(), &mut rec)?;
    let rows = run_sweep(&config, &env, noise_kind, &alphas, &methods, &seeds)?;
    fs::create_dir_all(&args.out)?;
    let path = args.out.join("sweep.csv");
    let mut w = create_file(&path)?;
    write_sweep_csv(&mut w, &rows)?;
    w.flush()?;
    drop(w);
    rec.finish(&args.out.join("run.json"), &[&path])
}

pub fn cmd_whittle(args: &WhittleArgs) -> Result<()> {
    let mut rec = Recorder::new(None);
    let env = load_env(Some(&args.env), &mut rec)?;
    rec.input(&args.program)?;
    let source = fs::read_to_string(&args.program)?;
    let source = source.trim();
    if source.contains('\n') {
        return Err(Error::InvalidInput("reward program must be a single line".into()));
    }
    let program = parse_reward(source, &env.known_features())?;
    let table = WhittleTable::compute(&env, &program, &WhittleParams::default())?;
    let mut w = create_file(&args.out)?;
    writeln!(w, "arm,state,index")?;
    for (i, idx) in table.indices.iter().enumerate() {
        for (s, v) in idx.iter().enumerate() {
            writeln!(w, "{i},{s},{v}")?;
        }
    }
    w.flush()?;
    drop(w);
    rec.finish(&sidecar_for(&args.out), &[&args.out])
}

/// Coefficient rows `(rho, q, toward_one, toward_zero)` on a q grid.
pub fn coefficient_curve(rhos: &[f64], step: f64) -> Result<Vec<(f64, f64, f64, f64)>> {
    if !(step > 0.0 && step <= 0.5) {
        return Err(Error::Config(format!("grid step must lie in (0, 0.5], got {step}")));
    }
    let n = (1.0 / step).round() as usize;
    let mut rows = Vec::with_capacity(rhos.len() * (n + 1));
    for &rho in rhos {
        for i in 0..=n {
            let q = (i as f64 * step).min(1.0);
            rows.push((
                rho,
                q,
                regularizer_coefficient(q, rho, Direction::TowardOne)?,
                regularizer_coefficient(q, rho, Direction::TowardZero)?,
            ));
        }
    }
    Ok(rows)
}

pub fn cmd_curve(args: &CurveArgs) -> Result<()> {
    let rec = Recorder::new(None);
    let rhos: Vec<f64> = parse_list(&args.rho)?;
    let rows = coefficient_curve(&rhos, args.step)?;
    let mut w = create_file(&args.out)?;
    writeln!(w, "rho,q,coef_toward_one,coef_toward_zero")?;
    for (rho, q, up, down) in rows {
        writeln!(w, "{rho},{q},{up},{down}")?;
    }
    w.flush()?;
    drop(w);
    rec.finish(&sidecar_for(&args.out), &[&args.out])
}

/// Runs a parsed command line inside a pool of `--jobs` workers.
pub fn run(cli: &Cli) -> Result<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        pool = pool.num_threads(j);
    }
    let pool = pool.build().map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Whittle(a) => cmd_whittle(a),
        Command::Curve(a) => cmd_curve(a),
    })
}
