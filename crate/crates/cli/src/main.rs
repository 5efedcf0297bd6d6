use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;
use ucfl_core::aggregation::{silhouette_table, StreamPlan};
use ucfl_core::comm::{timed_curve, CommModel, TimingMode, PRESET_NAMES as SYSTEM_PRESETS};
use ucfl_core::orchestrator::{
    auto_stream_candidates, kmeans_seed, metrics_csv, plan_aggregation, prepare_federation,
    sha256_hex, simulate, ExperimentConfig, RoundMetrics, RuleKind, StreamMode, Streams, Summary,
};
use ucfl_core::presets;
use ucfl_core::similarity::similarity_round;
use ucfl_core::theory::{default_bound_grid, validate_bound, BoundCase, MIN_TRIALS};

#[derive(Parser)]
#[command(
    name = "ucfl",
    version,
    about = "User-centric federated learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Source {
    /// Experiment config (JSON)
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset instead of a config file
    #[arg(long)]
    preset: Option<String>,
    /// Replace every seed of the config
    #[arg(long)]
    seed_override: Option<u64>,
    /// Number of personalized streams, or `auto`
    #[arg(long)]
    streams: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a federation and write metrics
    Run {
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run only the similarity round and report W, distances, variances and silhouettes
    Similarity {
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Turn a metrics CSV into accuracy-vs-time curves
    Timing {
        #[command(flatten)]
        source: Source,
        /// metrics.csv from a previous run
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Monte Carlo check of the generalization bound
    ValidateBound {
        /// Bound grid config (JSON); the built-in grid is used when absent
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Built-in experiment presets
    Presets {
        #[command(subcommand)]
        action: PresetAction,
    },
}

#[derive(Subcommand)]
enum PresetAction {
    List,
    /// Print a preset as a config file
    Show {
        name: String,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0} bound configuration(s) violated")]
    BoundViolated(usize),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::BoundViolated(_) => 3,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Experiment config plus an optional custom system for `timing`.
#[derive(Serialize, Deserialize)]
struct RunConfig {
    #[serde(flatten)]
    experiment: ExperimentConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    comm: Option<CommModel>,
}

fn parse_streams(s: &str) -> Result<Streams, CliError> {
    match s {
        "auto" => Ok(Streams::Mode(StreamMode::Auto)),
        "full" => Ok(Streams::Mode(StreamMode::Full)),
        _ => s.parse().map(Streams::Count).map_err(|_| {
            CliError::Config(format!(
                "streams: expected an integer, `auto` or `full`, got `{s}`"
            ))
        }),
    }
}

fn load(source: &Source) -> Result<RunConfig, CliError> {
    let mut cfg = match (&source.config, &source.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<RunConfig>(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        (None, Some(name)) => RunConfig {
            experiment: presets::preset(name).ok_or_else(|| {
                CliError::Config(format!("unknown preset `{name}` (see `ucfl presets list`)"))
            })?,
            comm: None,
        },
        (None, None) => {
            return Err(CliError::Config(
                "one of --config or --preset is required".into(),
            ))
        }
    };
    if let Some(seed) = source.seed_override {
        cfg.experiment = presets::with_seed(&cfg.experiment, seed);
    }
    if let Some(s) = &source.streams {
        cfg.experiment.streams = parse_streams(s)?;
    }
    cfg.experiment.validate().map_err(config_err)?;
    if let Some(cm) = &cfg.comm {
        cm.validate().map_err(config_err)?;
    }
    Ok(cfg)
}

#[derive(Serialize)]
struct Manifest<'a> {
    config_digest: String,
    command: &'a str,
    output_paths: Vec<String>,
    wall_clock_seconds: f64,
    tool_version: &'static str,
}

/// Files are held in memory until the command has succeeded, then written
/// together with the manifest.
struct Outputs {
    dir: PathBuf,
    files: Vec<(String, String)>,
}

impl Outputs {
    fn new(dir: &Path) -> Self {
        Outputs {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        }
    }

    fn add(&mut self, name: impl Into<String>, contents: String) {
        self.files.push((name.into(), contents));
    }

    fn add_json<T: Serialize>(&mut self, name: &str, value: &T) {
        let mut text = serde_json::to_string_pretty(value).expect("serializable");
        text.push('\n');
        self.add(name, text);
    }

    fn finish(mut self, command: &str, digest: String, started: Instant) -> Result<(), CliError> {
        let mut output_paths: Vec<String> = self.files.iter().map(|(n, _)| n.clone()).collect();
        output_paths.push("manifest.json".into());
        let manifest = Manifest {
            config_digest: digest,
            command,
            output_paths,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
            tool_version: env!("CARGO_PKG_VERSION"),
        };
        self.add_json("manifest.json", &manifest);
        fs::create_dir_all(&self.dir)
            .map_err(|e| runtime_err(format!("{}: {e}", self.dir.display())))?;
        for (name, contents) in &self.files {
            let path = self.dir.join(name);
            fs::write(&path, contents)
                .map_err(|e| runtime_err(format!("{}: {e}", path.display())))?;
        }
        Ok(())
    }
}

fn cmd_run(source: &Source, out: &Path) -> Result<(), CliError> {
    let started = Instant::now();
    let cfg = load(source)?.experiment;
    let outcome = simulate::<f64>(&cfg).map_err(runtime_err)?;
    let mut outputs = Outputs::new(out);
    outputs.add("metrics.csv", metrics_csv(&outcome.metrics));
    outputs.add_json("summary.json", &Summary::new(&cfg, &outcome.metrics));
    let plan = match (outcome.plan.stream_plan(), &outcome.plan.similarity) {
        (Some(p), _) => Some(p.clone()),
        (None, Some(report)) => Some(StreamPlan::full(&report.w)),
        _ => None,
    };
    if let Some(p) = plan {
        outputs.add_json("streamplan.json", &p.to_json());
    }
    let last = outcome.metrics.last().expect("round 0 is always present");
    println!(
        "{} rounds: mean accuracy {:.4}, worst user {:.4}",
        cfg.rounds, last.mean_val_accuracy, last.worst_user_accuracy
    );
    outputs.finish("run", cfg.digest(), started)
}

#[derive(Serialize)]
struct SilhouetteRow {
    k: usize,
    score: f64,
}

#[derive(Serialize)]
struct SimilarityOutput {
    #[serde(flatten)]
    report: ucfl_core::similarity::SimilarityJson,
    silhouette: Vec<SilhouetteRow>,
}

fn cmd_similarity(source: &Source, out: &Path) -> Result<(), CliError> {
    let started = Instant::now();
    let cfg = load(source)?.experiment;
    let fed = prepare_federation::<f64>(&cfg).map_err(runtime_err)?;
    let sim = ucfl_core::SimilarityConfig {
        variance_batches: cfg.variance_batches,
        probe_seed: cfg.seeds.probe,
        sigma_product: cfg.sigma_product,
    };
    let report = similarity_round(&fed.train, &cfg.model, &sim).map_err(runtime_err)?;
    let candidates = auto_stream_candidates(report.w.m());
    let table = if candidates.is_empty() {
        Vec::new()
    } else {
        silhouette_table(&report.w, &candidates, kmeans_seed(&cfg)).map_err(runtime_err)?
    };
    let output = SimilarityOutput {
        report: report.to_json(),
        silhouette: table
            .iter()
            .map(|&(k, score)| SilhouetteRow { k, score })
            .collect(),
    };
    let mut outputs = Outputs::new(out);
    outputs.add_json("similarity.json", &output);
    if let Some(&(k, s)) = table
        .iter()
        .fold(None, |best: Option<&(usize, f64)>, row| match best {
            Some(b) if b.1 >= row.1 => Some(b),
            _ => Some(row),
        })
    {
        println!("best silhouette {s:.4} at k = {k}");
    }
    outputs.finish("similarity", cfg.digest(), started)
}

/// Per-round mean accuracy from a metrics CSV.
fn read_metrics(path: &Path) -> Result<Vec<RoundMetrics>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("metrics {}: {e}", path.display())))?;
    let mut lines = text.lines();
    if lines.next() != Some("round,user,val_acc,train_loss") {
        return Err(CliError::Config(format!(
            "metrics {}: unexpected header",
            path.display()
        )));
    }
    let mut rounds: Vec<RoundMetrics> = Vec::new();
    for (k, line) in lines.enumerate() {
        let bad = || {
            CliError::Config(format!(
                "metrics {} line {}: `{line}`",
                path.display(),
                k + 2
            ))
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(bad());
        }
        let round: usize = fields[0].parse().map_err(|_| bad())?;
        let acc: f64 = fields[2].parse().map_err(|_| bad())?;
        let loss: f64 = fields[3].parse().map_err(|_| bad())?;
        match rounds.last_mut() {
            Some(rm) if rm.round == round => {
                rm.per_user_val_accuracy.push(acc);
                rm.per_user_train_loss.push(loss);
            }
            _ => rounds.push(RoundMetrics {
                round,
                per_user_val_accuracy: vec![acc],
                mean_val_accuracy: 0.0,
                worst_user_accuracy: 0.0,
                per_user_train_loss: vec![loss],
                cluster_spread: None,
            }),
        }
    }
    if rounds.is_empty() {
        return Err(CliError::Config(format!(
            "metrics {}: no rows",
            path.display()
        )));
    }
    for rm in &mut rounds {
        let v = &rm.per_user_val_accuracy;
        rm.mean_val_accuracy = v.iter().sum::<f64>() / v.len() as f64;
        rm.worst_user_accuracy = v.iter().copied().fold(f64::INFINITY, f64::min);
    }
    Ok(rounds)
}

fn cmd_timing(source: &Source, metrics: &Path, out: &Path) -> Result<(), CliError> {
    let started = Instant::now();
    let run_cfg = load(source)?;
    let cfg = &run_cfg.experiment;
    let series = read_metrics(metrics)?;
    let m = cfg.federation.num_clients;
    let streams = match (cfg.rule, cfg.streams) {
        (RuleKind::Local, _) => 0,
        (RuleKind::FedAvg, _) => 1,
        (RuleKind::Oracle, _) => cfg.federation.num_clusters.min(m),
        (RuleKind::UserCentric, Streams::Count(k)) => k,
        (RuleKind::UserCentric, Streams::Mode(StreamMode::Full)) => m,
        (RuleKind::UserCentric, Streams::Mode(StreamMode::Auto)) => {
            let fed = prepare_federation::<f64>(cfg).map_err(runtime_err)?;
            plan_aggregation(cfg, &fed)
                .map_err(runtime_err)?
                .num_streams(m)
        }
    };
    let similarity_round = cfg.rule == RuleKind::UserCentric;
    let mut systems: Vec<(String, CommModel)> = SYSTEM_PRESETS
        .iter()
        .map(|&name| (name.to_string(), CommModel::preset(name).expect("preset")))
        .collect();
    if let Some(cm) = run_cfg.comm {
        systems.push(("custom".to_string(), cm));
    }
    let mut outputs = Outputs::new(out);
    for (name, cm) in &systems {
        let curve = timed_curve(
            &series,
            m,
            streams,
            cm,
            TimingMode::Expected,
            0,
            similarity_round,
        );
        outputs.add(format!("timing_{name}.csv"), curve.to_csv());
    }
    outputs.finish("timing", cfg.digest(), started)
}

#[derive(Serialize, Deserialize)]
struct BoundConfig {
    #[serde(default = "default_trials")]
    trials: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_bound_grid")]
    cases: Vec<BoundCase>,
}

fn default_trials() -> usize {
    10_000
}

#[derive(Serialize)]
struct BoundRecord {
    name: String,
    delta: f64,
    trials: usize,
    violation_rate: f64,
    bound: f64,
    mean_slack: f64,
    mean_excess_risk: f64,
    within_delta: bool,
}

#[derive(Serialize)]
struct BoundReport {
    trials: usize,
    seed: u64,
    all_within_delta: bool,
    records: Vec<BoundRecord>,
}

fn cmd_validate_bound(config: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let started = Instant::now();
    let (cfg, digest_source) = match config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let cfg: BoundConfig = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            (cfg, text)
        }
        None => {
            let cfg = BoundConfig {
                trials: default_trials(),
                seed: 0,
                cases: default_bound_grid(),
            };
            let text = serde_json::to_string(&cfg).expect("serializable");
            (cfg, text)
        }
    };
    if cfg.trials < MIN_TRIALS {
        return Err(CliError::Config(format!(
            "trials: at least {MIN_TRIALS} required, got {}",
            cfg.trials
        )));
    }
    if cfg.cases.is_empty() {
        return Err(CliError::Config(
            "cases: at least one configuration required".into(),
        ));
    }
    let problems = cfg
        .cases
        .iter()
        .map(|c| c.problem::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(config_err)?;
    let mut records = Vec::with_capacity(problems.len());
    for (k, (case, problem)) in cfg.cases.iter().zip(&problems).enumerate() {
        let seed = ucfl_core::rng::derive(cfg.seed, k as u64);
        let res = validate_bound(problem, cfg.trials, seed).map_err(runtime_err)?;
        records.push(BoundRecord {
            name: case.name.clone(),
            delta: case.delta,
            trials: res.trials,
            violation_rate: res.violation_rate,
            bound: res.bound,
            mean_slack: res.mean_slack,
            mean_excess_risk: res.mean_excess_risk,
            within_delta: res.violation_rate <= case.delta,
        });
    }
    let violated = records.iter().filter(|r| !r.within_delta).count();
    let mut outputs = Outputs::new(out);
    outputs.add_json(
        "bound_report.json",
        &BoundReport {
            trials: cfg.trials,
            seed: cfg.seed,
            all_within_delta: violated == 0,
            records,
        },
    );
    outputs.finish(
        "validate-bound",
        sha256_hex(digest_source.as_bytes()),
        started,
    )?;
    if violated > 0 {
        return Err(CliError::BoundViolated(violated));
    }
    println!("{} configurations within delta", cfg.cases.len());
    Ok(())
}

fn cmd_presets(action: &PresetAction) -> Result<(), CliError> {
    match action {
        PresetAction::List => {
            for name in presets::PRESET_NAMES {
                println!("{name}");
            }
        }
        PresetAction::Show { name } => {
            let cfg = presets::preset(name).ok_or_else(|| {
                CliError::Config(format!("unknown preset `{name}` (see `ucfl presets list`)"))
            })?;
            println!(
                "{}",
                serde_json::to_string_pretty(&cfg).expect("serializable")
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Run { source, out } => cmd_run(source, out),
        Command::Similarity { source, out } => cmd_similarity(source, out),
        Command::Timing {
            source,
            metrics,
            out,
        } => cmd_timing(source, metrics, out),
        Command::ValidateBound { config, out } => cmd_validate_bound(config.as_deref(), out),
        Command::Presets { action } => cmd_presets(action),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
