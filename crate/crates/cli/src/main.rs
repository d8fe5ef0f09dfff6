//! `cclab`: train, analyze and compute from the command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage, config or schema error.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use cclab::analysis::{self, Metric, ScalingPoint};
use cclab::config::{ConfigError, InitTag, TrainConfig};
use cclab::data::{self, default_top_k};
use cclab::init::{fixed_std_init, gamma_init, matrix_rng, scaling_dim};
use cclab::model::TOKEN_EMBEDDING;
use cclab::theory::{self, CircuitEnsemble, GammaExponent};
use cclab::trainer::{self, detect_spikes, load_checkpoint, parse_metrics_csv, CheckpointError, TrainError};

const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_MARKER: &str = "cclab_manifest";

#[derive(Parser, Debug)]
#[command(name = "cclab", version, about = "Complexity-control laboratory for small language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train from a run config or a previously written manifest.
    Train {
        config: PathBuf,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Precision::F64)]
        precision: Precision,
    },
    /// Per-layer or per-token metrics of a checkpoint, as CSV.
    Analyze {
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = AnalyzeMetric::Dc)]
        metric: AnalyzeMetric,
        /// Number of most frequent tokens for `embed`.
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Power-law fit of a `size,loss` CSV.
    ScalingFit {
        csv: PathBuf,
        /// Fit an irreducible loss floor as well.
        #[arg(long)]
        floor: bool,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Norm of one circuit ensemble.
    TheoryNorm {
        ensemble: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        gamma: f64,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Index of the lowest-norm ensemble in a JSON array of ensembles.
    TheoryPrefer {
        ensembles: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        gamma: f64,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Empirical init statistics for every matrix of a config's model.
    InitCheck {
        config: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Loss spikes in a metrics CSV.
    Spikes {
        metrics: PathBuf,
        #[arg(long, default_value_t = 32)]
        window: usize,
        #[arg(long, default_value_t = 5.0)]
        k: f64,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum AnalyzeMetric {
    Dc,
    Ds,
    Embed,
    Norm,
}

#[derive(Debug)]
enum CliError {
    /// Bad config, schema or input format.
    Input(String),
    Runtime(String),
}

impl CliError {
    fn input(e: impl Display) -> Self {
        CliError::Input(e.to_string())
    }

    fn runtime(e: impl Display) -> Self {
        CliError::Runtime(e.to_string())
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::runtime(e),
            _ => CliError::input(format!("{e}; fix the config file")),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io { .. } => CliError::runtime(e),
            _ => CliError::input(e),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(c) => c.into(),
            TrainError::Checkpoint(c) => c.into(),
            TrainError::ConfigMismatch => {
                CliError::input("checkpoint was written for a different config; pass the run's manifest.json")
            }
            other => CliError::runtime(other),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Seeds {
    init: u64,
    sampler: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    data: Option<u64>,
}

/// Record of one invocation; `train` accepts it back as its config.
#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    cclab_manifest: u32,
    version: String,
    command: String,
    args: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seeds: Option<Seeds>,
}

impl Manifest {
    fn new(command: &str, args: serde_json::Value, config: Option<&TrainConfig>) -> Self {
        Manifest {
            cclab_manifest: 1,
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            args,
            config: config.cloned(),
            config_hash: config.map(TrainConfig::hash),
            seeds: config.map(|c| Seeds {
                init: c.init.seed,
                sampler: c.seed,
                data: c.data.synth.as_ref().map(|s| s.seed),
            }),
        }
    }

    fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::runtime(format!("cannot read {}: {e}", path.display())))
}

fn write_file(path: &Path, data: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))?;
    }
    std::fs::write(path, data).map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

/// Prints `output` (or writes it as `dir/file`) and records the manifest
/// next to it; without a directory the manifest goes to stderr.
fn emit(out_dir: Option<&Path>, file: &str, output: &str, manifest: Manifest) -> Result<(), CliError> {
    match out_dir {
        Some(dir) => {
            write_file(&dir.join(file), output)?;
            write_file(&dir.join(MANIFEST_FILE), &manifest.to_json())
        }
        None => {
            print!("{output}");
            eprintln!("manifest: {}", serde_json::to_string(&manifest).expect("manifest serializes"));
            Ok(())
        }
    }
}

/// Loads a run config or the config recorded in a manifest. A relative data
/// path is made absolute so the manifest stays valid from any directory.
fn load_run_config(path: &Path) -> Result<TrainConfig, CliError> {
    let text = read_text(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::input(format!("{}: not JSON: {e}", path.display())))?;
    let mut cfg = if value.get(MANIFEST_MARKER).is_some() {
        let m: Manifest = serde_json::from_value(value)
            .map_err(|e| CliError::input(format!("{}: bad manifest: {e}", path.display())))?;
        let cfg = m
            .config
            .ok_or_else(|| CliError::input(format!("{}: manifest of `{}` holds no run config", path.display(), m.command)))?;
        cfg.validate()?;
        cfg
    } else {
        TrainConfig::from_file(path)?
    };
    if let Some(p) = &cfg.data.path {
        let abs = std::path::absolute(p).map_err(|e| CliError::runtime(format!("{}: {e}", p.display())))?;
        cfg.data.path = Some(abs);
    }
    Ok(cfg)
}

fn cmd_train(config: &Path, resume: Option<&Path>, precision: Precision) -> Result<(), CliError> {
    let cfg = load_run_config(config)?;
    let start = resume.map(load_checkpoint).transpose()?;
    let manifest = Manifest::new(
        "train",
        serde_json::json!({ "config": config, "resume": resume, "precision": precision }),
        Some(&cfg),
    );
    write_file(&cfg.logging.out_dir.join(MANIFEST_FILE), &manifest.to_json())?;
    let (ck, log) = match precision {
        Precision::F32 => trainer::train_to_dir::<f32>(&cfg, start.as_ref()),
        Precision::F64 => trainer::train_to_dir::<f64>(&cfg, start.as_ref()),
    }?;
    let last = log.losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained to step {}; last train loss {last:.6}; {} spikes; outputs in {}",
        ck.step,
        log.spikes.len(),
        cfg.logging.out_dir.display()
    );
    Ok(())
}

fn cmd_analyze(ckpt: &Path, metric: AnalyzeMetric, top_k: Option<usize>, out_dir: Option<&Path>) -> Result<(), CliError> {
    let ck = load_checkpoint(ckpt)?;
    let params = ck.params.cast::<f64>();
    let output = match metric {
        AnalyzeMetric::Dc | AnalyzeMetric::Ds => {
            let m = if matches!(metric, AnalyzeMetric::Dc) { Metric::Dc } else { Metric::Ds };
            analysis::layer_profile(&params, m).map_err(CliError::runtime)?.to_csv()
        }
        AnalyzeMetric::Embed => {
            let corpus = ck.config.data.source()?.load().map_err(CliError::runtime)?;
            let freq = data::frequencies(&corpus).map_err(CliError::runtime)?;
            let k = top_k.unwrap_or_else(|| default_top_k(ck.config.model.vocab_size));
            let ids = freq.top_ids(k);
            let emb = params.get(TOKEN_EMBEDDING).expect("every model has an embedding");
            let sim = analysis::embedding_similarity(emb, &ids).map_err(CliError::runtime)?;
            analysis::similarity_csv(&ids, &sim)
        }
        AnalyzeMetric::Norm => {
            let prof = analysis::param_norm_profile(&params.tensors);
            let mut s = String::from("tensor,norm\n");
            for (name, n) in &prof.per_tensor {
                s.push_str(&format!("{name},{n:.8e}\n"));
            }
            s.push_str(&format!("global,{:.8e}\n", prof.global));
            s
        }
    };
    let manifest = Manifest::new(
        "analyze",
        serde_json::json!({ "checkpoint": ckpt, "metric": metric, "top_k": top_k }),
        Some(&ck.config),
    );
    let name = format!("analyze-{}.csv", serde_json::to_value(metric).unwrap().as_str().unwrap());
    emit(out_dir, &name, &output, manifest)
}

fn parse_scaling_csv(text: &str) -> Result<Vec<ScalingPoint>, String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next().map(str::trim) {
        Some("size,loss") => {}
        other => return Err(format!("expected header `size,loss`, found {:?}", other.unwrap_or(""))),
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let row = i + 2;
            let (a, b) = l.split_once(',').ok_or(format!("line {row}: expected two fields"))?;
            let num = |s: &str| s.trim().parse::<f64>().map_err(|e| format!("line {row}: {e}"));
            Ok(ScalingPoint {
                size: num(a)?,
                loss: num(b)?,
            })
        })
        .collect()
}

fn cmd_scaling_fit(csv: &Path, floor: bool, out_dir: Option<&Path>) -> Result<(), CliError> {
    let points = parse_scaling_csv(&read_text(csv)?).map_err(|e| CliError::input(format!("{}: {e}", csv.display())))?;
    let fit = analysis::fit_power_law(&points, floor).map_err(CliError::input)?;
    let output = serde_json::to_string_pretty(&fit).expect("fit serializes") + "\n";
    let manifest = Manifest::new("scaling-fit", serde_json::json!({ "csv": csv, "floor": floor }), None);
    emit(out_dir, "scaling-fit.json", &output, manifest)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    serde_json::from_str(&read_text(path)?).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn cmd_theory_norm(path: &Path, gamma: f64, out_dir: Option<&Path>) -> Result<(), CliError> {
    let e: CircuitEnsemble = read_json(path)?;
    let g = GammaExponent::new(gamma).map_err(CliError::input)?;
    let norm = theory::ensemble_norm(&e, g).map_err(CliError::input)?;
    let manifest = Manifest::new("theory-norm", serde_json::json!({ "ensemble": path, "gamma": gamma }), None);
    emit(out_dir, "theory-norm.txt", &format!("{norm:e}\n"), manifest)
}

fn cmd_theory_prefer(path: &Path, gamma: f64, out_dir: Option<&Path>) -> Result<(), CliError> {
    let es: Vec<CircuitEnsemble> = read_json(path)?;
    let g = GammaExponent::new(gamma).map_err(CliError::input)?;
    let best = theory::preferred_ensemble(&es, g).map_err(CliError::input)?;
    let log_norms: Vec<f64> = es
        .iter()
        .map(|e| theory::ensemble_log_norm(e, g))
        .collect::<Result<_, _>>()
        .map_err(CliError::input)?;
    let output = serde_json::to_string(&serde_json::json!({ "preferred": best, "log_norms": log_norms })).unwrap() + "\n";
    let manifest = Manifest::new("theory-prefer", serde_json::json!({ "ensembles": path, "gamma": gamma }), None);
    emit(out_dir, "theory-prefer.json", &output, manifest)
}

fn cmd_init_check(config: &Path, samples: usize, out_dir: Option<&Path>) -> Result<(), CliError> {
    if samples < 2 {
        return Err(CliError::input("--samples must be at least 2"));
    }
    let cfg = load_run_config(config)?;
    let mut s = String::from("matrix,d_in,target_std,empirical_std,rel_err\n");
    for (name, shape) in cfg.model.param_shapes() {
        if shape.len() != 2 {
            continue;
        }
        let d_in = scaling_dim(&name, &shape);
        let cols = samples.div_ceil(d_in);
        let mut rng = matrix_rng(cfg.init.seed, &name);
        let w = match cfg.init.kind {
            InitTag::Gamma => gamma_init::<f64>(d_in, cols, cfg.init.value, &mut rng),
            InitTag::Sigma => fixed_std_init::<f64>(d_in, cols, cfg.init.value, &mut rng),
        }
        .map_err(CliError::input)?;
        let xs = &w.data()[..samples];
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let emp = (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt();
        let target = cfg.init.scheme().std_for(d_in);
        s.push_str(&format!("{name},{d_in},{target:.8e},{emp:.8e},{:.8e}\n", (emp - target) / target));
    }
    let manifest = Manifest::new("init-check", serde_json::json!({ "config": config, "samples": samples }), Some(&cfg));
    emit(out_dir, "init-check.csv", &s, manifest)
}

fn cmd_spikes(metrics: &Path, window: usize, k: f64, out_dir: Option<&Path>) -> Result<(), CliError> {
    let records = parse_metrics_csv(&read_text(metrics)?).map_err(|e| CliError::input(format!("{}: {e}", metrics.display())))?;
    let losses: Vec<f64> = records.iter().map(|r| r.train_loss).collect();
    let hits = detect_spikes(&losses, window, k).map_err(CliError::input)?;
    let mut s = String::from("step,train_loss\n");
    for i in hits {
        s.push_str(&format!("{},{:.8e}\n", records[i].step, records[i].train_loss));
    }
    let manifest = Manifest::new(
        "spikes",
        serde_json::json!({ "metrics": metrics, "window": window, "k": k }),
        None,
    );
    emit(out_dir, "spikes.csv", &s, manifest)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            config,
            resume,
            precision,
        } => cmd_train(&config, resume.as_deref(), precision),
        Command::Analyze {
            checkpoint,
            metric,
            top_k,
            out_dir,
        } => cmd_analyze(&checkpoint, metric, top_k, out_dir.as_deref()),
        Command::ScalingFit { csv, floor, out_dir } => cmd_scaling_fit(&csv, floor, out_dir.as_deref()),
        Command::TheoryNorm {
            ensemble,
            gamma,
            out_dir,
        } => cmd_theory_norm(&ensemble, gamma, out_dir.as_deref()),
        Command::TheoryPrefer {
            ensembles,
            gamma,
            out_dir,
        } => cmd_theory_prefer(&ensembles, gamma, out_dir.as_deref()),
        Command::InitCheck {
            config,
            samples,
            out_dir,
        } => cmd_init_check(&config, samples, out_dir.as_deref()),
        Command::Spikes {
            metrics,
            window,
            k,
            out_dir,
        } => cmd_spikes(&metrics, window, k, out_dir.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (CliError::Input(m) | CliError::Runtime(m)) = &e;
            eprintln!("error: {m}");
            ExitCode::from(e.code())
        }
    }
}
