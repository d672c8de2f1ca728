//! `dcs`: reproducible command-line front end for the channel-selecting
//! attention library. Every command resolves its configuration from
//! defaults < optional config file < explicit flags, writes a replayable
//! manifest next to its artifacts, prints JSON to stdout, and logs to
//! stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use dcs_core::attention::AttentionMode;
use dcs_core::data::{generate, GeneratorKind, GeneratorSpec, IdentityDataset};
use dcs_core::dnas::{run_search, SearchConfig, StageSpec, SuperNetSpec};
use dcs_core::model::{LayerSpec, ModelConfig};
use dcs_core::train::{evaluate_split, fit, TrainConfig, TrainState};
use dcs_core::verify;
use dcs_core::{Error, Result};

const MANIFEST_SCHEMA_VERSION: u32 = 1;
const OUTPUT_SCHEMA_VERSION: u32 = 1;
const OUT_DIR_ENV: &str = "DCS_OUT_DIR";

#[derive(Parser)]
#[command(name = "dcs", version, about = "Channel-selecting attention toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic identity dataset.
    Gen(GenArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Differentiable architecture search on the micro supernet.
    Search(SearchArgs),
    /// Evaluate a checkpoint on a dataset's query/gallery split.
    Eval(EvalArgs),
    /// Run the randomized bound and gradient verification suites.
    Verify(VerifyArgs),
}

#[derive(Serialize)]
struct RunManifest<'a, T: Serialize> {
    schema_version: u32,
    command: &'a str,
    config: &'a T,
    seed: u64,
    artifacts: Vec<String>,
    tool_version: &'a str,
    wall_clock_seconds: f64,
}

fn out_dir(flag: &Option<PathBuf>) -> PathBuf {
    flag.clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Load a config file; a run manifest is accepted too (its `config` field is
/// extracted), so any manifest replays its run.
fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let config = match value.get("config") {
        Some(inner) => inner.clone(),
        None => value,
    };
    serde_json::from_value(config).map_err(Error::from)
}

fn write_manifest<T: Serialize>(
    dir: &Path,
    command: &str,
    config: &T,
    seed: u64,
    artifacts: &[PathBuf],
    started: Instant,
) -> Result<PathBuf> {
    let manifest = RunManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        command,
        config,
        seed,
        artifacts: artifacts
            .iter()
            .map(|p| p.to_string_lossy().into_owned())
            .collect(),
        tool_version: env!("CARGO_PKG_VERSION"),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

// ---------------------------------------------------------------- gen

#[derive(Args)]
struct GenArgs {
    /// Optional config file (flags win on conflict).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    identities: Option<usize>,
    #[arg(long)]
    per_identity: Option<usize>,
    #[arg(long)]
    tokens: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Generator kind: separable | hard.
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    query_fraction: Option<f64>,
    /// Output directory (default: $DCS_OUT_DIR or cwd).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn default_gen_spec() -> GeneratorSpec {
    GeneratorSpec {
        identities: 10,
        per_identity: 20,
        tokens: 4,
        channels: 8,
        noise: 0.3,
        seed: 0,
        kind: GeneratorKind::Separable,
        query_fraction: 0.25,
    }
}

fn parse_kind(s: &str) -> Result<GeneratorKind> {
    match s.to_ascii_lowercase().as_str() {
        "separable" => Ok(GeneratorKind::Separable),
        "hard" => Ok(GeneratorKind::Hard),
        other => Err(Error::InvalidParameter(format!(
            "unknown generator kind '{other}' (expected separable | hard)"
        ))),
    }
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let started = Instant::now();
    let mut spec = match &args.config {
        Some(p) => load_config::<GeneratorSpec>(p)?,
        None => default_gen_spec(),
    };
    if let Some(v) = args.identities {
        spec.identities = v;
    }
    if let Some(v) = args.per_identity {
        spec.per_identity = v;
    }
    if let Some(v) = args.tokens {
        spec.tokens = v;
    }
    if let Some(v) = args.channels {
        spec.channels = v;
    }
    if let Some(v) = args.noise {
        spec.noise = v;
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    if let Some(k) = &args.kind {
        spec.kind = parse_kind(k)?;
    }
    if let Some(v) = args.query_fraction {
        spec.query_fraction = v;
    }

    let dir = out_dir(&args.out_dir);
    std::fs::create_dir_all(&dir)?;
    let dataset = generate(&spec)?;
    let path = dir.join("dataset.json");
    dataset.save(&path)?;
    eprintln!(
        "generated {} samples ({} identities) -> {}",
        dataset.len(),
        dataset.num_classes(),
        path.display()
    );
    let manifest = write_manifest(&dir, "gen", &spec, spec.seed, &[path.clone()], started)?;
    println!(
        "{}",
        json!({
            "schema_version": OUTPUT_SCHEMA_VERSION,
            "dataset": path,
            "manifest": manifest,
            "samples": dataset.len(),
            "identities": dataset.num_classes(),
        })
    );
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Clone, Serialize, Deserialize)]
struct TrainSettings {
    dataset: PathBuf,
    train: TrainConfig,
    /// Embedding width of the linear head after attention.
    embed_dim: usize,
    /// Attention mode for the backbone block.
    attention: AttentionMode,
}

#[derive(Args)]
struct TrainArgs {
    /// Optional config file or manifest to replay (flags win on conflict).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Balance factor on the IBB term.
    #[arg(long)]
    eta: Option<f64>,
    /// Drop the IBB term entirely.
    #[arg(long)]
    no_ibb: bool,
    /// Drop the triplet term.
    #[arg(long)]
    no_triplet: bool,
    /// Use vanilla attention instead of the channel-selecting block.
    #[arg(long)]
    no_dcs: bool,
    #[arg(long)]
    tau_start: Option<f64>,
    #[arg(long)]
    tau_end: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_p: Option<usize>,
    #[arg(long)]
    batch_k: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn resolve_train(args: &TrainArgs) -> Result<TrainSettings> {
    let mut settings = match &args.config {
        Some(p) => load_config::<TrainSettings>(p)?,
        None => TrainSettings {
            dataset: PathBuf::new(),
            train: TrainConfig::default(),
            embed_dim: 16,
            attention: AttentionMode::Dcs,
        },
    };
    if let Some(p) = &args.dataset {
        settings.dataset = p.clone();
    }
    if settings.dataset.as_os_str().is_empty() {
        return Err(Error::InvalidParameter(
            "--dataset (or a config file naming one) is required".into(),
        ));
    }
    let t = &mut settings.train;
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if let Some(v) = args.eta {
        t.eta = v;
    }
    if args.no_ibb {
        t.enable_ibb = false;
    }
    if args.no_triplet {
        t.enable_triplet = false;
    }
    if let Some(v) = args.tau_start {
        t.tau_start = v;
    }
    if let Some(v) = args.tau_end {
        t.tau_end = v;
    }
    if let Some(v) = args.seed {
        t.seed = v;
    }
    if let Some(v) = args.lr {
        t.learning_rate = v;
    }
    if let Some(v) = args.batch_p {
        t.batch_p = v;
    }
    if let Some(v) = args.batch_k {
        t.batch_k = v;
    }
    // milestones past the end of a shortened run are meaningless; drop them
    t.milestones.retain(|&m| m < t.epochs);
    if let Some(v) = args.embed_dim {
        settings.embed_dim = v;
    }
    if args.no_dcs {
        settings.attention = AttentionMode::Vanilla;
    }
    Ok(settings)
}

fn model_for(settings: &TrainSettings, dataset: &IdentityDataset) -> ModelConfig {
    ModelConfig {
        tokens: dataset.spec.tokens,
        channels: dataset.spec.channels,
        layers: vec![
            LayerSpec::Attention {
                mode: settings.attention,
            },
            LayerSpec::Linear {
                out: settings.embed_dim,
            },
        ],
        num_classes: dataset.num_classes(),
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let started = Instant::now();
    let settings = resolve_train(&args)?;
    let dataset = IdentityDataset::load(&settings.dataset)?;
    let model_config = model_for(&settings, &dataset);

    eprintln!(
        "training {} epochs on {} samples (seed {})",
        settings.train.epochs,
        dataset.len(),
        settings.train.seed
    );
    let state = fit(&settings.train, &model_config, &dataset)?;

    let dir = out_dir(&args.out_dir);
    std::fs::create_dir_all(&dir)?;
    let ckpt = dir.join("checkpoint.json");
    state.save(&ckpt)?;
    let history = dir.join("history.csv");
    std::fs::write(&history, state.history_csv())?;
    let manifest = write_manifest(
        &dir,
        "train",
        &settings,
        settings.train.seed,
        &[ckpt.clone(), history.clone()],
        started,
    )?;

    let last = state.history.last();
    println!(
        "{}",
        json!({
            "schema_version": OUTPUT_SCHEMA_VERSION,
            "checkpoint": ckpt,
            "history": history,
            "manifest": manifest,
            "epochs": state.epoch,
            "mAP": last.map(|r| r.map),
            "rank1": last.map(|r| r.rank1),
            "ib": last.map(|r| r.ib),
            "ibb": last.map(|r| r.ibb),
        })
    );
    Ok(())
}

// ---------------------------------------------------------------- search

#[derive(Clone, Serialize, Deserialize)]
struct SearchSettings {
    dataset: PathBuf,
    supernet: Option<SuperNetSpec>,
    search: SearchConfig,
    steps: usize,
    seed: u64,
}

#[derive(Args)]
struct SearchArgs {
    /// Optional config file or manifest to replay (flags win on conflict).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    latency_weight: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn default_supernet(dataset: &IdentityDataset) -> SuperNetSpec {
    let c = dataset.spec.channels;
    let mut first: Vec<usize> = vec![(c / 2).max(2), c];
    first.dedup();
    SuperNetSpec {
        tokens: dataset.spec.tokens,
        in_channels: c,
        stages: vec![
            StageSpec {
                options: first,
                attention: Some(AttentionMode::Dcs),
            },
            StageSpec {
                options: vec![4, 8, 16],
                attention: None,
            },
        ],
        num_classes: dataset.num_classes(),
    }
}

fn cmd_search(args: SearchArgs) -> Result<()> {
    let started = Instant::now();
    let mut settings = match &args.config {
        Some(p) => load_config::<SearchSettings>(p)?,
        None => SearchSettings {
            dataset: PathBuf::new(),
            supernet: None,
            search: SearchConfig::default(),
            steps: 80,
            seed: 0,
        },
    };
    if let Some(p) = &args.dataset {
        settings.dataset = p.clone();
    }
    if settings.dataset.as_os_str().is_empty() {
        return Err(Error::InvalidParameter(
            "--dataset (or a config file naming one) is required".into(),
        ));
    }
    if let Some(v) = args.steps {
        settings.steps = v;
    }
    if let Some(v) = args.seed {
        settings.seed = v;
    }
    if let Some(v) = args.latency_weight {
        settings.search.latency_weight = v;
    }
    if let Some(v) = args.tau {
        settings.search.tau = v;
    }

    let dataset = IdentityDataset::load(&settings.dataset)?;
    let spec = settings
        .supernet
        .clone()
        .unwrap_or_else(|| default_supernet(&dataset));
    let resolved = SearchSettings {
        supernet: Some(spec.clone()),
        ..settings.clone()
    };

    eprintln!(
        "searching {} steps over {} stages (seed {})",
        resolved.steps,
        spec.stages.len(),
        resolved.seed
    );
    let (state, history) =
        run_search(&spec, &resolved.search, &dataset, resolved.steps, resolved.seed)?;
    let derived = state.derive();

    let dir = out_dir(&args.out_dir);
    std::fs::create_dir_all(&dir)?;
    let arch_path = dir.join("derived_model.json");
    std::fs::write(&arch_path, serde_json::to_string_pretty(&derived)?)?;
    let manifest = write_manifest(
        &dir,
        "search",
        &resolved,
        resolved.seed,
        &[arch_path.clone()],
        started,
    )?;

    println!(
        "{}",
        json!({
            "schema_version": OUTPUT_SCHEMA_VERSION,
            "derived_model": arch_path,
            "manifest": manifest,
            "model": derived,
            "expected_latency": state.expected_latency(),
            "arch_entropies": state.arch_entropies(),
            "final_search_loss": history.last().map(|r| r.search_loss),
        })
    );
    Ok(())
}

// ---------------------------------------------------------------- eval

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Mask temperature; defaults to the checkpoint's final-epoch value.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Serialize)]
struct EvalConfig {
    checkpoint: PathBuf,
    dataset: PathBuf,
    tau: f64,
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let started = Instant::now();
    let state = TrainState::load(&args.checkpoint)?;
    let dataset = IdentityDataset::load(&args.dataset)?;
    let tau = args.tau.unwrap_or_else(|| {
        state
            .config
            .tau_at(state.epoch.saturating_sub(1).min(state.config.epochs.saturating_sub(1)))
    });
    let result = evaluate_split(&state.model, &dataset, tau)?;

    let dir = out_dir(&args.out_dir);
    std::fs::create_dir_all(&dir)?;
    let config = EvalConfig {
        checkpoint: args.checkpoint.clone(),
        dataset: args.dataset.clone(),
        tau,
    };
    let manifest = write_manifest(&dir, "eval", &config, state.config.seed, &[], started)?;
    eprintln!(
        "evaluated {} queries against {} gallery entries",
        dataset.query.len(),
        dataset.gallery.len()
    );
    println!(
        "{}",
        json!({
            "schema_version": OUTPUT_SCHEMA_VERSION,
            "manifest": manifest,
            "metrics": result,
        })
    );
    Ok(())
}

// ---------------------------------------------------------------- verify

#[derive(Args)]
struct VerifyArgs {
    /// Randomized bound-suite instances.
    #[arg(long, default_value_t = 1000)]
    instances: usize,
    /// Gradient-check configurations.
    #[arg(long, default_value_t = 100)]
    grad_configs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn cmd_verify(args: VerifyArgs) -> Result<bool> {
    let report = verify::run_all(args.instances, args.grad_configs, args.seed)?;
    eprintln!(
        "bounds: {} instances, {} violations; gradients: max errors {:.3e} / {:.3e} / {:.3e}",
        report.bounds.instances,
        report.bounds.violations,
        report.gradients.max_composite_error,
        report.gradients.max_mask_path_error,
        report.gradients.max_latency_error,
    );
    println!(
        "{}",
        json!({
            "schema_version": OUTPUT_SCHEMA_VERSION,
            "report": report,
            "pass": report.pass(),
        })
    );
    Ok(report.pass())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Gen(args) => cmd_gen(args).map(|()| true),
        Command::Train(args) => cmd_train(args).map(|()| true),
        Command::Search(args) => cmd_search(args).map(|()| true),
        Command::Eval(args) => cmd_eval(args).map(|()| true),
        Command::Verify(args) => cmd_verify(args),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
