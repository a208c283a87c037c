//! The `gdt` command line: dataset generation, training, rollout,
//! evaluation, and report aggregation, glued together by a flat key-value
//! config file (flags win) and a per-run `manifest.json`.

mod config;

pub use config::KvConfig;

use crate::dataset::{
    fit_bin_spec, load_dataset, save_dataset, split_holdout, BinSpec, DatasetError, FeatureSpec,
    Trajectory,
};
use crate::envsim::{
    generate_dataset, patchwork_target, synthesize_target, ControllerSpec, EnvSpec, TargetSketch,
    EXPERT_NOISE, MEDIUM_NOISE,
};
use crate::eval::{
    evaluate, histogram_svg, shift_target, DistMode, EvalConfig, EvalError, EvalTarget, TargetKind,
};
use crate::model::{
    load_checkpoint, Aggregator, CheckpointError, EncoderConfig, EncoderKind, EncoderStrategy,
    GdtModel, ModelConfig, ModelError,
};
use crate::stats::{compute_stats, export_with_stats, StatConfig, StatKind, StatsError};
use crate::trainer::{
    fit_state_normalizer, prepare_train_set, pretrain_encoder, train, TrainConfig, TrainError,
    TrainOutputs,
};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("io: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            TrainError::Io { .. } => CliError::Io(e.to_string()),
            TrainError::Checkpoint(c) => c.into(),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<StatsError> for CliError {
    fn from(e: StatsError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Usage(e.to_string())
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(
    name = "gdt",
    about = "Decision-transformer family for offline state-marginal matching on point-velocity tasks",
    version
)]
pub struct Cli {
    /// Flat key = value config file; flags override file values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; falls back to the config file, then $GDT_SEED, then 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Variant {
    /// Returns-to-go conditioning (scalar discounted feature sum).
    Dt,
    /// Categorical histogram conditioning.
    Cdt,
    /// Target state sequence through the anti-causal transformer.
    Bdt,
    /// Learned features from a state auto-encoder.
    DtAe,
    /// Learned features from a contrastive momentum encoder.
    DtCpc,
    /// Learned features trained end-to-end through the policy loss.
    DtE2e,
}

impl Variant {
    fn as_str(&self) -> &'static str {
        match self {
            Variant::Dt => "dt",
            Variant::Cdt => "cdt",
            Variant::Bdt => "bdt",
            Variant::DtAe => "dt-ae",
            Variant::DtCpc => "dt-cpc",
            Variant::DtE2e => "dt-e2e",
        }
    }

    fn stat_kind(&self) -> StatKind {
        match self {
            Variant::Dt => StatKind::Return,
            Variant::Cdt => StatKind::Histogram,
            _ => StatKind::StateSequence,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Unsup,
    Joint,
    Frozen,
}

impl StrategyArg {
    fn to_strategy(self) -> EncoderStrategy {
        match self {
            StrategyArg::Unsup => EncoderStrategy::Unsup,
            StrategyArg::Joint => EncoderStrategy::Joint,
            StrategyArg::Frozen => EncoderStrategy::Frozen,
        }
    }

    fn as_str(&self) -> &'static str {
        match self {
            StrategyArg::Unsup => "unsup",
            StrategyArg::Joint => "joint",
            StrategyArg::Frozen => "frozen",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an offline dataset with scripted controllers.
    GenData(GenDataArgs),
    /// Train a variant on a dataset (holds out test targets first).
    Train(TrainArgs),
    /// Roll out a checkpoint against one target and dump the trajectory.
    Rollout(RolloutArgs),
    /// Evaluate a checkpoint: rollouts, Wasserstein-1 metrics, plots.
    Eval(EvalArgs),
    /// Aggregate a metrics.csv into per-quality summaries.
    Report(ReportArgs),
}

#[derive(Debug, clap::Args)]
pub struct GenDataArgs {
    /// Environment: point1d or point2d.
    #[arg(long)]
    pub env: Option<String>,
    /// Velocity sweep lo:hi:step (inclusive endpoints).
    #[arg(long)]
    pub targets: Option<String>,
    /// Trajectories per target, split evenly across qualities.
    #[arg(long)]
    pub per_target: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Comma-separated quality tags drawn from {expert, medium}.
    #[arg(long)]
    pub qualities: Option<String>,
    /// Output JSON-lines dataset path.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub variant: Option<Variant>,
    /// Encoder training strategy; learned-feature variants only.
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    /// Feature of record: velocity, reward, identity, or state-dims:i,j.
    #[arg(long)]
    pub feature: Option<String>,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub context: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Latent width m for bdt and the learned-feature variants.
    #[arg(long)]
    pub latent: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub pretrain: Option<usize>,
    #[arg(long)]
    pub holdout_best: Option<usize>,
    #[arg(long)]
    pub holdout_median: Option<usize>,
    /// Also write the training set with per-timestep stats attached.
    #[arg(long)]
    pub export_stats: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct RolloutArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub targets: Option<PathBuf>,
    /// Index into the targets file.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Training manifest; defaults to manifest.json next to the checkpoint.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Target trajectories (JSON lines); defaults to split_test.jsonl next
    /// to the checkpoint.
    #[arg(long)]
    pub targets: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Comma-separated bin shifts, e.g. -3,0,3; expands every target.
    #[arg(long)]
    pub shift_bins: Option<String>,
    /// Synthetic Gaussian sketch file replacing the targets.
    #[arg(long)]
    pub sketch: Option<PathBuf>,
    /// a,b,t — condition on targets[a][..t) spliced with targets[b][t..).
    /// Repeatable; replaces the target list.
    #[arg(long, action = clap::ArgAction::Append)]
    pub patchwork: Vec<String>,
    #[arg(long)]
    pub rollouts: Option<usize>,
    #[arg(long)]
    pub eval_seeds: Option<usize>,
    /// Rayon worker cap for rollout parallelism.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long, default_value_t = false)]
    pub no_plots: bool,
}

#[derive(Debug, clap::Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Everything a training run records for later evaluation.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub variant: Option<String>,
    pub strategy: Option<String>,
    pub env: EnvSpec,
    pub stat_config: Option<StatConfig>,
    pub model_config: Option<ModelConfig>,
    pub train_config: Option<TrainConfig>,
    pub counts: BTreeMap<String, usize>,
    pub inputs: BTreeMap<String, String>,
    pub config_kv: BTreeMap<String, String>,
}

impl RunManifest {
    fn write(&self, path: &Path) -> Result<(), CliError> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json).map_err(io_err(path))
    }

    fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("manifest {}: {e}", path.display())))
    }
}

/// Entry point used by the binary; returns the process exit code.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let kv = match &cli.config {
        Some(path) => KvConfig::load(path).map_err(CliError::Usage)?,
        None => KvConfig::default(),
    };
    let seed = resolve_seed(&kv, cli.seed)?;
    match cli.command {
        Command::GenData(args) => cmd_gen_data(&kv, seed, args),
        Command::Train(args) => cmd_train(&kv, seed, args),
        Command::Rollout(args) => cmd_rollout(&kv, seed, args),
        Command::Eval(args) => cmd_eval(&kv, seed, args),
        Command::Report(args) => cmd_report(args),
    }
}

fn resolve_seed(kv: &KvConfig, flag: Option<u64>) -> Result<u64, CliError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(raw) = kv.raw("seed") {
        return raw
            .parse()
            .map_err(|_| CliError::Usage(format!("config key seed: cannot parse {raw:?}")));
    }
    match std::env::var("GDT_SEED") {
        Ok(raw) => raw
            .parse()
            .map_err(|_| CliError::Usage(format!("GDT_SEED: cannot parse {raw:?}"))),
        Err(_) => Ok(0),
    }
}

fn parse_env(kind: &str, horizon: usize) -> Result<EnvSpec, CliError> {
    let dims = match kind {
        "point1d" => 1,
        "point2d" => 2,
        other => {
            return Err(CliError::Usage(format!(
                "unknown env {other:?}; expected point1d or point2d"
            )))
        }
    };
    let mut spec = EnvSpec::point(dims);
    spec.horizon = horizon;
    Ok(spec)
}

fn parse_feature(raw: &str, env: &EnvSpec) -> Result<FeatureSpec, CliError> {
    match raw {
        "velocity" => Ok(env.velocity_feature()),
        "reward" => Ok(FeatureSpec::Reward),
        "identity" => Ok(FeatureSpec::Identity),
        other => {
            if let Some(list) = other.strip_prefix("state-dims:") {
                let dims = list
                    .split(',')
                    .map(|x| x.trim().parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| CliError::Usage(format!("bad feature dims {list:?}")))?;
                Ok(FeatureSpec::StateDims { dims })
            } else {
                Err(CliError::Usage(format!(
                    "unknown feature {other:?}; expected velocity, reward, identity, or state-dims:i,j"
                )))
            }
        }
    }
}

fn cmd_gen_data(kv: &KvConfig, seed: u64, args: GenDataArgs) -> Result<(), CliError> {
    let env_kind = require(
        kv.resolve_string("env.kind", args.env, ""),
        "--env (point1d or point2d)",
    )?;
    let horizon = kv
        .resolve("env.horizon", args.horizon, 200)
        .map_err(CliError::Usage)?;
    let env = parse_env(&env_kind, horizon)?;
    let sweep = kv.resolve_string("data.targets", args.targets, "0.0:3.0:0.1");
    let per_target = kv
        .resolve("data.per_target", args.per_target, 50)
        .map_err(CliError::Usage)?;
    let qualities = kv.resolve_string("data.qualities", args.qualities, "expert,medium");
    let out = require_path(args.out.or_else(|| kv.raw("data.path").map(PathBuf::from)), "--out")?;

    let (lo, hi, step) = parse_sweep(&sweep)?;
    let quality_list: Vec<(&str, f64)> = qualities
        .split(',')
        .map(|q| match q.trim() {
            "expert" => Ok(("expert", EXPERT_NOISE)),
            "medium" => Ok(("medium", MEDIUM_NOISE)),
            other => Err(CliError::Usage(format!("unknown quality {other:?}"))),
        })
        .collect::<Result<_, _>>()?;
    if quality_list.is_empty() || per_target == 0 {
        return Err(CliError::Usage("need at least one quality and per-target > 0".into()));
    }

    let n_targets = ((hi - lo) / step).round() as usize + 1;
    let mut controllers = Vec::new();
    for i in 0..n_targets {
        let v = lo + i as f64 * step;
        let share = per_target / quality_list.len();
        let mut remainder = per_target % quality_list.len();
        for (quality, noise) in &quality_list {
            let extra = if remainder > 0 {
                remainder -= 1;
                1
            } else {
                0
            };
            controllers.push(ControllerSpec {
                target_velocity: vec![v; env.dims],
                noise: *noise,
                n_traj: share + extra,
                quality: (*quality).to_string(),
            });
        }
    }
    let trajs = generate_dataset(&env, &controllers, seed);
    save_dataset(&out, &trajs)?;

    let manifest = serde_json::json!({
        "command": "gen-data",
        "seed": seed,
        "env": env,
        "sweep": sweep,
        "per_target": per_target,
        "controllers": controllers,
        "count": trajs.len(),
    });
    let sidecar = out.with_extension("manifest.json");
    std::fs::write(&sidecar, serde_json::to_string_pretty(&manifest).expect("json"))
        .map_err(io_err(&sidecar))?;
    println!("wrote {} trajectories to {}", trajs.len(), out.display());
    Ok(())
}

fn parse_sweep(raw: &str) -> Result<(f64, f64, f64), CliError> {
    let parts: Vec<&str> = raw.split(':').collect();
    if parts.len() != 3 {
        return Err(CliError::Usage(format!("bad sweep {raw:?}; expected lo:hi:step")));
    }
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| p.parse())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("bad sweep {raw:?}")))?;
    if nums[2] <= 0.0 || nums[1] < nums[0] {
        return Err(CliError::Usage(format!("bad sweep {raw:?}")));
    }
    Ok((nums[0], nums[1], nums[2]))
}

fn require(value: String, what: &str) -> Result<String, CliError> {
    if value.is_empty() {
        Err(CliError::Usage(format!("missing {what}")))
    } else {
        Ok(value)
    }
}

fn require_path(value: Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    value.ok_or_else(|| CliError::Usage(format!("missing {what}")))
}

#[allow(clippy::too_many_lines)]
fn cmd_train(kv: &KvConfig, seed: u64, args: TrainArgs) -> Result<(), CliError> {
    let data = require_path(args.data.or_else(|| kv.raw("data.path").map(PathBuf::from)), "--data")?;
    let out_dir = require_path(
        args.out_dir.or_else(|| kv.raw("out.dir").map(PathBuf::from)),
        "--out-dir",
    )?;
    let variant = match args.variant {
        Some(v) => v,
        None => match kv.raw("variant") {
            Some(raw) => Variant::from_str(raw, true)
                .map_err(|_| CliError::Usage(format!("unknown variant {raw:?}")))?,
            None => return Err(CliError::Usage("missing --variant".into())),
        },
    };
    let strategy_arg = match args.strategy {
        Some(s) => Some(s),
        None => match kv.raw("strategy") {
            Some(raw) => Some(
                StrategyArg::from_str(raw, true)
                    .map_err(|_| CliError::Usage(format!("unknown strategy {raw:?}")))?,
            ),
            None => None,
        },
    };
    if strategy_arg.is_some() && !matches!(variant, Variant::DtAe | Variant::DtCpc) {
        return Err(CliError::Usage(
            "--strategy applies only to the learned-feature variants dt-ae and dt-cpc".into(),
        ));
    }
    let strategy = match variant {
        Variant::DtAe | Variant::DtCpc => strategy_arg.unwrap_or(StrategyArg::Unsup).to_strategy(),
        // e2e trains the encoder purely through the policy loss
        _ => EncoderStrategy::Unsup,
    };

    let trajs = load_dataset(&data)?;
    if trajs.is_empty() {
        return Err(CliError::Usage(format!("{} holds no trajectories", data.display())));
    }
    let state_dim = trajs[0].state_dim();
    let action_dim = trajs[0].action_dim();
    let max_horizon = trajs.iter().map(|t| t.len()).max().unwrap_or(0);
    let env = EnvSpec {
        dims: state_dim / 2,
        horizon: max_horizon,
        reward_target: vec![0.0; state_dim / 2],
    };

    let holdout_best = kv
        .resolve("holdout.best", args.holdout_best, 5)
        .map_err(CliError::Usage)?;
    let holdout_median = kv
        .resolve("holdout.median", args.holdout_median, 5)
        .map_err(CliError::Usage)?;
    let split = split_holdout(&trajs, holdout_best, holdout_median)?;

    let feature_raw = kv.resolve_string("feature", args.feature, "velocity");
    let feature_spec = parse_feature(&feature_raw, &env)?;
    let bins = kv.resolve("stat.bins", args.bins, 31).map_err(CliError::Usage)?;
    let gamma = kv.resolve("stat.gamma", args.gamma, 1.0).map_err(CliError::Usage)?;
    let bin_spec = fit_bin_spec(&split.train, &feature_spec, bins, None)?;
    let feature_dims = bin_spec.n_dims();
    if variant == Variant::Dt && feature_dims != 1 {
        return Err(CliError::Usage(format!(
            "dt conditions on a scalar feature sum; feature {feature_raw:?} has {feature_dims} dims"
        )));
    }
    let stat_config = StatConfig {
        gamma,
        feature_spec: feature_spec.clone(),
        bin_spec: Some(bin_spec.clone()),
    };

    let latent = kv.resolve("model.latent", args.latent, 16).map_err(CliError::Usage)?;
    let context = kv.resolve("model.context", args.context, 20).map_err(CliError::Usage)?;
    let model_config = ModelConfig {
        n_layers: kv.resolve("model.layers", args.layers, 3).map_err(CliError::Usage)?,
        n_heads: kv.resolve("model.heads", args.heads, 1).map_err(CliError::Usage)?,
        embed_dim: kv.resolve("model.dim", args.dim, 128).map_err(CliError::Usage)?,
        context_len: context,
        dropout: kv.resolve("model.dropout", args.dropout, 0.1).map_err(CliError::Usage)?,
        max_horizon,
        state_dim,
        action_dim,
        stat_dim: match variant.stat_kind() {
            StatKind::Return => 1,
            StatKind::Histogram => feature_dims * bins,
            StatKind::Goal => feature_dims,
            StatKind::StateSequence => state_dim,
        },
        stat_kind: variant.stat_kind(),
        aggregator: match variant {
            Variant::Cdt => Aggregator::Binning,
            Variant::Bdt => Aggregator::AntiCausalTransformer { latent_dim: latent },
            _ => Aggregator::Summation,
        },
        encoder: match variant {
            Variant::DtAe => Some(EncoderConfig::new(EncoderKind::Ae, latent)),
            Variant::DtCpc => Some(EncoderConfig::new(EncoderKind::Cpc, latent)),
            Variant::DtE2e => Some(EncoderConfig::new(EncoderKind::E2e, latent)),
            _ => None,
        },
        return_scale: max_horizon.max(1) as f64,
    };

    let train_config = TrainConfig {
        batch_size: kv.resolve("train.batch", args.batch, 64).map_err(CliError::Usage)?,
        lr: kv.resolve("train.lr", args.lr, 1e-4).map_err(CliError::Usage)?,
        grad_clip: kv.resolve("train.clip", args.clip, 0.25).map_err(CliError::Usage)?,
        weight_decay: kv.resolve("train.decay", args.decay, 1e-4).map_err(CliError::Usage)?,
        warmup_steps: kv.resolve("train.warmup", args.warmup, 2_000).map_err(CliError::Usage)?,
        total_steps: kv.resolve("train.steps", args.steps, 20_000).map_err(CliError::Usage)?,
        seed,
        checkpoint_every: kv
            .resolve("train.checkpoint_every", args.checkpoint_every, 0)
            .map_err(CliError::Usage)?,
        pretrain_steps: kv.resolve("train.pretrain", args.pretrain, 2_000).map_err(CliError::Usage)?,
    };

    std::fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
    save_dataset(&out_dir.join("split_test.jsonl"), &split.test)?;

    let mut model = GdtModel::new(model_config.clone(), seed)?;
    model.set_normalizer(fit_state_normalizer(&split.train));
    let set = prepare_train_set(split.train, stat_config.clone(), variant.stat_kind())?;

    if matches!(strategy, EncoderStrategy::Frozen) {
        pretrain_encoder(&mut model, &set, &train_config)?;
    }
    let outputs = TrainOutputs {
        loss_csv: Some(out_dir.join("loss.csv")),
        checkpoint: Some(out_dir.join("checkpoint.gdt")),
    };
    let report = train(&mut model, &set, &train_config, strategy, &outputs)?;

    if let Some(stats_path) = &args.export_stats {
        let stats = compute_stats(&set.trajs, &stat_config, variant.stat_kind(), None)?;
        export_with_stats(stats_path, &set.trajs, &stats).map_err(io_err(stats_path))?;
    }

    let mut resolved = kv.clone();
    for (key, value) in [
        ("variant", variant.as_str().to_string()),
        ("feature", feature_raw.clone()),
        ("seed", seed.to_string()),
    ] {
        resolved.set(key, value);
    }
    let manifest = RunManifest {
        command: "train".into(),
        seed,
        variant: Some(variant.as_str().into()),
        strategy: strategy_arg.map(|s| s.as_str().to_string()),
        env,
        stat_config: Some(stat_config),
        model_config: Some(model_config),
        train_config: Some(train_config.clone()),
        counts: BTreeMap::from([
            ("train".into(), set.trajs.len()),
            ("test".into(), split.test.len()),
        ]),
        inputs: BTreeMap::from([("data".into(), data.display().to_string())]),
        config_kv: resolved.entries().clone(),
    };
    manifest.write(&out_dir.join("manifest.json"))?;
    let final_loss = report.smoothed_loss(50, true);
    println!(
        "trained {} for {} steps; smoothed loss {:.6}; checkpoint at {}",
        variant.as_str(),
        train_config.total_steps,
        final_loss,
        out_dir.join("checkpoint.gdt").display()
    );
    Ok(())
}

struct LoadedRun {
    model: GdtModel,
    manifest: RunManifest,
    checkpoint_dir: PathBuf,
    manifest_path: PathBuf,
}

fn load_run(
    kv: &KvConfig,
    checkpoint: Option<PathBuf>,
    manifest: Option<PathBuf>,
) -> Result<LoadedRun, CliError> {
    let checkpoint = require_path(
        checkpoint.or_else(|| kv.raw("checkpoint").map(PathBuf::from)),
        "--checkpoint",
    )?;
    let model = load_checkpoint(&checkpoint)?;
    let dir = checkpoint
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let manifest_path = manifest.unwrap_or_else(|| dir.join("manifest.json"));
    let manifest = RunManifest::read(&manifest_path)?;
    match &manifest.model_config {
        Some(cfg) if *cfg == model.config => {}
        _ => {
            return Err(CliError::Usage(format!(
                "checkpoint {} does not match manifest {} (version error)",
                checkpoint.display(),
                manifest_path.display()
            )))
        }
    }
    Ok(LoadedRun {
        model,
        manifest,
        checkpoint_dir: dir,
        manifest_path,
    })
}

fn load_targets(
    run: &LoadedRun,
    targets: Option<PathBuf>,
) -> Result<(Vec<EvalTarget>, PathBuf), CliError> {
    let path = targets.unwrap_or_else(|| run.checkpoint_dir.join("split_test.jsonl"));
    let trajs = load_dataset(&path)?;
    if trajs.is_empty() {
        return Err(CliError::Usage(format!("{} holds no targets", path.display())));
    }
    Ok((
        trajs
            .into_iter()
            .enumerate()
            .map(|(i, t)| EvalTarget::from_trajectory(format!("t{i}"), t))
            .collect(),
        path,
    ))
}

fn cmd_rollout(kv: &KvConfig, seed: u64, args: RolloutArgs) -> Result<(), CliError> {
    let run = load_run(kv, args.checkpoint, args.manifest)?;
    let (targets, _) = load_targets(&run, args.targets)?;
    let target = targets
        .get(args.index)
        .ok_or_else(|| CliError::Usage(format!("target index {} out of range", args.index)))?;
    let stat_config = run
        .manifest
        .stat_config
        .clone()
        .ok_or_else(|| CliError::Usage("manifest lacks a stat config".into()))?;
    let traj = crate::eval::rollout(&run.model, &run.manifest.env, target, &stat_config, seed)?;
    let feats = crate::dataset::apply_feature(&traj, &stat_config.feature_spec, None)?;
    let mean: Vec<f64> = (0..feats[0].len())
        .map(|d| feats.iter().map(|f| f[d]).sum::<f64>() / feats.len() as f64)
        .collect();
    println!(
        "rollout of {} for {} steps; mean feature {:?}",
        target.id,
        traj.len(),
        mean
    );
    if let Some(out) = &args.out {
        save_dataset(out, std::slice::from_ref(&traj))?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn cmd_eval(kv: &KvConfig, seed: u64, args: EvalArgs) -> Result<(), CliError> {
    if let Some(jobs) = args.jobs {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let run = load_run(kv, args.checkpoint, args.manifest)?;
    let out_dir = require_path(
        args.out_dir.or_else(|| kv.raw("out.dir").map(PathBuf::from)),
        "--out-dir",
    )?;
    std::fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
    let stat_config = run
        .manifest
        .stat_config
        .clone()
        .ok_or_else(|| CliError::Usage("manifest lacks a stat config".into()))?;
    let bin_spec: BinSpec = stat_config
        .bin_spec
        .clone()
        .ok_or_else(|| CliError::Usage("manifest lacks a bin spec".into()))?;

    // assemble the target list: dataset trajectories, or synthetic sketches,
    // then optional patchwork splices and shift expansion
    let (mut targets, targets_path) = if let Some(sketch_path) = &args.sketch {
        let text = std::fs::read_to_string(sketch_path).map_err(io_err(sketch_path))?;
        let sketches: Vec<TargetSketch> = match serde_json::from_str::<Vec<TargetSketch>>(&text) {
            Ok(list) => list,
            Err(_) => vec![serde_json::from_str::<TargetSketch>(&text).map_err(|e| {
                CliError::Usage(format!("sketch {}: {e}", sketch_path.display()))
            })?],
        };
        (
            sketches
                .iter()
                .enumerate()
                .map(|(i, s)| EvalTarget {
                    id: format!("sketch{i}"),
                    quality: "synthetic".into(),
                    kind: TargetKind::FeatureSamples(synthesize_target(s, seed.wrapping_add(i as u64))),
                })
                .collect::<Vec<_>>(),
            sketch_path.clone(),
        )
    } else {
        load_targets(&run, args.targets)?
    };

    if !args.patchwork.is_empty() {
        let mut spliced = Vec::new();
        for spec in &args.patchwork {
            let parts: Vec<&str> = spec.split(',').collect();
            if parts.len() != 3 {
                return Err(CliError::Usage(format!("bad --patchwork {spec:?}; expected a,b,t")));
            }
            let a: usize = parts[0].parse().map_err(|_| CliError::Usage(format!("bad --patchwork {spec:?}")))?;
            let b: usize = parts[1].parse().map_err(|_| CliError::Usage(format!("bad --patchwork {spec:?}")))?;
            let t: usize = parts[2].parse().map_err(|_| CliError::Usage(format!("bad --patchwork {spec:?}")))?;
            let get = |i: usize| -> Result<&Trajectory, CliError> {
                match targets.get(i).map(|t| &t.kind) {
                    Some(TargetKind::Trajectory(tr)) => Ok(tr),
                    _ => Err(CliError::Usage(format!("patchwork index {i} out of range"))),
                }
            };
            let traj = patchwork_target(get(a)?, get(b)?, t)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            spliced.push(EvalTarget {
                id: format!("patch{a}x{b}at{t}"),
                quality: "patchwork".into(),
                kind: TargetKind::Trajectory(traj),
            });
        }
        targets = spliced;
    }

    if let Some(raw) = &args.shift_bins {
        let shifts: Vec<i32> = raw
            .split(',')
            .map(|p| p.trim().parse())
            .collect::<Result<_, _>>()
            .map_err(|_| CliError::Usage(format!("bad --shift-bins {raw:?}")))?;
        let mut expanded = Vec::with_capacity(targets.len() * shifts.len());
        for target in &targets {
            for &k in &shifts {
                expanded.push(shift_target(target, k, &bin_spec, &stat_config.feature_spec)?);
            }
        }
        targets = expanded;
    }

    let eval_config = EvalConfig {
        rollouts_per_seed: kv.resolve("eval.rollouts", args.rollouts, 20).map_err(CliError::Usage)?,
        n_seeds: kv.resolve("eval.seeds", args.eval_seeds, 4).map_err(CliError::Usage)?,
        base_seed: seed,
        mode: if bin_spec.n_dims() >= 2 {
            DistMode::Joint
        } else {
            DistMode::PerDim
        },
    };
    let report = evaluate(
        &run.model,
        &run.manifest.env,
        &targets,
        &stat_config,
        &bin_spec,
        &eval_config,
    )?;
    let metrics_path = out_dir.join("metrics.csv");
    report.write_csv(&metrics_path)?;

    if !args.no_plots {
        let plots = out_dir.join("plots");
        std::fs::create_dir_all(&plots).map_err(io_err(&plots))?;
        for t in &report.targets {
            if t.target_dist.mode == DistMode::PerDim {
                for d in 0..bin_spec.n_dims() {
                    let svg = histogram_svg(
                        &t.target_dist,
                        &t.rollout_dist,
                        d,
                        &format!("{} (dim {d}, W1 {:.4})", t.id, t.w1_pooled_all),
                    );
                    let name = if bin_spec.n_dims() == 1 {
                        format!("{}.svg", t.id)
                    } else {
                        format!("{}_d{d}.svg", t.id)
                    };
                    let path = plots.join(name);
                    std::fs::write(&path, svg).map_err(io_err(&path))?;
                }
            }
        }
    }

    let manifest_out = out_dir.join("manifest.json");
    if manifest_out == run.manifest_path {
        return Err(CliError::Usage(
            "eval --out-dir must differ from the training directory (it would overwrite the training manifest)".into(),
        ));
    }
    let manifest = RunManifest {
        command: "eval".into(),
        seed,
        variant: run.manifest.variant.clone(),
        strategy: run.manifest.strategy.clone(),
        env: run.manifest.env.clone(),
        stat_config: Some(stat_config),
        model_config: Some(run.model.config.clone()),
        train_config: None,
        counts: BTreeMap::from([
            ("targets".into(), targets.len()),
            ("rollouts_per_seed".into(), eval_config.rollouts_per_seed),
            ("seeds".into(), eval_config.n_seeds),
        ]),
        inputs: BTreeMap::from([
            ("targets".into(), targets_path.display().to_string()),
            ("checkpoint_dir".into(), run.checkpoint_dir.display().to_string()),
        ]),
        config_kv: kv.entries().clone(),
    };
    manifest.write(&manifest_out)?;
    println!("{:.6}", report.mean_w1());
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), CliError> {
    let metrics = require_path(args.metrics, "--metrics")?;
    let text = std::fs::read_to_string(&metrics).map_err(io_err(&metrics))?;
    let mut rows: Vec<(String, String, f64)> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 {
            if line != "target_id,quality_tag,seed,w1_mean,w1_std" {
                return Err(CliError::Usage(format!(
                    "{} is not a metrics.csv (unexpected header)",
                    metrics.display()
                )));
            }
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(CliError::Usage(format!("metrics line {}: bad row", idx + 1)));
        }
        let w1: f64 = cols[3]
            .parse()
            .map_err(|_| CliError::Usage(format!("metrics line {}: bad w1", idx + 1)))?;
        rows.push((cols[0].into(), cols[1].into(), w1));
    }
    let mut by_quality: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (_, quality, w1) in &rows {
        by_quality.entry(quality.clone()).or_default().push(*w1);
    }
    let mut out = String::from("quality,rows,w1_mean,w1_std\n");
    let stats = |vals: &[f64]| {
        let mean = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
        let std = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / vals.len().max(1) as f64)
            .sqrt();
        (mean, std)
    };
    for (quality, vals) in &by_quality {
        let (mean, std) = stats(vals);
        out.push_str(&format!("{quality},{},{mean:.6},{std:.6}\n", vals.len()));
    }
    let all: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let (mean, std) = stats(&all);
    out.push_str(&format!("all,{},{mean:.6},{std:.6}\n", all.len()));
    print!("{out}");
    if let Some(path) = &args.out {
        std::fs::write(path, &out).map_err(io_err(path))?;
    }
    Ok(())
}
