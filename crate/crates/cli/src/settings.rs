use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mstop_core::ddtm::DdtmConfig;
use mstop_core::inference::Strategy;
use mstop_core::instance::{preset, PrizeMode, PRESETS};
use mstop_core::oracle::TsiliParams;
use mstop_core::trainer::{BaselineKind, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "mstop", version, about = "Multi-start team orienteering solver laboratory")]
pub struct Cli {
    /// TOML file with [generate], [solve], [train], [model] and [eval] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory (default: $MSTOP_OUTPUT_ROOT/<command>-<seed>).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Replace an existing run directory.
    #[arg(long, global = true)]
    pub force: bool,
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded dataset of random instances.
    Generate(GenerateArgs),
    /// Solve a dataset with the exact, brute-force or Tsiligirides solvers.
    Solve(SolveArgs),
    /// Train the attention policy with REINFORCE.
    Train(TrainArgs),
    /// Compare decoding strategies of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Repeat the run recorded in a manifest.
    Rerun(RerunArgs),
}

#[derive(Debug, Args, Default)]
pub struct GenerateArgs {
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub t_max: Option<f64>,
    #[arg(long)]
    pub prize_mode: Option<PrizeMode>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Default)]
pub struct SolveArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Comma-separated subset of exact, brute, tsili.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<SolveMethod>>,
    /// Node-expansion budget per exact search phase.
    #[arg(long)]
    pub budget: Option<u64>,
    /// Lift the exact and brute-force size limits.
    #[arg(long)]
    pub allow_large: bool,
    /// Tsiligirides rollouts per instance.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Default)]
pub struct ModelArgs {
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub n_enc: Option<usize>,
    #[arg(long)]
    pub n_dec: Option<usize>,
    #[arg(long)]
    pub clip: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub t_max: Option<f64>,
    #[arg(long)]
    pub prize_mode: Option<PrizeMode>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Trajectories per step.
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub k_aug: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub baseline: Option<BaselineKind>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Global gradient-norm clip; 0 disables clipping.
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub val_size: Option<usize>,
    /// Derives the data, model and rollout seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args, Default)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Omit to evaluate randomly initialized parameters.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub model_seed: Option<u64>,
    /// Comma-separated subset of greedy, sampling, perm, perm-aug.
    #[arg(long, value_delimiter = ',')]
    pub strategies: Option<Vec<Strategy>>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Leave the greedy trajectory out of the sampling pool.
    #[arg(long)]
    pub no_greedy_in_sampling: bool,
    #[arg(long)]
    pub reference: Option<Reference>,
    #[arg(long)]
    pub budget: Option<u64>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct RerunArgs {
    /// A manifest.json written by an earlier run.
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SolveMethod {
    Exact,
    Brute,
    Tsili,
}

impl SolveMethod {
    pub fn name(self) -> &'static str {
        match self {
            Self::Exact => "exact",
            Self::Brute => "brute",
            Self::Tsili => "tsili",
        }
    }
}

/// Objective each gap is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Reference {
    /// Exact when every instance is within the exact size limit, else best.
    Auto,
    /// The exact oracle, raised to the best strategy if its budget ran out.
    Exact,
    /// Best objective over the evaluated strategies.
    Best,
}

// ---------------------------------------------------------------------
// Config-file sections
// ---------------------------------------------------------------------

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenerateSection {
    preset: Option<String>,
    n: Option<usize>,
    k: Option<usize>,
    t_max: Option<f64>,
    prize_mode: Option<PrizeMode>,
    count: Option<usize>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SolveSection {
    dataset: Option<PathBuf>,
    methods: Option<Vec<SolveMethod>>,
    budget: Option<u64>,
    allow_large: Option<bool>,
    samples: Option<usize>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ModelSection {
    d: Option<usize>,
    heads: Option<usize>,
    d_ff: Option<usize>,
    n_enc: Option<usize>,
    n_dec: Option<usize>,
    clip: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainSection {
    n: Option<usize>,
    k: Option<usize>,
    t_max: Option<f64>,
    prize_mode: Option<PrizeMode>,
    epochs: Option<usize>,
    steps: Option<usize>,
    batch: Option<usize>,
    k_aug: Option<usize>,
    alpha: Option<f64>,
    baseline: Option<BaselineKind>,
    lr: Option<f64>,
    clip_norm: Option<f64>,
    val_size: Option<usize>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalSection {
    dataset: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    model_seed: Option<u64>,
    strategies: Option<Vec<Strategy>>,
    width: Option<usize>,
    seed: Option<u64>,
    include_greedy: Option<bool>,
    reference: Option<Reference>,
    budget: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    generate: GenerateSection,
    solve: SolveSection,
    train: TrainSection,
    model: ModelSection,
    eval: EvalSection,
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_toml(path, &text)
}

fn parse_toml<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| CliError::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

// ---------------------------------------------------------------------
// Resolved runs
// ---------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRun {
    pub n: usize,
    pub k: usize,
    pub t_max: f64,
    pub prize_mode: PrizeMode,
    pub count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveRun {
    pub dataset: PathBuf,
    pub methods: Vec<SolveMethod>,
    pub budget: u64,
    pub allow_large: bool,
    pub tsili: TsiliParams,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRun {
    pub train: TrainConfig,
    pub model: DdtmConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRun {
    pub dataset: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub model: DdtmConfig,
    pub model_seed: u64,
    pub strategies: Vec<Strategy>,
    pub width: usize,
    pub seed: u64,
    pub include_greedy: bool,
    pub reference: Reference,
    pub budget: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum RunConfig {
    Generate(GenerateRun),
    Solve(SolveRun),
    Train(TrainRun),
    Eval(EvalRun),
}

pub const DEFAULT_BUDGET: u64 = 50_000_000;
pub const MODEL_FILE: &str = "model.json";

impl RunConfig {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Generate(_) => "generate",
            Self::Solve(_) => "solve",
            Self::Train(_) => "train",
            Self::Eval(_) => "eval",
        }
    }

    pub fn seeds(&self) -> BTreeMap<String, u64> {
        let mut m = BTreeMap::new();
        match self {
            Self::Generate(g) => {
                m.insert("seed".into(), g.seed);
            }
            Self::Solve(s) => {
                m.insert("seed".into(), s.seed);
            }
            Self::Train(t) => {
                m.insert("data".into(), t.train.data_seed);
                m.insert("model".into(), t.train.model_seed);
                m.insert("rollout".into(), t.train.rollout_seed);
            }
            Self::Eval(e) => {
                m.insert("seed".into(), e.seed);
                m.insert("model".into(), e.model_seed);
            }
        }
        m
    }

    /// Directory name used when `--out` is absent.
    pub fn default_dir_name(&self) -> String {
        let seed = match self {
            Self::Generate(g) => g.seed,
            Self::Solve(s) => s.seed,
            Self::Train(t) => t.train.data_seed,
            Self::Eval(e) => e.seed,
        };
        format!("{}-{seed}", self.name())
    }
}

fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

fn resolve_generate(a: GenerateArgs, f: GenerateSection) -> Result<GenerateRun> {
    let preset_name = a.preset.or(f.preset);
    let base = match &preset_name {
        Some(name) => preset(name).ok_or_else(|| {
            CliError::Usage(format!("unknown preset {name:?} (expected one of {})", PRESETS.join(", ")))
        })?,
        None => preset("mstop10").expect("built-in preset"),
    };
    Ok(GenerateRun {
        n: pick(a.n, f.n, base.0),
        k: pick(a.k, f.k, base.1),
        t_max: pick(a.t_max, f.t_max, base.2),
        prize_mode: pick(a.prize_mode, f.prize_mode, PrizeMode::Constant),
        count: pick(a.count, f.count, 100),
        seed: pick(a.seed, f.seed, 0),
    })
}

fn resolve_solve(a: SolveArgs, f: SolveSection) -> Result<SolveRun> {
    let dataset = a
        .dataset
        .or(f.dataset)
        .ok_or_else(|| CliError::Usage("solve needs --dataset".into()))?;
    let methods = pick(a.methods, f.methods, vec![SolveMethod::Exact]);
    if methods.is_empty() {
        return Err(CliError::Usage("at least one solve method is required".into()));
    }
    Ok(SolveRun {
        dataset,
        methods,
        budget: pick(a.budget, f.budget, DEFAULT_BUDGET),
        allow_large: a.allow_large || f.allow_large.unwrap_or(false),
        tsili: TsiliParams {
            samples: pick(a.samples, f.samples, TsiliParams::default().samples),
            ..TsiliParams::default()
        },
        seed: pick(a.seed, f.seed, 0),
    })
}

fn resolve_model(a: ModelArgs, f: ModelSection, base: DdtmConfig) -> DdtmConfig {
    DdtmConfig {
        d: pick(a.d, f.d, base.d),
        heads: pick(a.heads, f.heads, base.heads),
        d_ff: pick(a.d_ff, f.d_ff, base.d_ff),
        n_enc: pick(a.n_enc, f.n_enc, base.n_enc),
        n_dec: pick(a.n_dec, f.n_dec, base.n_dec),
        clip: pick(a.clip, f.clip, base.clip),
    }
}

fn resolve_train(a: TrainArgs, f: TrainSection, m: ModelSection) -> Result<TrainRun> {
    let base = TrainConfig::tiny(pick(a.seed, f.seed, 0));
    let baseline = pick(a.baseline, f.baseline, base.baseline);
    let default_k_aug = if baseline == BaselineKind::InstanceAug { 8 } else { 1 };
    let clip = pick(a.clip_norm, f.clip_norm, 1.0);
    let train = TrainConfig {
        n: pick(a.n, f.n, base.n),
        k: pick(a.k, f.k, base.k),
        t_max: pick(a.t_max, f.t_max, base.t_max),
        prize_mode: pick(a.prize_mode, f.prize_mode, base.prize_mode),
        epochs: pick(a.epochs, f.epochs, base.epochs),
        steps_per_epoch: pick(a.steps, f.steps, base.steps_per_epoch),
        batch: pick(a.batch, f.batch, base.batch),
        k_aug: pick(a.k_aug, f.k_aug, default_k_aug),
        alpha: pick(a.alpha, f.alpha, base.alpha),
        baseline,
        lr: pick(a.lr, f.lr, base.lr),
        clip_norm: (clip > 0.0).then_some(clip),
        val_size: pick(a.val_size, f.val_size, base.val_size),
        ..base
    };
    train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let model = resolve_model(a.model, m, DdtmConfig::default());
    model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(TrainRun { train, model })
}

fn resolve_eval(a: EvalArgs, f: EvalSection, m: ModelSection) -> Result<EvalRun> {
    let dataset = a
        .dataset
        .or(f.dataset)
        .ok_or_else(|| CliError::Usage("eval needs --dataset".into()))?;
    let checkpoint = a.checkpoint.or(f.checkpoint);
    // A model.json next to the checkpoint supplies the architecture.
    let base = match checkpoint.as_deref().and_then(Path::parent) {
        Some(dir) if dir.join(MODEL_FILE).exists() => {
            let path = dir.join(MODEL_FILE);
            let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
            serde_json::from_str(&text).map_err(|e| CliError::Parse {
                path,
                msg: e.to_string(),
            })?
        }
        _ => DdtmConfig::default(),
    };
    let model = resolve_model(a.model, m, base);
    model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let strategies = pick(
        a.strategies,
        f.strategies,
        vec![Strategy::Greedy, Strategy::Perm, Strategy::PermAug],
    );
    if strategies.is_empty() {
        return Err(CliError::Usage("at least one strategy is required".into()));
    }
    let width = pick(a.width, f.width, 1280);
    if width == 0 {
        return Err(CliError::Usage("--width must be at least 1".into()));
    }
    Ok(EvalRun {
        dataset,
        checkpoint,
        model,
        model_seed: pick(a.model_seed, f.model_seed, 0),
        strategies,
        width,
        seed: pick(a.seed, f.seed, 0),
        include_greedy: !a.no_greedy_in_sampling && f.include_greedy.unwrap_or(true),
        reference: pick(a.reference, f.reference, Reference::Auto),
        budget: pick(a.budget, f.budget, DEFAULT_BUDGET),
    })
}

/// Merges the config file and flags into a self-contained run description.
pub fn resolve(command: Command, config: Option<&Path>) -> Result<Option<RunConfig>> {
    let file = load_config(config)?;
    Ok(Some(match command {
        Command::Generate(a) => RunConfig::Generate(resolve_generate(a, file.generate)?),
        Command::Solve(a) => RunConfig::Solve(resolve_solve(a, file.solve)?),
        Command::Train(a) => RunConfig::Train(resolve_train(a, file.train, file.model)?),
        Command::Eval(a) => RunConfig::Eval(resolve_eval(a, file.eval, file.model)?),
        Command::Rerun(_) => return Ok(None),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_fills_generate_defaults() {
        let run = resolve_generate(
            GenerateArgs {
                preset: Some("mstop50".into()),
                ..GenerateArgs::default()
            },
            GenerateSection::default(),
        )
        .unwrap();
        assert_eq!((run.n, run.k, run.t_max), (50, 3, 3.0));
        assert!(resolve_generate(
            GenerateArgs {
                preset: Some("mstop11".into()),
                ..GenerateArgs::default()
            },
            GenerateSection::default()
        )
        .is_err());
    }

    #[test]
    fn flags_override_file() {
        let file: ConfigFile = parse_toml(Path::new("x.toml"), "[train]\nalpha = 0.5\nepochs = 3\n[model]\nd = 16\nheads = 2\n").unwrap();
        let run = resolve_train(
            TrainArgs {
                alpha: Some(0.01),
                ..TrainArgs::default()
            },
            file.train,
            file.model,
        )
        .unwrap();
        assert_eq!(run.train.alpha, 0.01);
        assert_eq!(run.train.epochs, 3);
        assert_eq!(run.model.d, 16);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse_toml::<ConfigFile>(Path::new("x.toml"), "[train]\nalfa = 1\n").is_err());
    }

    #[test]
    fn greedy_rollout_defaults_to_no_augmentation() {
        let run = resolve_train(
            TrainArgs {
                baseline: Some(BaselineKind::GreedyRollout),
                alpha: Some(0.0),
                ..TrainArgs::default()
            },
            TrainSection::default(),
            ModelSection::default(),
        )
        .unwrap();
        assert_eq!(run.train.k_aug, 1);
        assert_eq!(run.train.raw_per_step(), run.train.batch);
    }

    #[test]
    fn run_config_round_trips_through_json() {
        let run = RunConfig::Generate(GenerateRun {
            n: 10,
            k: 2,
            t_max: 1.5,
            prize_mode: PrizeMode::Uniform,
            count: 3,
            seed: 7,
        });
        let text = serde_json::to_string(&run).unwrap();
        assert!(text.contains("\"command\":\"generate\""));
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), run);
    }
}
