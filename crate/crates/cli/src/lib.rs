//! Command-line pipeline: synthetic corpora, features, pre-training,
//! fine-tuning, evaluation and schedule previews.

mod config;
pub mod synth;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use cslid_core::corpus::{build_vocab, load_lexicon, load_manifest, LoadOptions, Lexicon, Manifest};
use cslid_core::dsp::{write_fbank, FbankConfig};
use cslid_core::models::checkpoint::{self, CheckpointMeta};
use cslid_core::models::Model;
use cslid_core::sampler::{build_gft_schedule, format_schedule_table, table1_preset, CorpusStats, StageSpec, TABLE1_SEAME_POOL};
use cslid_core::trainer::{self, feature_file_name, FeatureStore, RunDir, TrainEnv, Transcriber};
use cslid_core::{CoreError, Language};

pub use config::{require, DataPaths, RunConfig};
pub use synth::{synthesize, Preset, SynthConfig};

#[derive(Debug, Parser)]
#[command(name = "cslid", version, about = "Code-switching language identification toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic two-language corpus with lexicons.
    Synth(SynthArgs),
    /// Precompute filterbank features for a manifest.
    Features(FeaturesArgs),
    /// Pre-train on monolingual manifests with language-balanced batches.
    Pretrain(RunArgs),
    /// Fine-tune with the configured method.
    Finetune(FinetuneArgs),
    /// Score a manifest with a checkpoint and write report and trials.
    Evaluate(EvaluateArgs),
    /// Print the stage table of a gradual fine-tuning schedule.
    SchedulePreview(PreviewArgs),
}

#[derive(Debug, clap::Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of utterances.
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    /// Random seed.
    #[arg(long, env = "CSLID_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Spectral distance between the two languages.
    #[arg(long, value_enum, default_value_t = Preset::Separable)]
    pub preset: Preset,
    /// Log-frequency shift of the Mandarin formants; overrides the preset.
    #[arg(long)]
    pub shift: Option<f64>,
    /// Per-utterance log-frequency spread; overrides the preset.
    #[arg(long)]
    pub spread: Option<f64>,
    /// Utterance duration in seconds.
    #[arg(long, default_value_t = 2.0)]
    pub duration: f64,
    /// Relative spread of utterance durations.
    #[arg(long, default_value_t = 0.0)]
    pub duration_jitter: f64,
    /// Share of Mandarin utterances.
    #[arg(long, default_value_t = 0.5)]
    pub zh_fraction: f64,
    /// Balance total duration across languages instead of using --zh-fraction.
    #[arg(long)]
    pub balance: bool,
    /// Prefix for utterance ids.
    #[arg(long, default_value = "")]
    pub prefix: String,
    /// Write into an existing output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, clap::Args)]
pub struct FeaturesArgs {
    /// Manifest to extract features for.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for `.fbank` files.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of mel bands.
    #[arg(long, default_value_t = 80)]
    pub n_mels: usize,
}

#[derive(Debug, clap::Args)]
pub struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long, env = "CSLID_SEED")]
    pub seed: Option<u64>,
    /// Overrides `out_dir`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Overrides `data.init_checkpoint`.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct EvaluateArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest to score.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Run directory receiving `reports/` and `trials/`.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Base name of the report and trials files.
    #[arg(long, default_value = "eval")]
    pub name: String,
    /// Precomputed features.
    #[arg(long)]
    pub feature_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SchedulePreset {
    /// The four-stage schedule over a 100 h out-of-domain pool.
    Table1,
}

#[derive(Debug, clap::Args)]
#[group(required = true, multiple = false)]
pub struct PreviewArgs {
    /// Built-in schedule.
    #[arg(long, value_enum)]
    pub preset: Option<SchedulePreset>,
    /// Run configuration whose schedule and manifests to preview.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{category}: {source}")]
    Core {
        category: &'static str,
        #[source]
        source: CoreError,
    },
}

impl From<CoreError> for CliError {
    fn from(source: CoreError) -> Self {
        let category = match &source {
            CoreError::Io { .. } => "io",
            CoreError::Decode(_) | CoreError::UnsupportedFormat(_) => "audio",
            CoreError::EmptyInput(_) | CoreError::InputTooShort { .. } => "input",
            CoreError::InvalidArgument(_) | CoreError::UndefinedClass(_) => "argument",
            CoreError::Parse { .. } => "parse",
            CoreError::Integrity(_) => "integrity",
            CoreError::Schedule(_) => "schedule",
            CoreError::Config(_) | CoreError::ConfigMismatch { .. } => "config",
            CoreError::Tensor(_) => "tensor",
        };
        Self::Core { category, source }
    }
}

impl CliError {
    /// 2 for usage and configuration problems, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Core { category, .. } if matches!(*category, "config" | "schedule") => 2,
            Self::Core { .. } => 1,
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
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
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Features(a) => cmd_features(&a),
        Command::Pretrain(a) => cmd_pretrain(&a),
        Command::Finetune(a) => cmd_finetune(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::SchedulePreview(a) => cmd_schedule_preview(&a),
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| {
        CoreError::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    }
}

/// Loads a manifest and makes its audio paths absolute.
pub fn load_manifest_abs(path: &Path) -> Result<Manifest, CliError> {
    let mut m = load_manifest(path, &LoadOptions { strip_tags: true })?;
    let base = path.parent().unwrap_or(Path::new(""));
    let base = std::path::absolute(base).map_err(io(base))?;
    for u in &mut m.entries {
        if Path::new(&u.audio_path).is_relative() {
            u.audio_path = base.join(&u.audio_path).to_string_lossy().into_owned();
        }
    }
    Ok(m)
}

pub fn cmd_synth(a: &SynthArgs) -> Result<(), CliError> {
    if a.out.exists() && !a.force {
        return Err(CliError::Usage(format!(
            "{} exists; pass --force to write into it",
            a.out.display()
        )));
    }
    if a.spread.is_some_and(|s| !(s >= 0.0 && s.is_finite())) || a.shift.is_some_and(|s| !s.is_finite()) {
        return Err(CliError::Usage("--shift must be finite and --spread non-negative".into()));
    }
    if a.n == 0 || !(a.duration > 0.0) || !(0.0..1.0).contains(&a.duration_jitter) || !(0.0..=1.0).contains(&a.zh_fraction) {
        return Err(CliError::Usage(
            "need --n >= 1, --duration > 0, --duration-jitter in [0, 1) and --zh-fraction in [0, 1]".into(),
        ));
    }
    let cfg = SynthConfig {
        n: a.n,
        seed: a.seed,
        preset: a.preset,
        shift: a.shift,
        spread: a.spread,
        duration_s: a.duration,
        duration_jitter: a.duration_jitter,
        zh_fraction: a.zh_fraction,
        balance: a.balance,
        prefix: a.prefix.clone(),
    };
    let m = synthesize(&cfg, &a.out)?;
    println!(
        "wrote {} utterances ({} en, {} zh, {:.1} s) to {}",
        m.len(),
        m.count(Language::En),
        m.count(Language::Zh),
        m.total_duration_s(),
        a.out.display()
    );
    Ok(())
}

pub fn cmd_features(a: &FeaturesArgs) -> Result<(), CliError> {
    let manifest = load_manifest_abs(&a.manifest)?;
    let fbank = FbankConfig {
        n_mels: a.n_mels,
        ..FbankConfig::default()
    };
    let mut store = FeatureStore::new(fbank, "")?;
    std::fs::create_dir_all(&a.out).map_err(io(&a.out))?;
    for u in &manifest.entries {
        let feat = store.compute(u)?;
        write_fbank(&a.out.join(feature_file_name(u)), &feat)?;
    }
    println!("wrote features for {} utterances to {}", manifest.len(), a.out.display());
    Ok(())
}

fn load_run_config(args: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(dir) = &args.out_dir {
        cfg.out_dir = dir.clone();
    }
    Ok(cfg)
}

fn feature_store(cfg: &RunConfig) -> Result<FeatureStore, CliError> {
    let fbank = FbankConfig {
        n_mels: cfg.train.model.n_mels(),
        ..FbankConfig::default()
    };
    let store = FeatureStore::new(fbank, "")?;
    Ok(match &cfg.data.feature_dir {
        Some(d) => store.with_feature_dir(d),
        None => store,
    })
}

fn start_run(cfg: &RunConfig, command: &str) -> Result<TrainEnv, CliError> {
    let run = RunDir::create(&cfg.out_dir)?;
    let snapshot = toml::to_string(cfg).map_err(|e| CliError::Usage(format!("config snapshot: {e}")))?;
    let path = cfg.out_dir.join(format!("config.{command}.toml"));
    std::fs::write(&path, snapshot).map_err(io(&path))?;
    Ok(TrainEnv::new(feature_store(cfg)?, Some(run))?)
}

fn transcriber(cfg: &RunConfig) -> Result<Option<Transcriber>, CliError> {
    let (Some(en), Some(zh)) = (&cfg.data.en_lexicon, &cfg.data.zh_lexicon) else {
        return Ok(None);
    };
    let en = load_lexicon(en, Language::En)?;
    let zh = load_lexicon(zh, Language::Zh)?;
    let vocab = build_vocab(&[&en, &zh])?;
    Ok(Some(Transcriber {
        lexicon: Lexicon::new(&[en, zh].concat()),
        vocab,
    }))
}

fn finish(env: &mut TrainEnv, cfg: &RunConfig, model: &Model<f32>, meta: &CheckpointMeta, name: &str) -> Result<(), CliError> {
    let run = env.run.clone().expect("run directory");
    let path = run.checkpoints().join(format!("{name}.ckpt"));
    checkpoint::save(&path, model, meta)?;
    println!("saved {}", path.display());
    if let Some(eval) = &cfg.data.eval_manifest {
        let manifest = load_manifest_abs(eval)?;
        let evaluation = trainer::evaluate(model, &manifest, &mut env.features)?;
        evaluation.save(&run, name)?;
        println!("{}", evaluation.report.render());
    }
    Ok(())
}

pub fn cmd_pretrain(args: &RunArgs) -> Result<(), CliError> {
    let cfg = load_run_config(args)?;
    cfg.check_paths()?;
    let en = load_manifest_abs(require("en_manifest", &cfg.data.en_manifest)?)?;
    let zh = load_manifest_abs(require("zh_manifest", &cfg.data.zh_manifest)?)?;
    let transcriber = transcriber(&cfg)?;
    let mut env = start_run(&cfg, "pretrain")?;
    let out = trainer::pretrain(&cfg.train, &en, &zh, transcriber.as_ref(), &mut env)?;
    finish(&mut env, &cfg, &out.model, &out.meta, "pretrain_best")
}

pub fn cmd_finetune(args: &FinetuneArgs) -> Result<(), CliError> {
    let mut cfg = load_run_config(&args.run)?;
    if let Some(init) = &args.init {
        cfg.data.init_checkpoint = Some(init.clone());
    }
    cfg.check_paths()?;
    let in_domain = load_manifest_abs(require("in_domain_manifest", &cfg.data.in_domain_manifest)?)?;
    let out_domain = cfg.data.out_domain_manifest.as_deref().map(load_manifest_abs).transpose()?;
    let init = match &cfg.data.init_checkpoint {
        Some(p) => Some(checkpoint::load::<f32>(p, Some(&cfg.train.model))?.0),
        None => None,
    };
    let mut env = start_run(&cfg, "finetune")?;
    let out = trainer::finetune(&cfg.train, init, &in_domain, out_domain.as_ref(), &mut env)?;
    finish(&mut env, &cfg, &out.model, &out.meta, "finetune_final")
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<(), CliError> {
    let (model, _) = checkpoint::load::<f32>(&a.checkpoint, None)?;
    let manifest = load_manifest_abs(&a.manifest)?;
    let fbank = FbankConfig {
        n_mels: model.config().n_mels(),
        ..FbankConfig::default()
    };
    let mut store = FeatureStore::new(fbank, "")?;
    if let Some(d) = &a.feature_dir {
        store = store.with_feature_dir(d);
    }
    let evaluation = trainer::evaluate(&model, &manifest, &mut store)?;
    let run = RunDir::create(&a.out_dir)?;
    let (report, trials) = evaluation.save(&run, &a.name)?;
    println!("{}", evaluation.report.render());
    println!("wrote {} and {}", report.display(), trials.display());
    Ok(())
}

/// The stage table for a preset or a run config.
pub fn schedule_table(a: &PreviewArgs) -> Result<String, CliError> {
    let (merlion, seame, specs): (CorpusStats, CorpusStats, Vec<StageSpec>) = match (&a.preset, &a.config) {
        (Some(SchedulePreset::Table1), _) => {
            let (merlion, specs) = table1_preset();
            (merlion, TABLE1_SEAME_POOL, specs)
        }
        (None, Some(path)) => {
            let cfg = RunConfig::load(path)?;
            let specs = cfg
                .train
                .schedule
                .clone()
                .ok_or_else(|| CliError::Usage("config has no train.schedule".into()))?;
            let in_domain = load_manifest_abs(require("in_domain_manifest", &cfg.data.in_domain_manifest)?)?;
            let out_domain = load_manifest_abs(require("out_domain_manifest", &cfg.data.out_domain_manifest)?)?;
            (CorpusStats::of(&in_domain), CorpusStats::of(&out_domain), specs)
        }
        (None, None) => return Err(CliError::Usage("pass --preset or --config".into())),
    };
    let (ratios, factors, epochs) = StageSpec::split(&specs);
    let stages = build_gft_schedule(merlion, seame, &ratios, &factors, &epochs)?;
    Ok(format_schedule_table(&stages))
}

pub fn cmd_schedule_preview(a: &PreviewArgs) -> Result<(), CliError> {
    print!("{}", schedule_table(a)?);
    Ok(())
}
