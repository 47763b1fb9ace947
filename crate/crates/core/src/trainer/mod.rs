//! Pre-training, fine-tuning regimes, evaluation and checkpoint selection.

mod features;
mod plan;

use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use cslid_tensor::{clip_grad_norm, Adam, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use features::{feature_file_name, feature_key, FeatureStore};
pub use plan::{build_plan, FtMethod, LossTerm, PlanStage, StagePlan};

use crate::corpus::{speed_expand, tokenize_transcript, Lexicon, Manifest, Utterance, Vocab};
use crate::dsp::{spec_augment, FeatureMatrix, SpecAugConfig};
use crate::error::{io_err, CoreError, Result};
use crate::metrics::{save_trials, EvalReport, ScoredTrial};
use crate::models::checkpoint::{self, CheckpointMeta};
use crate::models::{check_loss_weights, joint_loss_tape, CrnnConfig, ForwardCtx, Model, ModelConfig, Mtl};
use crate::sampler::{balanced_language_batches, shuffled_batches, StageSpec};
use crate::Language;

/// Speed factors used when speed perturbation is on.
pub const SPEED_FACTORS: [f64; 3] = [0.9, 1.0, 1.1];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub pretrain_epochs: u32,
    pub pretrain_lr: f64,
    pub finetune_lr: f64,
    /// Epochs of each non-gradual fine-tuning stage.
    pub finetune_epochs: u32,
    pub max_batch_duration_s: f64,
    pub seed: u64,
    /// Weight of the language loss in the joint objective.
    pub lambda: f64,
    /// Scale of the language loss in the joint objective.
    pub alpha: f64,
    /// Global gradient-norm limit.
    pub clip_norm: f64,
    pub ft_method: FtMethod,
    /// Stages of gradual fine-tuning.
    pub schedule: Option<Vec<StageSpec>>,
    /// Mandarin up-sampling of the in-domain data outside gradual stages.
    pub upsample_zh: u32,
    /// Share of each language held out during pre-training.
    pub holdout_fraction: f64,
    /// Adds 0.9x and 1.1x copies of every training utterance.
    pub speed_perturb: bool,
    pub spec_augment: Option<SpecAugConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::Crnn(CrnnConfig::default()),
            pretrain_epochs: 5,
            pretrain_lr: 1e-4,
            finetune_lr: 1e-5,
            finetune_epochs: 10,
            max_batch_duration_s: 120.0,
            seed: 0,
            lambda: 0.2,
            alpha: 100.0,
            clip_norm: 5.0,
            ft_method: FtMethod::OneStage,
            schedule: None,
            upsample_zh: 1,
            holdout_fraction: 0.05,
            speed_perturb: false,
            spec_augment: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CoreError::Config(msg));
        self.model.validate()?;
        check_loss_weights(self.lambda, self.alpha)?;
        for (name, lr) in [("pretrain_lr", self.pretrain_lr), ("finetune_lr", self.finetune_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        if self.pretrain_epochs == 0 || self.finetune_epochs == 0 {
            return bad("epoch counts must be at least 1".into());
        }
        if !(self.max_batch_duration_s > 0.0) {
            return bad(format!("max_batch_duration_s must be positive, got {}", self.max_batch_duration_s));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return bad(format!("holdout_fraction {} not in (0, 1)", self.holdout_fraction));
        }
        if self.upsample_zh == 0 {
            return bad("upsample_zh must be at least 1".into());
        }
        if self.ft_method == FtMethod::Gradual && self.schedule.as_ref().is_none_or(Vec::is_empty) {
            return bad("gradual fine-tuning needs a schedule".into());
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

const INIT_STREAM: u64 = 1;
const HOLDOUT_STREAM: u64 = 2;
const BATCH_STREAM: u64 = 3;
const DROPOUT_STREAM: u64 = 4;
const PLAN_STREAM: u64 = 5;
const AUGMENT_STREAM: u64 = 6;

/// Maps transcripts to CTC targets over a joint vocabulary.
pub struct Transcriber {
    pub lexicon: Lexicon,
    pub vocab: Vocab,
}

impl Transcriber {
    pub fn targets(&self, u: &Utterance) -> Vec<usize> {
        tokenize_transcript(&u.transcript, &self.lexicon, &self.vocab).tokens
    }
}

/// Output layout of one run: checkpoints, reports, trials and the log.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let run = Self { root: root.into() };
        for dir in [run.checkpoints(), run.reports(), run.trials()] {
            std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        Ok(run)
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn trials(&self) -> PathBuf {
        self.root.join("trials")
    }

    pub fn log_path(&self) -> PathBuf {
        self.root.join("train.log")
    }
}

/// Plain-text training log, kept in memory and appended to a file when
/// one is attached.
#[derive(Default)]
pub struct RunLog {
    file: Option<(PathBuf, File)>,
    pub lines: Vec<String>,
}

impl RunLog {
    pub fn append_to(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
        Ok(Self {
            file: Some((path.to_path_buf(), file)),
            lines: Vec::new(),
        })
    }

    pub fn line(&mut self, text: String) -> Result<()> {
        if let Some((path, file)) = &mut self.file {
            writeln!(file, "{text}").map_err(io_err(path.as_path()))?;
        }
        self.lines.push(text);
        Ok(())
    }
}

/// Everything a training run reads from or writes to besides its config.
pub struct TrainEnv {
    pub features: FeatureStore,
    pub run: Option<RunDir>,
    pub log: RunLog,
}

impl TrainEnv {
    pub fn new(features: FeatureStore, run: Option<RunDir>) -> Result<Self> {
        let log = match &run {
            Some(r) => RunLog::append_to(&r.log_path())?,
            None => RunLog::default(),
        };
        Ok(Self { features, run, log })
    }
}

/// Features, labels and optional CTC targets of one batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub feats: Vec<FeatureMatrix>,
    pub labels: Vec<usize>,
    pub targets: Option<Vec<Vec<usize>>>,
}

impl Batch {
    pub fn gather(
        manifest: &Manifest,
        indices: &[usize],
        features: &mut FeatureStore,
        transcriber: Option<&Transcriber>,
        augment: Option<(&SpecAugConfig, &mut ChaCha8Rng)>,
    ) -> Result<Self> {
        let utts: Vec<&Utterance> = indices.iter().map(|&i| &manifest.entries[i]).collect();
        let mut feats = Vec::with_capacity(utts.len());
        for u in &utts {
            feats.push(features.get(u)?.clone());
        }
        if let Some((cfg, rng)) = augment {
            for f in &mut feats {
                *f = spec_augment(f, rng, cfg);
            }
        }
        Ok(Self {
            feats,
            labels: utts.iter().map(|u| u.language.index()).collect(),
            targets: transcriber.map(|t| utts.iter().map(|u| t.targets(u)).collect()),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub lid: f64,
    pub ctc: Option<f64>,
}

/// One optimizer step on `batch`. With [`LossTerm::Ctc`] the model must be
/// multitask and the batch must carry targets; utterances too short for
/// their target are left out of the CTC term.
pub fn train_step(
    model: &mut Model<f32>,
    opt: &mut Adam<f32>,
    batch: &Batch,
    losses: &[LossTerm],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepLoss> {
    let use_ctc = losses.contains(&LossTerm::Ctc);
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::train(rng);
    let refs: Vec<&FeatureMatrix> = batch.feats.iter().collect();
    let (loss, lid, ctc) = if use_ctc {
        let (Model::Mtl(mtl), Some(targets)) = (&*model, &batch.targets) else {
            return Err(CoreError::Config("the CTC loss needs a multitask model and transcripts".into()));
        };
        let mut rows = Vec::with_capacity(refs.len());
        let mut ctc_terms = Vec::new();
        for (f, target) in refs.iter().zip(targets) {
            let out = mtl.forward(&mut tape, f, true, &mut ctx)?;
            rows.push(out.lid_logits);
            let lp = out.ctc_log_probs.expect("requested");
            if !target.is_empty() && cslid_tensor::ctc_feasible(target, tape.shape(lp)[0]) {
                ctc_terms.push(tape.ctc_loss(lp, target)?);
            }
        }
        let logits = tape.concat(&rows, 0)?;
        let lid = tape.softmax_cross_entropy(logits, &batch.labels)?;
        let ctc = if ctc_terms.is_empty() {
            tape.constant(cslid_tensor::Tensor::scalar(0.0))
        } else {
            let n = ctc_terms.len();
            let sum = tape.add_n(&ctc_terms)?;
            tape.scale(sum, 1.0 / n as f32)
        };
        let joint = joint_loss_tape(&mut tape, ctc, lid, config.lambda, config.alpha)?;
        (joint, lid, Some(ctc))
    } else {
        let logits = model.lid_logits(&mut tape, &refs, &mut ctx)?;
        let lid = tape.softmax_cross_entropy(logits, &batch.labels)?;
        (lid, lid, None)
    };
    let bn_updates = std::mem::take(&mut ctx.bn_updates);
    let grads = tape.backward(loss)?;
    let store = model.store_mut();
    store.zero_grads();
    store.accumulate(&tape, &grads);
    clip_grad_norm(store, config.clip_norm);
    opt.step(store)?;
    model.apply_bn_updates(&bn_updates);
    let total = tape.scalar(loss) as f64;
    if !total.is_finite() {
        return Err(CoreError::InvalidArgument(format!("training loss became {total}")));
    }
    Ok(StepLoss {
        total,
        lid: tape.scalar(lid) as f64,
        ctc: ctc.map(|c| tape.scalar(c) as f64),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: u32,
    pub steps: usize,
    pub mean_loss: f64,
    pub holdout_bac: Option<f64>,
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub meta: CheckpointMeta,
    pub checkpoints: Vec<PathBuf>,
    pub history: Vec<EpochRecord>,
}

/// A model's trials and report on a manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub trials: Vec<ScoredTrial>,
}

impl Evaluation {
    /// Writes `reports/{name}.json` and `trials/{name}.jsonl`.
    pub fn save(&self, run: &RunDir, name: &str) -> Result<(PathBuf, PathBuf)> {
        let report = run.reports().join(format!("{name}.json"));
        let trials = run.trials().join(format!("{name}.jsonl"));
        self.report.save(&report)?;
        save_trials(&self.trials, &trials)?;
        Ok((report, trials))
    }
}

/// Evaluation-mode inference on every utterance of `manifest`.
pub fn evaluate(model: &Model<f32>, manifest: &Manifest, features: &mut FeatureStore) -> Result<Evaluation> {
    if manifest.is_empty() {
        return Err(CoreError::EmptyInput("evaluation manifest is empty".into()));
    }
    let mut trials = Vec::with_capacity(manifest.len());
    for u in &manifest.entries {
        let feat = features.get(u)?;
        let p = model.predict(&[feat])?[0];
        trials.push(ScoredTrial {
            id: u.id.clone(),
            truth: u.language,
            predicted: p.language,
            zh_score: p.zh_score,
        });
    }
    Ok(Evaluation {
        report: EvalReport::from_trials(&trials)?,
        trials,
    })
}

/// Index of the largest value; ties go to the earliest.
pub fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub path: PathBuf,
    pub bacs: Vec<f64>,
}

/// Evaluates each checkpoint and picks the best balanced accuracy, the
/// earliest on ties.
pub fn select_best_checkpoint(
    paths: &[PathBuf],
    manifest: &Manifest,
    features: &mut FeatureStore,
    expected: Option<&ModelConfig>,
) -> Result<Selection> {
    if paths.is_empty() {
        return Err(CoreError::EmptyInput("no checkpoints to select from".into()));
    }
    let mut bacs = Vec::with_capacity(paths.len());
    for p in paths {
        let (model, _) = checkpoint::load::<f32>(p, expected)?;
        bacs.push(evaluate(&model, manifest, features)?.report.balanced_accuracy);
    }
    let index = argmax_first(&bacs).expect("non-empty");
    Ok(Selection {
        index,
        path: paths[index].clone(),
        bacs,
    })
}

/// Splits off `fraction` of each language (at least one utterance) as a
/// held-out set.
pub fn holdout_split<R: rand::Rng + ?Sized>(manifest: &Manifest, fraction: f64, rng: &mut R) -> Result<(Manifest, Manifest)> {
    let mut held = vec![false; manifest.len()];
    for language in [Language::En, Language::Zh] {
        let mut idx: Vec<usize> = (0..manifest.len()).filter(|&i| manifest.entries[i].language == language).collect();
        if idx.len() < 2 {
            return Err(CoreError::EmptyInput(format!(
                "holding out {language} data needs at least 2 utterances, found {}",
                idx.len()
            )));
        }
        idx.shuffle(rng);
        let n = ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        for &i in &idx[..n] {
            held[i] = true;
        }
    }
    let pick = |keep: bool| -> Vec<Utterance> {
        manifest
            .entries
            .iter()
            .zip(&held)
            .filter(|(_, &h)| h == keep)
            .map(|(u, _)| u.clone())
            .collect()
    };
    Ok((
        Manifest::new(pick(false), format!("{} [train split]", manifest.provenance))?,
        Manifest::new(pick(true), format!("{} [held-out split]", manifest.provenance))?,
    ))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.6}"))
}

struct EpochRunner<'a> {
    config: &'a TrainConfig,
    env: &'a mut TrainEnv,
    batch_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    augment_rng: ChaCha8Rng,
    step: usize,
}

impl<'a> EpochRunner<'a> {
    fn new(config: &'a TrainConfig, env: &'a mut TrainEnv) -> Self {
        Self {
            config,
            env,
            batch_rng: config.rng(BATCH_STREAM),
            dropout_rng: config.rng(DROPOUT_STREAM),
            augment_rng: config.rng(AUGMENT_STREAM),
            step: 0,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn run_epoch(
        &mut self,
        model: &mut Model<f32>,
        opt: &mut Adam<f32>,
        manifest: &Manifest,
        balanced: bool,
        losses: &[LossTerm],
        transcriber: Option<&Transcriber>,
        stage: &str,
        epoch: u32,
    ) -> Result<EpochRecord> {
        let max_s = self.config.max_batch_duration_s;
        let stream = if balanced {
            balanced_language_batches(manifest, max_s, &mut self.batch_rng)?
        } else {
            shuffled_batches(manifest, max_s, &mut self.batch_rng)?
        };
        if let Some(w) = &stream.warning {
            self.env.log.line(format!("stage={stage} epoch={epoch} warning={w}"))?;
        }
        let mut total = 0.0;
        let mut steps = 0;
        for b in &stream.batches {
            let augment = self.config.spec_augment.as_ref().map(|c| (c, &mut self.augment_rng));
            let batch = Batch::gather(manifest, &b.indices, &mut self.env.features, transcriber, augment)?;
            let loss = train_step(model, opt, &batch, losses, self.config, &mut self.dropout_rng)?;
            self.step += 1;
            steps += 1;
            total += loss.total;
            self.env.log.line(format!(
                "stage={stage} epoch={epoch} step={} batch={} loss={:.6} lid={:.6} ctc={} lr={:e}",
                self.step,
                batch.labels.len(),
                loss.total,
                loss.lid,
                fmt_opt(loss.ctc),
                opt.lr
            ))?;
        }
        Ok(EpochRecord {
            stage: stage.to_string(),
            epoch,
            steps,
            mean_loss: if steps > 0 { total / steps as f64 } else { f64::NAN },
            holdout_bac: None,
        })
    }

    fn checkpoint(&self, model: &Model<f32>, name: &str, meta: &CheckpointMeta) -> Result<Option<PathBuf>> {
        let Some(run) = &self.env.run else {
            return Ok(None);
        };
        let path = run.checkpoints().join(name);
        checkpoint::save(&path, model, meta)?;
        Ok(Some(path))
    }
}

fn expand_speed(config: &TrainConfig, manifest: Manifest) -> Result<Manifest> {
    if config.speed_perturb {
        speed_expand(&manifest, &SPEED_FACTORS)
    } else {
        Ok(manifest)
    }
}

/// Trains on language-balanced batches of the monolingual manifests and
/// returns the epoch with the best held-out balanced accuracy. Multitask
/// models train on the joint loss and need a transcriber.
pub fn pretrain(
    config: &TrainConfig,
    en: &Manifest,
    zh: &Manifest,
    transcriber: Option<&Transcriber>,
    env: &mut TrainEnv,
) -> Result<TrainOutcome> {
    config.validate()?;
    let losses: Vec<LossTerm> = match &config.model {
        ModelConfig::Crnn(_) => vec![LossTerm::Lid],
        ModelConfig::Mtl(m) => {
            let Some(t) = transcriber else {
                return Err(CoreError::Config("multitask pre-training needs a lexicon-based transcriber".into()));
            };
            if t.vocab.len() != m.vocab_size {
                return Err(CoreError::ConfigMismatch {
                    expected: format!("vocab_size {}", m.vocab_size),
                    found: format!("{} tokens in the lexicon vocabulary", t.vocab.len()),
                });
            }
            if let Some(u) = en.entries.iter().chain(&zh.entries).find(|u| u.transcript.is_empty()) {
                return Err(CoreError::Config(format!("multitask pre-training needs transcripts; {} has none", u.id)));
            }
            vec![LossTerm::Ctc, LossTerm::Lid]
        }
    };
    let transcriber = transcriber.filter(|_| losses.contains(&LossTerm::Ctc));
    let all = Manifest::concat(&[en, zh], "pre-training data")?;
    let (train, holdout) = holdout_split(&all, config.holdout_fraction, &mut config.rng(HOLDOUT_STREAM))?;
    let train = expand_speed(config, train)?;
    let mut model = Model::<f32>::new(&config.model, &mut config.rng(INIT_STREAM))?;
    let mut opt = Adam::new(config.pretrain_lr);
    env.log.line(format!(
        "stage=pretrain train={} holdout={} seed={}",
        train.len(),
        holdout.len(),
        config.seed
    ))?;
    let mut runner = EpochRunner::new(config, env);
    let mut best: Option<(Model<f32>, CheckpointMeta)> = None;
    let mut checkpoints = Vec::new();
    let mut history = Vec::new();
    for epoch in 1..=config.pretrain_epochs {
        let mut rec = runner.run_epoch(&mut model, &mut opt, &train, true, &losses, transcriber, "pretrain", epoch)?;
        let bac = evaluate(&model, &holdout, &mut runner.env.features)?.report.balanced_accuracy;
        rec.holdout_bac = Some(bac);
        runner.env.log.line(format!(
            "stage=pretrain epoch={epoch} mean_loss={:.6} holdout_bac={bac:.6}",
            rec.mean_loss
        ))?;
        let meta = CheckpointMeta {
            epoch: epoch as usize,
            metric: Some(bac),
        };
        checkpoints.extend(runner.checkpoint(&model, &format!("pretrain_epoch{epoch:03}.ckpt"), &meta)?);
        if best.as_ref().is_none_or(|(_, m)| bac > m.metric.unwrap_or(f64::NEG_INFINITY)) {
            best = Some((model.clone(), meta));
        }
        history.push(rec);
    }
    let (model, meta) = best.expect("at least one epoch");
    runner.env.log.line(format!("stage=pretrain selected_epoch={}", meta.epoch))?;
    Ok(TrainOutcome {
        model,
        meta,
        checkpoints,
        history,
    })
}

/// Runs the stage plan of `config.ft_method` with the language loss only,
/// starting from `init` or from random weights. The CTC head of a
/// multitask model stays frozen. Returns the final model.
pub fn finetune(
    config: &TrainConfig,
    init: Option<Model<f32>>,
    in_domain: &Manifest,
    out_domain: Option<&Manifest>,
    env: &mut TrainEnv,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut model = match init {
        Some(m) => {
            if m.config() != config.model {
                return Err(CoreError::ConfigMismatch {
                    expected: serde_json::to_string(&config.model).unwrap_or_default(),
                    found: serde_json::to_string(&m.config()).unwrap_or_default(),
                });
            }
            m
        }
        None => Model::new(&config.model, &mut config.rng(INIT_STREAM))?,
    };
    let plan = build_plan(config, in_domain, out_domain, &mut config.rng(PLAN_STREAM))?;
    for note in &plan.notes {
        env.log.line(format!("stage=finetune note={note}"))?;
    }
    let frozen = model.store_mut().set_trainable_prefix(Mtl::<f32>::CTC_PREFIX, false);
    let mut opt = Adam::new(config.finetune_lr);
    let mut runner = EpochRunner::new(config, env);
    let mut checkpoints = Vec::new();
    let mut history = Vec::new();
    let mut global_epoch = 0;
    for stage in &plan.stages {
        let manifest = expand_speed(config, stage.manifest.clone())?;
        runner.env.log.line(format!(
            "stage={} method={} utterances={} hours={:.4}",
            stage.name,
            config.ft_method.as_str(),
            manifest.len(),
            manifest.total_duration_s() / 3600.0
        ))?;
        for epoch in 1..=stage.epochs {
            global_epoch += 1;
            let rec = runner.run_epoch(&mut model, &mut opt, &manifest, false, &stage.losses, None, &stage.name, epoch)?;
            runner.env.log.line(format!(
                "stage={} epoch={epoch} mean_loss={:.6}",
                stage.name, rec.mean_loss
            ))?;
            let meta = CheckpointMeta {
                epoch: global_epoch,
                metric: None,
            };
            let name = format!("finetune_epoch{global_epoch:03}_{}.ckpt", stage.name);
            checkpoints.extend(runner.checkpoint(&model, &name, &meta)?);
            history.push(rec);
        }
    }
    if frozen > 0 {
        model.store_mut().set_trainable_prefix(Mtl::<f32>::CTC_PREFIX, true);
    }
    Ok(TrainOutcome {
        model,
        meta: CheckpointMeta {
            epoch: global_epoch,
            metric: None,
        },
        checkpoints,
        history,
    })
}

#[cfg(test)]
mod tests;
