use rand::Rng;

use super::*;
use crate::corpus::{build_vocab, parse_lexicon};
use crate::dsp::{write_wav, AudioBuffer, FbankConfig};
use crate::models::MtlConfig;
use crate::sampler::tests::uniform;

const RATE: u32 = 8000;

fn tiny_crnn() -> ModelConfig {
    ModelConfig::Crnn(CrnnConfig {
        n_mels: 16,
        channels: vec![2, 4],
        time_strides: vec![2, 1],
        gru_layers: 1,
        hidden: 6,
        ..CrnnConfig::default()
    })
}

fn tiny_mtl(vocab_size: usize) -> ModelConfig {
    ModelConfig::Mtl(MtlConfig {
        n_mels: 16,
        stack: 2,
        d_model: 8,
        heads: 2,
        ff_mult: 2,
        conv_kernel: 3,
        blocks: 1,
        lid_hidden: 4,
        vocab_size,
        ..MtlConfig::default()
    })
}

fn fbank() -> FbankConfig {
    FbankConfig {
        sample_rate_hz: RATE,
        n_mels: 16,
        high_hz: 4000.0,
        ..FbankConfig::default()
    }
}

/// Noisy tones: English near 500 Hz, Mandarin near 2 kHz.
fn tone_corpus(dir: &Path, n_en: usize, n_zh: usize, dur: f64, seed: u64) -> (Manifest, Manifest) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |language: Language, n: usize| {
        let entries = (0..n)
            .map(|i| {
                let id = format!("{language}{i:03}");
                let base = if language == Language::En { 500.0 } else { 2000.0 };
                let freq = base * rng.random_range(0.9..1.1);
                let samples = (0..(dur * RATE as f64) as usize)
                    .map(|k| {
                        let t = k as f64 / RATE as f64;
                        (0.3 * (2.0 * std::f64::consts::PI * freq * t).sin() + 0.05 * rng.random_range(-1.0..1.0)) as f32
                    })
                    .collect();
                write_wav(&dir.join(format!("{id}.wav")), &AudioBuffer::new(samples, RATE)).unwrap();
                Utterance {
                    id: id.clone(),
                    audio_path: format!("{id}.wav"),
                    offset_s: 0.0,
                    duration_s: dur,
                    language,
                    transcript: match language {
                        Language::En => vec!["HI".into()],
                        Language::Zh => vec!["你".into()],
                    },
                    corpus_tag: "tones".into(),
                    speed: None,
                }
            })
            .collect();
        Manifest::new(entries, format!("tones {language}")).unwrap()
    };
    let en = make(Language::En, n_en);
    let zh = make(Language::Zh, n_zh);
    (en, zh)
}

fn env(dir: &Path, run: Option<RunDir>) -> TrainEnv {
    TrainEnv::new(FeatureStore::new(fbank(), dir).unwrap(), run).unwrap()
}

fn config(model: ModelConfig) -> TrainConfig {
    TrainConfig {
        model,
        pretrain_epochs: 2,
        pretrain_lr: 1e-3,
        finetune_lr: 1e-3,
        finetune_epochs: 1,
        max_batch_duration_s: 2.0,
        seed: 11,
        holdout_fraction: 0.2,
        ..TrainConfig::default()
    }
}

fn transcriber() -> Transcriber {
    let en = parse_lexicon("HI\tHH AY\n", Language::En).unwrap();
    let zh = parse_lexicon("你\tn i\n", Language::Zh).unwrap();
    let vocab = build_vocab(&[&en, &zh]).unwrap();
    Transcriber {
        lexicon: Lexicon::new(&[en, zh].concat()),
        vocab,
    }
}

#[test]
fn fixed_batch_loss_decreases_over_fifty_steps() {
    let dir = tempfile::tempdir().unwrap();
    let (en, zh) = tone_corpus(dir.path(), 2, 2, 0.3, 1);
    let all = Manifest::concat(&[&en, &zh], "all").unwrap();
    let mut features = FeatureStore::new(fbank(), dir.path()).unwrap();
    let batch = Batch::gather(&all, &[0, 1, 2, 3], &mut features, None, None).unwrap();
    let cfg = config(tiny_crnn());
    let mut model = Model::new(&cfg.model, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut opt = Adam::new(1e-3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let losses: Vec<f64> = (0..50)
        .map(|_| train_step(&mut model, &mut opt, &batch, &[LossTerm::Lid], &cfg, &mut rng).unwrap().total)
        .collect();
    assert!(losses[49] < losses[0], "first {} last {}", losses[0], losses[49]);
    let early: f64 = losses[..10].iter().sum();
    let late: f64 = losses[40..].iter().sum();
    assert!(late < early);
}

#[test]
fn pretrain_writes_one_checkpoint_per_epoch_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (en, zh) = tone_corpus(dir.path(), 5, 5, 0.3, 2);
    let cfg = config(tiny_crnn());
    let run = RunDir::create(dir.path().join("run")).unwrap();
    let mut e1 = env(dir.path(), Some(run));
    let a = pretrain(&cfg, &en, &zh, None, &mut e1).unwrap();
    let names: Vec<String> = a
        .checkpoints
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["pretrain_epoch001.ckpt", "pretrain_epoch002.ckpt"]);
    assert_eq!(a.history.len(), 2);
    assert!(a.history.iter().all(|r| r.holdout_bac.is_some()));
    let mut e2 = env(dir.path(), None);
    let b = pretrain(&cfg, &en, &zh, None, &mut e2).unwrap();
    assert_eq!(a.meta, b.meta);
    for ((_, x), (_, y)) in a.model.store().iter().zip(b.model.store().iter()) {
        assert_eq!(x.value, y.value, "{}", x.name);
    }
    assert_eq!(e1.log.lines, e2.log.lines);
    let logged = std::fs::read_to_string(dir.path().join("run/train.log")).unwrap();
    assert_eq!(logged.lines().count(), e1.log.lines.len());
}

#[test]
fn multitask_pretraining_needs_transcripts() {
    let dir = tempfile::tempdir().unwrap();
    let (en, zh) = tone_corpus(dir.path(), 3, 3, 0.3, 3);
    let t = transcriber();
    let cfg = config(tiny_mtl(t.vocab.len()));
    assert!(matches!(pretrain(&cfg, &en, &zh, None, &mut env(dir.path(), None)), Err(CoreError::Config(_))));
    let mut bare = en.clone();
    bare.entries[0].transcript.clear();
    assert!(matches!(
        pretrain(&cfg, &bare, &zh, Some(&t), &mut env(dir.path(), None)),
        Err(CoreError::Config(_))
    ));
    let out = pretrain(&TrainConfig { pretrain_epochs: 1, ..cfg }, &en, &zh, Some(&t), &mut env(dir.path(), None)).unwrap();
    assert_eq!(out.history.len(), 1);
}

#[test]
fn lid_finetuning_leaves_ctc_head_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let (en, zh) = tone_corpus(dir.path(), 3, 3, 0.3, 4);
    let t = transcriber();
    let cfg = config(tiny_mtl(t.vocab.len()));
    let init = Model::<f32>::new(&cfg.model, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let in_domain = Manifest::concat(&[&en, &zh], "in").unwrap();
    let out = finetune(&cfg, Some(init.clone()), &in_domain, None, &mut env(dir.path(), None)).unwrap();
    let mut changed = 0;
    for ((_, before), (_, after)) in init.store().iter().zip(out.model.store().iter()) {
        if before.name.starts_with(Mtl::<f32>::CTC_PREFIX) {
            assert_eq!(before.value, after.value, "{}", before.name);
        } else if before.value != after.value {
            changed += 1;
        }
    }
    assert!(changed > 0);
}

#[test]
fn finetune_rejects_mismatched_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let (en, zh) = tone_corpus(dir.path(), 2, 2, 0.3, 5);
    let cfg = config(tiny_crnn());
    let other = Model::<f32>::new(&tiny_mtl(8), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let in_domain = Manifest::concat(&[&en, &zh], "in").unwrap();
    let err = finetune(&cfg, Some(other), &in_domain, None, &mut env(dir.path(), None));
    assert!(matches!(err, Err(CoreError::ConfigMismatch { .. })));
}

#[test]
fn always_english_model_scores_half_balanced_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let (en, zh) = tone_corpus(dir.path(), 3, 2, 0.3, 6);
    let eval = Manifest::concat(&[&en, &zh], "eval").unwrap();
    let mut model = Model::<f32>::new(&tiny_crnn(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let bias = model.store().id_of("crnn.classifier.b").unwrap();
    model.store_mut().get_mut(bias).value.data_mut().copy_from_slice(&[50.0, -50.0]);
    let mut features = FeatureStore::new(fbank(), dir.path()).unwrap();
    let a = evaluate(&model, &eval, &mut features).unwrap();
    assert_eq!((a.report.recall_en, a.report.recall_zh), (1.0, 0.0));
    assert_eq!(a.report.balanced_accuracy, 0.5);
    assert_eq!(a.trials.len(), 5);
    let b = evaluate(&model, &eval, &mut features).unwrap();
    assert_eq!(a, b);
    let empty = Manifest::default();
    assert!(matches!(evaluate(&model, &empty, &mut features), Err(CoreError::EmptyInput(_))));
}

#[test]
fn argmax_prefers_earliest_on_ties() {
    assert_eq!(argmax_first(&[0.6, 0.8, 0.7]), Some(1));
    assert_eq!(argmax_first(&[0.7, 0.7]), Some(0));
    assert_eq!(argmax_first(&[0.4]), Some(0));
    assert_eq!(argmax_first(&[]), None);
}

#[test]
fn checkpoint_selection_reevaluates_saved_models() {
    let dir = tempfile::tempdir().unwrap();
    let (en, zh) = tone_corpus(dir.path(), 3, 3, 0.3, 7);
    let eval = Manifest::concat(&[&en, &zh], "eval").unwrap();
    let cfg = tiny_crnn();
    let mut paths = Vec::new();
    for (k, bias) in [[50.0f32, -50.0], [-50.0, 50.0]].into_iter().enumerate() {
        let mut m = Model::<f32>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let id = m.store().id_of("crnn.classifier.b").unwrap();
        m.store_mut().get_mut(id).value.data_mut().copy_from_slice(&bias);
        let p = dir.path().join(format!("c{k}.ckpt"));
        checkpoint::save(&p, &m, &CheckpointMeta { epoch: k + 1, metric: None }).unwrap();
        paths.push(p);
    }
    let mut features = FeatureStore::new(fbank(), dir.path()).unwrap();
    let sel = select_best_checkpoint(&paths, &eval, &mut features, Some(&cfg)).unwrap();
    assert_eq!(sel.bacs, vec![0.5, 0.5]);
    assert_eq!(sel.index, 0);
    let single = select_best_checkpoint(&paths[1..], &eval, &mut features, None).unwrap();
    assert_eq!(single.path, paths[1]);
}

#[test]
fn holdout_takes_a_share_of_each_language() {
    let m = uniform(40, 10, 1.0);
    let (train, held) = holdout_split(&m, 0.05, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!((held.count(Language::En), held.count(Language::Zh)), (2, 1));
    assert_eq!(train.len() + held.len(), 50);
    assert!(holdout_split(&uniform(3, 1, 1.0), 0.05, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

fn plan_for(method: FtMethod, schedule: Option<Vec<StageSpec>>) -> Result<StagePlan> {
    let cfg = TrainConfig {
        ft_method: method,
        schedule,
        ..config(tiny_crnn())
    };
    let mut in_domain = uniform(60, 20, 1.0);
    for u in &mut in_domain.entries {
        u.id = format!("in_{}", u.id);
    }
    let out = uniform(300, 600, 1.0);
    build_plan(&cfg, &in_domain, Some(&out), &mut ChaCha8Rng::seed_from_u64(0))
}

#[test]
fn one_stage_and_two_stage_plans() {
    let one = plan_for(FtMethod::OneStage, None).unwrap();
    assert_eq!(one.stages.len(), 1);
    assert_eq!(one.stages[0].manifest.len(), 80);
    assert_eq!(one.stages[0].losses, vec![LossTerm::Lid]);
    let two = plan_for(FtMethod::TwoStage, None).unwrap();
    assert_eq!(two.stages.len(), 2);
    assert_eq!(two.stages[1].manifest.len(), 80);
}

#[test]
fn combined_plan_mixes_corpora_one_to_one_by_duration() {
    let plan = plan_for(FtMethod::Combined, None).unwrap();
    let m = &plan.stages[0].manifest;
    let (in_s, out_s): (Vec<_>, Vec<_>) = m.entries.iter().partition(|u| u.id.starts_with("in_"));
    assert_eq!(in_s.len(), 80);
    assert!((in_s.len() as f64 - out_s.len() as f64).abs() <= 1.0);
}

#[test]
fn gradual_plan_follows_the_ratio_list() {
    let schedule: Vec<StageSpec> = [3.0, 2.0, 1.0, 0.5, 0.0]
        .iter()
        .map(|&ratio| StageSpec {
            ratio,
            upsample_zh: 1,
            epochs: 1,
        })
        .collect();
    let plan = plan_for(FtMethod::Gradual, Some(schedule)).unwrap();
    assert_eq!(plan.stages.len(), 5);
    for (stage, ratio) in plan.stages.iter().zip([3.0, 2.0, 1.0, 0.5, 0.0]) {
        let (id, ood): (Vec<_>, Vec<_>) = stage.manifest.entries.iter().partition(|u| u.id.starts_with("in_"));
        let id_s: f64 = id.iter().map(|u| u.duration_s).sum();
        let ood_s: f64 = ood.iter().map(|u| u.duration_s).sum();
        let realized = ood_s / id_s;
        assert!((realized - ratio).abs() <= 0.05 * ratio.max(1e-12), "{realized} vs {ratio}");
    }
    assert!(plan.stages[4].manifest.entries.iter().all(|u| u.id.starts_with("in_")));
    assert!(matches!(plan_for(FtMethod::Gradual, None), Err(CoreError::Config(_))));
}

#[test]
fn config_validation_names_the_problem() {
    let ok = config(tiny_crnn());
    assert!(ok.validate().is_ok());
    for bad in [
        TrainConfig { pretrain_lr: 0.0, ..ok.clone() },
        TrainConfig { finetune_epochs: 0, ..ok.clone() },
        TrainConfig { lambda: 1.2, ..ok.clone() },
        TrainConfig { holdout_fraction: 1.0, ..ok.clone() },
        TrainConfig { ft_method: FtMethod::Gradual, ..ok.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(CoreError::Config(_))));
    }
}
