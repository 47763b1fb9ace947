//! Synthetic two-language corpora: each "language" is band-limited noise
//! shaped by its own inventory of formant-like resonances.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use clap::ValueEnum;
use cslid_core::corpus::{save_manifest, Manifest, Utterance};
use cslid_core::dsp::{write_wav, AudioBuffer};
use cslid_core::{Language, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const SAMPLE_RATE: u32 = 16000;

/// English phone inventory as (name, F1, F2) in Hz.
const EN_PHONES: [(&str, f64, f64); 5] = [
    ("AA", 700.0, 1100.0),
    ("AE", 650.0, 1700.0),
    ("IY", 300.0, 2200.0),
    ("UW", 320.0, 900.0),
    ("EH", 550.0, 1800.0),
];

const ZH_PHONES: [&str; 5] = ["a", "e", "i", "u", "o"];

const EN_WORDS: [(&str, [usize; 2]); 6] = [
    ("MAPI", [0, 2]),
    ("TOKU", [4, 3]),
    ("BEDA", [1, 0]),
    ("SUNI", [3, 2]),
    ("LEMO", [4, 1]),
    ("RAKU", [0, 3]),
];

const ZH_WORDS: [(&str, [usize; 2]); 6] = [
    ("你", [2, 0]),
    ("好", [0, 4]),
    ("我", [4, 1]),
    ("们", [1, 3]),
    ("是", [3, 2]),
    ("的", [1, 0]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Mandarin formants an octave above English ones.
    Separable,
    /// Formant inventories a few percent apart with wide speaker spread.
    Overlapping,
}

impl Preset {
    /// Log-frequency shift of the Mandarin inventory and per-utterance
    /// log-frequency spread.
    fn shift_and_spread(self) -> (f64, f64) {
        match self {
            Self::Separable => (std::f64::consts::LN_2, 0.03),
            Self::Overlapping => (0.12, 0.08),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub n: usize,
    pub seed: u64,
    pub preset: Preset,
    /// Overrides the preset's log-frequency shift of the Mandarin inventory.
    pub shift: Option<f64>,
    /// Overrides the preset's per-utterance log-frequency spread.
    pub spread: Option<f64>,
    pub duration_s: f64,
    /// Utterance durations vary uniformly by this fraction.
    pub duration_jitter: f64,
    /// Share of Mandarin utterances when not balancing.
    pub zh_fraction: f64,
    /// Pick each utterance's language to even out total durations.
    pub balance: bool,
    pub prefix: String,
}

fn resonate(input: &[f64], freq: f64, bandwidth: f64) -> Vec<f64> {
    let fs = SAMPLE_RATE as f64;
    let r = (-PI * bandwidth / fs).exp();
    let (a1, a2) = (2.0 * r * (2.0 * PI * freq / fs).cos(), -r * r);
    let mut out = vec![0.0; input.len()];
    for n in 0..input.len() {
        let y1 = if n >= 1 { out[n - 1] } else { 0.0 };
        let y2 = if n >= 2 { out[n - 2] } else { 0.0 };
        out[n] = (1.0 - r) * input[n] + a1 * y1 + a2 * y2;
    }
    out
}

fn phone<R: Rng>(f1: f64, f2: f64, samples: usize, rng: &mut R) -> Vec<f64> {
    let noise: Vec<f64> = (0..samples).map(|_| rng.random_range(-1.0..1.0)).collect();
    let a = resonate(&noise, f1, 90.0);
    let b = resonate(&noise, f2, 120.0);
    let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + 0.8 * y).collect();
    let rms = (mix.iter().map(|v| v * v).sum::<f64>() / samples.max(1) as f64).sqrt().max(1e-12);
    let level = rng.random_range(0.08..0.2) / rms;
    // raised-cosine ramps at both phone edges
    let ramp = (samples / 8).max(1);
    mix.iter()
        .enumerate()
        .map(|(i, v)| {
            let edge = i.min(samples - 1 - i);
            let w = if edge < ramp {
                0.5 - 0.5 * (PI * edge as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            v * level * w
        })
        .collect()
}

fn formants(language: Language, index: usize, shift: f64) -> (f64, f64) {
    let (_, f1, f2) = EN_PHONES[index];
    match language {
        Language::En => (f1, f2),
        Language::Zh => (f1 * shift.exp(), f2 * shift.exp()),
    }
}

/// One utterance of `duration_s` seconds built from whole words, padded
/// with low noise. Returns the samples and the word transcript.
fn utterance<R: Rng>(language: Language, duration_s: f64, shift: f64, spread: f64, rng: &mut R) -> (Vec<f32>, Vec<String>) {
    let total = (duration_s * SAMPLE_RATE as f64).round() as usize;
    let speaker = Normal::new(0.0, spread).expect("valid spread").sample(rng).exp();
    let words = match language {
        Language::En => &EN_WORDS,
        Language::Zh => &ZH_WORDS,
    };
    let mut samples: Vec<f64> = Vec::with_capacity(total);
    let mut transcript = Vec::new();
    loop {
        let (word, phones) = words[rng.random_range(0..words.len())];
        let lens: Vec<usize> = phones
            .iter()
            .map(|_| (rng.random_range(0.08..0.16) * SAMPLE_RATE as f64) as usize)
            .collect();
        if samples.len() + lens.iter().sum::<usize>() > total {
            break;
        }
        for (&p, &len) in phones.iter().zip(&lens) {
            let (f1, f2) = formants(language, p, shift);
            samples.extend(phone(f1 * speaker, f2 * speaker, len, rng));
        }
        transcript.push(word.to_string());
    }
    while samples.len() < total {
        samples.push(rng.random_range(-0.002..0.002));
    }
    (samples.into_iter().map(|v| v as f32).collect(), transcript)
}

/// Lexicon text for one language in `word<TAB>phonemes` form.
pub fn lexicon_text(language: Language) -> String {
    let mut out = String::new();
    match language {
        Language::En => {
            for (w, p) in EN_WORDS {
                writeln!(out, "{w}\t{} {}", EN_PHONES[p[0]].0, EN_PHONES[p[1]].0).expect("string write");
            }
        }
        Language::Zh => {
            for (w, p) in ZH_WORDS {
                writeln!(out, "{w}\t{} {}", ZH_PHONES[p[0]], ZH_PHONES[p[1]]).expect("string write");
            }
        }
    }
    out
}

fn languages<R: Rng>(cfg: &SynthConfig, durations: &[f64], rng: &mut R) -> Vec<Language> {
    if cfg.balance {
        let mut totals = [0.0f64; 2];
        return durations
            .iter()
            .map(|&d| {
                let l = if totals[1] < totals[0] { Language::Zh } else { Language::En };
                totals[l.index()] += d;
                l
            })
            .collect();
    }
    let n_zh = (cfg.zh_fraction * cfg.n as f64).round() as usize;
    let mut langs: Vec<Language> = (0..cfg.n)
        .map(|i| if i < n_zh { Language::Zh } else { Language::En })
        .collect();
    langs.shuffle(rng);
    langs
}

/// Writes `wav/*.wav`, `manifest.jsonl` and both lexicons into `dir`.
pub fn synthesize(cfg: &SynthConfig, dir: &Path) -> Result<Manifest> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (preset_shift, preset_spread) = cfg.preset.shift_and_spread();
    let shift = cfg.shift.unwrap_or(preset_shift);
    let spread = cfg.spread.unwrap_or(preset_spread);
    let durations: Vec<f64> = (0..cfg.n)
        .map(|_| {
            let j = cfg.duration_jitter;
            let d = if j > 0.0 { cfg.duration_s * rng.random_range(1.0 - j..=1.0 + j) } else { cfg.duration_s };
            (d * 100.0).round() / 100.0
        })
        .collect();
    let langs = languages(cfg, &durations, &mut rng);
    let wav_dir = dir.join("wav");
    std::fs::create_dir_all(&wav_dir).map_err(|source| cslid_core::CoreError::Io {
        path: wav_dir.clone(),
        source,
    })?;
    let mut entries = Vec::with_capacity(cfg.n);
    for (i, (&d, &language)) in durations.iter().zip(&langs).enumerate() {
        let id = format!("{}{language}{i:05}", cfg.prefix);
        let (samples, transcript) = utterance(language, d, shift, spread, &mut rng);
        let rel = format!("wav/{id}.wav");
        write_wav(&dir.join(&rel), &AudioBuffer::new(samples, SAMPLE_RATE))?;
        entries.push(Utterance {
            id,
            audio_path: rel,
            offset_s: 0.0,
            duration_s: d,
            language,
            transcript,
            corpus_tag: format!("synthetic-{:?}", cfg.preset).to_lowercase(),
            speed: None,
        });
    }
    let manifest = Manifest::new(
        entries,
        format!("synthetic {:?} corpus, seed {}", cfg.preset, cfg.seed).to_lowercase(),
    )?;
    save_manifest(&manifest, &dir.join("manifest.jsonl"))?;
    for (language, name) in [(Language::En, "lexicon.en.txt"), (Language::Zh, "lexicon.zh.txt")] {
        let path = dir.join(name);
        std::fs::write(&path, lexicon_text(language)).map_err(|source| cslid_core::CoreError::Io { path, source })?;
    }
    Ok(manifest)
}
