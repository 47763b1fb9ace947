use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{upsample_class, Manifest, Utterance};
use crate::error::{CoreError, Result};
use crate::Language;

/// Mandarin-to-English duration ratio kept when subsampling the
/// out-of-domain corpus.
pub const SEAME_ZH_EN: f64 = 2.0;

/// Per-language durations of a corpus, in hours.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub zh_hours: f64,
    pub en_hours: f64,
}

impl CorpusStats {
    pub fn of(manifest: &Manifest) -> Self {
        Self {
            zh_hours: manifest.duration_s(Language::Zh) / 3600.0,
            en_hours: manifest.duration_s(Language::En) / 3600.0,
        }
    }

    pub fn total(&self) -> f64 {
        self.zh_hours + self.en_hours
    }
}

/// Out-of-domain pool of the Table 1 preset: 100 h at zh/en = 2.
pub const TABLE1_SEAME_POOL: CorpusStats = CorpusStats {
    zh_hours: 200.0 / 3.0,
    en_hours: 100.0 / 3.0,
};

/// One configured stage: out-of-domain to in-domain duration ratio,
/// Mandarin up-sampling factor for the in-domain data, and epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub ratio: f64,
    pub upsample_zh: u32,
    #[serde(default = "one")]
    pub epochs: u32,
}

fn one() -> u32 {
    1
}

/// Target hours per corpus and language.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub merlion_zh: f64,
    pub merlion_en: f64,
    pub seame_zh: f64,
    pub seame_en: f64,
}

impl MixSpec {
    pub fn merlion_total(&self) -> f64 {
        self.merlion_zh + self.merlion_en
    }

    pub fn seame_total(&self) -> f64 {
        self.seame_zh + self.seame_en
    }

    pub fn zh(&self) -> f64 {
        self.merlion_zh + self.seame_zh
    }

    pub fn en(&self) -> f64 {
        self.merlion_en + self.seame_en
    }

    pub fn total(&self) -> f64 {
        self.zh() + self.en()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleStage {
    /// 1-based.
    pub stage_index: usize,
    pub merlion_upsample_zh: u32,
    /// Share of the out-of-domain pool this stage uses (above 1 means the
    /// pool is too small and realization will cap).
    pub seame_fraction: f64,
    pub target_ood_id_ratio: f64,
    pub epochs: u32,
    pub targets: MixSpec,
}

fn broadcast<T: Copy>(name: &str, values: &[T], n: usize) -> Result<Vec<T>> {
    match values.len() {
        1 => Ok(vec![values[0]; n]),
        len if len == n => Ok(values.to_vec()),
        len => Err(CoreError::Schedule(format!("{len} {name} for {n} stages"))),
    }
}

/// Expands ratios and up-sampling factors into stage targets. Stage `k`
/// draws `ratio_k` times the up-sampled in-domain duration from the
/// out-of-domain corpus, split 2:1 Mandarin to English.
pub fn build_gft_schedule(
    merlion: CorpusStats,
    seame: CorpusStats,
    ratios: &[f64],
    upsample_factors: &[u32],
    epochs: &[u32],
) -> Result<Vec<ScheduleStage>> {
    let n = ratios.len();
    if n == 0 {
        return Err(CoreError::Schedule("no stages".into()));
    }
    if let Some(r) = ratios.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
        return Err(CoreError::Schedule(format!("ratio {r} is not a non-negative number")));
    }
    if let Some(w) = ratios.windows(2).find(|w| w[1] > w[0]) {
        return Err(CoreError::Schedule(format!("ratios must not increase, found {} then {}", w[0], w[1])));
    }
    if ratios[n - 1] != 0.0 {
        return Err(CoreError::Schedule(format!("final ratio must be 0, got {}", ratios[n - 1])));
    }
    let factors = broadcast("up-sampling factors", upsample_factors, n)?;
    let epochs = broadcast("epoch counts", epochs, n)?;
    if factors.contains(&0) || epochs.contains(&0) {
        return Err(CoreError::Schedule("up-sampling factors and epochs must be at least 1".into()));
    }
    let pool = seame.total();
    Ok((0..n)
        .map(|k| {
            let merlion_zh = merlion.zh_hours * factors[k] as f64;
            let merlion_total = merlion_zh + merlion.en_hours;
            let seame_total = ratios[k] * merlion_total;
            let seame_zh = seame_total * SEAME_ZH_EN / (SEAME_ZH_EN + 1.0);
            ScheduleStage {
                stage_index: k + 1,
                merlion_upsample_zh: factors[k],
                seame_fraction: if pool > 0.0 { seame_total / pool } else { 0.0 },
                target_ood_id_ratio: ratios[k],
                epochs: epochs[k],
                targets: MixSpec {
                    merlion_zh,
                    merlion_en: merlion.en_hours,
                    seame_zh,
                    seame_en: seame_total - seame_zh,
                },
            }
        })
        .collect())
}

/// The four-stage schedule of the gradual fine-tuning table.
///
/// In-domain base: 5.36 h zh / 21.64 h en. The ratios are the out-of-domain
/// to in-domain proportions that reproduce every printed duration of the
/// table to its 0.1 h precision; the table itself prints them rounded to
/// 1.0, 0.5, 0.2 and 0.0.
pub fn table1_preset() -> (CorpusStats, Vec<StageSpec>) {
    let merlion = CorpusStats {
        zh_hours: 5.36,
        en_hours: 21.64,
    };
    let stages = [(0.993, 1), (0.497, 2), (0.207, 2), (0.0, 3)]
        .into_iter()
        .map(|(ratio, upsample_zh)| StageSpec {
            ratio,
            upsample_zh,
            epochs: 1,
        })
        .collect();
    (merlion, stages)
}

impl StageSpec {
    pub fn split(specs: &[StageSpec]) -> (Vec<f64>, Vec<u32>, Vec<u32>) {
        (
            specs.iter().map(|s| s.ratio).collect(),
            specs.iter().map(|s| s.upsample_zh).collect(),
            specs.iter().map(|s| s.epochs).collect(),
        )
    }
}

fn ratio_cell(num: f64, den: f64, places: usize) -> String {
    if den > 0.0 {
        format!("{:.*}", places, num / den)
    } else {
        "-".into()
    }
}

/// Renders stages as the gradual fine-tuning table, at the table's
/// precision: hours and per-corpus ratios to 1 decimal, overall zh/en to 2.
pub fn format_schedule_table(stages: &[ScheduleStage]) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{:<5} | {:>9} {:>5} {:>5} {:>5} | {:>5} {:>5} {:>5} {:>5} | {:>5} {:>5} {:>5} | {:>4} {:>5}",
        "stage", "M zh", "M en", "M tot", "zh/en", "S zh", "S en", "S tot", "zh/en", "zh", "en", "total", "S/M", "zh/en"
    )
    .expect("string write");
    for s in stages {
        let t = &s.targets;
        writeln!(
            out,
            "{:<5} | {:>9} {:>5.1} {:>5.1} {:>5} | {:>5.1} {:>5.1} {:>5.1} {:>5} | {:>5.1} {:>5.1} {:>5.1} | {:>4} {:>5}",
            s.stage_index,
            format!("{:.1} ({})", t.merlion_zh, s.merlion_upsample_zh),
            t.merlion_en,
            t.merlion_total(),
            ratio_cell(t.merlion_zh, t.merlion_en, 1),
            t.seame_zh,
            t.seame_en,
            t.seame_total(),
            ratio_cell(t.seame_zh, t.seame_en, 1),
            t.zh(),
            t.en(),
            t.total(),
            format!("{:.1}", s.target_ood_id_ratio),
            ratio_cell(t.zh(), t.en(), 2),
        )
        .expect("string write");
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct RealizedStage {
    pub manifest: Manifest,
    /// Set when the out-of-domain pool could not cover a target.
    pub capped: bool,
    pub realized: MixSpec,
}

fn sample_to_target<'a, R: Rng + ?Sized>(pool: &[&'a Utterance], target_s: f64, rng: &mut R) -> (Vec<&'a Utterance>, f64) {
    let mut order: Vec<&Utterance> = pool.to_vec();
    order.shuffle(rng);
    let mut taken = Vec::new();
    let mut cum = 0.0;
    for u in order {
        if cum + u.duration_s / 2.0 < target_s {
            cum += u.duration_s;
            taken.push(u);
        }
    }
    (taken, cum)
}

/// Builds a stage's training manifest: in-domain data with Mandarin
/// up-sampled, plus an out-of-domain subset drawn per language to the
/// stage targets, shuffled. A ratio-0 stage is the up-sampled in-domain
/// manifest as is.
pub fn realize_stage<R: Rng + ?Sized>(
    stage: &ScheduleStage,
    merlion: &Manifest,
    seame: &Manifest,
    rng: &mut R,
) -> Result<RealizedStage> {
    let upsampled = upsample_class(merlion, Language::Zh, stage.merlion_upsample_zh)?;
    let mut realized = MixSpec {
        merlion_zh: upsampled.duration_s(Language::Zh) / 3600.0,
        merlion_en: upsampled.duration_s(Language::En) / 3600.0,
        ..MixSpec::default()
    };
    if stage.target_ood_id_ratio == 0.0 {
        return Ok(RealizedStage {
            manifest: upsampled,
            capped: false,
            realized,
        });
    }
    let mut capped = false;
    let mut entries = upsampled.entries.clone();
    for (language, target_h) in [(Language::Zh, stage.targets.seame_zh), (Language::En, stage.targets.seame_en)] {
        let pool: Vec<&Utterance> = seame.of(language).collect();
        let pool_s: f64 = pool.iter().map(|u| u.duration_s).sum();
        if target_h * 3600.0 > pool_s {
            capped = true;
        }
        let (taken, got_s) = sample_to_target(&pool, target_h * 3600.0, rng);
        entries.extend(taken.into_iter().cloned());
        match language {
            Language::Zh => realized.seame_zh = got_s / 3600.0,
            Language::En => realized.seame_en = got_s / 3600.0,
        }
    }
    entries.shuffle(rng);
    let manifest = Manifest::new(
        entries,
        format!("gradual stage {} (ratio {})", stage.stage_index, stage.target_ood_id_ratio),
    )?;
    Ok(RealizedStage {
        manifest,
        capped,
        realized,
    })
}
