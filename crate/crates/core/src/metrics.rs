//! Per-class recall, balanced accuracy and equal error rate. Mandarin is the
//! target ("accept") class for EER; its score is the model's zh probability.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, CoreError, Result};
use crate::Language;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoredTrial {
    pub id: String,
    #[serde(rename = "true")]
    pub truth: Language,
    pub predicted: Language,
    pub zh_score: f64,
}

/// Counts indexed `[truth][predicted]` with English = 0, Mandarin = 1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub en_as_en: usize,
    pub en_as_zh: usize,
    pub zh_as_en: usize,
    pub zh_as_zh: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.en_as_en + self.en_as_zh + self.zh_as_en + self.zh_as_zh
    }

    pub fn recall(&self, language: Language) -> Option<f64> {
        let (hit, miss) = match language {
            Language::En => (self.en_as_en, self.en_as_zh),
            Language::Zh => (self.zh_as_zh, self.zh_as_en),
        };
        (hit + miss > 0).then(|| hit as f64 / (hit + miss) as f64)
    }
}

pub fn confusion(trials: &[ScoredTrial]) -> Confusion {
    let mut c = Confusion::default();
    for t in trials {
        match (t.truth, t.predicted) {
            (Language::En, Language::En) => c.en_as_en += 1,
            (Language::En, Language::Zh) => c.en_as_zh += 1,
            (Language::Zh, Language::En) => c.zh_as_en += 1,
            (Language::Zh, Language::Zh) => c.zh_as_zh += 1,
        }
    }
    c
}

fn recalls(c: &Confusion) -> Result<(f64, f64)> {
    match (c.recall(Language::En), c.recall(Language::Zh)) {
        (Some(en), Some(zh)) => Ok((en, zh)),
        (None, _) => Err(CoreError::UndefinedClass("no English trials".into())),
        (_, None) => Err(CoreError::UndefinedClass("no Mandarin trials".into())),
    }
}

pub fn bac_from_recalls(recall_en: f64, recall_zh: f64) -> f64 {
    (recall_en + recall_zh) / 2.0
}

pub fn balanced_accuracy(trials: &[ScoredTrial]) -> Result<f64> {
    let (en, zh) = recalls(&confusion(trials))?;
    Ok(bac_from_recalls(en, zh))
}

/// EER and the threshold where it occurs.
///
/// Candidate thresholds are the distinct scores plus one above the maximum.
/// FAR(t) = share of English trials with score >= t, FRR(t) = share of
/// Mandarin trials with score < t. At the first threshold where FRR reaches
/// FAR the curve is interpolated linearly from the previous point.
pub fn equal_error_rate(trials: &[ScoredTrial]) -> Result<(f64, f64)> {
    if let Some(t) = trials.iter().find(|t| !t.zh_score.is_finite()) {
        return Err(CoreError::InvalidArgument(format!("trial {} has non-finite score", t.id)));
    }
    let n_en = trials.iter().filter(|t| t.truth == Language::En).count();
    let n_zh = trials.len() - n_en;
    if n_en == 0 || n_zh == 0 {
        return Err(CoreError::UndefinedClass("EER needs trials of both languages".into()));
    }
    let mut scored: Vec<(f64, Language)> = trials.iter().map(|t| (t.zh_score, t.truth)).collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (n_en, n_zh) = (n_en as f64, n_zh as f64);
    // Sweep upwards: before threshold scored[i].0, everything below i is rejected.
    let mut en_below = 0usize;
    let mut zh_below = 0usize;
    let mut prev: Option<(f64, f64, f64)> = None;
    let mut i = 0;
    let sentinel = scored[scored.len() - 1].0 + 1.0;
    loop {
        let threshold = scored.get(i).map_or(sentinel, |s| s.0);
        let far = (n_en - en_below as f64) / n_en;
        let frr = zh_below as f64 / n_zh;
        if frr >= far {
            return Ok(match prev {
                Some((t0, far0, frr0)) if frr > far => {
                    let d0 = frr0 - far0;
                    let d1 = frr - far;
                    let lambda = -d0 / (d1 - d0);
                    (far0 + lambda * (far - far0), t0 + lambda * (threshold - t0))
                }
                _ => (far, threshold),
            });
        }
        prev = Some((threshold, far, frr));
        while i < scored.len() && scored[i].0 == threshold {
            match scored[i].1 {
                Language::En => en_below += 1,
                Language::Zh => zh_below += 1,
            }
            i += 1;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall_en: f64,
    pub recall_zh: f64,
    pub balanced_accuracy: f64,
    pub eer: f64,
    pub eer_threshold: f64,
    pub confusion: Confusion,
    pub n_trials: usize,
}

impl EvalReport {
    pub fn from_trials(trials: &[ScoredTrial]) -> Result<Self> {
        let confusion = confusion(trials);
        let (recall_en, recall_zh) = recalls(&confusion)?;
        let (eer, eer_threshold) = equal_error_rate(trials)?;
        Ok(Self {
            recall_en,
            recall_zh,
            balanced_accuracy: bac_from_recalls(recall_en, recall_zh),
            eer,
            eer_threshold,
            confusion,
            n_trials: trials.len(),
        })
    }

    /// Three-decimal summary.
    pub fn render(&self) -> String {
        format!(
            "English {:.3}  Mandarin {:.3}  Balanced {:.3}  EER {:.3}  (n = {})",
            self.recall_en, self.recall_zh, self.balanced_accuracy, self.eer, self.n_trials
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("serializable");
        text.push('\n');
        std::fs::write(path, text).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| CoreError::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }
}

pub fn save_trials(trials: &[ScoredTrial], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for t in trials {
        serde_json::to_writer(&mut out, t).expect("serializable");
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(io_err(path))
}

pub fn load_trials(path: &Path) -> Result<Vec<ScoredTrial>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CoreError::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trial(i: usize, truth: Language, zh_score: f64) -> ScoredTrial {
        ScoredTrial {
            id: format!("t{i}"),
            truth,
            predicted: if zh_score > 0.5 { Language::Zh } else { Language::En },
            zh_score,
        }
    }

    fn trials(zh: &[f64], en: &[f64]) -> Vec<ScoredTrial> {
        zh.iter()
            .map(|&s| (Language::Zh, s))
            .chain(en.iter().map(|&s| (Language::En, s)))
            .enumerate()
            .map(|(i, (l, s))| trial(i, l, s))
            .collect()
    }

    #[test]
    fn separable_scores_give_zero_eer() {
        let (eer, t) = equal_error_rate(&trials(&[0.7, 0.9, 0.8], &[0.1, 0.3, 0.2])).unwrap();
        assert_eq!(eer, 0.0);
        assert_eq!(t, 0.7);
    }

    #[test]
    fn identical_distributions_give_half() {
        for scores in [&[0.2, 0.8][..], &[0.1, 0.2, 0.3], &[0.5, 0.5, 0.1, 0.9, 0.4]] {
            let (eer, _) = equal_error_rate(&trials(scores, scores)).unwrap();
            assert!((eer - 0.5).abs() < 1e-12, "{scores:?}: {eer}");
        }
    }

    #[test]
    fn worked_example_matches_hand_sweep() {
        // (t, FAR, FRR): (0.2, 1, 0) (0.3, 2/3, 0) (0.4, 1/3, 0) (0.6, 1/3, 1/3)
        let (eer, t) = equal_error_rate(&trials(&[0.9, 0.8, 0.4], &[0.6, 0.3, 0.2])).unwrap();
        assert!((eer - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(t, 0.6);
    }

    #[test]
    fn single_class_is_undefined() {
        let only_zh = trials(&[0.3, 0.6], &[]);
        assert!(matches!(equal_error_rate(&only_zh), Err(CoreError::UndefinedClass(_))));
        assert!(matches!(balanced_accuracy(&only_zh), Err(CoreError::UndefinedClass(_))));
    }

    #[test]
    fn bac_table_rows() {
        assert_eq!(format!("{:.3}", bac_from_recalls(1.0, 0.0)), "0.500");
        assert_eq!(format!("{:.3}", bac_from_recalls(0.851, 0.720)), "0.785");
    }

    #[test]
    fn always_english_model() {
        let mut ts = trials(&[0.1, 0.2], &[0.3, 0.1, 0.2]);
        ts.iter_mut().for_each(|t| t.predicted = Language::En);
        let r = EvalReport::from_trials(&ts).unwrap();
        assert_eq!((r.recall_en, r.recall_zh, r.balanced_accuracy), (1.0, 0.0, 0.5));
        assert_eq!(r.confusion.total(), 5);
        assert_eq!(r.confusion.en_as_zh, 0);
    }

    #[test]
    fn report_and_trials_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ts = trials(&[0.91, 0.3333333333333333], &[0.1, 0.72]);
        let r = EvalReport::from_trials(&ts).unwrap();
        r.save(&dir.path().join("r.json")).unwrap();
        assert_eq!(EvalReport::load(&dir.path().join("r.json")).unwrap(), r);
        save_trials(&ts, &dir.path().join("t.jsonl")).unwrap();
        assert_eq!(load_trials(&dir.path().join("t.jsonl")).unwrap(), ts);
        assert!(r.render().contains("Balanced 0.500"));
    }
}
