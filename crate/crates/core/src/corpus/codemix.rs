use rand::seq::SliceRandom;
use rand::Rng;

use super::{Manifest, Utterance};
use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CodemixConfig {
    pub seg_min_s: f64,
    pub seg_max_s: f64,
    /// Interleave so the two languages' totals differ by at most one
    /// segment; the longer language is truncated.
    pub balance: bool,
}

impl Default for CodemixConfig {
    fn default() -> Self {
        Self {
            seg_min_s: 1.0,
            seg_max_s: 5.0,
            balance: true,
        }
    }
}

const EPS: f64 = 1e-9;

fn segment<R: Rng + ?Sized>(u: &Utterance, cfg: &CodemixConfig, rng: &mut R, out: &mut Vec<Utterance>) {
    let mut pos = 0.0;
    let mut k = 0;
    loop {
        let len = if cfg.seg_max_s > cfg.seg_min_s {
            rng.random_range(cfg.seg_min_s..=cfg.seg_max_s)
        } else {
            cfg.seg_min_s
        };
        let remaining = u.duration_s - pos;
        let take = if len <= remaining + EPS {
            len.min(remaining)
        } else if remaining + EPS >= cfg.seg_min_s {
            remaining
        } else {
            break;
        };
        out.push(Utterance {
            id: format!("{}#seg{k}", u.id),
            audio_path: u.audio_path.clone(),
            offset_s: u.offset_s + pos,
            duration_s: take,
            language: u.language,
            transcript: Vec::new(),
            corpus_tag: format!("{}-silver", u.corpus_tag),
            speed: u.speed,
        });
        pos += take;
        k += 1;
        if u.duration_s - pos <= EPS {
            break;
        }
    }
}

/// Cuts monolingual utterances into random-length sub-utterance segments and
/// interleaves the two languages. Segments keep their language label and
/// lose their transcript.
pub fn synthesize_codemix<R: Rng + ?Sized>(
    en: &Manifest,
    zh: &Manifest,
    cfg: &CodemixConfig,
    rng: &mut R,
) -> Result<Manifest> {
    if en.is_empty() || zh.is_empty() {
        return Err(CoreError::InvalidArgument("code-mix synthesis needs both languages".into()));
    }
    if !(cfg.seg_min_s > 0.0 && cfg.seg_max_s >= cfg.seg_min_s) {
        return Err(CoreError::InvalidArgument(format!(
            "segment range [{}, {}] is not a positive interval",
            cfg.seg_min_s, cfg.seg_max_s
        )));
    }
    let mut pools = [Vec::new(), Vec::new()];
    for (pool, source) in pools.iter_mut().zip([en, zh]) {
        for u in &source.entries {
            segment(u, cfg, rng, pool);
        }
        pool.shuffle(rng);
    }
    let [en_segs, zh_segs] = pools;
    let mut entries = Vec::with_capacity(en_segs.len() + zh_segs.len());
    let (mut ie, mut iz) = (0, 0);
    let (mut de, mut dz) = (0.0, 0.0);
    loop {
        let pick_en = if cfg.balance { de <= dz + EPS } else { ie <= iz };
        let (pool, idx, dur) = if pick_en {
            (&en_segs, &mut ie, &mut de)
        } else {
            (&zh_segs, &mut iz, &mut dz)
        };
        match pool.get(*idx) {
            Some(seg) => {
                *idx += 1;
                *dur += seg.duration_s;
                entries.push(seg.clone());
            }
            None if cfg.balance => break,
            None => {
                entries.extend(en_segs[ie..].iter().cloned());
                entries.extend(zh_segs[iz..].iter().cloned());
                break;
            }
        }
    }
    let provenance = format!(
        "silver code-mix of {} en + {} zh utterances, segments {}-{} s{}",
        en.len(),
        zh.len(),
        cfg.seg_min_s,
        cfg.seg_max_s,
        if cfg.balance { ", balanced" } else { "" }
    );
    Manifest::new(entries, provenance)
}

#[cfg(test)]
mod tests {
    use super::super::tests::utt;
    use super::*;
    use crate::Language;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mono(prefix: &str, language: Language, n: usize, dur: f64) -> Manifest {
        Manifest::new((0..n).map(|i| utt(&format!("{prefix}{i}"), language, dur)).collect(), prefix).unwrap()
    }

    #[test]
    fn exact_division() {
        let cfg = CodemixConfig {
            seg_min_s: 2.0,
            seg_max_s: 2.0,
            balance: false,
        };
        let out = synthesize_codemix(
            &mono("e", Language::En, 1, 10.0),
            &mono("z", Language::Zh, 1, 10.0),
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(out.count(Language::En), 5);
        assert!(out.entries.iter().all(|u| (u.duration_s - 2.0).abs() < 1e-12));
    }

    #[test]
    fn ten_hours_each_balance_within_five_seconds() {
        let en = mono("e", Language::En, 3600, 10.0);
        let zh = mono("z", Language::Zh, 2400, 15.0);
        let out = synthesize_codemix(&en, &zh, &CodemixConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let gap = (out.duration_s(Language::En) - out.duration_s(Language::Zh)).abs();
        assert!(gap <= 5.0, "{gap}");
        assert!(out.entries.iter().all(|u| u.transcript.is_empty()));
    }

    #[test]
    fn deterministic_under_seed() {
        let en = mono("e", Language::En, 20, 7.3);
        let zh = mono("z", Language::Zh, 10, 4.1);
        let run = |s| synthesize_codemix(&en, &zh, &CodemixConfig::default(), &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
        assert_eq!(run(4), run(4));
        assert_ne!(run(4), run(5));
    }

    #[test]
    fn empty_side_is_an_error() {
        let en = mono("e", Language::En, 2, 3.0);
        let rng = &mut ChaCha8Rng::seed_from_u64(0);
        assert!(synthesize_codemix(&en, &Manifest::default(), &CodemixConfig::default(), rng).is_err());
    }
}
