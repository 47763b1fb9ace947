use rand::Rng;

use super::FeatureMatrix;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpecAugConfig {
    /// Time-warp window W; warping needs at least `2W + 2` frames.
    pub warp_window: usize,
    pub freq_masks: usize,
    pub freq_mask_width: usize,
    pub time_masks: usize,
    pub time_mask_width: usize,
    /// Time masks are also capped at this fraction of the utterance.
    pub time_mask_max_ratio: f64,
}

impl Default for SpecAugConfig {
    fn default() -> Self {
        Self {
            warp_window: 80,
            freq_masks: 2,
            freq_mask_width: 27,
            time_masks: 2,
            time_mask_width: 100,
            time_mask_max_ratio: 0.2,
        }
    }
}

impl SpecAugConfig {
    pub fn identity() -> Self {
        Self {
            warp_window: 0,
            freq_masks: 0,
            freq_mask_width: 0,
            time_masks: 0,
            time_mask_width: 0,
            time_mask_max_ratio: 0.0,
        }
    }
}

/// Moves the frame at a random centre `c` to `c + w` and stretches both
/// sides linearly to fit.
fn time_warp<R: Rng + ?Sized>(feat: &FeatureMatrix, window: usize, rng: &mut R) -> FeatureMatrix {
    let (t, f) = (feat.frames, feat.bins);
    if window == 0 || t < 2 * window + 2 {
        return feat.clone();
    }
    let center = rng.random_range(window..t - window);
    let dest = (center as i64 + rng.random_range(-(window as i64) + 1..window as i64)) as usize;
    if dest == center {
        return feat.clone();
    }
    let mut out = feat.clone();
    for j in 0..t {
        let src = if j < dest {
            j as f64 * center as f64 / dest as f64
        } else {
            center as f64 + (j - dest) as f64 * (t - 1 - center) as f64 / (t - 1 - dest) as f64
        };
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(t - 1);
        let frac = (src - lo as f64) as f32;
        for b in 0..f {
            out.data[j * f + b] = feat.data[lo * f + b] * (1.0 - frac) + feat.data[hi * f + b] * frac;
        }
    }
    out
}

/// Time warp, then frequency and time masks filled with the utterance mean.
/// Same seed, same output; shape never changes.
pub fn spec_augment<R: Rng + ?Sized>(feat: &FeatureMatrix, rng: &mut R, config: &SpecAugConfig) -> FeatureMatrix {
    let mut out = time_warp(feat, config.warp_window, rng);
    let (t, f) = (out.frames, out.bins);
    if t == 0 || f == 0 {
        return out;
    }
    let mean = out.mean();
    for _ in 0..config.freq_masks {
        let width = rng.random_range(0..=config.freq_mask_width.min(f));
        let start = rng.random_range(0..=f - width);
        for frame in out.data.chunks_exact_mut(f) {
            frame[start..start + width].fill(mean);
        }
    }
    let time_cap = config
        .time_mask_width
        .min((t as f64 * config.time_mask_max_ratio).floor() as usize);
    for _ in 0..config.time_masks {
        let width = rng.random_range(0..=time_cap);
        let start = rng.random_range(0..=t - width);
        out.data[start * f..(start + width) * f].fill(mean);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(t: usize, f: usize) -> FeatureMatrix {
        FeatureMatrix::new(t, f, (0..t * f).map(|i| (i % 97) as f32 * 0.1).collect()).unwrap()
    }

    #[test]
    fn identity_config_is_identity() {
        let feat = ramp(200, 80);
        let out = spec_augment(&feat, &mut ChaCha8Rng::seed_from_u64(1), &SpecAugConfig::identity());
        assert_eq!(out, feat);
    }

    #[test]
    fn same_seed_same_output_and_shape() {
        let feat = ramp(300, 80);
        let cfg = SpecAugConfig::default();
        let a = spec_augment(&feat, &mut ChaCha8Rng::seed_from_u64(5), &cfg);
        let b = spec_augment(&feat, &mut ChaCha8Rng::seed_from_u64(5), &cfg);
        assert_eq!(a, b);
        assert_eq!((a.frames, a.bins), (300, 80));
        assert_ne!(a, feat);
    }

    #[test]
    fn short_input_skips_warp() {
        let feat = ramp(161, 4);
        let cfg = SpecAugConfig {
            warp_window: 80,
            ..SpecAugConfig::identity()
        };
        assert_eq!(spec_augment(&feat, &mut ChaCha8Rng::seed_from_u64(2), &cfg), feat);
    }

    #[test]
    fn warp_keeps_endpoints() {
        let feat = ramp(200, 3);
        let warped = time_warp(&feat, 80, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(warped.row(0), feat.row(0));
        assert_eq!(warped.row(199), feat.row(199));
    }

    #[test]
    fn masks_fill_with_mean() {
        let feat = ramp(50, 80);
        let cfg = SpecAugConfig {
            freq_masks: 1,
            freq_mask_width: 27,
            ..SpecAugConfig::identity()
        };
        let mean = feat.mean();
        for seed in 0..20 {
            let out = spec_augment(&feat, &mut ChaCha8Rng::seed_from_u64(seed), &cfg);
            let changed: Vec<usize> = (0..80).filter(|&b| out.row(0)[b] != feat.row(0)[b]).collect();
            assert!(changed.len() <= 27);
            assert!(changed.iter().all(|&b| out.row(7)[b] == mean));
        }
    }
}
