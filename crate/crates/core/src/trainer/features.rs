use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::corpus::Utterance;
use crate::dsp::{read_fbank, read_wav, resample, speed_perturb, AudioBuffer, FbankConfig, FbankExtractor, FeatureMatrix};
use crate::error::{CoreError, Result};

/// Feature cache key of an utterance: its audio span and speed factor.
/// Up-sampled copies share the key of their original.
pub fn feature_key(u: &Utterance) -> String {
    format!(
        "{}|{:.6}|{:.6}|{}",
        u.audio_path,
        u.offset_s,
        u.duration_s * u.speed.unwrap_or(1.0),
        u.speed.unwrap_or(1.0)
    )
}

/// File name under which precomputed features of an utterance are stored.
pub fn feature_file_name(u: &Utterance) -> String {
    format!("{:08x}.fbank", crc32fast::hash(feature_key(u).as_bytes()))
}

/// Computes and caches filterbank features. Audio paths resolve against
/// `base_dir`; precomputed features in `feature_dir` are used when present.
pub struct FeatureStore {
    extractor: FbankExtractor,
    base_dir: PathBuf,
    feature_dir: Option<PathBuf>,
    audio: HashMap<String, AudioBuffer>,
    features: HashMap<String, FeatureMatrix>,
}

impl FeatureStore {
    pub fn new(config: FbankConfig, base_dir: impl Into<PathBuf>) -> Result<Self> {
        Ok(Self {
            extractor: FbankExtractor::new(config)?,
            base_dir: base_dir.into(),
            feature_dir: None,
            audio: HashMap::new(),
            features: HashMap::new(),
        })
    }

    pub fn with_feature_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.feature_dir = Some(dir.into());
        self
    }

    pub fn config(&self) -> &FbankConfig {
        self.extractor.config()
    }

    pub fn resolve(&self, audio_path: &str) -> PathBuf {
        let p = Path::new(audio_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn audio(&mut self, audio_path: &str) -> Result<&AudioBuffer> {
        if !self.audio.contains_key(audio_path) {
            let raw = read_wav(&self.resolve(audio_path))?;
            let audio = resample(&raw, self.config().sample_rate_hz)?;
            self.audio.insert(audio_path.to_string(), audio);
        }
        Ok(&self.audio[audio_path])
    }

    /// Features computed from audio, ignoring any precomputed file.
    pub fn compute(&mut self, u: &Utterance) -> Result<FeatureMatrix> {
        let original_s = u.duration_s * u.speed.unwrap_or(1.0);
        let span = self.audio(&u.audio_path)?.slice_seconds(u.offset_s, original_s);
        let span = match u.speed {
            Some(f) => speed_perturb(&span, f)?,
            None => span,
        };
        let feat = self.extractor.extract(&span)?;
        if feat.frames == 0 {
            return Err(CoreError::EmptyInput(format!("utterance {} is shorter than one frame", u.id)));
        }
        Ok(feat)
    }

    pub fn get(&mut self, u: &Utterance) -> Result<&FeatureMatrix> {
        let key = feature_key(u);
        if !self.features.contains_key(&key) {
            let precomputed = self.feature_dir.as_ref().map(|d| d.join(feature_file_name(u))).filter(|p| p.exists());
            let feat = match precomputed {
                Some(path) => read_fbank(&path)?,
                None => self.compute(u)?,
            };
            if feat.bins != self.config().n_mels {
                return Err(CoreError::ConfigMismatch {
                    expected: format!("{} mel bins", self.config().n_mels),
                    found: format!("{} in features of {}", feat.bins, u.id),
                });
            }
            self.features.insert(key.clone(), feat);
        }
        Ok(&self.features[&key])
    }
}
