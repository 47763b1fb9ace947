//! Audio decoding, resampling, speed perturbation, log-mel filterbanks and
//! SpecAugment.

mod fbank;
mod resample;
mod specaug;
mod wav;

pub use fbank::{extract_fbank, read_fbank, write_fbank, FbankConfig, FbankExtractor, FeatureMatrix, LOG_FLOOR};
pub use resample::{resample, speed_perturb};
pub use specaug::{spec_augment, SpecAugConfig};
pub use wav::{decode_wav, encode_wav_pcm16, read_wav, write_wav};

/// Mono audio with samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Self {
        Self { samples, sample_rate_hz }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Samples in `[offset_s, offset_s + duration_s)`, clamped to the buffer.
    pub fn slice_seconds(&self, offset_s: f64, duration_s: f64) -> AudioBuffer {
        let rate = self.sample_rate_hz as f64;
        let start = ((offset_s * rate).round() as usize).min(self.samples.len());
        let end = (((offset_s + duration_s) * rate).round() as usize).clamp(start, self.samples.len());
        AudioBuffer::new(self.samples[start..end].to_vec(), self.sample_rate_hz)
    }
}
