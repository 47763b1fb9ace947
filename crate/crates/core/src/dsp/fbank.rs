use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::AudioBuffer;
use crate::error::{io_err, CoreError, Result};

/// Natural log of the energy floor; value of every bin on silence.
pub const LOG_FLOOR: f32 = -23.025_85;
const ENERGY_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct FbankConfig {
    pub sample_rate_hz: u32,
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
    pub n_mels: usize,
    pub low_hz: f64,
    pub high_hz: f64,
    pub preemphasis: f64,
}

impl Default for FbankConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 16000,
            frame_length_ms: 25.0,
            frame_shift_ms: 10.0,
            n_mels: 80,
            low_hz: 20.0,
            high_hz: 8000.0,
            preemphasis: 0.97,
        }
    }
}

impl FbankConfig {
    pub fn frame_length(&self) -> usize {
        (self.sample_rate_hz as f64 * self.frame_length_ms / 1000.0).round() as usize
    }

    pub fn frame_shift(&self) -> usize {
        (self.sample_rate_hz as f64 * self.frame_shift_ms / 1000.0).round() as usize
    }

    /// Frames produced from `n` samples (0 when shorter than one frame).
    pub fn num_frames(&self, n: usize) -> usize {
        let len = self.frame_length();
        if n < len {
            0
        } else {
            1 + (n - len) / self.frame_shift()
        }
    }
}

/// A `frames x bins` row-major matrix of log-mel energies.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<f32>,
    pub frame_shift_ms: f64,
    pub frame_length_ms: f64,
}

impl FeatureMatrix {
    pub fn new(frames: usize, bins: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * bins {
            return Err(CoreError::InvalidArgument(format!(
                "{} values for a {frames}x{bins} feature matrix",
                data.len()
            )));
        }
        Ok(Self {
            frames,
            bins,
            data,
            frame_shift_ms: 10.0,
            frame_length_ms: 25.0,
        })
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn mean(&self) -> f32 {
        if self.data.is_empty() {
            return 0.0;
        }
        (self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64) as f32
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Reusable extractor holding the FFT plan, window and mel filters.
pub struct FbankExtractor {
    config: FbankConfig,
    fft: Arc<dyn Fft<f64>>,
    n_fft: usize,
    window: Vec<f64>,
    /// Per filter: first FFT bin and its weights.
    filters: Vec<(usize, Vec<f64>)>,
}

impl FbankExtractor {
    pub fn new(config: FbankConfig) -> Result<Self> {
        let len = config.frame_length();
        if len < 2 || config.frame_shift() == 0 || config.n_mels == 0 {
            return Err(CoreError::InvalidArgument(format!("degenerate fbank config {config:?}")));
        }
        let nyquist = config.sample_rate_hz as f64 / 2.0;
        if !(0.0 <= config.low_hz && config.low_hz < config.high_hz && config.high_hz <= nyquist) {
            return Err(CoreError::InvalidArgument(format!(
                "mel range {}..{} Hz outside 0..{nyquist} Hz",
                config.low_hz, config.high_hz
            )));
        }
        let n_fft = len.next_power_of_two();
        let window = (0..len)
            .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (len - 1) as f64).cos())
            .collect();
        let (lo, hi) = (hz_to_mel(config.low_hz), hz_to_mel(config.high_hz));
        let step = (hi - lo) / (config.n_mels + 1) as f64;
        let bin_hz = config.sample_rate_hz as f64 / n_fft as f64;
        let filters = (0..config.n_mels)
            .map(|m| {
                let (left, center, right) = (lo + m as f64 * step, lo + (m + 1) as f64 * step, lo + (m + 2) as f64 * step);
                let mut first = None;
                let mut weights = Vec::new();
                for k in 0..=n_fft / 2 {
                    let mel = hz_to_mel(k as f64 * bin_hz);
                    let w = if mel > left && mel < center {
                        (mel - left) / (center - left)
                    } else if mel >= center && mel < right {
                        (right - mel) / (right - center)
                    } else {
                        0.0
                    };
                    if w > 0.0 {
                        first.get_or_insert(k);
                        weights.push(w);
                    } else if first.is_some() {
                        break;
                    }
                }
                (first.unwrap_or(0), weights)
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Ok(Self {
            config,
            fft,
            n_fft,
            window,
            filters,
        })
    }

    pub fn config(&self) -> &FbankConfig {
        &self.config
    }

    /// Centre frequency of mel filter `m` in Hz.
    pub fn center_hz(&self, m: usize) -> f64 {
        let (lo, hi) = (hz_to_mel(self.config.low_hz), hz_to_mel(self.config.high_hz));
        mel_to_hz(lo + (m + 1) as f64 * (hi - lo) / (self.config.n_mels + 1) as f64)
    }

    pub fn extract(&self, audio: &AudioBuffer) -> Result<FeatureMatrix> {
        let cfg = &self.config;
        if audio.sample_rate_hz != cfg.sample_rate_hz {
            return Err(CoreError::InvalidArgument(format!(
                "audio at {} Hz, extractor expects {} Hz",
                audio.sample_rate_hz, cfg.sample_rate_hz
            )));
        }
        let frames = cfg.num_frames(audio.samples.len());
        if frames == 0 {
            return Err(CoreError::EmptyInput(format!(
                "{} samples is shorter than one {}-sample frame",
                audio.samples.len(),
                cfg.frame_length()
            )));
        }
        let (len, shift) = (cfg.frame_length(), cfg.frame_shift());
        let mut data = Vec::with_capacity(frames * cfg.n_mels);
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; self.n_fft / 2 + 1];
        for t in 0..frames {
            let frame = &audio.samples[t * shift..t * shift + len];
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for n in 0..len {
                let prev = if n == 0 { frame[0] } else { frame[n - 1] } as f64;
                let emph = frame[n] as f64 - cfg.preemphasis * prev;
                buf[n] = Complex::new(emph * self.window[n], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for (first, weights) in &self.filters {
                let e: f64 = weights.iter().zip(&power[*first..]).map(|(w, p)| w * p).sum();
                data.push(e.max(ENERGY_FLOOR).ln() as f32);
            }
        }
        let mut out = FeatureMatrix::new(frames, cfg.n_mels, data)?;
        out.frame_length_ms = cfg.frame_length_ms;
        out.frame_shift_ms = cfg.frame_shift_ms;
        Ok(out)
    }
}

pub fn extract_fbank(audio: &AudioBuffer, config: &FbankConfig) -> Result<FeatureMatrix> {
    FbankExtractor::new(config.clone())?.extract(audio)
}

const MAGIC: &[u8; 4] = b"FBNK";

/// Writes the cache format: `FBNK`, u32 frames, u32 bins, f32 LE data.
pub fn write_fbank(path: &Path, feat: &FeatureMatrix) -> Result<()> {
    let mut bytes = Vec::with_capacity(12 + 4 * feat.data.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(feat.frames as u32).to_le_bytes());
    bytes.extend_from_slice(&(feat.bins as u32).to_le_bytes());
    for v in &feat.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&bytes).map_err(io_err(path))
}

pub fn read_fbank(path: &Path) -> Result<FeatureMatrix> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(CoreError::Integrity(format!("{} is not a feature cache file", path.display())));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (frames, bins) = (word(4), word(8));
    if bytes.len() != 12 + 4 * frames * bins {
        return Err(CoreError::Integrity(format!(
            "{}: header says {frames}x{bins}, file has {} bytes",
            path.display(),
            bytes.len()
        )));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    FeatureMatrix::new(frames, bins, data)
}
