use std::f64::consts::PI;

use super::AudioBuffer;
use crate::error::{CoreError, Result};

const TAPS: usize = 64;
const KAISER_BETA: f64 = 8.6;

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Resamples `samples` by `ratio = out_rate / in_rate` to
/// `round(len * ratio)` samples with a Kaiser-windowed sinc.
fn resample_ratio(samples: &[f32], ratio: f64) -> Vec<f32> {
    let out_len = (samples.len() as f64 * ratio).round() as usize;
    let cutoff = ratio.min(1.0);
    let half = (TAPS / 2) as f64;
    let norm = bessel_i0(KAISER_BETA);
    let n = samples.len() as i64;
    (0..out_len)
        .map(|j| {
            let pos = j as f64 / ratio;
            let base = pos.floor() as i64;
            let mut acc = 0.0;
            for k in (base - TAPS as i64 / 2 + 1)..=(base + TAPS as i64 / 2) {
                if k < 0 || k >= n {
                    continue;
                }
                let dt = pos - k as f64;
                let r = dt / half;
                if r.abs() >= 1.0 {
                    continue;
                }
                let window = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / norm;
                acc += samples[k as usize] as f64 * cutoff * sinc(cutoff * dt) * window;
            }
            acc.clamp(-1.0, 1.0) as f32
        })
        .collect()
}

/// Band-limited resampling to `target_rate_hz`. Same rate is the identity.
pub fn resample(audio: &AudioBuffer, target_rate_hz: u32) -> Result<AudioBuffer> {
    if target_rate_hz == 0 {
        return Err(CoreError::InvalidArgument("target sample rate must be positive".into()));
    }
    if target_rate_hz == audio.sample_rate_hz {
        return Ok(audio.clone());
    }
    let ratio = target_rate_hz as f64 / audio.sample_rate_hz as f64;
    Ok(AudioBuffer::new(resample_ratio(&audio.samples, ratio), target_rate_hz))
}

/// Plays the audio `factor` times faster at the same sample rate (pitch
/// shifts with tempo).
pub fn speed_perturb(audio: &AudioBuffer, factor: f64) -> Result<AudioBuffer> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(CoreError::InvalidArgument(format!("speed factor {factor} must be positive")));
    }
    if factor == 1.0 {
        return Ok(audio.clone());
    }
    Ok(AudioBuffer::new(resample_ratio(&audio.samples, 1.0 / factor), audio.sample_rate_hz))
}
