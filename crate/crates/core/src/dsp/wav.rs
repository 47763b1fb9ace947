use std::io::Cursor;
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::AudioBuffer;
use crate::error::{io_err, CoreError, Result};

/// Decodes a RIFF/WAVE byte stream (PCM16 or float32), averaging channels.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioBuffer> {
    let mut reader = WavReader::new(Cursor::new(bytes)).map_err(|e| CoreError::Decode(e.to_string()))?;
    let spec = reader.spec();
    if spec.sample_rate == 0 || spec.channels == 0 {
        return Err(CoreError::Decode(format!(
            "header declares {} Hz, {} channels",
            spec.sample_rate, spec.channels
        )));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(|e| CoreError::Decode(e.to_string()))?,
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v.clamp(-1.0, 1.0)))
            .collect::<Result<_, _>>()
            .map_err(|e| CoreError::Decode(e.to_string()))?,
        (format, bits) => {
            return Err(CoreError::UnsupportedFormat(format!("{format:?} {bits}-bit")));
        }
    };
    let channels = spec.channels as usize;
    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f32>() / channels as f32)
            .collect()
    };
    Ok(AudioBuffer::new(samples, spec.sample_rate))
}

pub fn read_wav(path: &Path) -> Result<AudioBuffer> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_wav(&bytes)
}

/// Mono 16-bit PCM encoding; samples are clamped to `[-1, 1]`.
pub fn encode_wav_pcm16(audio: &AudioBuffer) -> Result<Vec<u8>> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut cursor = Cursor::new(Vec::new());
    {
        let mut writer = WavWriter::new(&mut cursor, spec).map_err(|e| CoreError::Decode(e.to_string()))?;
        for &s in &audio.samples {
            let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            writer.write_sample(v).map_err(|e| CoreError::Decode(e.to_string()))?;
        }
        writer.finalize().map_err(|e| CoreError::Decode(e.to_string()))?;
    }
    Ok(cursor.into_inner())
}

pub fn write_wav(path: &Path, audio: &AudioBuffer) -> Result<()> {
    let bytes = encode_wav_pcm16(audio)?;
    std::fs::write(path, bytes).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wav_bytes<T: hound::Sample + Copy>(spec: WavSpec, samples: &[T]) -> Vec<u8> {
        let mut cursor = Cursor::new(Vec::new());
        let mut w = WavWriter::new(&mut cursor, spec).unwrap();
        for &s in samples {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
        cursor.into_inner()
    }

    fn pcm16(channels: u16) -> WavSpec {
        WavSpec {
            channels,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        }
    }

    #[test]
    fn one_second_mono() {
        let audio = decode_wav(&wav_bytes(pcm16(1), &vec![100i16; 16000])).unwrap();
        assert_eq!(audio.samples.len(), 16000);
        assert_eq!(audio.sample_rate_hz, 16000);
    }

    #[test]
    fn stereo_opposites_average_to_zero() {
        let frames: Vec<i16> = (0..200).flat_map(|_| [16384i16, -16384]).collect();
        let audio = decode_wav(&wav_bytes(pcm16(2), &frames)).unwrap();
        assert_eq!(audio.samples.len(), 200);
        assert!(audio.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn most_negative_pcm_is_minus_one() {
        let audio = decode_wav(&wav_bytes(pcm16(1), &[i16::MIN, 0, i16::MAX])).unwrap();
        assert_eq!(audio.samples[0], -1.0);
        assert!(audio.samples[2] < 1.0);
    }

    #[test]
    fn float32_is_accepted() {
        let spec = WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        };
        let audio = decode_wav(&wav_bytes(spec, &[0.25f32, -0.5])).unwrap();
        assert_eq!(audio.samples, vec![0.25, -0.5]);
        assert_eq!(audio.sample_rate_hz, 8000);
    }

    #[test]
    fn errors_are_categorized() {
        assert!(matches!(decode_wav(b"not a wav file at all"), Err(CoreError::Decode(_))));
        let spec = WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 8,
            sample_format: SampleFormat::Int,
        };
        assert!(matches!(
            decode_wav(&wav_bytes(spec, &[1i8, 2, 3])),
            Err(CoreError::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn pcm16_round_trip_within_quantization() {
        let audio = AudioBuffer::new((0..100).map(|i| (i as f32 / 50.0) - 1.0).collect(), 16000);
        let back = decode_wav(&encode_wav_pcm16(&audio).unwrap()).unwrap();
        for (a, b) in audio.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() < 1.0 / 16000.0);
        }
    }
}
