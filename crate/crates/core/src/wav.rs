//! Mono WAV input/output (16-bit PCM or 32-bit float).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::signal::TimeSignal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WavFormat {
    Pcm16,
    Float32,
}

pub fn write_wav<T: Real>(path: &Path, samples: &[T], sample_rate: u32, format: WavFormat) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: match format {
            WavFormat::Pcm16 => 16,
            WavFormat::Float32 => 32,
        },
        sample_format: match format {
            WavFormat::Pcm16 => hound::SampleFormat::Int,
            WavFormat::Float32 => hound::SampleFormat::Float,
        },
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        match format {
            WavFormat::Pcm16 => {
                let v = (s.as_f64().clamp(-1.0, 1.0) * 32767.0).round() as i16;
                w.write_sample(v)?;
            }
            WavFormat::Float32 => w.write_sample(s.as_f64() as f32)?,
        }
    }
    w.finalize()?;
    Ok(())
}

/// Reads a mono file. When `expected_rate` is given, any other rate is an
/// error; nothing is ever resampled.
pub fn read_wav<T: Real>(path: &Path, expected_rate: Option<u32>) -> Result<TimeSignal<T>> {
    let mut r = hound::WavReader::open(path)?;
    let spec = r.spec();
    if spec.channels != 1 {
        return Err(Error::format(format!("{} has {} channels, expected mono", path.display(), spec.channels)));
    }
    if let Some(rate) = expected_rate {
        if spec.sample_rate != rate {
            return Err(Error::RateMismatch { expected: rate, actual: spec.sample_rate });
        }
    }
    let samples: Vec<T> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => r
            .samples::<f32>()
            .map(|s| s.map(|v| T::lit(v as f64)))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Int, bits) if (8..=32).contains(&bits) => {
            let scale = 1.0 / (1i64 << (bits - 1)) as f64;
            r.samples::<i32>()
                .map(|s| s.map(|v| T::lit(v as f64 * scale)))
                .collect::<std::result::Result<_, _>>()?
        }
        (fmt, bits) => {
            return Err(Error::format(format!("unsupported sample format {fmt:?} with {bits} bits")));
        }
    };
    TimeSignal::new(samples, spec.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip_is_exact_for_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let x: Vec<f64> = (0..100).map(|i| ((i as f32) * 0.013 - 0.6) as f64).collect();
        write_wav(&p, &x, 16_000, WavFormat::Float32).unwrap();
        let back: TimeSignal<f64> = read_wav(&p, Some(16_000)).unwrap();
        assert_eq!(back.samples(), &x[..]);
    }

    #[test]
    fn pcm16_quantizes_and_rate_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.wav");
        write_wav(&p, &[0.5f64, -0.25, 1.5], 8_000, WavFormat::Pcm16).unwrap();
        let back: TimeSignal<f64> = read_wav(&p, None).unwrap();
        assert!((back.samples()[0] - 0.5).abs() < 1e-4);
        assert!((back.samples()[2] - 32767.0 / 32768.0).abs() < 1e-12);
        assert!(matches!(read_wav::<f64>(&p, Some(16_000)), Err(Error::RateMismatch { .. })));
    }
}
