//! Corpus-free speech-like test material.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::real::Real;
use crate::signal::TimeSignal;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpeechSynthConfig {
    pub sample_rate: u32,
    /// Bounds of the fundamental frequency contour in Hz.
    pub f0_min: f64,
    pub f0_max: f64,
    /// Depth of the slow pitch excursion, in octaves.
    pub contour_depth: f64,
    /// Probability that a syllable is voiced (otherwise a noise burst).
    pub voiced_prob: f64,
    /// Probability of a pause after a syllable.
    pub pause_prob: f64,
    pub peak: f64,
}

impl Default for SpeechSynthConfig {
    fn default() -> Self {
        Self {
            sample_rate: crate::signal::DEFAULT_SAMPLE_RATE,
            f0_min: 80.0,
            f0_max: 300.0,
            contour_depth: 0.5,
            voiced_prob: 0.8,
            pause_prob: 0.25,
            peak: 0.5,
        }
    }
}

/// Two-pole resonator normalized to unit gain at its center frequency.
#[derive(Debug, Clone, Copy, Default)]
struct Resonator {
    a1: f64,
    a2: f64,
    gain: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn tune(&mut self, freq: f64, bandwidth: f64, fs: f64) {
        let r = (-std::f64::consts::PI * bandwidth / fs).exp();
        let theta = 2.0 * std::f64::consts::PI * freq / fs;
        self.a1 = 2.0 * r * theta.cos();
        self.a2 = -r * r;
        self.gain = (1.0 - r) * (1.0 - 2.0 * r * (2.0 * theta).cos() + r * r).sqrt();
    }

    fn tick(&mut self, x: f64) -> f64 {
        let y = self.gain * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Harmonic source with a wandering pitch contour, formant-like resonances,
/// syllabic amplitude modulation, unvoiced bursts and pauses, normalized to
/// the configured peak.
pub fn synth_speech<T: Real>(seed: u64, duration: f64) -> TimeSignal<T> {
    synth_speech_with(&SpeechSynthConfig::default(), seed, duration)
}

pub fn synth_speech_with<T: Real>(cfg: &SpeechSynthConfig, seed: u64, duration: f64) -> TimeSignal<T> {
    let fs = cfg.sample_rate as f64;
    let len = (duration * fs).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5bee_c400_0000);
    let mut out = vec![0.0f64; len];

    let (lo, hi) = (cfg.f0_min.ln(), cfg.f0_max.ln());
    let base = if hi > lo { rng.gen_range(lo..hi) } else { lo };
    let contour_rate = rng.gen_range(0.3..1.2);
    let contour_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut drift = 0.0f64;
    let mut phase = 0.0f64;
    let mut formants = [Resonator::default(); 3];
    let mut hiss = Resonator::default();
    hiss.tune(rng.gen_range(3000.0..5500.0), 1500.0, fs);

    let mut t = 0usize;
    while t < len {
        let syl = (rng.gen_range(0.12..0.35) * fs) as usize;
        let voiced = rng.gen_bool(cfg.voiced_prob.clamp(0.0, 1.0));
        let f = [rng.gen_range(300.0..800.0), rng.gen_range(900.0..2200.0), rng.gen_range(2300.0..3200.0)];
        for (r, &fc) in formants.iter_mut().zip(&f) {
            r.tune(fc, rng.gen_range(70.0..160.0), fs);
        }
        let level = rng.gen_range(0.4..1.0);
        for i in 0..syl.min(len - t) {
            let env = level * (std::f64::consts::PI * i as f64 / syl as f64).sin().powf(0.7);
            let time = (t + i) as f64 / fs;
            drift = (drift + rng.gen_range(-1.0..1.0) * 2e-3).clamp(-0.3, 0.3);
            let log_f0 = base
                + cfg.contour_depth * std::f64::consts::LN_2 * (std::f64::consts::TAU * contour_rate * time + contour_phase).sin()
                + if cfg.contour_depth > 0.0 { drift } else { 0.0 };
            let f0 = log_f0.exp().clamp(cfg.f0_min, cfg.f0_max);
            let sample = if voiced {
                phase = (phase + std::f64::consts::TAU * f0 / fs) % (std::f64::consts::TAU * 1e6);
                let harmonics = ((4000.0 / f0) as usize).max(1);
                let src: f64 = (1..=harmonics).map(|k| (k as f64 * phase).sin() / k as f64).sum();
                let shaped = formants.iter_mut().fold(0.0, |acc, r| acc + r.tick(src));
                shaped + 0.02 * rng.gen_range(-1.0..1.0)
            } else {
                hiss.tick(rng.gen_range(-1.0..1.0)) * 0.6
            };
            out[t + i] = env * sample;
        }
        t += syl;
        if rng.gen_bool(cfg.pause_prob.clamp(0.0, 1.0)) {
            t += (rng.gen_range(0.15..0.5) * fs) as usize;
        }
    }

    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { cfg.peak / peak } else { 0.0 };
    TimeSignal::new(out.into_iter().map(|v| T::lit(v * scale)).collect(), cfg.sample_rate)
        .expect("synthesized samples are finite")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{Stft, StftConfig, Window};

    #[test]
    fn deterministic_and_normalized() {
        let a: TimeSignal<f64> = synth_speech(7, 1.0);
        let b: TimeSignal<f64> = synth_speech(7, 1.0);
        assert_eq!(a, b);
        assert_eq!(a.len(), 16_000);
        assert!((a.peak() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn different_seeds_are_uncorrelated() {
        for seed in 0..5u64 {
            let a: TimeSignal<f64> = synth_speech(seed, 2.0);
            let b: TimeSignal<f64> = synth_speech(seed + 100, 2.0);
            let dot: f64 = a.samples().iter().zip(b.samples()).map(|(x, y)| x * y).sum();
            let corr = dot / (a.energy() * b.energy()).sqrt();
            assert!(corr.abs() < 0.2, "seed {seed}: corr {corr}");
        }
    }

    #[test]
    fn steady_voicing_has_harmonic_peaks() {
        let cfg = SpeechSynthConfig {
            f0_min: 250.0,
            f0_max: 250.0,
            contour_depth: 0.0,
            voiced_prob: 1.0,
            pause_prob: 0.0,
            ..Default::default()
        };
        let x: TimeSignal<f64> = synth_speech_with(&cfg, 3, 1.0);
        // 1024-point frame: 250 Hz sits exactly on bin 16
        let stft = Stft::<f64>::new(StftConfig { frame_len: 1024, hop: 1024, window: Window::Rectangular })
            .unwrap();
        let mut power = vec![0.0; 513];
        for f in stft.stft(&x).unwrap() {
            for (p, b) in power.iter_mut().zip(&f.bins) {
                *p += b.norm_sqr();
            }
        }
        for k in 1..=6 {
            let h = 16 * k;
            let between = 16 * k + 8;
            assert!(power[h] > 30.0 * power[between], "harmonic {k}: {} vs {}", power[h], power[between]);
        }
    }
}
