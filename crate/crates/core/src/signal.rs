//! Framing, windowing, forward/inverse STFT and log-power features.
//!
//! Transforms are unnormalized in the forward direction and scaled by `1/N`
//! in the inverse direction. Spectra are one-sided: a frame of `N` samples
//! yields `N/2 + 1` bins. The analysis and synthesis windows are identical;
//! overlap-add divides by the constant `Σ_m w²(n + m·hop)` so that
//! `istft(stft(x))` reproduces `x` wherever frames fully overlap.

use std::sync::Arc;

use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::{all_finite, czero, Cplx, Real};

/// Default sample rate in Hz.
pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
/// Default floor applied before taking logarithms of bin powers.
pub const DEFAULT_LOG_FLOOR: f64 = 1e-12;

const COLA_TOLERANCE: f64 = 1e-12;

/// Mono sample sequence at a fixed rate.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSignal<T> {
    samples: Vec<T>,
    sample_rate: u32,
}

impl<T: Real> TimeSignal<T> {
    pub fn new(samples: Vec<T>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::config("sample rate must be positive"));
        }
        if !all_finite(&samples) {
            return Err(Error::NonFinite("time signal"));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        assert!(sample_rate > 0, "sample rate must be positive");
        Self { samples: vec![T::zero(); len], sample_rate }
    }

    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<T> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> T {
        self.samples.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn energy(&self) -> T {
        self.samples.iter().map(|&x| x * x).sum()
    }

    /// Leading `len` samples (or the whole signal if shorter).
    pub fn truncated(&self, len: usize) -> Self {
        let n = len.min(self.samples.len());
        Self { samples: self.samples[..n].to_vec(), sample_rate: self.sample_rate }
    }
}

/// Analysis/synthesis window shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Window {
    /// Square root of the periodic Hann window.
    SqrtHann,
    Rectangular,
}

impl Window {
    pub fn coefficients<T: Real>(self, len: usize) -> Vec<T> {
        match self {
            Window::Rectangular => vec![T::one(); len],
            Window::SqrtHann => (0..len)
                .map(|n| {
                    let phase = 2.0 * std::f64::consts::PI * n as f64 / len as f64;
                    T::lit((0.5 - 0.5 * phase.cos()).sqrt())
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StftConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub window: Window,
}

impl Default for StftConfig {
    /// 8 ms frames with a 4 ms shift at 16 kHz.
    fn default() -> Self {
        Self { frame_len: 128, hop: 64, window: Window::SqrtHann }
    }
}

impl StftConfig {
    pub fn fft_size(&self) -> usize {
        self.frame_len
    }

    pub fn num_bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    /// Samples of delay introduced by streaming analysis followed by synthesis.
    pub fn latency(&self) -> usize {
        self.frame_len - self.hop
    }

    /// Checks the shape constraints and returns the overlap-add gain
    /// `Σ_m w²(n + m·hop)`, which must not depend on `n`.
    pub fn validate(&self) -> Result<f64> {
        if self.frame_len == 0 || !self.frame_len.is_multiple_of(2) {
            return Err(Error::config(format!(
                "frame_len must be even and positive, got {}",
                self.frame_len
            )));
        }
        if self.hop == 0 || self.hop > self.frame_len {
            return Err(Error::config(format!(
                "hop must satisfy 0 < hop <= frame_len, got {}",
                self.hop
            )));
        }
        let w: Vec<f64> = self.window.coefficients(self.frame_len);
        let sums: Vec<f64> = (0..self.hop)
            .map(|n| {
                (n..self.frame_len)
                    .step_by(self.hop)
                    .map(|i| w[i] * w[i])
                    .sum::<f64>()
            })
            .collect();
        let gain = sums[0];
        let worst = sums.iter().map(|s| (s - gain).abs()).fold(0.0, f64::max);
        if gain <= 0.0 || worst > COLA_TOLERANCE * gain.max(1.0) {
            return Err(Error::config(format!(
                "{:?} window with frame_len {} and hop {} is not constant-overlap-add",
                self.window, self.frame_len, self.hop
            )));
        }
        Ok(gain)
    }
}

/// One STFT frame of one-sided complex bins.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumFrame<T> {
    pub bins: Vec<Cplx<T>>,
    pub index: usize,
}

impl<T: Real> SpectrumFrame<T> {
    pub fn zeros(num_bins: usize, index: usize) -> Self {
        Self { bins: vec![czero(); num_bins], index }
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    pub fn magnitudes(&self) -> Vec<T> {
        self.bins.iter().map(|b| b.norm()).collect()
    }
}

/// Elementwise `log(max(|bin|², floor))`.
pub fn log_power<T: Real>(frame: &SpectrumFrame<T>, floor: T) -> Vec<T> {
    log_power_bins(&frame.bins, floor)
}

pub(crate) fn log_power_bins<T: Real>(bins: &[Cplx<T>], floor: T) -> Vec<T> {
    debug_assert!(floor > T::zero());
    bins.iter().map(|b| b.norm_sqr().max(floor).ln()).collect()
}

/// Planned forward/inverse transforms for one configuration.
#[derive(Clone)]
pub struct Stft<T: Real> {
    cfg: StftConfig,
    window: Vec<T>,
    ola_gain: T,
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
}

impl<T: Real> std::fmt::Debug for Stft<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

impl<T: Real> Stft<T> {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        let gain = cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            cfg,
            window: cfg.window.coefficients(cfg.frame_len),
            ola_gain: T::lit(gain),
            forward: planner.plan_fft_forward(cfg.fft_size()),
            inverse: planner.plan_fft_inverse(cfg.fft_size()),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    pub fn window(&self) -> &[T] {
        &self.window
    }

    pub fn ola_gain(&self) -> T {
        self.ola_gain
    }

    /// One-sided spectrum of one windowed frame.
    pub fn analyze(&self, frame: &[T]) -> Vec<Cplx<T>> {
        debug_assert_eq!(frame.len(), self.cfg.frame_len);
        let mut buf: Vec<Cplx<T>> = frame
            .iter()
            .zip(&self.window)
            .map(|(&x, &w)| Cplx::new(x * w, T::zero()))
            .collect();
        self.forward.process(&mut buf);
        buf.truncate(self.cfg.num_bins());
        buf
    }

    /// Inverse transform of one frame, multiplied by the synthesis window and
    /// divided by the overlap-add gain.
    pub fn synthesize(&self, bins: &[Cplx<T>]) -> Vec<T> {
        let n = self.cfg.fft_size();
        let half = self.cfg.num_bins();
        debug_assert_eq!(bins.len(), half);
        let mut buf = vec![czero::<T>(); n];
        buf[..half].copy_from_slice(bins);
        // Hermitian completion; DC and Nyquist must be real.
        buf[0].im = T::zero();
        buf[half - 1].im = T::zero();
        for k in half..n {
            buf[k] = buf[n - k].conj();
        }
        self.inverse.process(&mut buf);
        let scale = T::one() / (T::lit(n as f64) * self.ola_gain);
        buf.iter()
            .zip(&self.window)
            .map(|(c, &w)| c.re * w * scale)
            .collect()
    }

    /// Frame `k` covers samples `[k·hop, k·hop + frame_len)`.
    pub fn stft(&self, signal: &TimeSignal<T>) -> Result<Vec<SpectrumFrame<T>>> {
        let x = signal.samples();
        let (len, hop) = (self.cfg.frame_len, self.cfg.hop);
        if x.len() < len {
            return Err(Error::SignalTooShort { len: x.len(), needed: len });
        }
        let count = 1 + (x.len() - len) / hop;
        Ok((0..count)
            .map(|k| SpectrumFrame { bins: self.analyze(&x[k * hop..k * hop + len]), index: k })
            .collect())
    }

    /// Overlap-add resynthesis; output length is `(frames − 1)·hop + frame_len`.
    pub fn istft(&self, frames: &[SpectrumFrame<T>], sample_rate: u32) -> Result<TimeSignal<T>> {
        if frames.is_empty() {
            return Ok(TimeSignal::zeros(0, sample_rate));
        }
        let (len, hop) = (self.cfg.frame_len, self.cfg.hop);
        if let Some(bad) = frames.iter().find(|f| f.len() != self.cfg.num_bins()) {
            return Err(Error::shape(format!(
                "frame {} has {} bins, expected {}",
                bad.index,
                bad.len(),
                self.cfg.num_bins()
            )));
        }
        let mut out = vec![T::zero(); (frames.len() - 1) * hop + len];
        for (k, frame) in frames.iter().enumerate() {
            let seg = self.synthesize(&frame.bins);
            for (o, s) in out[k * hop..k * hop + len].iter_mut().zip(seg) {
                *o += s;
            }
        }
        TimeSignal::new(out, sample_rate)
    }
}

pub fn stft<T: Real>(signal: &TimeSignal<T>, cfg: &StftConfig) -> Result<Vec<SpectrumFrame<T>>> {
    Stft::new(*cfg)?.stft(signal)
}

pub fn istft<T: Real>(
    frames: &[SpectrumFrame<T>],
    cfg: &StftConfig,
    sample_rate: u32,
) -> Result<TimeSignal<T>> {
    Stft::new(*cfg)?.istft(frames, sample_rate)
}

/// Streaming analysis: each call appends one hop of samples and returns the
/// spectrum of the newest `frame_len` samples. The buffer starts filled with
/// zeros, so frame `k` equals batch frame `k` of the signal prefixed by
/// `frame_len − hop` zeros.
#[derive(Debug, Clone)]
pub struct StreamingAnalyzer<T: Real> {
    stft: Stft<T>,
    buf: Vec<T>,
    next_index: usize,
}

impl<T: Real> StreamingAnalyzer<T> {
    pub fn new(stft: Stft<T>) -> Self {
        let len = stft.config().frame_len;
        Self { stft, buf: vec![T::zero(); len], next_index: 0 }
    }

    pub fn push(&mut self, hop_block: &[T]) -> SpectrumFrame<T> {
        let hop = self.stft.config().hop;
        assert_eq!(hop_block.len(), hop, "streaming analysis needs exactly one hop");
        self.buf.copy_within(hop.., 0);
        let n = self.buf.len();
        self.buf[n - hop..].copy_from_slice(hop_block);
        let frame = SpectrumFrame { bins: self.stft.analyze(&self.buf), index: self.next_index };
        self.next_index += 1;
        frame
    }
}

/// Streaming overlap-add: each pushed frame completes one hop of output.
/// Output lags the analyzer input by `frame_len − hop` samples.
#[derive(Debug, Clone)]
pub struct StreamingSynthesizer<T: Real> {
    stft: Stft<T>,
    acc: Vec<T>,
}

impl<T: Real> StreamingSynthesizer<T> {
    pub fn new(stft: Stft<T>) -> Self {
        let len = stft.config().frame_len;
        Self { stft, acc: vec![T::zero(); len] }
    }

    pub fn push(&mut self, bins: &[Cplx<T>]) -> Vec<T> {
        let hop = self.stft.config().hop;
        let seg = self.stft.synthesize(bins);
        for (a, s) in self.acc.iter_mut().zip(seg) {
            *a += s;
        }
        let out = self.acc[..hop].to_vec();
        self.acc.copy_within(hop.., 0);
        let n = self.acc.len();
        self.acc[n - hop..].iter_mut().for_each(|a| *a = T::zero());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn defaults_are_8ms_frames_with_half_shift() {
        let cfg = StftConfig::default();
        assert_eq!(cfg.frame_len, 128);
        assert_eq!(cfg.hop, 64);
        assert_eq!(cfg.num_bins(), 65);
        assert_eq!(cfg.frame_len as f64 / DEFAULT_SAMPLE_RATE as f64, 0.008);
        let frames = stft(&TimeSignal::<f64>::zeros(16_000, 16_000), &cfg).unwrap();
        assert_eq!(frames.len(), 1 + (16_000 - 128) / 64);
        assert!(frames.iter().all(|f| f.len() == 65));
    }

    #[test]
    fn zeros_give_zero_bins() {
        let frames = stft(&TimeSignal::<f64>::zeros(128, 16_000), &StftConfig::default()).unwrap();
        assert_eq!(frames.len(), 1);
        assert!(frames[0].bins.iter().all(|b| b.norm() == 0.0));
    }

    #[test]
    fn cosine_on_bin_center_concentrates() {
        let cfg = StftConfig { frame_len: 128, hop: 64, window: Window::Rectangular };
        let x: Vec<f64> = (0..128)
            .map(|n| (2.0 * std::f64::consts::PI * 4.0 * n as f64 / 128.0).cos())
            .collect();
        let frames = stft(&TimeSignal::new(x, 16_000).unwrap(), &cfg).unwrap();
        let mags = frames[0].magnitudes();
        let peak = mags[4];
        // closed form: N/2 for a unit cosine on a bin center
        assert!((peak - 64.0).abs() < 1e-9);
        for (b, m) in mags.iter().enumerate() {
            if b != 4 {
                assert!(*m < 1e-9 * peak, "bin {b} leaked {m}");
            }
        }
    }

    #[test]
    fn non_cola_hop_is_rejected() {
        let cfg = StftConfig { frame_len: 128, hop: 48, window: Window::SqrtHann };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = StftConfig { frame_len: 127, hop: 64, window: Window::SqrtHann };
        assert!(cfg.validate().is_err());
        let cfg = StftConfig { frame_len: 128, hop: 0, window: Window::SqrtHann };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn short_signal_is_an_error() {
        let r = stft(&TimeSignal::<f64>::zeros(100, 16_000), &StftConfig::default());
        assert!(matches!(r, Err(Error::SignalTooShort { len: 100, needed: 128 })));
    }

    #[test]
    fn empty_and_zero_frames() {
        let cfg = StftConfig::default();
        let out = istft::<f64>(&[], &cfg, 16_000).unwrap();
        assert!(out.is_empty());
        let frames = vec![SpectrumFrame::<f64>::zeros(65, 0), SpectrumFrame::zeros(65, 1)];
        let out = istft(&frames, &cfg, 16_000).unwrap();
        assert_eq!(out.len(), 192);
        assert!(out.samples().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mismatched_frame_length_is_an_error() {
        let frames = vec![SpectrumFrame::<f64>::zeros(64, 0)];
        assert!(matches!(istft(&frames, &StftConfig::default(), 16_000), Err(Error::Shape(_))));
    }

    #[test]
    fn single_frame_round_trip_is_windowed_twice() {
        let cfg = StftConfig::default();
        let x = noise(128, 3);
        let engine = Stft::<f64>::new(cfg).unwrap();
        let frames = engine.stft(&TimeSignal::new(x.clone(), 16_000).unwrap()).unwrap();
        let y = engine.istft(&frames, 16_000).unwrap();
        // direct evaluation: sqrt-Hann squared is Hann, and the periodic Hann
        // overlap-add gain at 50% shift is exactly 1
        assert!((engine.ola_gain() - 1.0).abs() < 1e-12);
        for (n, (&xi, &yi)) in x.iter().zip(y.samples()).enumerate() {
            let hann = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / 128.0).cos();
            assert!((yi - xi * hann).abs() < 1e-13);
        }
    }

    #[test]
    fn white_noise_round_trip_interior() {
        let cfg = StftConfig::default();
        let x = noise(16_000, 11);
        let sig = TimeSignal::new(x.clone(), 16_000).unwrap();
        let y = istft(&stft(&sig, &cfg).unwrap(), &cfg, 16_000).unwrap();
        let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = (cfg.hop..y.len() - cfg.hop)
            .map(|n| (y.samples()[n] - x[n]).abs())
            .fold(0.0, f64::max);
        assert!(err / peak < 1e-10, "relative error {}", err / peak);
    }

    #[test]
    fn parseval_per_frame() {
        let cfg = StftConfig::default();
        let engine = Stft::<f64>::new(cfg).unwrap();
        let x = noise(128, 5);
        let bins = engine.analyze(&x);
        let time: f64 = x.iter().zip(engine.window()).map(|(a, w)| (a * w).powi(2)).sum();
        let n = 128.0;
        let freq: f64 = bins
            .iter()
            .enumerate()
            .map(|(k, b)| if k == 0 || k == 64 { b.norm_sqr() } else { 2.0 * b.norm_sqr() })
            .sum::<f64>()
            / n;
        assert!((time - freq).abs() / time < 1e-9);
    }

    #[test]
    fn log_power_examples() {
        let floor: f64 = 1e-12;
        let frame = SpectrumFrame { bins: vec![czero(), Cplx::new(1.0, 0.0), Cplx::new(0.0, 10.0)], index: 0 };
        let lp = log_power(&frame, floor);
        assert_eq!(lp[0], floor.ln());
        assert_eq!(lp[1], 0.0);
        assert!((lp[2] - 4.605_170_185_988_091).abs() < 1e-12);
    }

    #[test]
    fn streaming_analysis_matches_zero_prefixed_batch() {
        let cfg = StftConfig::default();
        let engine = Stft::<f64>::new(cfg).unwrap();
        let x = noise(64 * 20, 9);
        let mut padded = vec![0.0; cfg.latency()];
        padded.extend_from_slice(&x);
        let batch = engine.stft(&TimeSignal::new(padded, 16_000).unwrap()).unwrap();
        let mut an = StreamingAnalyzer::new(engine.clone());
        for (k, block) in x.chunks(64).enumerate() {
            let f = an.push(block);
            assert_eq!(f.index, k);
            assert_eq!(f.bins, batch[k].bins);
        }
    }

    #[test]
    fn streaming_synthesis_reconstructs_with_latency() {
        let cfg = StftConfig::default();
        let engine = Stft::<f64>::new(cfg).unwrap();
        let x = noise(64 * 30, 4);
        let mut an = StreamingAnalyzer::new(engine.clone());
        let mut syn = StreamingSynthesizer::new(engine);
        let mut out = Vec::new();
        for block in x.chunks(64) {
            let f = an.push(block);
            out.extend(syn.push(&f.bins));
        }
        let lat = cfg.latency();
        for n in lat..out.len() {
            assert!((out[n] - x[n - lat]).abs() < 1e-12);
        }
    }

    #[test]
    fn works_in_single_precision() {
        let cfg = StftConfig::default();
        let x: Vec<f32> = noise(1024, 2).into_iter().map(|v| v as f32).collect();
        let sig = TimeSignal::new(x.clone(), 16_000).unwrap();
        let y = istft(&stft(&sig, &cfg).unwrap(), &cfg, 16_000).unwrap();
        for n in 64..960 {
            assert!((y.samples()[n] - x[n]).abs() < 1e-5);
        }
    }
}
