//! Sample-accurate closed-loop amplification simulator.
//!
//! The microphone picks up `y(t) = s(t) + d(t)` with `d = x * h`. The
//! suppressor turns `y` into `ŝ`, and the loudspeaker plays
//! `x(t) = clip(G·ŝ(t − Δt))`. The delay line is shortened by the
//! suppressor's declared latency so that `Δt` is the whole system delay, and
//! the returned `ŝ` is shifted back by that latency so it lines up with `s`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::room::{convolve_fft, Rir, StreamingConvolver};
use crate::signal::TimeSignal;

/// Frame-synchronous howling suppressor.
///
/// `process` receives `block_len()` microphone samples together with the
/// loudspeaker samples played over the same interval and writes the same
/// number of output samples. Output sample `n` of the stream may depend on
/// inputs up to `n + latency()`.
pub trait AhsProcessor<T: Real> {
    fn block_len(&self) -> usize;
    fn latency(&self) -> usize;
    fn process(&mut self, mic: &[T], reference: &[T], out: &mut [T]);
}

/// Passes the microphone through unchanged ("no AHS").
#[derive(Debug, Clone)]
pub struct IdentityAhs {
    block_len: usize,
}

impl IdentityAhs {
    pub fn new(block_len: usize) -> Self {
        assert!(block_len > 0);
        Self { block_len }
    }
}

impl<T: Real> AhsProcessor<T> for IdentityAhs {
    fn block_len(&self) -> usize {
        self.block_len
    }

    fn latency(&self) -> usize {
        0
    }

    fn process(&mut self, mic: &[T], _reference: &[T], out: &mut [T]) {
        out.copy_from_slice(mic);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HowlDetectorConfig {
    pub amp_threshold: f64,
    pub run_length: usize,
}

impl Default for HowlDetectorConfig {
    fn default() -> Self {
        Self { amp_threshold: 1.0, run_length: 100 }
    }
}

impl HowlDetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.amp_threshold > 0.0) || self.run_length == 0 {
            return Err(Error::config("howl detector needs threshold > 0 and run_length >= 1"));
        }
        Ok(())
    }
}

/// Outcome of scanning one chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HowlScan {
    /// Offset within the chunk of the sample that made the run exceed
    /// `run_length`, if any.
    pub fired_at: Option<usize>,
    /// Length of the over-threshold run at the end of the chunk.
    pub carry: usize,
}

/// Fires when more than `run_length` consecutive samples exceed the
/// threshold in magnitude. `carry` is the run length left over from the
/// previous chunk.
pub fn detect_howl_run<T: Real>(samples: &[T], det: &HowlDetectorConfig, carry: usize) -> HowlScan {
    let thr = T::lit(det.amp_threshold);
    let mut run = carry;
    let mut fired_at = None;
    for (i, &v) in samples.iter().enumerate() {
        // NaN counts as over threshold
        if !(v.abs() <= thr) {
            run += 1;
            if run > det.run_length && fired_at.is_none() {
                fired_at = Some(i);
            }
        } else {
            run = 0;
        }
    }
    HowlScan { fired_at, carry: run }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HowlEvent {
    /// First sample of the over-threshold run.
    pub onset: usize,
    /// Sample at which the run exceeded the allowed length.
    pub detected_at: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopConfig {
    /// Loudspeaker hard-clip level; infinity disables clipping.
    pub saturation: f64,
    /// Convolve the dry source with the scene's near-end RIR to form `s(t)`.
    pub reverberant_source: bool,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self { saturation: 1.0, reverberant_source: true }
    }
}

/// Everything needed to run one closed-loop simulation.
#[derive(Debug, Clone)]
pub struct LoopScene<T> {
    /// Dry near-end source.
    pub near_end: TimeSignal<T>,
    /// Loudspeaker-to-microphone path `h`.
    pub feedback_rir: Rir<T>,
    /// Talker-to-microphone path.
    pub near_rir: Option<Rir<T>>,
    pub gain: f64,
    /// System delay in seconds.
    pub delay: f64,
    pub seed: u64,
}

impl<T: Real> LoopScene<T> {
    pub fn sample_rate(&self) -> u32 {
        self.near_end.sample_rate()
    }

    pub fn delay_samples(&self) -> usize {
        (self.delay * self.sample_rate() as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gain >= 0.0) || !self.gain.is_finite() {
            return Err(Error::config(format!("gain must be finite and >= 0, got {}", self.gain)));
        }
        if self.delay_samples() < 1 {
            return Err(Error::config(format!("delay {} s rounds to zero samples", self.delay)));
        }
        let rate = self.sample_rate();
        for rir in std::iter::once(&self.feedback_rir).chain(self.near_rir.as_ref()) {
            if rir.sample_rate() != rate {
                return Err(Error::RateMismatch { expected: rate, actual: rir.sample_rate() });
            }
        }
        Ok(())
    }

    /// The near-end signal as it reaches the microphone.
    pub fn target(&self, cfg: &LoopConfig) -> Vec<T> {
        let dry = self.near_end.samples();
        match (&self.near_rir, cfg.reverberant_source) {
            (Some(rir), true) => {
                let mut wet = convolve_fft(dry, rir.taps());
                wet.truncate(dry.len());
                wet
            }
            _ => dry.to_vec(),
        }
    }
}

/// Aligned signals of one simulation run.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneResult<T> {
    pub mic: Vec<T>,
    /// Suppressor output, shifted back by its latency.
    pub output: Vec<T>,
    /// Loudspeaker signal as played.
    pub loudspeaker: Vec<T>,
    pub playback: Vec<T>,
    pub target: Vec<T>,
    pub howl_event: Option<HowlEvent>,
    pub sample_rate: u32,
}

/// One block of loop inputs handed to the suppressor.
#[derive(Debug, Clone)]
pub struct LoopBlock<T> {
    pub start: usize,
    pub mic: Vec<T>,
    pub reference: Vec<T>,
    pub target: Vec<T>,
}

/// Incremental driver for one scene; `run_scene` is a loop over it. The
/// trainer drives it directly so it can interleave weight updates.
#[derive(Debug, Clone)]
pub struct LoopRunner<T: Real> {
    target: Vec<T>,
    total: usize,
    block: usize,
    latency: usize,
    gain: T,
    saturation: T,
    ring: Vec<T>,
    conv: StreamingConvolver<T>,
    cursor: usize,
    mic: Vec<T>,
    loudspeaker: Vec<T>,
    playback: Vec<T>,
    raw_output: Vec<T>,
    detector: HowlDetectorConfig,
    run: usize,
    howl: Option<HowlEvent>,
    sample_rate: u32,
    pending: bool,
}

impl<T: Real> LoopRunner<T> {
    /// Prepares a run of `duration` seconds, rounded down to whole blocks.
    pub fn new(
        scene: &LoopScene<T>,
        cfg: &LoopConfig,
        det: &HowlDetectorConfig,
        block_len: usize,
        latency: usize,
        duration: f64,
    ) -> Result<Self> {
        scene.validate()?;
        det.validate()?;
        if block_len == 0 {
            return Err(Error::config("block length must be positive"));
        }
        if !(cfg.saturation > 0.0) {
            return Err(Error::config(format!("saturation level must be positive, got {}", cfg.saturation)));
        }
        let rate = scene.sample_rate();
        let wanted = (duration * rate as f64).round() as usize;
        if wanted > scene.near_end.len() {
            return Err(Error::config(format!(
                "duration {duration} s exceeds the {:.3} s near-end source",
                scene.near_end.duration()
            )));
        }
        let delay = scene.delay_samples();
        if delay < latency + block_len.max(1) {
            return Err(Error::config(format!(
                "system delay of {delay} samples cannot hold suppressor latency {latency} plus a {block_len}-sample block"
            )));
        }
        let total = wanted / block_len * block_len;
        let mut target = scene.target(cfg);
        target.truncate(total);
        Ok(Self {
            target,
            total,
            block: block_len,
            latency,
            gain: T::lit(scene.gain),
            saturation: T::lit(cfg.saturation),
            ring: vec![T::zero(); delay - latency],
            conv: StreamingConvolver::new(&scene.feedback_rir),
            cursor: 0,
            mic: Vec::with_capacity(total),
            loudspeaker: Vec::with_capacity(total),
            playback: Vec::with_capacity(total),
            raw_output: Vec::with_capacity(total),
            detector: *det,
            run: 0,
            howl: None,
            sample_rate: rate,
            pending: false,
        })
    }

    pub fn total_samples(&self) -> usize {
        self.total
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn howl_event(&self) -> Option<HowlEvent> {
        self.howl
    }

    /// Computes the microphone block for the next interval, or `None` at the
    /// end of the scene.
    pub fn begin_block(&mut self) -> Option<LoopBlock<T>> {
        assert!(!self.pending, "finish_block must follow begin_block");
        if self.cursor + self.block > self.total {
            return None;
        }
        let (start, n, d) = (self.cursor, self.block, self.ring.len());
        let reference: Vec<T> = (start..start + n).map(|t| self.ring[t % d]).collect();
        let playback = self.conv.process(&reference);
        let target = self.target[start..start + n].to_vec();
        let mic: Vec<T> = target.iter().zip(&playback).map(|(&s, &p)| s + p).collect();
        self.mic.extend_from_slice(&mic);
        self.loudspeaker.extend_from_slice(&reference);
        self.playback.extend_from_slice(&playback);
        self.pending = true;
        Some(LoopBlock { start, mic, reference, target })
    }

    /// Feeds the suppressor output for the current block back into the loop.
    /// Returns the howl event if it fired inside this block.
    pub fn finish_block(&mut self, out: &[T]) -> Option<HowlEvent> {
        assert!(self.pending, "begin_block must precede finish_block");
        assert_eq!(out.len(), self.block);
        let (start, d) = (self.cursor, self.ring.len());
        for (i, &v) in out.iter().enumerate() {
            let sat = self.saturation;
            self.ring[(start + i) % d] = (self.gain * v).max(-sat).min(sat);
        }
        self.raw_output.extend_from_slice(out);
        let carry = self.run;
        let scan = detect_howl_run(out, &self.detector, carry);
        self.run = scan.carry;
        self.cursor += self.block;
        self.pending = false;
        match (self.howl, scan.fired_at) {
            (None, Some(i)) => {
                let detected = start + i;
                let onset = detected - self.detector.run_length;
                let ev = HowlEvent {
                    onset: onset.saturating_sub(self.latency),
                    detected_at: detected.saturating_sub(self.latency),
                };
                self.howl = Some(ev);
                Some(ev)
            }
            _ => None,
        }
    }

    /// Collects the aligned signals processed so far.
    pub fn into_result(self) -> SceneResult<T> {
        let n = self.raw_output.len();
        let mut output = vec![T::zero(); n];
        if n > self.latency {
            output[..n - self.latency].copy_from_slice(&self.raw_output[self.latency..]);
        }
        let mut target = self.target;
        target.truncate(n);
        SceneResult {
            mic: self.mic,
            output,
            loudspeaker: self.loudspeaker,
            playback: self.playback,
            target,
            howl_event: self.howl,
            sample_rate: self.sample_rate,
        }
    }
}

/// Runs the full closed loop for `duration` seconds. Howling does not stop
/// the run; it is reported through `howl_event`.
pub fn run_scene<T: Real, A: AhsProcessor<T> + ?Sized>(
    scene: &LoopScene<T>,
    cfg: &LoopConfig,
    ahs: &mut A,
    det: &HowlDetectorConfig,
    duration: f64,
) -> Result<SceneResult<T>> {
    let block = ahs.block_len();
    let mut runner = LoopRunner::new(scene, cfg, det, block, ahs.latency(), duration)?;
    let mut out = vec![T::zero(); block];
    while let Some(b) = runner.begin_block() {
        ahs.process(&b.mic, &b.reference, &mut out);
        runner.finish_block(&out);
    }
    Ok(runner.into_result())
}
