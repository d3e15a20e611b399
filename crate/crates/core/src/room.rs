//! Image-method room impulse responses and exact streaming convolution.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::{all_finite, czero, Cplx, Real};
use crate::signal::TimeSignal;

pub const SPEED_OF_SOUND: f64 = 343.0;

/// Shoebox room with one source and one receiver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomSpec {
    /// Room size in meters.
    pub dimensions: [f64; 3],
    pub source_pos: [f64; 3],
    pub mic_pos: [f64; 3],
    /// Reverberation time in seconds; 0 keeps only the direct path.
    pub rt60: f64,
    pub sample_rate: u32,
    pub max_rir_len: usize,
    /// Seeds the per-image amplitude jitter; irrelevant when `jitter == 0`.
    pub seed: u64,
    /// Relative amplitude jitter applied to every reflection, in `[0, 1)`.
    #[serde(default)]
    pub jitter: f64,
}

impl RoomSpec {
    pub fn new(dimensions: [f64; 3], source_pos: [f64; 3], mic_pos: [f64; 3], rt60: f64) -> Self {
        let sample_rate = crate::signal::DEFAULT_SAMPLE_RATE;
        Self {
            dimensions,
            source_pos,
            mic_pos,
            rt60,
            sample_rate,
            max_rir_len: default_max_rir_len(sample_rate),
            seed: 0,
            jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimensions.iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
            return Err(Error::Geometry(format!("room dimensions {:?} must be positive", self.dimensions)));
        }
        for (name, p) in [("source", self.source_pos), ("microphone", self.mic_pos)] {
            let inside = p.iter().zip(&self.dimensions).all(|(&c, &d)| c > 0.0 && c < d);
            if !inside {
                return Err(Error::Geometry(format!(
                    "{name} position {p:?} is not strictly inside {:?}",
                    self.dimensions
                )));
            }
        }
        if !(self.rt60 >= 0.0) || !self.rt60.is_finite() {
            return Err(Error::config(format!("rt60 must be finite and >= 0, got {}", self.rt60)));
        }
        if self.sample_rate == 0 || self.max_rir_len == 0 {
            return Err(Error::config("sample rate and max_rir_len must be positive"));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::config(format!("jitter must lie in [0, 1), got {}", self.jitter)));
        }
        Ok(())
    }

    pub fn source_mic_distance(&self) -> f64 {
        dist(self.source_pos, self.mic_pos)
    }

    /// Frequency-independent wall reflection coefficient from Sabine's
    /// formula, `α = 24·ln10·V / (c·S·T60)` and `β = sqrt(1 − α)`.
    /// A T60 so short that `α ≥ 1` cannot be produced by this room and is an
    /// error; `rt60 == 0` explicitly asks for the direct path alone.
    pub fn reflection_coefficient(&self) -> Result<f64> {
        if self.rt60 == 0.0 {
            return Ok(0.0);
        }
        let absorption = sabine_absorption(self.dimensions, self.rt60);
        if absorption >= 1.0 {
            return Err(Error::Geometry(format!(
                "rt60 {} s is shorter than the {:.3} s minimum of a {:?} m room",
                self.rt60,
                min_rt60(self.dimensions),
                self.dimensions
            )));
        }
        Ok((1.0 - absorption).sqrt())
    }
}

fn sabine_absorption(dimensions: [f64; 3], rt60: f64) -> f64 {
    let [lx, ly, lz] = dimensions;
    let volume = lx * ly * lz;
    let surface = 2.0 * (lx * ly + lx * lz + ly * lz);
    24.0 * std::f64::consts::LN_10 * volume / (SPEED_OF_SOUND * surface * rt60)
}

/// Shortest reverberation time a shoebox can have under Sabine's formula
/// (all walls fully absorbing).
pub fn min_rt60(dimensions: [f64; 3]) -> f64 {
    sabine_absorption(dimensions, 1.0)
}

pub fn default_max_rir_len(sample_rate: u32) -> usize {
    (sample_rate / 2) as usize
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Room impulse response `h(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rir<T> {
    taps: Vec<T>,
    sample_rate: u32,
}

impl<T: Real> Rir<T> {
    pub fn new(taps: Vec<T>, sample_rate: u32) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::config("an impulse response needs at least one tap"));
        }
        if sample_rate == 0 {
            return Err(Error::config("sample rate must be positive"));
        }
        if !all_finite(&taps) {
            return Err(Error::NonFinite("impulse response"));
        }
        Ok(Self { taps, sample_rate })
    }

    /// `δ(t − delay)`.
    pub fn impulse(delay: usize, sample_rate: u32) -> Self {
        let mut taps = vec![T::zero(); delay + 1];
        taps[delay] = T::one();
        Self { taps, sample_rate }
    }

    pub fn taps(&self) -> &[T] {
        &self.taps
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn energy(&self) -> T {
        self.taps.iter().map(|&h| h * h).sum()
    }

    pub fn abs_sum(&self) -> T {
        self.taps.iter().map(|h| h.abs()).sum()
    }

    pub fn scaled(&self, gain: T) -> Self {
        Self { taps: self.taps.iter().map(|&h| h * gain).collect(), sample_rate: self.sample_rate }
    }

    /// Scales to unit energy. All-zero responses are returned unchanged.
    pub fn normalized_energy(&self) -> Self {
        let e = self.energy();
        if e > T::zero() { self.scaled(T::one() / e.sqrt()) } else { self.clone() }
    }

    pub fn normalized_peak(&self) -> Self {
        let p = self.taps.iter().fold(T::zero(), |m, h| m.max(h.abs()));
        if p > T::zero() { self.scaled(T::one() / p) } else { self.clone() }
    }

    pub fn convert<U: Real>(&self) -> Rir<U> {
        Rir { taps: self.taps.iter().map(|h| U::lit(h.as_f64())).collect(), sample_rate: self.sample_rate }
    }
}

/// Image-method impulse response (Allen & Berkley) with nearest-sample
/// arrival times and `1/(4πr)` spreading.
pub fn generate_rir<T: Real>(spec: &RoomSpec) -> Result<Rir<T>> {
    spec.validate()?;
    let beta = spec.reflection_coefficient()?;
    let fs = spec.sample_rate as f64;
    let max_len = spec.max_rir_len;
    let mut taps = vec![0.0f64; max_len];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let samples_per_meter = fs / SPEED_OF_SOUND;
    let max_dist = max_len as f64 / samples_per_meter;

    let [lx, ly, lz] = spec.dimensions;
    let [sx, sy, sz] = spec.source_pos;
    let [mx, my, mz] = spec.mic_pos;
    // With β = 0 only the zero-order image carries energy.
    let order = |l: f64| if beta == 0.0 { 0 } else { (max_dist / (2.0 * l)).ceil() as i64 + 1 };
    let (nx, ny, nz) = (order(lx), order(ly), order(lz));

    let add = |d: f64, reflections: i64, taps: &mut [f64], rng: &mut ChaCha8Rng| {
        let idx = (d * samples_per_meter).round() as usize;
        if idx >= max_len {
            return;
        }
        let mut amp = if reflections == 0 { 1.0 } else { beta.powi(reflections as i32) };
        if amp == 0.0 {
            return;
        }
        if spec.jitter > 0.0 && reflections > 0 {
            amp *= 1.0 + spec.jitter * rng.gen_range(-1.0..1.0);
        }
        taps[idx] += amp / (4.0 * std::f64::consts::PI * d.max(1e-3));
    };

    for u in 0..2i64 {
        for v in 0..2i64 {
            for w in 0..2i64 {
                for l in -nx..=nx {
                    let dx = (1 - 2 * u) as f64 * sx + 2.0 * l as f64 * lx - mx;
                    let rx = (l - u).abs() + l.abs();
                    for m in -ny..=ny {
                        let dy = (1 - 2 * v) as f64 * sy + 2.0 * m as f64 * ly - my;
                        let ry = (m - v).abs() + m.abs();
                        for n in -nz..=nz {
                            let dz = (1 - 2 * w) as f64 * sz + 2.0 * n as f64 * lz - mz;
                            let rz = (n - w).abs() + n.abs();
                            let d = (dx * dx + dy * dy + dz * dz).sqrt();
                            if d < max_dist {
                                add(d, rx + ry + rz, &mut taps, &mut rng);
                            }
                        }
                    }
                }
            }
        }
    }
    let last = taps.iter().rposition(|&h| h != 0.0).map_or(1, |i| i + 1);
    taps.truncate(last);
    Rir::new(taps.into_iter().map(T::lit).collect(), spec.sample_rate)
}

/// Dot product with eight interleaved accumulators. Every convolution in
/// this module goes through this kernel so streaming and batch results are
/// bit-identical.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Direct-form convolution, returning the first `x.len()` samples of `x * h`.
pub fn convolve_direct<T: Real>(x: &[T], h: &[T]) -> Vec<T> {
    let m = h.len();
    let rev: Vec<T> = h.iter().rev().copied().collect();
    let mut padded = vec![T::zero(); m - 1];
    padded.extend_from_slice(x);
    (0..x.len()).map(|n| dot(&rev, &padded[n..n + m])).collect()
}

/// Full-length FFT convolution (`len(x) + len(h) − 1` samples) for offline
/// rendering; not used inside the feedback loop.
pub fn convolve_fft<T: Real>(x: &[T], h: &[T]) -> Vec<T> {
    if x.is_empty() || h.is_empty() {
        return Vec::new();
    }
    let out_len = x.len() + h.len() - 1;
    let n = out_len.next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let load = |v: &[T]| {
        let mut buf = vec![czero::<T>(); n];
        for (b, &s) in buf.iter_mut().zip(v) {
            b.re = s;
        }
        buf
    };
    let (mut a, mut b) = (load(x), load(h));
    fwd.process(&mut a);
    fwd.process(&mut b);
    let mut prod: Vec<Cplx<T>> = a.iter().zip(&b).map(|(p, q)| p * q).collect();
    inv.process(&mut prod);
    let scale = T::one() / T::lit(n as f64);
    prod[..out_len].iter().map(|c| c.re * scale).collect()
}

/// Direct-form convolver that carries `len(h) − 1` samples of input history
/// across calls.
#[derive(Debug, Clone)]
pub struct StreamingConvolver<T> {
    reversed: Vec<T>,
    buf: Vec<T>,
    sample_rate: u32,
}

impl<T: Real> StreamingConvolver<T> {
    pub fn new(rir: &Rir<T>) -> Self {
        Self {
            reversed: rir.taps().iter().rev().copied().collect(),
            buf: vec![T::zero(); rir.len() - 1],
            sample_rate: rir.sample_rate(),
        }
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn process_into(&mut self, chunk: &[T], out: &mut [T]) {
        assert_eq!(chunk.len(), out.len());
        let m = self.reversed.len();
        let hist = m - 1;
        self.buf.truncate(hist);
        self.buf.extend_from_slice(chunk);
        for (n, o) in out.iter_mut().enumerate() {
            *o = dot(&self.reversed, &self.buf[n..n + m]);
        }
        let total = self.buf.len();
        self.buf.copy_within(total - hist.., 0);
    }

    pub fn process(&mut self, chunk: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); chunk.len()];
        self.process_into(chunk, &mut out);
        out
    }

    pub fn convolve_stream(&mut self, chunk: &TimeSignal<T>) -> Result<TimeSignal<T>> {
        if chunk.sample_rate() != self.sample_rate {
            return Err(Error::RateMismatch { expected: self.sample_rate, actual: chunk.sample_rate() });
        }
        TimeSignal::new(self.process(chunk.samples()), self.sample_rate)
    }
}

const RAW_MAGIC: &[u8; 8] = b"HKRIR\0\0\0";
const RAW_VERSION: u32 = 1;

/// Raw layout: 8-byte magic, u32 version, u32 sample rate, u64 tap count,
/// then little-endian f64 taps.
pub fn save_rir_raw<T: Real>(rir: &Rir<T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(RAW_MAGIC)?;
    w.write_all(&RAW_VERSION.to_le_bytes())?;
    w.write_all(&rir.sample_rate.to_le_bytes())?;
    w.write_all(&(rir.len() as u64).to_le_bytes())?;
    for h in rir.taps() {
        w.write_all(&h.as_f64().to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_rir_raw<T: Real>(path: &Path) -> Result<Rir<T>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < 24 || &bytes[..8] != RAW_MAGIC {
        return Err(Error::format("not a raw impulse response file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != RAW_VERSION {
        return Err(Error::format(format!("unsupported impulse response version {version}")));
    }
    let rate = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    let len = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let body = &bytes[24..];
    if body.len() != len * 8 {
        return Err(Error::format(format!("expected {len} taps, found {} bytes", body.len())));
    }
    let taps = body
        .chunks_exact(8)
        .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Rir::new(taps, rate)
}
