//! Random closed-loop scenes: shoebox rooms, RIR pairs, utterances, gain
//! and delay, with disjoint train and test pools.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loopsim::LoopScene;
use crate::room::{default_max_rir_len, generate_rir, min_rt60, Rir, RoomSpec};
use crate::signal::{TimeSignal, DEFAULT_SAMPLE_RATE};
use crate::speech::synth_speech;
use crate::wav::read_wav;

/// How the loudspeaker-to-microphone response is scaled after synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RirNormalization {
    /// Physical `1/(4πr)` amplitudes.
    None,
    UnitEnergy,
    UnitPeak,
}

impl RirNormalization {
    pub fn apply(self, rir: &Rir<f64>) -> Rir<f64> {
        match self {
            RirNormalization::None => rir.clone(),
            RirNormalization::UnitEnergy => rir.normalized_energy(),
            RirNormalization::UnitPeak => rir.normalized_peak(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub sample_rate: u32,
    pub gain: [f64; 2],
    /// System delay range in seconds.
    pub delay: [f64; 2],
    pub rt60: [f64; 2],
    pub room_min: [f64; 3],
    pub room_max: [f64; 3],
    /// Smallest distance between any two of loudspeaker, microphone and
    /// talker, and from each of them to a wall.
    pub min_separation: f64,
    pub feedback_normalization: RirNormalization,
    /// Scene length in seconds.
    pub duration: f64,
    /// Number of distinct rooms and of synthetic utterances in the pool.
    pub pool_size: usize,
    /// Fraction of rooms and utterances held out for testing.
    pub test_fraction: f64,
    /// WAV files to draw utterances from; synthetic speech when empty.
    pub corpus: Vec<PathBuf>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            sample_rate: DEFAULT_SAMPLE_RATE,
            gain: [1.0, 3.0],
            delay: [0.15, 0.25],
            rt60: [0.0, 0.6],
            room_min: [3.0, 3.0, 2.5],
            room_max: [8.0, 6.0, 3.5],
            min_separation: 0.5,
            feedback_normalization: RirNormalization::UnitEnergy,
            duration: 4.0,
            pool_size: 200,
            test_fraction: 0.2,
            corpus: Vec::new(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |r: [f64; 2], lo: f64| r[0].is_finite() && r[1].is_finite() && r[0] >= lo && r[0] <= r[1];
        let ok = self.sample_rate > 0
            && range_ok(self.gain, 0.0)
            && range_ok(self.delay, 0.0)
            && self.delay[0] > 0.0
            && range_ok(self.rt60, 0.0)
            && (self.rt60[1] == 0.0 || self.rt60[1] > min_rt60(self.room_min) * 1.01)
            && (0..3).all(|i| self.room_min[i] > 2.0 * self.min_separation && self.room_min[i] <= self.room_max[i])
            && self.min_separation > 0.0
            && self.duration > 0.0
            && self.pool_size >= 2
            && self.test_fraction > 0.0
            && self.test_fraction < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid scene sampler configuration {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

/// Identifies one sampled scene; regenerating from it is deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneDraw {
    pub room: usize,
    pub utterance: usize,
    pub gain: f64,
    pub delay: f64,
    pub rt60: f64,
    pub seed: u64,
}

/// The geometry drawn for one room of the pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomLayout {
    pub dimensions: [f64; 3],
    pub loudspeaker: [f64; 3],
    pub mic: [f64; 3],
    pub talker: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct SceneSampler {
    cfg: SamplerConfig,
    seed: u64,
    rng: ChaCha8Rng,
    corpus: Vec<TimeSignal<f64>>,
}

fn split_bounds(n: usize, test_fraction: f64) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    (0..n - test, n - test..n)
}

impl SceneSampler {
    /// Loads the corpus (if any) and checks it covers both splits.
    pub fn new(cfg: SamplerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let corpus = cfg
            .corpus
            .iter()
            .map(|p| read_wav::<f64>(p, Some(cfg.sample_rate)))
            .collect::<Result<Vec<_>>>()?;
        if !cfg.corpus.is_empty() && corpus.len() < 2 {
            return Err(Error::EmptyPool("a corpus needs at least two utterances to hold one out"));
        }
        Ok(Self { rng: ChaCha8Rng::seed_from_u64(seed), cfg, seed, corpus })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    fn utterance_count(&self) -> usize {
        if self.corpus.is_empty() {
            self.cfg.pool_size
        } else {
            self.corpus.len()
        }
    }

    /// Room and utterance index ranges of a split. The two splits never
    /// share a room or an utterance.
    pub fn pools(&self, split: Split) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (rtr, rte) = split_bounds(self.cfg.pool_size, self.cfg.test_fraction);
        let (utr, ute) = split_bounds(self.utterance_count(), self.cfg.test_fraction);
        match split {
            Split::Train => (rtr, utr),
            Split::Test => (rte, ute),
        }
    }

    /// Draws the next scene of a split from the sampler's own stream.
    pub fn draw(&mut self, split: Split) -> SceneDraw {
        let (rooms, utts) = self.pools(split);
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng.gen());
        self.draw_with(&mut rng, rooms, utts)
    }

    /// A fixed list of scenes of a split, independent of the sampler's stream.
    pub fn fixed_set(&self, split: Split, count: usize, seed: u64) -> Vec<SceneDraw> {
        let (rooms, utts) = self.pools(split);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf1ed_5e75);
        (0..count).map(|_| self.draw_with(&mut rng, rooms.clone(), utts.clone())).collect()
    }

    fn draw_with(&self, rng: &mut ChaCha8Rng, rooms: std::ops::Range<usize>, utts: std::ops::Range<usize>) -> SceneDraw {
        let c = &self.cfg;
        let between = |rng: &mut ChaCha8Rng, r: [f64; 2]| if r[1] > r[0] { rng.gen_range(r[0]..=r[1]) } else { r[0] };
        // a room cannot decay faster than with fully absorbing walls, so
        // infeasible (room, rt60) pairs are redrawn together
        let (room, rt60) = loop {
            let room = rng.gen_range(rooms.clone());
            let rt60 = between(rng, c.rt60);
            if rt60 == 0.0 || rt60 > min_rt60(self.layout(room).dimensions) * 1.01 {
                break (room, rt60);
            }
        };
        SceneDraw {
            room,
            utterance: rng.gen_range(utts),
            gain: between(rng, c.gain),
            delay: between(rng, c.delay),
            rt60,
            seed: rng.gen(),
        }
    }

    /// Room geometry of pool entry `room`.
    pub fn layout(&self, room: usize) -> RoomLayout {
        let c = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9e37_79b9).wrapping_add(room as u64) ^ 0x0005_1ab5);
        let dims: [f64; 3] = std::array::from_fn(|i| {
            if c.room_max[i] > c.room_min[i] {
                rng.gen_range(c.room_min[i]..c.room_max[i])
            } else {
                c.room_min[i]
            }
        });
        let m = c.min_separation;
        loop {
            let mut point = || -> [f64; 3] { std::array::from_fn(|i| rng.gen_range(m..dims[i] - m)) };
            let (ls, mic, talker) = (point(), point(), point());
            let d = |a: [f64; 3], b: [f64; 3]| a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            if d(ls, mic) >= m && d(talker, mic) >= m && d(ls, talker) >= m {
                return RoomLayout { dimensions: dims, loudspeaker: ls, mic, talker };
            }
        }
    }

    /// The loudspeaker and talker responses of a room at a given RT60.
    pub fn rir_pair(&self, room: usize, rt60: f64) -> Result<(Rir<f64>, Rir<f64>)> {
        let lay = self.layout(room);
        let spec = |src: [f64; 3]| RoomSpec {
            sample_rate: self.cfg.sample_rate,
            max_rir_len: default_max_rir_len(self.cfg.sample_rate),
            ..RoomSpec::new(lay.dimensions, src, lay.mic, rt60)
        };
        let feedback = generate_rir::<f64>(&spec(lay.loudspeaker))?;
        let near = generate_rir::<f64>(&spec(lay.talker))?;
        Ok((self.cfg.feedback_normalization.apply(&feedback), near.normalized_peak()))
    }

    pub fn utterance(&self, index: usize) -> TimeSignal<f64> {
        if self.corpus.is_empty() {
            synth_speech(self.seed.wrapping_mul(0x2545_f491).wrapping_add(index as u64), self.cfg.duration)
        } else {
            self.corpus[index].clone()
        }
    }

    /// Materializes a scene; corpus utterances are looped or cut to the
    /// configured duration.
    pub fn build(&self, draw: &SceneDraw) -> Result<LoopScene<f64>> {
        let (feedback_rir, near_rir) = self.rir_pair(draw.room, draw.rt60)?;
        let src = self.utterance(draw.utterance);
        let len = (self.cfg.duration * self.cfg.sample_rate as f64).round() as usize;
        let near_end = if src.len() == len {
            src
        } else if src.is_empty() {
            return Err(Error::EmptyPool("utterance has no samples"));
        } else {
            TimeSignal::new((0..len).map(|i| src.samples()[i % src.len()]).collect(), self.cfg.sample_rate)?
        };
        Ok(LoopScene { near_end, feedback_rir, near_rir: Some(near_rir), gain: draw.gain, delay: draw.delay, seed: draw.seed })
    }

    /// Same scene with another gain.
    pub fn build_with_gain(&self, draw: &SceneDraw, gain: f64) -> Result<LoopScene<f64>> {
        self.build(&SceneDraw { gain, ..*draw })
    }
}
