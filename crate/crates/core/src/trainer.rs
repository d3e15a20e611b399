//! Streaming training inside the closed loop.
//!
//! Each scene runs frame by frame through the loop simulator with the
//! learned filter in place. Every `bptt_frames` frames the L1 magnitude
//! loss against the target frames is backpropagated through the recorded
//! window, the carried filter and network state is detached, and the
//! optimizer steps on the gradient averaged over the scenes of the batch.
//! A window in which the howling detector fires is discarded and ends its
//! scene; so does a window whose loss or gradient is not finite.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loopsim::{HowlDetectorConfig, HowlEvent, LoopConfig, LoopRunner, LoopScene};
use crate::metrics::{evaluate, mean_std, AhsVariant, EvalSetup};
use crate::neural_kalman::{backward_window, hybrid_step, FrameTape, HybridConfig, HybridState, Nets};
use crate::parallel;
use crate::real::Cplx;
use crate::scene::{SceneSampler, Split};
use crate::signal::{Stft, StftConfig, StreamingAnalyzer, StreamingSynthesizer};

const VALIDATION_SEED_SALT: u64 = 0x7a11_da7e;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam,
    /// Plain gradient descent.
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Training scenes, drawn once and reshuffled every epoch.
    pub scenes: usize,
    /// Seconds of each scene to run.
    pub duration: f64,
    pub bptt_frames: usize,
    pub learning_rate: f64,
    /// Global gradient-norm limit; infinity disables clipping.
    pub clip_norm: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Multiplies the loss before differentiation.
    pub loss_scale: f64,
    pub seed: u64,
    /// Scenes scored after every epoch to pick the kept weights; 0 keeps
    /// the last weights.
    pub validation_scenes: usize,
    pub validation_gain: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            scenes: 32,
            duration: 4.0,
            bptt_frames: 32,
            learning_rate: 1e-3,
            clip_norm: 5.0,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            loss_scale: 1.0,
            seed: 0,
            validation_scenes: 8,
            validation_gain: 2.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epochs > 0
            && self.batch_size > 0
            && self.duration > 0.0
            && self.bptt_frames > 0
            && self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && self.clip_norm > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.loss_scale > 0.0
            && self.validation_gain >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid training configuration {self:?}")))
        }
    }
}

/// Loop and filter settings the networks are trained inside.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainSetup {
    pub hybrid: HybridConfig,
    pub stft: StftConfig,
    pub loop_cfg: LoopConfig,
    pub detector: HowlDetectorConfig,
}

impl TrainSetup {
    fn eval_setup(&self, duration: f64) -> EvalSetup {
        EvalSetup { stft: self.stft, loop_cfg: self.loop_cfg, detector: self.detector, duration }
    }
}

/// Mean over frames and bins of `|Ŝ_mag − S_mag|`.
pub fn l1_spectral_loss(estimate: &[Vec<f64>], target: &[Vec<f64>]) -> Result<f64> {
    if estimate.len() != target.len() || estimate.iter().zip(target).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::shape("loss inputs differ in shape"));
    }
    let count: usize = estimate.iter().map(Vec::len).sum();
    if count == 0 {
        return Err(Error::shape("loss over zero elements"));
    }
    let total: f64 = estimate.iter().zip(target).flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs())).sum();
    Ok(total / count as f64)
}

/// The loss of complex estimates against target magnitudes, with its
/// gradient as `∂L/∂Re + i·∂L/∂Im` per bin.
fn loss_and_gradient(shat: &[&[Cplx<f64>]], target: &[Vec<f64>], scale: f64) -> (f64, Vec<Vec<Cplx<f64>>>) {
    let count = shat.iter().map(|f| f.len()).sum::<usize>() as f64;
    let mut loss = 0.0;
    let grads = shat
        .iter()
        .zip(target)
        .map(|(frame, t)| {
            frame
                .iter()
                .zip(t)
                .map(|(s, &t)| {
                    let m = s.norm();
                    let d = m - t;
                    loss += d.abs();
                    if m > 0.0 && d != 0.0 {
                        *s * (d.signum() * scale / (count * m))
                    } else {
                        Cplx::new(0.0, 0.0)
                    }
                })
                .collect()
        })
        .collect();
    (loss / count, grads)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    clip_norm: f64,
    steps: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig, param_count: usize) -> Self {
        Self {
            kind: cfg.optimizer,
            learning_rate: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            clip_norm: cfg.clip_norm,
            steps: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update in place; the gradient is clipped first.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::shape(format!("optimizer holds {} parameters", self.m.len())));
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let scale = if norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };
        self.steps += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g * scale;
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (self.beta1, self.beta2);
                let c1 = 1.0 - b1.powi(self.steps as i32);
                let c2 = 1.0 - b2.powi(self.steps as i32);
                for i in 0..params.len() {
                    let g = grad[i] * scale;
                    self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
                    self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
                    params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.epsilon);
                }
            }
        }
        Ok(())
    }
}

/// Result of advancing one scene by one window.
#[derive(Debug, Clone, PartialEq)]
pub enum WindowOutcome {
    Complete { start_frame: usize, frames: usize, loss: f64, gradient: Vec<f64> },
    Howl { start_frame: usize, event: HowlEvent },
    NonFinite { start_frame: usize },
    End,
}

/// One scene being trained on: the loop, the filter state and the
/// streaming transforms of microphone, loudspeaker and target.
#[derive(Debug, Clone)]
pub struct SceneRollout {
    runner: LoopRunner<f64>,
    state: HybridState<f64>,
    mic: StreamingAnalyzer<f64>,
    loudspeaker: StreamingAnalyzer<f64>,
    target: StreamingAnalyzer<f64>,
    synth: StreamingSynthesizer<f64>,
    frames: usize,
    finished: bool,
}

impl SceneRollout {
    pub fn new(scene: &LoopScene<f64>, nets: &Nets<f64>, setup: &TrainSetup, duration: f64) -> Result<Self> {
        if setup.stft.num_bins() != setup.hybrid.fdkf.num_bins {
            return Err(Error::config("filter and transform disagree on the number of bins"));
        }
        let stft = Stft::new(setup.stft)?;
        let runner =
            LoopRunner::new(scene, &setup.loop_cfg, &setup.detector, setup.stft.hop, setup.stft.latency(), duration)?;
        Ok(Self {
            runner,
            state: HybridState::new(&setup.hybrid, Some(nets))?,
            mic: StreamingAnalyzer::new(stft.clone()),
            loudspeaker: StreamingAnalyzer::new(stft.clone()),
            target: StreamingAnalyzer::new(stft.clone()),
            synth: StreamingSynthesizer::new(stft),
            frames: 0,
            finished: false,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn clamp_events(&self) -> u64 {
        self.state.kalman.clamp_events()
    }

    /// Runs up to `window` frames with the given weights and differentiates
    /// the window loss. State entering the window is a constant.
    pub fn run_window(&mut self, nets: &Nets<f64>, setup: &TrainSetup, window: usize, loss_scale: f64) -> Result<WindowOutcome> {
        if self.finished {
            return Ok(WindowOutcome::End);
        }
        let start_frame = self.frames;
        let mut tapes: Vec<FrameTape<f64>> = Vec::with_capacity(window);
        let mut targets = Vec::with_capacity(window);
        while tapes.len() < window {
            let Some(block) = self.runner.begin_block() else {
                self.finished = true;
                break;
            };
            let y = self.mic.push(&block.mic);
            let x = self.loudspeaker.push(&block.reference);
            let s = self.target.push(&block.target);
            let mut tape = FrameTape::default();
            let shat = hybrid_step(Some(nets), &setup.hybrid, &mut self.state, &y.bins, &x.bins, Some(&mut tape));
            let out = self.synth.push(&shat);
            self.frames += 1;
            tapes.push(tape);
            targets.push(s.magnitudes());
            if let Some(event) = self.runner.finish_block(&out) {
                self.finished = true;
                return Ok(WindowOutcome::Howl { start_frame, event });
            }
        }
        if tapes.is_empty() {
            return Ok(WindowOutcome::End);
        }
        let shats: Vec<&[Cplx<f64>]> = tapes.iter().map(|t| t.shat()).collect();
        let (loss, g_shat) = loss_and_gradient(&shats, &targets, loss_scale);
        let gradient = backward_window(nets, &setup.hybrid, &tapes, &g_shat)?.flat();
        if !loss.is_finite() || gradient.iter().any(|g| !g.is_finite()) || !self.state.is_finite() {
            self.finished = true;
            return Ok(WindowOutcome::NonFinite { start_frame });
        }
        Ok(WindowOutcome::Complete { start_frame, frames: tapes.len(), loss, gradient })
    }
}

/// What happened to one scene during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainEvent {
    pub epoch: usize,
    pub scene: usize,
    pub frames: usize,
    /// Mean of the completed window losses; `None` when no window completed.
    pub loss: Option<f64>,
    pub window_losses: Vec<f64>,
    pub howl_abort: bool,
    /// Output sample at which the howling detector fired.
    pub howl_sample: Option<usize>,
    /// First frame of the discarded window, when the scene was cut short.
    pub aborted_window_start: Option<usize>,
    pub clamp_events: u64,
    pub nan_guard: usize,
}

/// Trains on a batch of scenes in lockstep: every scene advances one
/// window, then the optimizer steps once on the mean gradient of the
/// windows that completed. Rollouts run in parallel; the reduction is in
/// scene order, so results do not depend on the thread count.
pub fn train_batch(
    nets: &mut Nets<f64>,
    optimizer: &mut Optimizer,
    scenes: &[(usize, &LoopScene<f64>)],
    epoch: usize,
    cfg: &TrainConfig,
    setup: &TrainSetup,
) -> Result<Vec<TrainEvent>> {
    cfg.validate()?;
    if !setup.hybrid.uses_nets() {
        return Err(Error::config("nothing to train: the configuration uses no network"));
    }
    let mut rollouts = scenes
        .iter()
        .map(|(_, s)| SceneRollout::new(s, nets, setup, cfg.duration))
        .collect::<Result<Vec<_>>>()?;
    let mut events: Vec<TrainEvent> = scenes
        .iter()
        .map(|&(id, _)| TrainEvent {
            epoch,
            scene: id,
            frames: 0,
            loss: None,
            window_losses: Vec::new(),
            howl_abort: false,
            howl_sample: None,
            aborted_window_start: None,
            clamp_events: 0,
            nan_guard: 0,
        })
        .collect();
    let pool = parallel::pool()?;
    let n = nets.param_count();
    loop {
        let current: &Nets<f64> = nets;
        let outcomes = pool.install(|| {
            rollouts
                .par_iter_mut()
                .map(|r| r.run_window(current, setup, cfg.bptt_frames, cfg.loss_scale))
                .collect::<Result<Vec<_>>>()
        })?;
        if outcomes.iter().all(|o| *o == WindowOutcome::End) {
            break;
        }
        let mut sum = vec![0.0; n];
        let mut contributors = 0usize;
        for (ev, outcome) in events.iter_mut().zip(outcomes) {
            match outcome {
                WindowOutcome::Complete { loss, gradient, .. } => {
                    sum.iter_mut().zip(&gradient).for_each(|(s, g)| *s += g);
                    contributors += 1;
                    ev.window_losses.push(loss);
                }
                WindowOutcome::Howl { start_frame, event } => {
                    ev.howl_abort = true;
                    ev.howl_sample = Some(event.detected_at);
                    ev.aborted_window_start = Some(start_frame);
                }
                WindowOutcome::NonFinite { start_frame } => {
                    ev.nan_guard += 1;
                    ev.aborted_window_start = Some(start_frame);
                }
                WindowOutcome::End => {}
            }
        }
        if contributors > 0 {
            let inv = 1.0 / contributors as f64;
            sum.iter_mut().for_each(|s| *s *= inv);
            let mut params = nets.flat_params();
            let mut trial = optimizer.clone();
            trial.step(&mut params, &sum)?;
            if params.iter().all(|p| p.is_finite()) {
                nets.set_flat_params(&params)?;
                *optimizer = trial;
            } else {
                events.iter_mut().for_each(|e| e.nan_guard += 1);
            }
        }
    }
    for (ev, r) in events.iter_mut().zip(&rollouts) {
        ev.frames = r.frames();
        ev.clamp_events = r.clamp_events();
        if !ev.window_losses.is_empty() {
            ev.loss = Some(ev.window_losses.iter().sum::<f64>() / ev.window_losses.len() as f64);
        }
    }
    Ok(events)
}

/// One scene as a batch of one.
pub fn train_scene(
    nets: &mut Nets<f64>,
    optimizer: &mut Optimizer,
    scene: &LoopScene<f64>,
    cfg: &TrainConfig,
    setup: &TrainSetup,
) -> Result<TrainEvent> {
    Ok(train_batch(nets, optimizer, &[(0, scene)], 0, cfg, setup)?.remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub epoch: usize,
    pub sdr_mean: f64,
    pub sdr_std: f64,
    pub howl_count: usize,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LogRecord {
    Scene(TrainEvent),
    Validation(ValidationRecord),
}

impl LogRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log records serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub events: Vec<TrainEvent>,
    pub validation: Vec<ValidationRecord>,
    /// Epoch whose weights were kept (0: the initial weights).
    pub best_epoch: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best weights by validation SDR, or the last ones without validation.
    pub nets: Nets<f64>,
    pub optimizer: Optimizer,
    pub log: TrainLog,
}

/// Full training run: `epochs` passes over a fixed set of training scenes,
/// with validation after each epoch on separate draws from the training
/// pool. `on_record` sees every log record as it is produced.
pub fn train(
    nets: Nets<f64>,
    sampler: &SceneSampler,
    cfg: &TrainConfig,
    setup: &TrainSetup,
    on_record: &mut dyn FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.scenes == 0 {
        return Err(Error::EmptyPool("training scene"));
    }
    let (rooms, utterances) = sampler.pools(Split::Train);
    if rooms.is_empty() || utterances.is_empty() {
        return Err(Error::EmptyPool("training scene"));
    }
    let draws = sampler.fixed_set(Split::Train, cfg.scenes, cfg.seed);
    let scenes = parallel::install(|| draws.par_iter().map(|d| sampler.build(d)).collect::<Result<Vec<_>>>())??;
    let val_draws = sampler.fixed_set(Split::Train, cfg.validation_scenes, cfg.seed ^ VALIDATION_SEED_SALT);
    let variant = AhsVariant::Hybrid(setup.hybrid);
    let eval_setup = setup.eval_setup(cfg.duration);
    let validate = |nets: &Nets<f64>, epoch: usize| -> Result<ValidationRecord> {
        let report = evaluate(sampler, &val_draws, &[variant], &[cfg.validation_gain], &eval_setup, Some(Arc::new(nets.clone())))?;
        let sdrs: Vec<f64> = report.rows.iter().map(|r| r.sdr).collect();
        let (sdr_mean, sdr_std) = mean_std(&sdrs);
        Ok(ValidationRecord { epoch, sdr_mean, sdr_std, howl_count: report.rows.iter().filter(|r| r.howl).count() })
    };

    let mut nets = nets;
    let mut optimizer = Optimizer::new(cfg, nets.param_count());
    let mut log = TrainLog::default();
    let mut best: Option<(f64, Nets<f64>)> = None;
    if cfg.validation_scenes > 0 {
        let v = validate(&nets, 0)?;
        on_record(&LogRecord::Validation(v.clone()));
        best = Some((v.sdr_mean, nets.clone()));
        log.validation.push(v);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(usize, &LoopScene<f64>)> = chunk.iter().map(|&i| (i, &scenes[i])).collect();
            for ev in train_batch(&mut nets, &mut optimizer, &batch, epoch, cfg, setup)? {
                if !nets.is_finite() {
                    return Err(Error::NonFinite("network weights"));
                }
                on_record(&LogRecord::Scene(ev.clone()));
                log.events.push(ev);
            }
        }
        if cfg.validation_scenes > 0 {
            let v = validate(&nets, epoch)?;
            on_record(&LogRecord::Validation(v.clone()));
            if best.as_ref().is_none_or(|(s, _)| v.sdr_mean > *s) {
                best = Some((v.sdr_mean, nets.clone()));
                log.best_epoch = epoch;
            }
            log.validation.push(v);
        } else {
            log.best_epoch = epoch;
        }
    }
    let nets = match best {
        Some((_, b)) => b,
        None => nets,
    };
    Ok(TrainOutcome { nets, optimizer, log })
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"HKCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Weights plus optimizer state, for resuming or for inference.
///
/// Layout (little-endian): `HKCK`, u32 version, u64 epoch, u8 optimizer
/// kind (0 Adam, 1 SGD), u64 step count, u64 n, n f64 first moments, n f64
/// second moments, then the three weight records of [`Nets::encode`].
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: u64,
    pub nets: Nets<f64>,
    pub optimizer: Optimizer,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let o = &self.optimizer;
        let mut b = Vec::new();
        b.extend_from_slice(CHECKPOINT_MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        b.extend_from_slice(&self.epoch.to_le_bytes());
        b.push(match o.kind {
            OptimizerKind::Adam => 0,
            OptimizerKind::Sgd => 1,
        });
        b.extend_from_slice(&o.steps.to_le_bytes());
        b.extend_from_slice(&(o.m.len() as u64).to_le_bytes());
        for v in o.m.iter().chain(&o.v) {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&self.nets.encode());
        b
    }

    /// Hyperparameters other than the optimizer kind come from `cfg`.
    pub fn decode(bytes: &[u8], cfg: &TrainConfig) -> Result<Self> {
        let mut pos = 0usize;
        fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
            let s = bytes.get(*pos..pos.saturating_add(n)).ok_or_else(|| Error::format("checkpoint is truncated"))?;
            *pos += n;
            Ok(s)
        }
        let u64_at = |pos: &mut usize| -> Result<u64> { Ok(u64::from_le_bytes(take(bytes, pos, 8)?.try_into().unwrap())) };
        if take(bytes, &mut pos, 4)? != CHECKPOINT_MAGIC {
            return Err(Error::format("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(take(bytes, &mut pos, 4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let epoch = u64_at(&mut pos)?;
        let kind = match take(bytes, &mut pos, 1)?[0] {
            0 => OptimizerKind::Adam,
            1 => OptimizerKind::Sgd,
            k => return Err(Error::format(format!("unknown optimizer id {k}"))),
        };
        let steps = u64_at(&mut pos)?;
        let n = u64_at(&mut pos)? as usize;
        let mut moments = || -> Result<Vec<f64>> {
            let raw = take(bytes, &mut pos, n.checked_mul(8).ok_or_else(|| Error::format("checkpoint size overflows"))?)?;
            Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let m = moments()?;
        let v = moments()?;
        let (nets, used) = Nets::decode(&bytes[pos..])?;
        if pos + used != bytes.len() {
            return Err(Error::format("trailing bytes after checkpoint"));
        }
        if nets.param_count() != n {
            return Err(Error::format(format!("optimizer state for {n} parameters, networks have {}", nets.param_count())));
        }
        let optimizer = Optimizer { kind, steps, m, v, ..Optimizer::new(cfg, 0) };
        Ok(Self { epoch, nets, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.encode())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, cfg: &TrainConfig) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::decode(&bytes, cfg)
    }
}

/// Reads networks from either a checkpoint or a bare weight file.
pub fn load_nets(path: &Path) -> Result<Nets<f64>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.starts_with(CHECKPOINT_MAGIC) {
        Ok(Checkpoint::decode(&bytes, &TrainConfig::default())?.nets)
    } else {
        let (nets, used) = Nets::decode(&bytes)?;
        if used != bytes.len() {
            return Err(Error::format("trailing bytes after weights"));
        }
        Ok(nets)
    }
}
