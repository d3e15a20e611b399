//! Objective scores (plain SDR, log-spectral distance), variant sweeps with
//! mean ± std summaries, and spectrogram images.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fdkf::FdkfConfig;
use crate::loopsim::{run_scene, HowlDetectorConfig, IdentityAhs, LoopConfig, SceneResult};
use crate::neural_kalman::{CovarianceSource, HybridConfig, KalmanAhs, Nets, ReferenceSource};
use crate::parallel;
use crate::real::Real;
use crate::scene::{SceneDraw, SceneSampler};
use crate::signal::{Stft, StftConfig, TimeSignal};

pub const SDR_CAP: f64 = 60.0;
pub const SDR_FLOOR: f64 = -99.0;
pub const LSD_DELTA: f64 = 1e-8;
/// Level range of exported spectrograms, in dB relative to a full-scale sinusoid.
pub const SPECTROGRAM_RANGE_DB: [f64; 2] = [-80.0, 0.0];

/// `10·log10(Σs² / Σ(s − ŝ)²)`, capped at +60 dB and floored at −99 dB
/// (silent reference). Not scale-invariant: `ŝ = 0.5·s` scores 6.02 dB.
pub fn sdr<T: Real>(reference: &[T], estimate: &[T]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::shape(format!("reference has {} samples, estimate {}", reference.len(), estimate.len())));
    }
    let signal: f64 = reference.iter().map(|s| s.as_f64().powi(2)).sum();
    let residual: f64 = reference.iter().zip(estimate).map(|(s, e)| (s.as_f64() - e.as_f64()).powi(2)).sum();
    if !signal.is_finite() || !residual.is_finite() {
        return Err(Error::NonFinite("signal-to-distortion ratio"));
    }
    if signal == 0.0 {
        return Ok(SDR_FLOOR);
    }
    if residual == 0.0 {
        return Ok(SDR_CAP);
    }
    Ok((10.0 * (signal / residual).log10()).clamp(SDR_FLOOR, SDR_CAP))
}

/// Mean over frames of the RMS over bins of the log-magnitude difference.
pub fn lsd<T: Real>(reference: &[T], estimate: &[T], cfg: &StftConfig) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::shape(format!("reference has {} samples, estimate {}", reference.len(), estimate.len())));
    }
    let stft = Stft::<f64>::new(*cfg)?;
    let to_f64 = |x: &[T]| TimeSignal::new(x.iter().map(|v| v.as_f64()).collect(), 1);
    let a = stft.stft(&to_f64(reference)?)?;
    let b = stft.stft(&to_f64(estimate)?)?;
    let db = |c: &num_complex::Complex<f64>| 20.0 * (c.norm() + LSD_DELTA).log10();
    let total: f64 = a
        .iter()
        .zip(&b)
        .map(|(fa, fb)| {
            let ms = fa.bins.iter().zip(&fb.bins).map(|(x, y)| (db(x) - db(y)).powi(2)).sum::<f64>() / fa.len() as f64;
            ms.sqrt()
        })
        .sum();
    Ok(total / a.len() as f64)
}

/// A suppressor to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AhsVariant {
    /// No suppression: the microphone goes straight to the loudspeaker.
    Identity,
    Hybrid(HybridConfig),
}

impl AhsVariant {
    pub fn kalman(fdkf: FdkfConfig) -> Self {
        AhsVariant::Hybrid(HybridConfig::classical(fdkf))
    }

    /// The learned filter; `mask` and `cov` switch the learned reference
    /// and the learned covariances on or off.
    pub fn neural(fdkf: FdkfConfig, mask: bool, cov: bool, stop_grad_filter: bool) -> Self {
        AhsVariant::Hybrid(HybridConfig {
            fdkf,
            reference: if mask { ReferenceSource::Masked } else { ReferenceSource::Raw },
            covariance: if cov { CovarianceSource::Learned } else { CovarianceSource::Classical },
            stop_grad_filter,
            ..Default::default()
        })
    }

    pub fn label(&self) -> String {
        match self {
            AhsVariant::Identity => "none".into(),
            AhsVariant::Hybrid(c) => match (c.reference, c.covariance) {
                (ReferenceSource::Raw, CovarianceSource::Classical) => "kalman".into(),
                (ReferenceSource::Masked, CovarianceSource::Learned) => "neuralkalman".into(),
                (ReferenceSource::Raw, CovarianceSource::Learned) => "neuralkalman-no-mask".into(),
                (ReferenceSource::Masked, CovarianceSource::Classical) => "neuralkalman-no-cov".into(),
            },
        }
    }

    pub fn needs_nets(&self) -> bool {
        matches!(self, AhsVariant::Hybrid(c) if c.uses_nets())
    }
}

/// Loop settings shared by every evaluated run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSetup {
    pub stft: StftConfig,
    pub loop_cfg: LoopConfig,
    pub detector: HowlDetectorConfig,
    /// Seconds of each scene to simulate.
    pub duration: f64,
}

impl Default for EvalSetup {
    fn default() -> Self {
        Self {
            stft: StftConfig::default(),
            loop_cfg: LoopConfig::default(),
            detector: HowlDetectorConfig::default(),
            duration: 4.0,
        }
    }
}

/// Runs one suppressor on one scene in the closed loop.
pub fn run_variant(
    scene: &crate::loopsim::LoopScene<f64>,
    variant: &AhsVariant,
    setup: &EvalSetup,
    nets: Option<Arc<Nets<f64>>>,
) -> Result<SceneResult<f64>> {
    match variant {
        AhsVariant::Identity => {
            let mut ahs = IdentityAhs::new(setup.stft.hop);
            run_scene(scene, &setup.loop_cfg, &mut ahs, &setup.detector, setup.duration)
        }
        AhsVariant::Hybrid(cfg) => {
            let nets = if cfg.uses_nets() { nets } else { None };
            let mut ahs = KalmanAhs::new(setup.stft, *cfg, nets)?;
            run_scene(scene, &setup.loop_cfg, &mut ahs, &setup.detector, setup.duration)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub variant: String,
    pub gain: f64,
    pub scene: usize,
    pub sdr: f64,
    pub lsd: f64,
    pub howl: bool,
    /// Sample at which the howling detector fired.
    pub howl_at: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub variant: String,
    pub gain: f64,
    pub scenes: usize,
    pub sdr_mean: f64,
    pub sdr_std: f64,
    pub lsd_mean: f64,
    pub lsd_std: f64,
    pub howl_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub summary: Vec<EvalSummary>,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl EvalReport {
    /// Builds the per-(variant, gain) summaries from the rows, in order of
    /// first appearance.
    pub fn from_rows(rows: Vec<EvalRow>) -> Self {
        let mut keys: Vec<(String, f64)> = Vec::new();
        for r in &rows {
            if !keys.iter().any(|(v, g)| *v == r.variant && *g == r.gain) {
                keys.push((r.variant.clone(), r.gain));
            }
        }
        let summary = keys
            .into_iter()
            .map(|(variant, gain)| {
                let group: Vec<&EvalRow> = rows.iter().filter(|r| r.variant == variant && r.gain == gain).collect();
                let sdrs: Vec<f64> = group.iter().map(|r| r.sdr).collect();
                let lsds: Vec<f64> = group.iter().map(|r| r.lsd).collect();
                let (sdr_mean, sdr_std) = mean_std(&sdrs);
                let (lsd_mean, lsd_std) = mean_std(&lsds);
                EvalSummary {
                    variant,
                    gain,
                    scenes: group.len(),
                    sdr_mean,
                    sdr_std,
                    lsd_mean,
                    lsd_std,
                    howl_count: group.iter().filter(|r| r.howl).count(),
                }
            })
            .collect();
        Self { rows, summary }
    }

    pub fn summary_for(&self, variant: &str, gain: f64) -> Option<&EvalSummary> {
        self.summary.iter().find(|s| s.variant == variant && s.gain == gain)
    }

    pub fn rows_csv(&self) -> String {
        let mut s = String::from("variant,gain,scene,sdr_db,lsd_db,howl,howl_at\n");
        for r in &self.rows {
            let at = r.howl_at.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{:.6},{:.6},{},{}", r.variant, r.gain, r.scene, r.sdr, r.lsd, r.howl, at);
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("variant,gain,scenes,sdr_mean_db,sdr_std_db,lsd_mean_db,lsd_std_db,howl_count\n");
        for g in &self.summary {
            let _ = writeln!(
                s,
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{}",
                g.variant, g.gain, g.scenes, g.sdr_mean, g.sdr_std, g.lsd_mean, g.lsd_std, g.howl_count
            );
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::format(e.to_string()))
    }
}

/// Scores one finished run against its target.
pub fn score(result: &SceneResult<f64>, stft: &StftConfig) -> Result<(f64, f64)> {
    Ok((sdr(&result.target, &result.output)?, lsd(&result.target, &result.output, stft)?))
}

/// Runs every variant on every scene at every gain. Rows come out ordered
/// by variant, then gain, then scene, whatever the thread count.
pub fn evaluate(
    sampler: &SceneSampler,
    draws: &[SceneDraw],
    variants: &[AhsVariant],
    gains: &[f64],
    setup: &EvalSetup,
    nets: Option<Arc<Nets<f64>>>,
) -> Result<EvalReport> {
    if variants.iter().any(|v| v.needs_nets()) && nets.is_none() {
        return Err(Error::config("a learned variant needs trained networks"));
    }
    let jobs: Vec<(&AhsVariant, f64, usize)> = variants
        .iter()
        .flat_map(|v| gains.iter().flat_map(move |&g| (0..draws.len()).map(move |i| (v, g, i))))
        .collect();
    let rows = parallel::install(|| {
        jobs.par_iter()
            .map(|&(variant, gain, i)| {
                let scene = sampler.build_with_gain(&draws[i], gain)?;
                let result = run_variant(&scene, variant, setup, nets.clone())?;
                let (sdr, lsd) = score(&result, &setup.stft)?;
                Ok(EvalRow {
                    variant: variant.label(),
                    gain,
                    scene: i,
                    sdr,
                    lsd,
                    howl: result.howl_event.is_some(),
                    howl_at: result.howl_event.map(|e| e.detected_at),
                })
            })
            .collect::<Result<Vec<_>>>()
    })??;
    Ok(EvalReport::from_rows(rows))
}

/// Log-magnitude spectrogram as a binary graymap: one column per frame,
/// low frequencies at the bottom, black at −80 dB and white at 0 dB, where
/// 0 dB is the level of a full-scale sinusoid centred on a bin.
pub fn write_spectrogram_pgm<T: Real>(path: &Path, samples: &[T], cfg: &StftConfig) -> Result<()> {
    let stft = Stft::<f64>::new(*cfg)?;
    let signal = TimeSignal::new(samples.iter().map(|v| v.as_f64()).collect(), 1)?;
    let frames = stft.stft(&signal)?;
    let full_scale = stft.window().iter().sum::<f64>() / 2.0;
    let [lo, hi] = SPECTROGRAM_RANGE_DB;
    let (w, h) = (frames.len(), cfg.num_bins());
    let mut pixels = vec![0u8; w * h];
    for (x, f) in frames.iter().enumerate() {
        for (b, c) in f.bins.iter().enumerate() {
            let db = 20.0 * (c.norm() / full_scale + 1e-12).log10();
            let v = ((db - lo) / (hi - lo)).clamp(0.0, 1.0);
            pixels[(h - 1 - b) * w + x] = (v * 255.0).round() as u8;
        }
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(file, "P5\n{w} {h}\n255\n")?;
    file.write_all(&pixels)?;
    file.flush()?;
    Ok(())
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
    fn sdr_examples() {
        let s = noise(1000, 1);
        assert_eq!(sdr(&s, &s).unwrap(), SDR_CAP);
        assert_eq!(sdr(&s, &vec![0.0; 1000]).unwrap(), 0.0);
        let half: Vec<f64> = s.iter().map(|v| 0.5 * v).collect();
        assert!((sdr(&s, &half).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-12);
        assert_eq!(sdr(&[0.0; 10], &[1.0; 10]).unwrap(), SDR_FLOOR);
        assert!(sdr(&s, &s[..10]).is_err());
    }

    #[test]
    fn lsd_examples() {
        let cfg = StftConfig::default();
        let s = noise(4000, 2);
        assert_eq!(lsd(&s, &s, &cfg).unwrap(), 0.0);
        let loud: Vec<f64> = s.iter().map(|v| 10.0 * v).collect();
        assert!((lsd(&s, &loud, &cfg).unwrap() - 20.0).abs() < 1e-3);
        let v = lsd(&s, &vec![0.0; 4000], &cfg).unwrap();
        assert!(v.is_finite() && v > 100.0, "{v}");
    }

    #[test]
    fn summaries_match_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<EvalRow> = (0..30)
            .map(|i| EvalRow {
                variant: if i % 2 == 0 { "a".into() } else { "b".into() },
                gain: if i % 3 == 0 { 1.5 } else { 2.0 },
                scene: i,
                sdr: rng.gen_range(-40.0..10.0),
                lsd: rng.gen_range(0.0..30.0),
                howl: rng.gen_bool(0.5),
                howl_at: None,
            })
            .collect();
        let report = EvalReport::from_rows(rows.clone());
        assert_eq!(report.summary.len(), 4);
        for g in &report.summary {
            let vals: Vec<f64> = rows.iter().filter(|r| r.variant == g.variant && r.gain == g.gain).map(|r| r.sdr).collect();
            let n = vals.len() as f64;
            let m = vals.iter().sum::<f64>() / n;
            let sd = (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
            assert!((g.sdr_mean - m).abs() < 1e-12 && (g.sdr_std - sd).abs() < 1e-12);
            assert_eq!(g.scenes, vals.len());
        }
        assert_eq!(report.rows_csv().lines().count(), 31);
        assert_eq!(report.summary_csv().lines().count(), 5);
    }

    #[test]
    fn variant_labels() {
        let f = FdkfConfig::default();
        assert_eq!(AhsVariant::kalman(f).label(), "kalman");
        assert_eq!(AhsVariant::neural(f, false, false, false), AhsVariant::kalman(f));
        assert_eq!(AhsVariant::neural(f, true, true, false).label(), "neuralkalman");
        assert_eq!(AhsVariant::neural(f, false, true, false).label(), "neuralkalman-no-mask");
        assert_eq!(AhsVariant::neural(f, true, false, false).label(), "neuralkalman-no-cov");
        assert!(!AhsVariant::kalman(f).needs_nets());
    }

    #[test]
    fn spectrogram_image_has_documented_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.pgm");
        let cfg = StftConfig::default();
        let tone: Vec<f64> = (0..1024).map(|n| (2.0 * std::f64::consts::PI * 8.0 * n as f64 / 128.0).cos()).collect();
        write_spectrogram_pgm(&path, &tone, &cfg).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"P5\n15 65\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        let px = &bytes[header.len()..];
        assert_eq!(px.len(), 15 * 65);
        // bin 8 of a full-scale tone sits at 0 dB: white
        assert_eq!(px[(64 - 8) * 15 + 7], 255);
    }
}
