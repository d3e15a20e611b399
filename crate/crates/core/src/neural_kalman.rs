//! The Kalman filter with optional learned reference and covariances.
//!
//! One frame step, shared by inference and training:
//!
//! 1. reference `R`: the raw loudspeaker spectrum `X(k)`, or a ratio mask
//!    applied to the microphone spectrum, `R = m ⊙ Y(k)` with
//!    `m = MaskNet(feat Y(k), feat X(k−1))`;
//! 2. push `R` into the reference history, predict `Ŝ = Y − Σ R·W`;
//! 3. covariances: classical (`Ψvv` = smoothed `|Ŝ|²`,
//!    `ΨΔΔ = (1 − A²)|W|²`) or learned, where the nets rescale the same
//!    statistics: `Ψvv = softplus(z_vv)/ln2 · smoothed |Ŝ|²` and
//!    `ΨΔΔ[b,l] = softplus(z_dd[b])/ln2 · (1 − A²)·Σ_l|W[b,l]|² / L`;
//! 4. gain and update.
//!
//! With a raw reference and classical covariances no network is touched
//! and the step is the plain filter. A recorded [`FrameTape`] lets
//! [`backward_window`] differentiate a window of frames exactly, through
//! the filter recursion as well as the networks.

use std::f64::consts::LN_2;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fdkf::{classical_psi_dd, gain_with, predict_with, push_history, smooth_power, FdkfConfig, KalmanState};
use crate::loopsim::AhsProcessor;
use crate::neural::{
    decode_params, encode_params, BackwardCarry, HiddenState, NetSpec, RecurrentNet, StepTape, LOG_FEATURE_MEAN,
    LOG_FEATURE_SCALE,
};
use crate::real::{czero, Cplx, Real};
use crate::signal::{StftConfig, StreamingAnalyzer, StreamingSynthesizer, Stft};

const FEATURE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceSource {
    /// Loudspeaker spectrum `X(k)`.
    Raw,
    /// Learned ratio mask applied to the microphone spectrum.
    Masked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceSource {
    Classical,
    Learned,
}

/// Where a masked reference replaces the loudspeaker spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskedReferenceUse {
    /// Prediction, gain and covariance update.
    Everywhere,
    /// Prediction only; gain and update keep the raw loudspeaker history.
    PredictOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HybridConfig {
    pub fdkf: FdkfConfig,
    pub reference: ReferenceSource,
    pub covariance: CovarianceSource,
    pub masked_reference_use: MaskedReferenceUse,
    /// Drops the recurrent pass-through of the filter state (taps, error
    /// covariance, smoother, reference history) in the backward pass.
    pub stop_grad_filter: bool,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self {
            fdkf: FdkfConfig::default(),
            reference: ReferenceSource::Masked,
            covariance: CovarianceSource::Learned,
            masked_reference_use: MaskedReferenceUse::Everywhere,
            stop_grad_filter: false,
        }
    }
}

impl HybridConfig {
    /// The plain filter: raw reference, classical covariances.
    pub fn classical(fdkf: FdkfConfig) -> Self {
        Self { fdkf, reference: ReferenceSource::Raw, covariance: CovarianceSource::Classical, ..Default::default() }
    }

    pub fn uses_nets(&self) -> bool {
        self.reference == ReferenceSource::Masked || self.covariance == CovarianceSource::Learned
    }

    fn split_history(&self) -> bool {
        self.reference == ReferenceSource::Masked && self.masked_reference_use == MaskedReferenceUse::PredictOnly
    }
}

/// Network sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetSizes {
    pub mask_hidden: usize,
    pub mask_layers: usize,
    pub cov_hidden: usize,
}

impl Default for NetSizes {
    fn default() -> Self {
        Self { mask_hidden: 32, mask_layers: 2, cov_hidden: 65 }
    }
}

/// The three learned modules. All are always present so a checkpoint
/// serves every ablation; the configuration decides which ones run.
#[derive(Debug, Clone, PartialEq)]
pub struct Nets<T> {
    pub mask: RecurrentNet<T>,
    pub cov_vv: RecurrentNet<T>,
    pub cov_dd: RecurrentNet<T>,
}

impl<T: Real> Nets<T> {
    pub fn new(num_bins: usize, sizes: &NetSizes, seed: u64) -> Result<Self> {
        Ok(Self {
            mask: RecurrentNet::new(NetSpec::mask(num_bins, sizes.mask_hidden, sizes.mask_layers), seed)?,
            cov_vv: RecurrentNet::new(NetSpec::covariance(num_bins, sizes.cov_hidden), seed.wrapping_add(1))?,
            cov_dd: RecurrentNet::new(NetSpec::covariance(num_bins, sizes.cov_hidden), seed.wrapping_add(2))?,
        })
    }

    pub fn num_bins(&self) -> usize {
        self.mask.spec().output
    }

    pub fn param_count(&self) -> usize {
        self.mask.params().len() + self.cov_vv.params().len() + self.cov_dd.params().len()
    }

    /// Parameters of all three nets, concatenated mask, vv, dd.
    pub fn flat_params(&self) -> Vec<T> {
        [self.mask.params(), self.cov_vv.params(), self.cov_dd.params()].concat()
    }

    pub fn set_flat_params(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape(format!("{} parameters for nets of {}", flat.len(), self.param_count())));
        }
        let (a, rest) = flat.split_at(self.mask.params().len());
        let (b, c) = rest.split_at(self.cov_vv.params().len());
        self.mask.params_mut().copy_from_slice(a);
        self.cov_vv.params_mut().copy_from_slice(b);
        self.cov_dd.params_mut().copy_from_slice(c);
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.mask.is_finite() && self.cov_vv.is_finite() && self.cov_dd.is_finite()
    }

    fn check(&self, num_bins: usize) -> Result<()> {
        let ok = self.mask.spec().input == 2 * num_bins
            && self.mask.spec().output == num_bins
            && [&self.cov_vv, &self.cov_dd].iter().all(|n| n.spec().input == num_bins && n.spec().output == num_bins);
        if ok {
            Ok(())
        } else {
            Err(Error::shape(format!("networks do not match a {num_bins}-bin filter")))
        }
    }

    /// Three weight records back to back (mask, vv, dd).
    pub fn encode(&self) -> Vec<u8> {
        [encode_params(&self.mask), encode_params(&self.cov_vv), encode_params(&self.cov_dd)].concat()
    }

    /// Decodes three records; returns the nets and the bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(Self, usize)> {
        let (mask, a) = decode_params(bytes)?;
        let (cov_vv, b) = decode_params(&bytes[a..])?;
        let (cov_dd, c) = decode_params(&bytes[a + b..])?;
        let nets = Self { mask, cov_vv, cov_dd };
        nets.check(nets.num_bins()).map_err(|e| Error::format(e.to_string()))?;
        Ok((nets, a + b + c))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.encode())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        let (nets, used) = Self::decode(&bytes)?;
        if used != bytes.len() {
            return Err(Error::format("trailing bytes after the network weights"));
        }
        Ok(nets)
    }
}

/// Gradients with the same layout as [`Nets::flat_params`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetGradients<T> {
    pub mask: Vec<T>,
    pub cov_vv: Vec<T>,
    pub cov_dd: Vec<T>,
}

impl<T: Real> NetGradients<T> {
    pub fn zeros(nets: &Nets<T>) -> Self {
        Self {
            mask: vec![T::zero(); nets.mask.params().len()],
            cov_vv: vec![T::zero(); nets.cov_vv.params().len()],
            cov_dd: vec![T::zero(); nets.cov_dd.params().len()],
        }
    }

    pub fn flat(&self) -> Vec<T> {
        [&self.mask[..], &self.cov_vv, &self.cov_dd].concat()
    }
}

/// Everything a stream carries between frames.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridState<T> {
    pub kalman: KalmanState<T>,
    /// Loudspeaker history used by gain and update when the masked
    /// reference only feeds the prediction.
    raw_hist: Option<Vec<Cplx<T>>>,
    /// Smoothed `|Ŝ|²`.
    smoothed: Vec<T>,
    x_prev: Vec<Cplx<T>>,
    h_mask: Option<HiddenState<T>>,
    h_vv: Option<HiddenState<T>>,
    h_dd: Option<HiddenState<T>>,
}

impl<T: Real> HybridState<T> {
    pub fn new(cfg: &HybridConfig, nets: Option<&Nets<T>>) -> Result<Self> {
        cfg.fdkf.validate()?;
        let bins = cfg.fdkf.num_bins;
        let (h_mask, h_vv, h_dd) = if cfg.uses_nets() {
            let nets = nets.ok_or_else(|| Error::config("this configuration needs trained networks"))?;
            nets.check(bins)?;
            (Some(nets.mask.zero_state()), Some(nets.cov_vv.zero_state()), Some(nets.cov_dd.zero_state()))
        } else {
            (None, None, None)
        };
        Ok(Self {
            kalman: KalmanState::new(&cfg.fdkf),
            raw_hist: cfg.split_history().then(|| vec![czero(); bins * cfg.fdkf.num_taps]),
            smoothed: vec![T::zero(); bins],
            x_prev: vec![czero(); bins],
            h_mask,
            h_vv,
            h_dd,
        })
    }

    pub fn is_finite(&self) -> bool {
        let finite_c = |v: &[Cplx<T>]| v.iter().all(|c| c.re.is_finite() && c.im.is_finite());
        self.kalman.is_finite()
            && self.raw_hist.as_deref().is_none_or(finite_c)
            && self.smoothed.iter().all(|v| v.is_finite())
            && [&self.h_mask, &self.h_vv, &self.h_dd].iter().all(|h| h.as_ref().is_none_or(|h| h.is_finite()))
    }
}

/// Values recorded by one [`hybrid_step`] for [`backward_window`].
#[derive(Debug, Clone, Default)]
pub struct FrameTape<T> {
    y: Vec<Cplx<T>>,
    mask_tape: Option<StepTape<T>>,
    /// History after the push, as used by the prediction.
    hist: Vec<Cplx<T>>,
    /// Raw history used by gain and update when it differs from `hist`.
    raw_hist: Option<Vec<Cplx<T>>>,
    w: Vec<Cplx<T>>,
    p: Vec<T>,
    p_new: Vec<T>,
    shat: Vec<Cplx<T>>,
    k: Vec<Cplx<T>>,
    denom: Vec<T>,
    smoothed: Vec<T>,
    vv: Option<(StepTape<T>, Vec<T>)>,
    dd: Option<(StepTape<T>, Vec<T>, Vec<T>)>,
}

impl<T: Real> FrameTape<T> {
    pub fn shat(&self) -> &[Cplx<T>] {
        &self.shat
    }
}

/// Log-power feature fed to the networks.
#[inline]
fn feature<T: Real>(power: T) -> T {
    ((power + T::lit(FEATURE_FLOOR)).ln() - T::lit(LOG_FEATURE_MEAN)) * T::lit(LOG_FEATURE_SCALE)
}

#[inline]
fn feature_derivative<T: Real>(power: T) -> T {
    T::lit(LOG_FEATURE_SCALE) / (power + T::lit(FEATURE_FLOOR))
}

/// `R[b] = mask[b]·Y[b]`.
pub fn mask_apply<T: Real>(mask: &[T], y: &[Cplx<T>]) -> Result<Vec<Cplx<T>>> {
    if mask.len() != y.len() {
        return Err(Error::shape(format!("mask of {} bins for a {}-bin frame", mask.len(), y.len())));
    }
    Ok(mask.iter().zip(y).map(|(&m, &y)| y * m).collect())
}

/// Processes one frame: `y` is the microphone spectrum, `x_raw` the
/// loudspeaker spectrum of the same frame. Returns `Ŝ`.
///
/// Panics if the configuration needs networks and `nets` is `None`, or on
/// mismatched frame sizes; [`HybridState::new`] validates both up front.
pub fn hybrid_step<T: Real>(
    nets: Option<&Nets<T>>,
    cfg: &HybridConfig,
    state: &mut HybridState<T>,
    y: &[Cplx<T>],
    x_raw: &[Cplx<T>],
    tape: Option<&mut FrameTape<T>>,
) -> Vec<Cplx<T>> {
    let fc = &cfg.fdkf;
    let (bins, taps) = (fc.num_bins, fc.num_taps);
    assert_eq!(y.len(), bins, "microphone frame size");
    assert_eq!(x_raw.len(), bins, "reference frame size");
    let recording = tape.is_some();

    let mut mask_tape = None;
    let reference = match cfg.reference {
        ReferenceSource::Raw => x_raw.to_vec(),
        ReferenceSource::Masked => {
            let net = &nets.expect("masked reference needs networks").mask;
            let input: Vec<T> = y.iter().chain(&state.x_prev).map(|v| feature(v.norm_sqr())).collect();
            let mut t = StepTape::default();
            let m = net.step(&input, state.h_mask.as_mut().unwrap(), recording.then_some(&mut t));
            if recording {
                mask_tape = Some(t);
            }
            mask_apply(&m, y).expect("mask matches the frame")
        }
    };
    state.x_prev.copy_from_slice(x_raw);

    let ks = &mut state.kalman;
    push_history(&mut ks.x_hist, &reference, taps);
    if let Some(raw) = state.raw_hist.as_mut() {
        push_history(raw, x_raw, taps);
    }
    let shat = predict_with(&ks.x_hist, &ks.w, y, taps);

    smooth_power(&mut state.smoothed, &shat, T::lit(fc.smoothing));
    let a = T::lit(fc.transition);
    let mut vv_rec = None;
    let mut dd_rec = None;
    let (psi_vv, psi_dd) = match cfg.covariance {
        CovarianceSource::Classical => (state.smoothed.clone(), classical_psi_dd(&ks.w, a)),
        CovarianceSource::Learned => {
            let nets = nets.expect("learned covariances need networks");
            let ln2 = T::lit(LN_2);
            let q = T::one() - a * a;
            let inv_taps = T::one() / T::lit(taps as f64);

            let input: Vec<T> = shat.iter().map(|s| feature(s.norm_sqr())).collect();
            let mut t = StepTape::default();
            let o = nets.cov_vv.step(&input, state.h_vv.as_mut().unwrap(), recording.then_some(&mut t));
            let c_vv: Vec<T> = o.iter().map(|&o| o / ln2).collect();
            let psi_vv = c_vv.iter().zip(&state.smoothed).map(|(&c, &v)| c * v).collect();
            if recording {
                vv_rec = Some((t, c_vv));
            }

            let rss2: Vec<T> = ks.w.chunks_exact(taps).map(|row| row.iter().map(|w| w.norm_sqr()).sum()).collect();
            let input: Vec<T> = rss2.iter().map(|&r| feature(r)).collect();
            let mut t = StepTape::default();
            let o = nets.cov_dd.step(&input, state.h_dd.as_mut().unwrap(), recording.then_some(&mut t));
            let c_dd: Vec<T> = o.iter().map(|&o| o / ln2).collect();
            let mut psi_dd = Vec::with_capacity(bins * taps);
            for b in 0..bins {
                let v = c_dd[b] * q * rss2[b] * inv_taps;
                psi_dd.extend(std::iter::repeat_n(v, taps));
            }
            if recording {
                dd_rec = Some((t, c_dd, rss2));
            }
            (psi_vv, psi_dd)
        }
    };

    let gain_hist = state.raw_hist.as_deref().unwrap_or(&ks.x_hist);
    let (k, denom) = gain_with(gain_hist, &ks.p, &psi_vv, T::lit(fc.regularizer), taps);
    let w_before = recording.then(|| ks.w.clone());
    let p_before = recording.then(|| ks.p.clone());
    match state.raw_hist.as_deref() {
        Some(raw) => ks.update_with(raw, &k, &shat, &psi_dd, fc),
        None => {
            let hist = std::mem::take(&mut ks.x_hist);
            ks.update_with(&hist, &k, &shat, &psi_dd, fc);
            ks.x_hist = hist;
        }
    }

    if let Some(tp) = tape {
        *tp = FrameTape {
            y: y.to_vec(),
            mask_tape,
            hist: ks.x_hist.clone(),
            raw_hist: state.raw_hist.clone(),
            w: w_before.unwrap(),
            p: p_before.unwrap(),
            p_new: ks.p.clone(),
            shat: shat.clone(),
            k,
            denom,
            smoothed: state.smoothed.clone(),
            vv: vv_rec,
            dd: dd_rec,
        };
    }
    shat
}

/// Exact gradient of a loss over a window of recorded frames with respect
/// to the network parameters, given `∂L/∂Ŝ` per frame (as
/// `∂L/∂Re + i·∂L/∂Im`). The state entering the window is treated as a
/// constant, and so are the microphone and loudspeaker spectra.
pub fn backward_window<T: Real>(
    nets: &Nets<T>,
    cfg: &HybridConfig,
    tapes: &[FrameTape<T>],
    g_shat: &[Vec<Cplx<T>>],
) -> Result<NetGradients<T>> {
    if tapes.len() != g_shat.len() {
        return Err(Error::shape(format!("{} frames but {} output gradients", tapes.len(), g_shat.len())));
    }
    let fc = &cfg.fdkf;
    let (bins, taps) = (fc.num_bins, fc.num_taps);
    let n = bins * taps;
    if tapes.iter().any(|t| t.shat.len() != bins || t.w.len() != n) || g_shat.iter().any(|g| g.len() != bins) {
        return Err(Error::shape("tape does not match the filter configuration"));
    }
    let a = T::lit(fc.transition);
    let a2 = a * a;
    let alpha = T::lit(fc.alpha);
    let beta = T::lit(fc.smoothing);
    let q = T::one() - a2;
    let ln2 = T::lit(LN_2);
    let inv_taps = T::one() / T::lit(taps as f64);
    let two = T::lit(2.0);
    let keep = !cfg.stop_grad_filter;

    let mut grads = NetGradients::zeros(nets);
    let mut mask_carry = BackwardCarry::zeros(nets.mask.spec());
    let mut vv_carry = BackwardCarry::zeros(nets.cov_vv.spec());
    let mut dd_carry = BackwardCarry::zeros(nets.cov_dd.spec());

    // adjoints of the state after the frame being reversed
    let mut gw_next = vec![czero::<T>(); n];
    let mut gp_next = vec![T::zero(); n];
    let mut gh = vec![czero::<T>(); n];
    let mut gv_next = vec![T::zero(); bins];

    for (tp, gs_loss) in tapes.iter().zip(g_shat).rev() {
        let gain_hist = tp.raw_hist.as_deref().unwrap_or(&tp.hist);
        let mut gs = gs_loss.clone();
        let mut gw = vec![czero::<T>(); n];
        let mut gp = vec![T::zero(); n];
        let mut gk = vec![czero::<T>(); n];
        let mut g_gain_hist = vec![czero::<T>(); n];
        let mut gpsi_dd = vec![T::zero(); n];
        let mut gpsi_vv = vec![T::zero(); bins];

        // update: W' = A(W + K·Ŝ), P' = max(A²(1 − α·Re(K·X))·P + ΨΔΔ, 0)
        for b in 0..bins {
            for i in b * taps..(b + 1) * taps {
                let gwn = gw_next[i];
                gk[i] += gwn * tp.shat[b].conj() * a;
                gs[b] += tp.k[i].conj() * gwn * a;
                if keep {
                    gw[i] += gwn * a;
                }
                let gpt = if tp.p_new[i] > T::zero() { gp_next[i] } else { T::zero() };
                let kx = (tp.k[i] * gain_hist[i]).re;
                if keep {
                    gp[i] += gpt * a2 * (T::one() - alpha * kx);
                }
                let g_kx = -gpt * a2 * alpha * tp.p[i];
                gk[i] += gain_hist[i].conj() * g_kx;
                g_gain_hist[i] += tp.k[i].conj() * g_kx;
                gpsi_dd[i] += gpt;
            }
        }

        // gain: K = conj(X)·P/d, d = Σ|X|²P + Ψvv + ε
        for b in 0..bins {
            let d = tp.denom[b];
            let mut gd = T::zero();
            for i in b * taps..(b + 1) * taps {
                let s = tp.p[i] / d;
                g_gain_hist[i] += gk[i].conj() * s;
                let g_s = (gk[i] * gain_hist[i]).re;
                gp[i] += g_s / d;
                gd -= g_s * tp.p[i] / (d * d);
            }
            for i in b * taps..(b + 1) * taps {
                g_gain_hist[i] += gain_hist[i] * (two * gd * tp.p[i]);
                gp[i] += gd * gain_hist[i].norm_sqr();
            }
            gpsi_vv[b] += gd;
        }

        // covariances and the |Ŝ|² smoother
        let mut g_sh2 = vec![T::zero(); bins];
        let mut gv_total = gv_next.clone();
        match cfg.covariance {
            CovarianceSource::Classical => {
                for i in 0..n {
                    gw[i] += tp.w[i] * (two * q * gpsi_dd[i]);
                }
                for b in 0..bins {
                    gv_total[b] += gpsi_vv[b];
                }
            }
            CovarianceSource::Learned => {
                let (dd_tape, c_dd, rss2) = tp.dd.as_ref().ok_or_else(|| Error::shape("tape lacks covariance records"))?;
                let mut go = vec![T::zero(); bins];
                let mut g_rss2 = vec![T::zero(); bins];
                for b in 0..bins {
                    let g_sum: T = gpsi_dd[b * taps..(b + 1) * taps].iter().copied().sum();
                    go[b] = g_sum * q * rss2[b] * inv_taps / ln2;
                    g_rss2[b] = g_sum * c_dd[b] * q * inv_taps;
                }
                let g_in = nets.cov_dd.backward_step(dd_tape, &go, &mut dd_carry, &mut grads.cov_dd);
                for b in 0..bins {
                    g_rss2[b] += g_in[b] * feature_derivative(rss2[b]);
                    for i in b * taps..(b + 1) * taps {
                        gw[i] += tp.w[i] * (two * g_rss2[b]);
                    }
                }

                let (vv_tape, c_vv) = tp.vv.as_ref().ok_or_else(|| Error::shape("tape lacks covariance records"))?;
                let go: Vec<T> = (0..bins).map(|b| gpsi_vv[b] * tp.smoothed[b] / ln2).collect();
                for b in 0..bins {
                    gv_total[b] += gpsi_vv[b] * c_vv[b];
                }
                let g_in = nets.cov_vv.backward_step(vv_tape, &go, &mut vv_carry, &mut grads.cov_vv);
                for b in 0..bins {
                    g_sh2[b] += g_in[b] * feature_derivative(tp.shat[b].norm_sqr());
                }
            }
        }
        for b in 0..bins {
            g_sh2[b] += (T::one() - beta) * gv_total[b];
            gv_next[b] = if keep { beta * gv_total[b] } else { T::zero() };
            gs[b] += tp.shat[b] * (two * g_sh2[b]);
        }

        // prediction: Ŝ = Y − Σ H·W
        for b in 0..bins {
            for i in b * taps..(b + 1) * taps {
                gh[i] -= gs[b] * tp.w[i].conj();
                gw[i] -= gs[b] * tp.hist[i].conj();
            }
        }
        if tp.raw_hist.is_none() {
            for (h, g) in gh.iter_mut().zip(&g_gain_hist) {
                *h += *g;
            }
        }

        // history push: slot 0 is this frame's reference
        let g_ref: Vec<Cplx<T>> = (0..bins).map(|b| gh[b * taps]).collect();
        for b in 0..bins {
            let row = &mut gh[b * taps..(b + 1) * taps];
            if keep {
                row.copy_within(1.., 0);
                row[taps - 1] = czero();
            } else {
                row.iter_mut().for_each(|v| *v = czero());
            }
        }

        if cfg.reference == ReferenceSource::Masked {
            let mt = tp.mask_tape.as_ref().ok_or_else(|| Error::shape("tape lacks mask records"))?;
            let gm: Vec<T> = g_ref.iter().zip(&tp.y).map(|(g, y)| (g * y.conj()).re).collect();
            nets.mask.backward_step(mt, &gm, &mut mask_carry, &mut grads.mask);
        }

        gw_next = gw;
        gp_next = gp;
    }
    Ok(grads)
}

/// Streaming suppressor: one hop of microphone and loudspeaker samples in,
/// one hop of near-end estimate out, `frame_len − hop` samples late.
#[derive(Debug, Clone)]
pub struct KalmanAhs<T: Real> {
    cfg: HybridConfig,
    nets: Option<Arc<Nets<T>>>,
    state: HybridState<T>,
    mic: StreamingAnalyzer<T>,
    loudspeaker: StreamingAnalyzer<T>,
    synth: StreamingSynthesizer<T>,
    hop: usize,
    latency: usize,
}

impl<T: Real> KalmanAhs<T> {
    pub fn new(stft: StftConfig, cfg: HybridConfig, nets: Option<Arc<Nets<T>>>) -> Result<Self> {
        if stft.num_bins() != cfg.fdkf.num_bins {
            return Err(Error::config(format!(
                "filter has {} bins but the transform yields {}",
                cfg.fdkf.num_bins,
                stft.num_bins()
            )));
        }
        let engine = Stft::new(stft)?;
        let state = HybridState::new(&cfg, nets.as_deref())?;
        Ok(Self {
            cfg,
            nets,
            state,
            mic: StreamingAnalyzer::new(engine.clone()),
            loudspeaker: StreamingAnalyzer::new(engine.clone()),
            synth: StreamingSynthesizer::new(engine),
            hop: stft.hop,
            latency: stft.latency(),
        })
    }

    pub fn state(&self) -> &HybridState<T> {
        &self.state
    }

    pub fn config(&self) -> &HybridConfig {
        &self.cfg
    }
}

/// The filter as a loop processor, with the given reference and covariance
/// sources.
pub fn fdkf_ahs_callback<T: Real>(
    stft: StftConfig,
    fdkf: FdkfConfig,
    covariance: CovarianceSource,
    reference: ReferenceSource,
    nets: Option<Arc<Nets<T>>>,
) -> Result<KalmanAhs<T>> {
    KalmanAhs::new(stft, HybridConfig { fdkf, covariance, reference, ..Default::default() }, nets)
}

impl<T: Real> AhsProcessor<T> for KalmanAhs<T> {
    fn block_len(&self) -> usize {
        self.hop
    }

    fn latency(&self) -> usize {
        self.latency
    }

    fn process(&mut self, mic: &[T], reference: &[T], out: &mut [T]) {
        let y = self.mic.push(mic);
        let x = self.loudspeaker.push(reference);
        let shat = hybrid_step(self.nets.as_deref(), &self.cfg, &mut self.state, &y.bins, &x.bins, None);
        out.copy_from_slice(&self.synth.push(&shat));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdkf::{ClassicalCovariance, CovariancePair};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_frames(rng: &mut ChaCha8Rng, frames: usize, bins: usize, scale: f64) -> Vec<Vec<Cplx<f64>>> {
        (0..frames)
            .map(|_| (0..bins).map(|_| Cplx::new(rng.gen_range(-scale..scale), rng.gen_range(-scale..scale))).collect())
            .collect()
    }

    #[test]
    fn mask_examples() {
        let y = vec![Cplx::from_polar(2.0, 0.7), Cplx::new(-1.0, 3.0)];
        assert_eq!(mask_apply(&[1.0, 1.0], &y).unwrap(), y);
        assert_eq!(mask_apply(&[0.0, 0.0], &y).unwrap(), vec![Cplx::new(0.0, 0.0); 2]);
        let r = mask_apply(&[0.5, 0.5], &y).unwrap();
        assert!((r[0] - Cplx::from_polar(1.0, 0.7)).norm() < 1e-15);
        assert!(mask_apply(&[0.5], &y).is_err());
    }

    #[test]
    fn classical_step_matches_the_filter_operations() {
        let fdkf = FdkfConfig { num_bins: 5, num_taps: 3, ..Default::default() };
        let cfg = HybridConfig::classical(fdkf);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ys = rand_frames(&mut rng, 40, 5, 1.0);
        let xs = rand_frames(&mut rng, 40, 5, 1.0);
        let mut hybrid = HybridState::<f64>::new(&cfg, None).unwrap();
        let mut kf = KalmanState::new(&fdkf);
        let mut cov = ClassicalCovariance::new(5);
        for (y, x) in ys.iter().zip(&xs) {
            let a = hybrid_step(None, &cfg, &mut hybrid, y, x, None);
            kf.push_reference(x).unwrap();
            let shat = kf.predict(y).unwrap();
            let c = cov.estimate(&shat, &kf, &fdkf);
            let k = kf.gain(&c, &fdkf);
            kf.update(&k, &shat, &c, &fdkf).unwrap();
            assert_eq!(a, shat);
        }
        assert_eq!(hybrid.kalman, kf);
    }

    #[test]
    fn learned_covariances_are_nonnegative_and_missing_nets_are_rejected() {
        let fdkf = FdkfConfig { num_bins: 4, num_taps: 2, ..Default::default() };
        let cfg = HybridConfig { fdkf, ..Default::default() };
        assert!(HybridState::<f64>::new(&cfg, None).is_err());
        let nets = Nets::<f64>::new(4, &NetSizes { mask_hidden: 3, mask_layers: 1, cov_hidden: 4 }, 0).unwrap();
        let mut st = HybridState::new(&cfg, Some(&nets)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (y, x) in rand_frames(&mut rng, 50, 4, 3.0).iter().zip(rand_frames(&mut rng, 50, 4, 3.0).iter()) {
            hybrid_step(Some(&nets), &cfg, &mut st, y, x, None);
            assert!(st.kalman.p.iter().all(|&p| p >= 0.0));
            assert!(st.is_finite());
        }
        let _ = CovariancePair::<f64>::zeros(1, 1);
    }

    fn window_objective(
        nets: &Nets<f64>,
        cfg: &HybridConfig,
        start: &HybridState<f64>,
        ys: &[Vec<Cplx<f64>>],
        xs: &[Vec<Cplx<f64>>],
        c: &[Vec<Cplx<f64>>],
    ) -> f64 {
        let mut st = start.clone();
        let mut total = 0.0;
        for ((y, x), c) in ys.iter().zip(xs).zip(c) {
            let s = hybrid_step(Some(nets), cfg, &mut st, y, x, None);
            total += s.iter().zip(c).map(|(s, c)| (c.conj() * s).re).sum::<f64>();
        }
        total
    }

    fn check_window_gradient(cfg: HybridConfig, seed: u64) {
        let bins = cfg.fdkf.num_bins;
        let sizes = NetSizes { mask_hidden: 3, mask_layers: 2, cov_hidden: 3 };
        let nets = Nets::<f64>::new(bins, &sizes, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // warm the state up so every quantity is nontrivial
        let mut start = HybridState::new(&cfg, Some(&nets)).unwrap();
        for (y, x) in rand_frames(&mut rng, 6, bins, 1.0).iter().zip(&rand_frames(&mut rng, 6, bins, 1.0)) {
            hybrid_step(Some(&nets), &cfg, &mut start, y, x, None);
        }
        let frames = 7;
        let ys = rand_frames(&mut rng, frames, bins, 1.0);
        let xs = rand_frames(&mut rng, frames, bins, 1.0);
        let c = rand_frames(&mut rng, frames, bins, 1.0);

        let mut st = start.clone();
        let mut tapes = vec![FrameTape::default(); frames];
        for ((y, x), t) in ys.iter().zip(&xs).zip(tapes.iter_mut()) {
            hybrid_step(Some(&nets), &cfg, &mut st, y, x, Some(t));
        }
        let analytic = backward_window(&nets, &cfg, &tapes, &c).unwrap().flat();

        let flat = nets.flat_params();
        let mut probe = nets.clone();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..flat.len() {
            let mut p = flat.clone();
            p[i] += h;
            probe.set_flat_params(&p).unwrap();
            let up = window_objective(&probe, &cfg, &start, &ys, &xs, &c);
            p[i] -= 2.0 * h;
            probe.set_flat_params(&p).unwrap();
            let down = window_objective(&probe, &cfg, &start, &ys, &xs, &c);
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(crate::neural::relative_error(analytic[i], numeric));
        }
        assert!(worst < 1e-4, "{cfg:?}: worst relative error {worst}");
    }

    fn small(reference: ReferenceSource, covariance: CovarianceSource) -> HybridConfig {
        HybridConfig {
            fdkf: FdkfConfig { num_bins: 3, num_taps: 2, transition: 0.9, p_init: 0.5, ..Default::default() },
            reference,
            covariance,
            ..Default::default()
        }
    }

    #[test]
    fn window_gradient_full_model() {
        check_window_gradient(small(ReferenceSource::Masked, CovarianceSource::Learned), 1);
    }

    #[test]
    fn window_gradient_mask_only() {
        check_window_gradient(small(ReferenceSource::Masked, CovarianceSource::Classical), 2);
    }

    #[test]
    fn window_gradient_covariances_only() {
        check_window_gradient(small(ReferenceSource::Raw, CovarianceSource::Learned), 3);
    }

    #[test]
    fn window_gradient_mask_in_prediction_only() {
        let cfg = HybridConfig {
            masked_reference_use: MaskedReferenceUse::PredictOnly,
            ..small(ReferenceSource::Masked, CovarianceSource::Learned)
        };
        check_window_gradient(cfg, 4);
    }

    #[test]
    fn stop_grad_changes_the_gradient_but_keeps_it_finite() {
        let cfg = small(ReferenceSource::Masked, CovarianceSource::Learned);
        let nets = Nets::<f64>::new(3, &NetSizes { mask_hidden: 3, mask_layers: 1, cov_hidden: 3 }, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ys = rand_frames(&mut rng, 8, 3, 1.0);
        let xs = rand_frames(&mut rng, 8, 3, 1.0);
        let c = rand_frames(&mut rng, 8, 3, 1.0);
        let run = |cfg: &HybridConfig| {
            let mut st = HybridState::new(cfg, Some(&nets)).unwrap();
            let mut tapes = vec![FrameTape::default(); 8];
            for ((y, x), t) in ys.iter().zip(&xs).zip(tapes.iter_mut()) {
                hybrid_step(Some(&nets), cfg, &mut st, y, x, Some(t));
            }
            backward_window(&nets, cfg, &tapes, &c).unwrap().flat()
        };
        let full = run(&cfg);
        let cut = run(&HybridConfig { stop_grad_filter: true, ..cfg });
        assert_ne!(full, cut);
        assert!(cut.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn nets_round_trip() {
        let nets = Nets::<f64>::new(5, &NetSizes { mask_hidden: 4, mask_layers: 2, cov_hidden: 5 }, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nets.bin");
        nets.save(&p).unwrap();
        assert_eq!(Nets::<f64>::load(&p).unwrap(), nets);
    }
}
