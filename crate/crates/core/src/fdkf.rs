//! Per-bin frequency-domain Kalman filter.
//!
//! Each of the `num_bins` frequency bins carries `L` cross-frame taps
//! (a convolutive transfer function) with a diagonal state error covariance.
//! One frame of processing is
//!
//! 1. `push_reference` with the newest reference spectrum,
//! 2. `predict`: `Ŝ = Y − Σ_l X_l·W_l`,
//! 3. covariances `Ψvv`, `ΨΔΔ` (classical or learned),
//! 4. `gain`: `K_l = P_l·conj(X_l) / (Σ_l |X_l|²·P_l + Ψvv + ε)`,
//! 5. `update`: `W ← A·(W + K·Ŝ)`, `P ← A²·(1 − α·Re(K·X))·P + ΨΔΔ`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::{czero, Cplx, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FdkfConfig {
    pub num_bins: usize,
    /// Cross-frame taps per bin.
    pub num_taps: usize,
    /// State transition factor `A`.
    pub transition: f64,
    /// Scaling `α` of the covariance reduction term.
    pub alpha: f64,
    pub p_init: f64,
    /// `ε` added to the gain denominator.
    pub regularizer: f64,
    /// Exponential smoothing factor `β` of the classical `Ψvv` estimate.
    pub smoothing: f64,
}

impl Default for FdkfConfig {
    fn default() -> Self {
        Self {
            num_bins: 65,
            num_taps: 20,
            transition: 0.999,
            alpha: 0.5,
            p_init: 0.1,
            regularizer: 1e-10,
            smoothing: 0.9,
        }
    }
}

impl FdkfConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.num_bins > 0
            && self.num_taps > 0
            && self.transition > 0.0
            && self.transition <= 1.0
            && self.alpha > 0.0
            && self.alpha <= 1.0
            && self.p_init > 0.0
            && self.regularizer > 0.0
            && (0.0..1.0).contains(&self.smoothing);
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid Kalman filter configuration {self:?}")))
        }
    }
}

/// Observation and process noise covariances for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariancePair<T> {
    /// `Ψvv`, one value per bin.
    pub psi_vv: Vec<T>,
    /// `ΨΔΔ`, `num_bins × L`, bin-major.
    pub psi_dd: Vec<T>,
}

impl<T: Real> CovariancePair<T> {
    pub fn zeros(num_bins: usize, num_taps: usize) -> Self {
        Self { psi_vv: vec![T::zero(); num_bins], psi_dd: vec![T::zero(); num_bins * num_taps] }
    }

    pub fn is_valid(&self) -> bool {
        self.psi_vv.iter().chain(&self.psi_dd).all(|v| v.is_finite() && *v >= T::zero())
    }
}

/// Filter taps, diagonal error covariance and reference history.
/// All matrices are `num_bins × L`, bin-major; history slot 0 is the newest
/// reference frame.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState<T> {
    num_bins: usize,
    num_taps: usize,
    pub w: Vec<Cplx<T>>,
    pub p: Vec<T>,
    pub x_hist: Vec<Cplx<T>>,
    clamp_events: u64,
}

impl<T: Real> KalmanState<T> {
    pub fn new(cfg: &FdkfConfig) -> Self {
        let n = cfg.num_bins * cfg.num_taps;
        Self {
            num_bins: cfg.num_bins,
            num_taps: cfg.num_taps,
            w: vec![czero(); n],
            p: vec![T::lit(cfg.p_init); n],
            x_hist: vec![czero(); n],
            clamp_events: 0,
        }
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn num_taps(&self) -> usize {
        self.num_taps
    }

    /// Times `update` had to clamp a negative covariance to zero.
    pub fn clamp_events(&self) -> u64 {
        self.clamp_events
    }

    fn check_bins(&self, len: usize, what: &str) -> Result<()> {
        if len != self.num_bins {
            return Err(Error::shape(format!("{what} has {len} bins, filter has {}", self.num_bins)));
        }
        Ok(())
    }

    /// Shifts the history by one frame and stores `x_new` in slot 0.
    pub fn push_reference(&mut self, x_new: &[Cplx<T>]) -> Result<()> {
        self.check_bins(x_new.len(), "reference frame")?;
        push_history(&mut self.x_hist, x_new, self.num_taps);
        Ok(())
    }

    /// `Ŝ[b] = Y[b] − Σ_l X_hist[b,l]·W[b,l]`.
    pub fn predict(&self, y: &[Cplx<T>]) -> Result<Vec<Cplx<T>>> {
        self.check_bins(y.len(), "microphone frame")?;
        Ok(predict_with(&self.x_hist, &self.w, y, self.num_taps))
    }

    pub fn gain(&self, cov: &CovariancePair<T>, cfg: &FdkfConfig) -> Vec<Cplx<T>> {
        gain_with(&self.x_hist, &self.p, &cov.psi_vv, T::lit(cfg.regularizer), self.num_taps).0
    }

    pub fn update(&mut self, k: &[Cplx<T>], shat: &[Cplx<T>], cov: &CovariancePair<T>, cfg: &FdkfConfig) -> Result<()> {
        self.check_bins(shat.len(), "near-end estimate")?;
        if k.len() != self.w.len() || cov.psi_dd.len() != self.w.len() || cov.psi_vv.len() != self.num_bins {
            return Err(Error::shape("gain or covariance does not match the filter shape"));
        }
        let x_hist = std::mem::take(&mut self.x_hist);
        self.update_with(&x_hist, k, shat, &cov.psi_dd, cfg);
        self.x_hist = x_hist;
        Ok(())
    }

    /// Update using an explicit reference history for the `K·X` term.
    pub(crate) fn update_with(
        &mut self,
        x_hist: &[Cplx<T>],
        k: &[Cplx<T>],
        shat: &[Cplx<T>],
        psi_dd: &[T],
        cfg: &FdkfConfig,
    ) {
        let a = T::lit(cfg.transition);
        let a2 = a * a;
        let alpha = T::lit(cfg.alpha);
        let taps = self.num_taps;
        for (b, &s) in shat.iter().enumerate() {
            for l in 0..taps {
                let i = b * taps + l;
                self.w[i] = (self.w[i] + k[i] * s) * a;
                let kx = (k[i] * x_hist[i]).re;
                let p = a2 * (T::one() - alpha * kx) * self.p[i] + psi_dd[i];
                self.p[i] = if p < T::zero() {
                    self.clamp_events += 1;
                    T::zero()
                } else {
                    p
                };
            }
        }
    }

    /// Sets the taps (tests, resumed snapshots).
    pub fn set_taps(&mut self, w: Vec<Cplx<T>>) -> Result<()> {
        if w.len() != self.w.len() {
            return Err(Error::shape("tap matrix size"));
        }
        self.w = w;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().chain(&self.x_hist).all(|c| c.re.is_finite() && c.im.is_finite())
            && self.p.iter().all(|p| p.is_finite())
    }
}

pub(crate) fn push_history<T: Real>(hist: &mut [Cplx<T>], x_new: &[Cplx<T>], taps: usize) {
    for (b, &x) in x_new.iter().enumerate() {
        let row = &mut hist[b * taps..(b + 1) * taps];
        row.copy_within(..taps - 1, 1);
        row[0] = x;
    }
}

pub(crate) fn predict_with<T: Real>(x_hist: &[Cplx<T>], w: &[Cplx<T>], y: &[Cplx<T>], taps: usize) -> Vec<Cplx<T>> {
    y.iter()
        .enumerate()
        .map(|(b, &yb)| {
            let row = b * taps..(b + 1) * taps;
            let echo = x_hist[row.clone()]
                .iter()
                .zip(&w[row])
                .fold(czero::<T>(), |acc, (x, w)| acc + x * w);
            yb - echo
        })
        .collect()
}

/// Returns the gain and the per-bin denominators.
pub(crate) fn gain_with<T: Real>(
    x_hist: &[Cplx<T>],
    p: &[T],
    psi_vv: &[T],
    eps: T,
    taps: usize,
) -> (Vec<Cplx<T>>, Vec<T>) {
    let mut k = vec![czero(); x_hist.len()];
    let mut denoms = Vec::with_capacity(psi_vv.len());
    for (b, &vv) in psi_vv.iter().enumerate() {
        let row = b * taps..(b + 1) * taps;
        let energy: T = x_hist[row.clone()].iter().zip(&p[row.clone()]).map(|(x, &p)| x.norm_sqr() * p).sum();
        let denom = energy + vv + eps;
        for i in row {
            k[i] = x_hist[i].conj() * (p[i] / denom);
        }
        denoms.push(denom);
    }
    (k, denoms)
}

/// Classical covariance approximations: `Ψvv` is the exponentially smoothed
/// power of the near-end estimate and `ΨΔΔ = (1 − A²)·|W|²`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassicalCovariance<T> {
    psi_vv: Vec<T>,
}

impl<T: Real> ClassicalCovariance<T> {
    pub fn new(num_bins: usize) -> Self {
        Self { psi_vv: vec![T::zero(); num_bins] }
    }

    pub fn smoothed_psi_vv(&self) -> &[T] {
        &self.psi_vv
    }

    pub fn estimate(&mut self, shat: &[Cplx<T>], state: &KalmanState<T>, cfg: &FdkfConfig) -> CovariancePair<T> {
        smooth_power(&mut self.psi_vv, shat, T::lit(cfg.smoothing));
        CovariancePair { psi_vv: self.psi_vv.clone(), psi_dd: classical_psi_dd(&state.w, T::lit(cfg.transition)) }
    }
}

/// `v ← β·v + (1 − β)·|Ŝ|²`.
pub(crate) fn smooth_power<T: Real>(v: &mut [T], shat: &[Cplx<T>], beta: T) {
    for (v, s) in v.iter_mut().zip(shat) {
        *v = beta * *v + (T::one() - beta) * s.norm_sqr();
    }
}

/// `ΨΔΔ = (1 − A²)·|W|²`.
pub(crate) fn classical_psi_dd<T: Real>(w: &[Cplx<T>], a: T) -> Vec<T> {
    let q = T::one() - a * a;
    w.iter().map(|w| q * w.norm_sqr()).collect()
}

/// Convenience wrapper around [`ClassicalCovariance::estimate`] starting from
/// a given smoothed `Ψvv`.
pub fn classical_covariances<T: Real>(
    shat: &[Cplx<T>],
    state: &KalmanState<T>,
    cfg: &FdkfConfig,
    smoother: &mut ClassicalCovariance<T>,
) -> CovariancePair<T> {
    smoother.estimate(shat, state, cfg)
}

const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Snapshot {
    version: u32,
    config: FdkfConfig,
    w: Vec<[f64; 2]>,
    p: Vec<f64>,
    x_hist: Vec<[f64; 2]>,
    clamp_events: u64,
}

fn to_pairs<T: Real>(v: &[Cplx<T>]) -> Vec<[f64; 2]> {
    v.iter().map(|c| [c.re.as_f64(), c.im.as_f64()]).collect()
}

fn from_pairs<T: Real>(v: &[[f64; 2]]) -> Vec<Cplx<T>> {
    v.iter().map(|[re, im]| Cplx::new(T::lit(*re), T::lit(*im))).collect()
}

/// Saves taps, covariance, history and configuration as JSON.
pub fn save_snapshot<T: Real>(state: &KalmanState<T>, cfg: &FdkfConfig, path: &Path) -> Result<()> {
    let snap = Snapshot {
        version: SNAPSHOT_VERSION,
        config: *cfg,
        w: to_pairs(&state.w),
        p: state.p.iter().map(|p| p.as_f64()).collect(),
        x_hist: to_pairs(&state.x_hist),
        clamp_events: state.clamp_events,
    };
    let text = serde_json::to_string_pretty(&snap).map_err(|e| Error::format(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_snapshot<T: Real>(path: &Path) -> Result<(KalmanState<T>, FdkfConfig)> {
    let text = std::fs::read_to_string(path)?;
    let snap: Snapshot = serde_json::from_str(&text).map_err(|e| Error::format(e.to_string()))?;
    if snap.version != SNAPSHOT_VERSION {
        return Err(Error::format(format!("unsupported filter snapshot version {}", snap.version)));
    }
    snap.config.validate()?;
    let n = snap.config.num_bins * snap.config.num_taps;
    if snap.w.len() != n || snap.p.len() != n || snap.x_hist.len() != n {
        return Err(Error::format("snapshot matrices do not match its configuration"));
    }
    let state = KalmanState {
        num_bins: snap.config.num_bins,
        num_taps: snap.config.num_taps,
        w: from_pairs(&snap.w),
        p: snap.p.iter().map(|&p| T::lit(p)).collect(),
        x_hist: from_pairs(&snap.x_hist),
        clamp_events: snap.clamp_events,
    };
    Ok((state, snap.config))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Cplx<f64> {
        Cplx::new(re, im)
    }

    fn cfg1(taps: usize) -> FdkfConfig {
        FdkfConfig { num_bins: 1, num_taps: taps, ..Default::default() }
    }

    #[test]
    fn predict_examples() {
        let cfg = cfg1(1);
        let mut st = KalmanState::<f64>::new(&cfg);
        st.push_reference(&[c(1.0, 0.0)]).unwrap();
        assert_eq!(st.predict(&[c(2.0, 0.0)]).unwrap(), vec![c(2.0, 0.0)]);
        st.set_taps(vec![c(0.5, 0.0)]).unwrap();
        assert_eq!(st.predict(&[c(2.0, 0.0)]).unwrap(), vec![c(1.5, 0.0)]);
        let fresh = {
            let mut s = KalmanState::<f64>::new(&cfg);
            s.set_taps(vec![c(0.7, 0.2)]).unwrap();
            s
        };
        assert_eq!(fresh.predict(&[c(0.3, -1.0)]).unwrap(), vec![c(0.3, -1.0)]);
        assert!(matches!(st.predict(&[c(1.0, 0.0), c(0.0, 0.0)]), Err(Error::Shape(_))));
    }

    #[test]
    fn gain_examples() {
        let mut cfg = cfg1(1);
        let mut st = KalmanState::<f64>::new(&cfg);
        st.push_reference(&[c(1.0, 0.0)]).unwrap();
        st.p = vec![1.0];
        let cov = CovariancePair { psi_vv: vec![1.0], psi_dd: vec![0.0] };
        // the regularizer is part of the denominator; 1e-300 stands in for 0
        cfg.regularizer = 1e-300;
        let k = st.gain(&cov, &cfg);
        assert_eq!(k, vec![c(0.5, 0.0)]);

        st.p = vec![0.0];
        assert_eq!(st.gain(&cov, &cfg), vec![c(0.0, 0.0)]);

        st.p = vec![3.0];
        let loud = CovariancePair { psi_vv: vec![1e12], psi_dd: vec![0.0] };
        assert!(st.gain(&loud, &cfg)[0].norm() < 1e-9);
    }

    #[test]
    fn zero_gain_decays_by_transition() {
        let cfg = FdkfConfig { num_bins: 2, num_taps: 2, transition: 0.9, ..Default::default() };
        let mut st = KalmanState::<f64>::new(&cfg);
        let w0 = vec![c(1.0, 2.0), c(-0.5, 0.25), c(0.0, 1.0), c(3.0, 0.0)];
        st.set_taps(w0.clone()).unwrap();
        let p0 = st.p.clone();
        let zero_k = vec![c(0.0, 0.0); 4];
        let cov = CovariancePair::zeros(2, 2);
        st.update(&zero_k, &[c(1.0, 1.0), c(2.0, 0.0)], &cov, &cfg).unwrap();
        for (w, w0) in st.w.iter().zip(&w0) {
            assert_eq!(*w, w0 * 0.9);
        }
        for (p, p0) in st.p.iter().zip(&p0) {
            assert_eq!(*p, 0.9 * 0.9 * p0);
        }
    }

    #[test]
    fn unit_transition_arithmetic() {
        let cfg = FdkfConfig { transition: 1.0, ..cfg1(1) };
        let mut st = KalmanState::<f64>::new(&cfg);
        st.push_reference(&[c(1.0, 0.0)]).unwrap();
        let cov = CovariancePair::zeros(1, 1);
        st.update(&[c(0.5, 0.0)], &[c(1.0, 0.0)], &cov, &cfg).unwrap();
        assert_eq!(st.w, vec![c(0.5, 0.0)]);
    }

    #[test]
    fn history_ring_semantics() {
        let cfg = FdkfConfig { num_bins: 1, num_taps: 2, ..Default::default() };
        let mut st = KalmanState::<f64>::new(&cfg);
        st.push_reference(&[c(1.0, 0.0)]).unwrap();
        st.push_reference(&[c(2.0, 0.0)]).unwrap();
        assert_eq!(st.x_hist, vec![c(2.0, 0.0), c(1.0, 0.0)]);
        for i in 3..=5 {
            st.push_reference(&[c(i as f64, 0.0)]).unwrap();
        }
        assert_eq!(st.x_hist, vec![c(5.0, 0.0), c(4.0, 0.0)]);

        let mut one = KalmanState::<f64>::new(&cfg1(1));
        one.push_reference(&[c(1.0, 1.0)]).unwrap();
        one.push_reference(&[c(7.0, 0.0)]).unwrap();
        assert_eq!(one.x_hist, vec![c(7.0, 0.0)]);
        assert!(one.push_reference(&[c(1.0, 0.0), c(1.0, 0.0)]).is_err());
    }

    #[test]
    fn classical_covariance_examples() {
        let cfg = FdkfConfig { num_bins: 1, num_taps: 1, smoothing: 0.9, ..Default::default() };
        let st = KalmanState::<f64>::new(&cfg);
        let mut sm = ClassicalCovariance::new(1);
        let cov = classical_covariances(&[c(0.0, 0.0)], &st, &cfg, &mut sm);
        assert_eq!(cov, CovariancePair::zeros(1, 1));

        let unit = FdkfConfig { transition: 1.0, ..cfg };
        let mut st2 = KalmanState::<f64>::new(&unit);
        st2.set_taps(vec![c(2.0, 1.0)]).unwrap();
        assert_eq!(ClassicalCovariance::new(1).estimate(&[c(1.0, 0.0)], &st2, &unit).psi_dd, vec![0.0]);

        // fixed point of v ← βv + (1−β)·4 is 4, approached as 4(1 − β^n)
        let mut sm = ClassicalCovariance::new(1);
        for n in 1..=200 {
            let v = sm.estimate(&[c(0.0, 2.0)], &st, &cfg).psi_vv[0];
            let expected = 4.0 * (1.0 - 0.9f64.powi(n));
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn closed_form_single_step_residual() {
        // Ψvv = 0, ε → 0, L = 1: K = 1/X and the a-posteriori residual is (1 − A)·Y.
        let cfg = FdkfConfig { num_bins: 1, num_taps: 1, transition: 0.95, regularizer: 1e-300, ..Default::default() };
        let mut st = KalmanState::<f64>::new(&cfg);
        st.set_taps(vec![c(0.3, -0.1)]).unwrap();
        let (x, y) = (c(0.8, 0.6), c(1.5, -2.0));
        st.push_reference(&[x]).unwrap();
        let shat = st.predict(&[y]).unwrap();
        let cov = CovariancePair::zeros(1, 1);
        let k = st.gain(&cov, &cfg);
        st.update(&k, &shat, &cov, &cfg).unwrap();
        let residual = y - x * st.w[0];
        let expected = y * (1.0 - 0.95);
        assert!((residual - expected).norm() < 1e-13);
    }

    #[test]
    fn snapshot_round_trip() {
        let cfg = FdkfConfig { num_bins: 3, num_taps: 2, ..Default::default() };
        let mut st = KalmanState::<f64>::new(&cfg);
        st.push_reference(&[c(1.0, 0.1), c(0.3, -0.7), c(1e-7, 2.0)]).unwrap();
        st.set_taps((0..6).map(|i| c(i as f64 / 7.0, -(i as f64) / 3.0)).collect()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kf.json");
        save_snapshot(&st, &cfg, &path).unwrap();
        let (back, cfg_back) = load_snapshot::<f64>(&path).unwrap();
        assert_eq!(back, st);
        assert_eq!(cfg_back, cfg);
    }
}
