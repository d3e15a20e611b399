//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use howlkit::fdkf::{CovariancePair, FdkfConfig, KalmanState};
use howlkit::neural::{Activation, RecurrentNet};
use howlkit::Cplx;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Inputs for driving a filter: per frame Y, X, Ψvv and ΨΔΔ.
pub struct Drive {
    pub ys: Vec<Vec<Cplx<f64>>>,
    pub xs: Vec<Vec<Cplx<f64>>>,
    pub psi_vv: Vec<Vec<f64>>,
    pub psi_dd: Vec<Vec<f64>>,
}

pub fn random_drive(bins: usize, taps: usize, frames: usize, seed: u64) -> Drive {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = |rng: &mut ChaCha8Rng| Cplx::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    Drive {
        ys: (0..frames).map(|_| (0..bins).map(|_| c(&mut rng)).collect()).collect(),
        xs: (0..frames).map(|_| (0..bins).map(|_| c(&mut rng)).collect()).collect(),
        psi_vv: (0..frames).map(|_| (0..bins).map(|_| rng.gen_range(0.05..1.0)).collect()).collect(),
        psi_dd: (0..frames).map(|_| (0..bins * taps).map(|_| rng.gen_range(0.0..1e-3)).collect()).collect(),
    }
}

/// The library filter; returns the final taps and error covariances.
pub fn run_filter(cfg: &FdkfConfig, d: &Drive) -> (Vec<Cplx<f64>>, Vec<f64>) {
    let mut st = KalmanState::<f64>::new(cfg);
    for k in 0..d.ys.len() {
        st.push_reference(&d.xs[k]).unwrap();
        let shat = st.predict(&d.ys[k]).unwrap();
        let cov = CovariancePair { psi_vv: d.psi_vv[k].clone(), psi_dd: d.psi_dd[k].clone() };
        let gain = st.gain(&cov, cfg);
        st.update(&gain, &shat, &cov, cfg).unwrap();
    }
    (st.w.clone(), st.p.clone())
}

/// Textbook Kalman filter per bin on the full `L`-tap state with a dense
/// complex error covariance:
///
///   K = P xᴴ / (x P xᴴ + ψvv + ε),  w ← A(w + K e),  P ← A²(I − αKx)P + diag ψΔΔ.
///
/// With `diagonal_projection` the covariance is reduced to the real part of
/// its diagonal after every update.
pub fn run_dense_oracle(cfg: &FdkfConfig, d: &Drive, diagonal_projection: bool) -> Vec<Cplx<f64>> {
    let (bins, taps) = (cfg.num_bins, cfg.num_taps);
    let (a, alpha) = (cfg.transition, cfg.alpha);
    let mut out = Vec::with_capacity(bins * taps);
    for b in 0..bins {
        let mut w = DVector::<Cplx<f64>>::zeros(taps);
        let mut p = DMatrix::<Cplx<f64>>::identity(taps, taps) * Cplx::new(cfg.p_init, 0.0);
        let mut x = DVector::<Cplx<f64>>::zeros(taps);
        for k in 0..d.ys.len() {
            for l in (1..taps).rev() {
                x[l] = x[l - 1];
            }
            x[0] = d.xs[k][b];
            let xr = x.transpose();
            let e = d.ys[k][b] - (&xr * &w)[(0, 0)];
            let xh = x.map(|v| v.conj());
            let px = &p * &xh;
            let denom = (&xr * &px)[(0, 0)] + Cplx::new(d.psi_vv[k][b] + cfg.regularizer, 0.0);
            let gain = px / denom;
            w = (w + &gain * e) * Cplx::new(a, 0.0);
            let eye = DMatrix::<Cplx<f64>>::identity(taps, taps);
            let q = DMatrix::from_fn(taps, taps, |i, j| {
                if i == j {
                    Cplx::new(d.psi_dd[k][b * taps + i], 0.0)
                } else {
                    Cplx::new(0.0, 0.0)
                }
            });
            p = (eye - &gain * &xr * Cplx::new(alpha, 0.0)) * &p * Cplx::new(a * a, 0.0) + q;
            if diagonal_projection {
                p = DMatrix::from_fn(taps, taps, |i, j| if i == j { Cplx::new(p[(i, i)].re, 0.0) } else { Cplx::new(0.0, 0.0) });
            }
        }
        out.extend(w.iter().copied());
    }
    out
}

pub fn max_relative_difference(a: &[Cplx<f64>], b: &[Cplx<f64>]) -> f64 {
    let scale = b.iter().map(|v| v.norm()).fold(0.0, f64::max);
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max) / scale
}

/// Scalar textbook filter for a random-walk state observed through a known
/// complex regressor: measurement update, then time update.
pub struct ScalarKalman {
    pub w: Cplx<f64>,
    pub p: f64,
    pub a: f64,
    pub q: f64,
}

impl ScalarKalman {
    pub fn step(&mut self, x: Cplx<f64>, y: Cplx<f64>, r: f64) -> Cplx<f64> {
        let innovation = y - x * self.w;
        let s = x.norm_sqr() * self.p + r;
        let k = self.p * x.conj() / s;
        let w_post = self.w + k * innovation;
        let p_post = (1.0 - (k * x).re) * self.p;
        self.w = self.a * w_post;
        self.p = self.a * self.a * p_post + self.q;
        innovation
    }
}

/// Gated recurrent cell written out element by element, straight from the
/// usual equations (gate order input, forget, cell, output), reading the
/// parameters through the net's tensor table.
pub fn naive_recurrent_forward(net: &RecurrentNet<f64>, inputs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let spec = net.spec().clone();
    let p = net.params();
    let tensor = |name: &str| {
        let t = net.tensors().iter().find(|t| t.name == name).unwrap();
        (t.offset, t.cols)
    };
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let mut hs: Vec<Vec<f64>> = spec.hidden.iter().map(|&n| vec![0.0; n]).collect();
    let mut cs = hs.clone();
    let mut outputs = Vec::new();
    for input in inputs {
        let mut x = input.clone();
        for (l, &n) in spec.hidden.iter().enumerate() {
            let (wi, ci) = tensor(&format!("lstm{l}.w_ih"));
            let (wh, chh) = tensor(&format!("lstm{l}.w_hh"));
            let (bo, _) = tensor(&format!("lstm{l}.bias"));
            let pre = |gate: usize, j: usize| {
                let row = gate * n + j;
                let mut z = p[bo + row];
                for k in 0..ci {
                    z += p[wi + row * ci + k] * x[k];
                }
                for k in 0..chh {
                    z += p[wh + row * chh + k] * hs[l][k];
                }
                z
            };
            let mut h_new = vec![0.0; n];
            let mut c_new = vec![0.0; n];
            for j in 0..n {
                let i = sig(pre(0, j));
                let f = sig(pre(1, j));
                let g = pre(2, j).tanh();
                let o = sig(pre(3, j));
                c_new[j] = f * cs[l][j] + i * g;
                h_new[j] = o * c_new[j].tanh();
            }
            hs[l] = h_new.clone();
            cs[l] = c_new;
            x = h_new;
        }
        let (wo, co) = tensor("out.weight");
        let (bo, _) = tensor("out.bias");
        let y = (0..spec.output)
            .map(|r| {
                let mut z = p[bo + r];
                for k in 0..co {
                    z += p[wo + r * co + k] * x[k];
                }
                match spec.activation {
                    Activation::Identity => z,
                    Activation::Sigmoid => sig(z),
                    Activation::Softplus => (1.0 + z.exp()).ln(),
                }
            })
            .collect();
        outputs.push(y);
    }
    outputs
}

pub fn random_inputs(rng: &mut ChaCha8Rng, frames: usize, size: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..frames).map(|_| (0..size).map(|_| rng.gen_range(-scale..scale)).collect()).collect()
}
