//! Small stacked LSTM networks with exact backpropagation through time.
//!
//! A [`RecurrentNet`] is one or more LSTM layers followed by a dense output
//! projection and an elementwise activation. All parameters live in one flat
//! vector whose layout is described by [`NetSpec::tensors`]; gradients use
//! the same layout, which keeps the optimizer and serialization trivial.
//!
//! Gate rows are ordered input, forget, cell, output:
//!
//! ```text
//! a = W_ih·x + W_hh·h_prev + b
//! i = σ(a_i)  f = σ(a_f)  g = tanh(a_g)  o = σ(a_o)
//! c = f⊙c_prev + i⊙g      h = o⊙tanh(c)
//! y = act(W_out·h_top + b_out)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::{all_finite, Real};

/// Offset and scale applied to log-power features before they enter a net.
pub const LOG_FEATURE_MEAN: f64 = -5.0;
pub const LOG_FEATURE_SCALE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    Sigmoid,
    Softplus,
}

impl Activation {
    fn id(self) -> u32 {
        match self {
            Activation::Identity => 0,
            Activation::Sigmoid => 1,
            Activation::Softplus => 2,
        }
    }

    fn from_id(id: u32) -> Result<Self> {
        match id {
            0 => Ok(Activation::Identity),
            1 => Ok(Activation::Sigmoid),
            2 => Ok(Activation::Softplus),
            _ => Err(Error::format(format!("unknown activation id {id}"))),
        }
    }

    #[inline]
    pub fn apply<T: Real>(self, z: T) -> T {
        match self {
            Activation::Identity => z,
            Activation::Sigmoid => sigmoid(z),
            Activation::Softplus => softplus(z),
        }
    }

    #[inline]
    pub fn derivative<T: Real>(self, z: T, y: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Softplus => sigmoid(z),
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Architecture of a [`RecurrentNet`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input: usize,
    /// Hidden size of each stacked LSTM layer.
    pub hidden: Vec<usize>,
    pub output: usize,
    pub activation: Activation,
}

/// Position of one named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

impl NetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.output == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config(format!("degenerate network shape {self:?}")));
        }
        Ok(())
    }

    pub fn tensors(&self) -> Vec<TensorInfo> {
        let mut out = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, rows: usize, cols: usize| {
            out.push(TensorInfo { name, offset, rows, cols });
            offset += rows * cols;
        };
        let mut fan_in = self.input;
        for (l, &h) in self.hidden.iter().enumerate() {
            push(format!("lstm{l}.w_ih"), 4 * h, fan_in);
            push(format!("lstm{l}.w_hh"), 4 * h, h);
            push(format!("lstm{l}.bias"), 4 * h, 1);
            fan_in = h;
        }
        push("out.weight".into(), self.output, fan_in);
        push("out.bias".into(), self.output, 1);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().last().map_or(0, |t| t.offset + t.len())
    }

    /// Ratio-mask estimator: concatenated log powers of two spectra in,
    /// one sigmoid gain per bin out.
    pub fn mask(num_bins: usize, hidden: usize, layers: usize) -> Self {
        Self { input: 2 * num_bins, hidden: vec![hidden; layers], output: num_bins, activation: Activation::Sigmoid }
    }

    /// Covariance estimator: one feature per bin in, one nonnegative value
    /// per bin out.
    pub fn covariance(num_bins: usize, hidden: usize) -> Self {
        Self { input: num_bins, hidden: vec![hidden], output: num_bins, activation: Activation::Softplus }
    }
}

/// Per-layer cell and hidden vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState<T> {
    pub h: Vec<Vec<T>>,
    pub c: Vec<Vec<T>>,
}

impl<T: Real> HiddenState<T> {
    pub fn zeros(spec: &NetSpec) -> Self {
        Self {
            h: spec.hidden.iter().map(|&n| vec![T::zero(); n]).collect(),
            c: spec.hidden.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.h.iter().chain(&self.c).all(|v| all_finite(v))
    }
}

#[derive(Debug, Clone, Default)]
struct LayerTape<T> {
    x: Vec<T>,
    h_prev: Vec<T>,
    c_prev: Vec<T>,
    /// Activated gates `[i, f, g, o]`.
    gates: Vec<T>,
    tanh_c: Vec<T>,
}

/// Values cached by one forward step for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct StepTape<T> {
    layers: Vec<LayerTape<T>>,
    z: Vec<T>,
    y: Vec<T>,
}

impl<T: Real> StepTape<T> {
    pub fn output(&self) -> &[T] {
        &self.y
    }
}

/// Gradient carried backwards across time steps: `∂L/∂h` and `∂L/∂c` of the
/// previous step's state.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardCarry<T> {
    pub dh: Vec<Vec<T>>,
    pub dc: Vec<Vec<T>>,
}

impl<T: Real> BackwardCarry<T> {
    pub fn zeros(spec: &NetSpec) -> Self {
        let z = HiddenState::<T>::zeros(spec);
        Self { dh: z.h, dc: z.c }
    }
}

/// Result of a full-sequence backward pass.
#[derive(Debug, Clone)]
pub struct SequenceGradients<T> {
    pub params: Vec<T>,
    /// Gradient with respect to the initial hidden state.
    pub initial: BackwardCarry<T>,
    pub inputs: Vec<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentNet<T> {
    spec: NetSpec,
    tensors: Vec<TensorInfo>,
    params: Vec<T>,
}

// out += M·x for row-major M (rows × x.len()).
#[inline]
fn gemv_acc<T: Real>(out: &mut [T], m: &[T], x: &[T]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(m.chunks_exact(cols)) {
        *o += row.iter().zip(x).map(|(&a, &b)| a * b).sum::<T>();
    }
}

// out += Mᵀ·v.
#[inline]
fn gemv_t_acc<T: Real>(out: &mut [T], m: &[T], v: &[T]) {
    let cols = out.len();
    for (&vr, row) in v.iter().zip(m.chunks_exact(cols)) {
        if vr != T::zero() {
            for (o, &a) in out.iter_mut().zip(row) {
                *o += a * vr;
            }
        }
    }
}

// M += v·xᵀ.
#[inline]
fn ger<T: Real>(m: &mut [T], v: &[T], x: &[T]) {
    let cols = x.len();
    for (&vr, row) in v.iter().zip(m.chunks_exact_mut(cols)) {
        if vr != T::zero() {
            for (a, &b) in row.iter_mut().zip(x) {
                *a += vr * b;
            }
        }
    }
}

impl<T: Real> RecurrentNet<T> {
    /// Uniform init in `±1/sqrt(fan_in)` with forget-gate biases at +1.
    pub fn new(spec: NetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let tensors = spec.tensors();
        let mut params = vec![T::zero(); spec.param_count()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fan_in = spec.input;
        for (l, &h) in spec.hidden.iter().enumerate() {
            let bound = 1.0 / ((fan_in + h) as f64).sqrt();
            for t in &tensors[3 * l..3 * l + 2] {
                for p in &mut params[t.range()] {
                    *p = T::lit(rng.gen_range(-bound..bound));
                }
            }
            let bias = &tensors[3 * l + 2];
            for p in &mut params[bias.offset + h..bias.offset + 2 * h] {
                *p = T::one();
            }
            fan_in = h;
        }
        let bound = 1.0 / (fan_in as f64).sqrt();
        let out_w = &tensors[tensors.len() - 2];
        for p in &mut params[out_w.range()] {
            *p = T::lit(rng.gen_range(-bound..bound));
        }
        Ok(Self { spec, tensors, params })
    }

    pub fn from_params(spec: NetSpec, params: Vec<T>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(Error::shape(format!(
                "{} parameters supplied, architecture needs {}",
                params.len(),
                spec.param_count()
            )));
        }
        let tensors = spec.tensors();
        Ok(Self { spec, tensors, params })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.tensors
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn zero_state(&self) -> HiddenState<T> {
        HiddenState::zeros(&self.spec)
    }

    fn tensor(&self, i: usize) -> &[T] {
        &self.params[self.tensors[i].range()]
    }

    /// Pure single step: returns the output and the next state.
    pub fn forward(&self, input: &[T], state: &HiddenState<T>) -> Result<(Vec<T>, HiddenState<T>)> {
        if input.len() != self.spec.input {
            return Err(Error::shape(format!("net expects {} inputs, got {}", self.spec.input, input.len())));
        }
        let mut next = state.clone();
        let y = self.step(input, &mut next, None);
        Ok((y, next))
    }

    /// In-place step; records a tape when asked. Panics on a wrong input size.
    pub fn step(&self, input: &[T], state: &mut HiddenState<T>, mut tape: Option<&mut StepTape<T>>) -> Vec<T> {
        assert_eq!(input.len(), self.spec.input, "network input size");
        if let Some(t) = tape.as_deref_mut() {
            t.layers.resize_with(self.spec.hidden.len(), Default::default);
        }
        let mut x = input.to_vec();
        for (l, &h) in self.spec.hidden.iter().enumerate() {
            let w_ih = self.tensor(3 * l);
            let w_hh = self.tensor(3 * l + 1);
            let bias = self.tensor(3 * l + 2);
            let mut a = bias.to_vec();
            gemv_acc(&mut a, w_ih, &x);
            gemv_acc(&mut a, w_hh, &state.h[l]);
            for v in &mut a[..2 * h] {
                *v = sigmoid(*v);
            }
            for v in &mut a[2 * h..3 * h] {
                *v = v.tanh();
            }
            for v in &mut a[3 * h..] {
                *v = sigmoid(*v);
            }
            let mut c = vec![T::zero(); h];
            let mut tanh_c = vec![T::zero(); h];
            let mut h_new = vec![T::zero(); h];
            for j in 0..h {
                c[j] = a[h + j] * state.c[l][j] + a[j] * a[2 * h + j];
                tanh_c[j] = c[j].tanh();
                h_new[j] = a[3 * h + j] * tanh_c[j];
            }
            let h_prev = std::mem::replace(&mut state.h[l], h_new);
            let c_prev = std::mem::replace(&mut state.c[l], c);
            let next_x = state.h[l].clone();
            if let Some(t) = tape.as_deref_mut() {
                t.layers[l] = LayerTape { x: std::mem::take(&mut x), h_prev, c_prev, gates: a, tanh_c };
            }
            x = next_x;
        }
        let n = self.tensors.len();
        let mut z = self.tensor(n - 1).to_vec();
        gemv_acc(&mut z, self.tensor(n - 2), &x);
        let act = self.spec.activation;
        let y: Vec<T> = z.iter().map(|&v| act.apply(v)).collect();
        if let Some(t) = tape {
            t.z = z;
            t.y = y.clone();
        }
        y
    }

    /// Backward through one step. Accumulates parameter gradients into
    /// `grads`, consumes and replaces `carry` with the gradient of the
    /// previous state, and returns the gradient with respect to the input.
    pub fn backward_step(&self, tape: &StepTape<T>, g_out: &[T], carry: &mut BackwardCarry<T>, grads: &mut [T]) -> Vec<T> {
        assert_eq!(g_out.len(), self.spec.output);
        assert_eq!(grads.len(), self.params.len());
        let n = self.tensors.len();
        let act = self.spec.activation;
        let g_z: Vec<T> = g_out
            .iter()
            .zip(tape.z.iter().zip(&tape.y))
            .map(|(&g, (&z, &y))| g * act.derivative(z, y))
            .collect();
        let top = self.spec.hidden.len() - 1;
        let h_top: Vec<T> = {
            let lt = &tape.layers[top];
            (0..self.spec.hidden[top]).map(|j| lt.gates[3 * self.spec.hidden[top] + j] * lt.tanh_c[j]).collect()
        };
        ger(&mut grads[self.tensors[n - 2].range()], &g_z, &h_top);
        for (g, &v) in grads[self.tensors[n - 1].range()].iter_mut().zip(&g_z) {
            *g += v;
        }
        let mut dh_above = vec![T::zero(); self.spec.hidden[top]];
        gemv_t_acc(&mut dh_above, self.tensor(n - 2), &g_z);

        for l in (0..self.spec.hidden.len()).rev() {
            let h = self.spec.hidden[l];
            let lt = &tape.layers[l];
            let (gi, gf, gg, go) = (&lt.gates[..h], &lt.gates[h..2 * h], &lt.gates[2 * h..3 * h], &lt.gates[3 * h..]);
            let mut da = vec![T::zero(); 4 * h];
            let mut dc_prev = vec![T::zero(); h];
            for j in 0..h {
                let dh = dh_above[j] + carry.dh[l][j];
                let dc = carry.dc[l][j] + dh * go[j] * (T::one() - lt.tanh_c[j] * lt.tanh_c[j]);
                let d_o = dh * lt.tanh_c[j];
                let d_i = dc * gg[j];
                let d_g = dc * gi[j];
                let d_f = dc * lt.c_prev[j];
                dc_prev[j] = dc * gf[j];
                da[j] = d_i * gi[j] * (T::one() - gi[j]);
                da[h + j] = d_f * gf[j] * (T::one() - gf[j]);
                da[2 * h + j] = d_g * (T::one() - gg[j] * gg[j]);
                da[3 * h + j] = d_o * go[j] * (T::one() - go[j]);
            }
            ger(&mut grads[self.tensors[3 * l].range()], &da, &lt.x);
            ger(&mut grads[self.tensors[3 * l + 1].range()], &da, &lt.h_prev);
            for (g, &v) in grads[self.tensors[3 * l + 2].range()].iter_mut().zip(&da) {
                *g += v;
            }
            let mut dx = vec![T::zero(); lt.x.len()];
            gemv_t_acc(&mut dx, self.tensor(3 * l), &da);
            let mut dh_prev = vec![T::zero(); h];
            gemv_t_acc(&mut dh_prev, self.tensor(3 * l + 1), &da);
            carry.dh[l] = dh_prev;
            carry.dc[l] = dc_prev;
            dh_above = dx;
        }
        dh_above
    }

    /// Runs `inputs` from `initial` and records one tape per step.
    pub fn forward_sequence(&self, inputs: &[Vec<T>], initial: &HiddenState<T>) -> Result<(Vec<StepTape<T>>, HiddenState<T>)> {
        let mut state = initial.clone();
        let mut tapes = Vec::with_capacity(inputs.len());
        for x in inputs {
            if x.len() != self.spec.input {
                return Err(Error::shape(format!("net expects {} inputs, got {}", self.spec.input, x.len())));
            }
            let mut tape = StepTape::default();
            self.step(x, &mut state, Some(&mut tape));
            tapes.push(tape);
        }
        Ok((tapes, state))
    }

    /// Exact BPTT over a recorded sequence given `∂L/∂y_t` for every step.
    pub fn backward(&self, tapes: &[StepTape<T>], g_outputs: &[Vec<T>]) -> Result<SequenceGradients<T>> {
        if tapes.len() != g_outputs.len() {
            return Err(Error::shape(format!("{} tapes but {} output gradients", tapes.len(), g_outputs.len())));
        }
        if let Some(bad) = g_outputs.iter().find(|g| g.len() != self.spec.output) {
            return Err(Error::shape(format!("output gradient of length {}, expected {}", bad.len(), self.spec.output)));
        }
        if tapes.iter().any(|t| t.layers.len() != self.spec.hidden.len() || t.y.len() != self.spec.output) {
            return Err(Error::shape("tape was not recorded by this network"));
        }
        let mut grads = vec![T::zero(); self.params.len()];
        let mut carry = BackwardCarry::zeros(&self.spec);
        let mut inputs = vec![Vec::new(); tapes.len()];
        for t in (0..tapes.len()).rev() {
            inputs[t] = self.backward_step(&tapes[t], &g_outputs[t], &mut carry, &mut grads);
        }
        Ok(SequenceGradients { params: grads, initial: carry, inputs })
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.params)
    }
}

/// Worst finite-difference disagreement for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub worst_relative_error: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.worst_relative_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_relative_error() < self.tolerance
    }
}

/// Relative error with an absolute floor so vanishing gradients compare on
/// an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Scalar objective used by the gradient check: `Σ_t ⟨w_t, y_t⟩`.
fn weighted_output_sum(net: &RecurrentNet<f64>, inputs: &[Vec<f64>], weights: &[Vec<f64>]) -> f64 {
    let mut state = net.zero_state();
    inputs
        .iter()
        .zip(weights)
        .map(|(x, w)| {
            let y = net.step(x, &mut state, None);
            y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>()
        })
        .sum()
}

/// Analytic gradient of `Σ_t ⟨w_t, y_t⟩` from a zero initial state.
pub fn analytic_gradient(net: &RecurrentNet<f64>, inputs: &[Vec<f64>], weights: &[Vec<f64>]) -> Result<Vec<f64>> {
    let (tapes, _) = net.forward_sequence(inputs, &net.zero_state())?;
    Ok(net.backward(&tapes, weights)?.params)
}

/// Central finite differences of the same objective.
pub fn numeric_gradient(net: &RecurrentNet<f64>, inputs: &[Vec<f64>], weights: &[Vec<f64>], step: f64) -> Vec<f64> {
    let mut probe = net.clone();
    (0..net.params.len())
        .map(|i| {
            let orig = probe.params[i];
            probe.params[i] = orig + step;
            let up = weighted_output_sum(&probe, inputs, weights);
            probe.params[i] = orig - step;
            let down = weighted_output_sum(&probe, inputs, weights);
            probe.params[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

pub fn compare_gradients(net: &RecurrentNet<f64>, analytic: &[f64], numeric: &[f64], tolerance: f64) -> GradCheckReport {
    let tensors = net
        .tensors
        .iter()
        .map(|t| {
            let (worst_index, worst) = t
                .range()
                .map(|i| relative_error(analytic[i], numeric[i]))
                .enumerate()
                .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
            TensorCheck { name: t.name.clone(), worst_relative_error: worst, worst_index }
        })
        .collect();
    GradCheckReport { tensors, tolerance }
}

/// Compares BPTT against central differences over every parameter.
pub fn grad_check(
    net: &RecurrentNet<f64>,
    inputs: &[Vec<f64>],
    weights: &[Vec<f64>],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let analytic = analytic_gradient(net, inputs, weights)?;
    let numeric = numeric_gradient(net, inputs, weights, step);
    Ok(compare_gradients(net, &analytic, &numeric, tolerance))
}

const WEIGHT_MAGIC: &[u8; 4] = b"HKNN";
const WEIGHT_VERSION: u32 = 1;

/// Weight file layout (little-endian): magic `HKNN`, u32 version, u32 input
/// size, u32 layer count, one u32 hidden size per layer, u32 output size,
/// u32 activation id (0 identity, 1 sigmoid, 2 softplus), u64 parameter
/// count, then the flat parameters as f64 in [`NetSpec::tensors`] order
/// (each tensor row-major).
pub fn encode_params<T: Real>(net: &RecurrentNet<T>) -> Vec<u8> {
    let s = &net.spec;
    let mut out = Vec::with_capacity(32 + 8 * net.params.len());
    out.extend_from_slice(WEIGHT_MAGIC);
    for v in [WEIGHT_VERSION, s.input as u32, s.hidden.len() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &h in &s.hidden {
        out.extend_from_slice(&(h as u32).to_le_bytes());
    }
    out.extend_from_slice(&(s.output as u32).to_le_bytes());
    out.extend_from_slice(&s.activation.id().to_le_bytes());
    out.extend_from_slice(&(net.params.len() as u64).to_le_bytes());
    for p in &net.params {
        out.extend_from_slice(&p.as_f64().to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format("weight file is truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decodes one network from the front of `bytes`; returns it with the
/// number of bytes consumed.
pub fn decode_params<T: Real>(bytes: &[u8]) -> Result<(RecurrentNet<T>, usize)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != WEIGHT_MAGIC {
        return Err(Error::format("not a network weight file"));
    }
    let version = c.u32()?;
    if version != WEIGHT_VERSION {
        return Err(Error::format(format!("unsupported weight file version {version}")));
    }
    let input = c.u32()? as usize;
    let layers = c.u32()? as usize;
    if layers == 0 || layers > 64 {
        return Err(Error::format(format!("implausible layer count {layers}")));
    }
    let hidden = (0..layers).map(|_| c.u32().map(|h| h as usize)).collect::<Result<Vec<_>>>()?;
    let output = c.u32()? as usize;
    let activation = Activation::from_id(c.u32()?)?;
    let spec = NetSpec { input, hidden, output, activation };
    spec.validate().map_err(|e| Error::format(e.to_string()))?;
    let count = c.u64()? as usize;
    if count != spec.param_count() {
        return Err(Error::format(format!(
            "header declares {count} parameters but the architecture has {}",
            spec.param_count()
        )));
    }
    let body = c.take(count * 8)?;
    let params: Vec<T> = body.chunks_exact(8).map(|b| T::lit(f64::from_le_bytes(b.try_into().unwrap()))).collect();
    if !all_finite(&params) {
        return Err(Error::format("weight file contains non-finite values"));
    }
    let consumed = c.pos;
    Ok((RecurrentNet::from_params(spec, params)?, consumed))
}

pub fn save_params<T: Real>(net: &RecurrentNet<T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_params(net))?;
    w.flush()?;
    Ok(())
}

pub fn load_params<T: Real>(path: &Path) -> Result<RecurrentNet<T>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let (net, used) = decode_params(&bytes)?;
    if used != bytes.len() {
        return Err(Error::format(format!("{} trailing bytes after the weights", bytes.len() - used)));
    }
    Ok(net)
}

/// Loads a file and checks it has the expected architecture.
pub fn load_params_expecting<T: Real>(path: &Path, spec: &NetSpec) -> Result<RecurrentNet<T>> {
    let net = load_params(path)?;
    if net.spec() != spec {
        return Err(Error::shape(format!("weight file holds {:?}, expected {:?}", net.spec(), spec)));
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_net(activation: Activation) -> RecurrentNet<f64> {
        let spec = NetSpec { input: 3, hidden: vec![4, 2], output: 5, activation };
        let n = spec.param_count();
        RecurrentNet::from_params(spec, vec![0.0; n]).unwrap()
    }

    #[test]
    fn zero_weights_give_activation_of_zero() {
        let net = zero_net(Activation::Sigmoid);
        let (y, _) = net.forward(&[1.0, -2.0, 3.0], &net.zero_state()).unwrap();
        assert!(y.iter().all(|&v| v == 0.5));
        let net = zero_net(Activation::Softplus);
        let (y, _) = net.forward(&[1.0, -2.0, 3.0], &net.zero_state()).unwrap();
        assert!(y.iter().all(|&v| (v - 2f64.ln()).abs() < 1e-15));
    }

    #[test]
    fn input_size_is_checked() {
        let net = zero_net(Activation::Identity);
        assert!(matches!(net.forward(&[1.0], &net.zero_state()), Err(Error::Shape(_))));
    }

    #[test]
    fn layout_and_init() {
        let spec = NetSpec::mask(65, 32, 2);
        let t = spec.tensors();
        assert_eq!(t[0].rows, 128);
        assert_eq!(t[0].cols, 130);
        assert_eq!(spec.param_count(), 4 * 32 * (130 + 32 + 1) + 4 * 32 * (32 + 32 + 1) + 65 * 33);
        let net = RecurrentNet::<f64>::new(spec, 1).unwrap();
        let bias = &net.params()[t[2].range()];
        assert!(bias[32..64].iter().all(|&b| b == 1.0));
        assert!(bias[..32].iter().all(|&b| b == 0.0));
        let bound = 1.0 / (162f64).sqrt();
        assert!(net.params()[t[0].range()].iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn covariance_nets_at_full_width() {
        // two single-layer 65-unit cells with 65-wide projections: ~0.08 M parameters
        let spec = NetSpec::covariance(65, 65);
        assert_eq!(2 * spec.param_count(), 76_700);
    }

    #[test]
    fn zero_output_gradient_gives_zero_parameter_gradient() {
        let net = RecurrentNet::<f64>::new(NetSpec { input: 4, hidden: vec![5], output: 3, activation: Activation::Sigmoid }, 3)
            .unwrap();
        let inputs: Vec<Vec<f64>> = (0..6).map(|t| vec![t as f64 * 0.1; 4]).collect();
        let (tapes, _) = net.forward_sequence(&inputs, &net.zero_state()).unwrap();
        let g = net.backward(&tapes, &vec![vec![0.0; 3]; 6]).unwrap();
        assert!(g.params.iter().all(|&v| v == 0.0));
        assert!(g.initial.dh.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn single_unit_linear_output_by_hand() {
        // input 1, hidden 1, output 1, identity output, one step from zero state
        let spec = NetSpec { input: 1, hidden: vec![1], output: 1, activation: Activation::Identity };
        // w_ih = [wi, wf, wg, wo], w_hh, bias, out.weight, out.bias
        let (wi, wf, wg, wo) = (0.3, -0.2, 0.7, 0.5);
        let (bi, bf, bg, bo) = (0.1, 1.0, -0.1, 0.2);
        let (v, c0) = (1.3, -0.4);
        let params = vec![wi, wf, wg, wo, 0.9, 0.8, -0.7, 0.6, bi, bf, bg, bo, v, c0];
        let net = RecurrentNet::from_params(spec, params).unwrap();
        let x = 0.8;
        let (tapes, _) = net.forward_sequence(&[vec![x]], &net.zero_state()).unwrap();
        let g = net.backward(&tapes, &[vec![1.0]]).unwrap().params;

        let s = |a: f64| 1.0 / (1.0 + (-a).exp());
        let (i, g_, o) = (s(wi * x + bi), (wg * x + bg).tanh(), s(wo * x + bo));
        let c = i * g_;
        let h = o * c.tanh();
        // y = v·h + c0
        let dh = v;
        let dc = dh * o * (1.0 - c.tanh().powi(2));
        let dai = dc * g_ * i * (1.0 - i);
        let dag = dc * i * (1.0 - g_ * g_);
        let dao = dh * c.tanh() * o * (1.0 - o);
        // forget gate multiplies a zero previous cell
        let expected_w_ih = [dai * x, 0.0, dag * x, dao * x];
        for k in 0..4 {
            assert!((g[k] - expected_w_ih[k]).abs() < 1e-15, "w_ih[{k}]");
            assert_eq!(g[4 + k], 0.0, "w_hh sees a zero previous hidden state");
        }
        assert!((g[8] - dai).abs() < 1e-15);
        assert!((g[12] - h).abs() < 1e-15);
        assert_eq!(g[13], 1.0);
    }

    #[test]
    fn bptt_matches_finite_differences() {
        let spec = NetSpec { input: 4, hidden: vec![5], output: 3, activation: Activation::Sigmoid };
        let net = RecurrentNet::<f64>::new(spec, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs: Vec<Vec<f64>> = (0..6).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let weights: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let report = grad_check(&net, &inputs, &weights, 1e-5, 1e-4).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn corrupted_gradient_fails_the_check() {
        let spec = NetSpec { input: 4, hidden: vec![5], output: 3, activation: Activation::Softplus };
        let net = RecurrentNet::<f64>::new(spec, 5).unwrap();
        let inputs: Vec<Vec<f64>> = (0..4).map(|t| vec![0.2 * t as f64 - 0.3; 4]).collect();
        let weights = vec![vec![1.0, -0.5, 0.25]; 4];
        let mut analytic = analytic_gradient(&net, &inputs, &weights).unwrap();
        let numeric = numeric_gradient(&net, &inputs, &weights, 1e-5);
        assert!(compare_gradients(&net, &analytic, &numeric, 1e-4).passed());
        analytic[7] += 1e-2;
        let report = compare_gradients(&net, &analytic, &numeric, 1e-4);
        assert!(!report.passed());
        assert_eq!(report.tensors[0].name, "lstm0.w_ih");
        assert_eq!(report.tensors[0].worst_index, 7);
    }

    #[test]
    fn weight_file_round_trip_and_errors() {
        let net = RecurrentNet::<f64>::new(NetSpec::mask(9, 6, 2), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.hknn");
        save_params(&net, &path).unwrap();
        let back: RecurrentNet<f64> = load_params(&path).unwrap();
        assert_eq!(back, net);
        assert!(load_params_expecting::<f64>(&path, &NetSpec::mask(9, 7, 2)).is_err());

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_params::<f64>(&path), Err(Error::Format(_))));

        // header claims a different hidden size than the data supports
        let mut bad = bytes.clone();
        bad[16..20].copy_from_slice(&7u32.to_le_bytes());
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_params::<f64>(&path), Err(Error::Format(_))));
    }
}
