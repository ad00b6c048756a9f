//! Policy networks: a plain MLP over (t, x) with leaky-ReLU hidden layers,
//! flat parameter storage, and an Adam optimizer in ascent form.
//!
//! Three evaluation paths share the same parameters:
//! - scalar evaluation with an x-tangent ([`Mlp::eval_jet`]) for single-path
//!   rollouts recorded on a tape;
//! - a batched matrix evaluator ([`Mlp::eval_batch`]) that the lockstep
//!   simulation engine uses, returning values and x-derivatives for a whole
//!   chunk of paths at once;
//! - a batched vector-Jacobian product ([`Mlp::backprop_batch`]) that turns
//!   per-sample output cotangents into parameter gradients.
//!
//! Leaky-ReLU networks are piecewise linear in x, so the second derivative
//! of the raw output with respect to x is exactly zero almost everywhere;
//! the tape records external nodes with d2 = 0 on that basis.

use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus_f64, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{KeyedRng, STREAM_WEIGHTS};

/// Slope of the leaky-ReLU activations.
pub const LEAKY_SLOPE: f64 = 0.01;
/// Investment-fraction outputs are clamped to this symmetric range.
pub const PI_CLAMP: f64 = 10.0;

/// Which control a network output parameterizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    /// C(t, x) = softplus(m(t, x)) * x: positive, proportional to wealth.
    Consumption,
    /// pi(t, x) = clamp(m(t, x), -10, 10).
    Investment,
}

/// Fully connected network with leaky-ReLU hidden activations and a linear
/// output mapped through its head. Parameters are stored flat as
/// [W1, b1, W2, b2, ...] with row-major (out x in) weight blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<usize>,
    head: Head,
    params: Vec<f64>,
    /// Time inputs are fed as t * t_scale (typically 1/T).
    t_scale: f64,
}

/// Total parameter count for a layer specification.
pub fn param_count(layers: &[usize]) -> usize {
    layers.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn validate_layers(layers: &[usize]) -> Result<()> {
    if layers.len() < 2 || layers.iter().any(|&n| n == 0) {
        return Err(Error::Usage(format!("invalid layer spec {layers:?}")));
    }
    if layers[0] != 2 || *layers.last().unwrap() != 1 {
        return Err(Error::Usage(format!(
            "policy networks take (t, x) and emit one output; got {layers:?}"
        )));
    }
    Ok(())
}

impl Mlp {
    /// Initialize with uniform weights on +-sqrt(6 / fan_in) and zero
    /// biases. `net_tag` separates the draw streams of different networks
    /// under one seed.
    pub fn new(
        layers: &[usize],
        head: Head,
        t_scale: f64,
        rng: &KeyedRng,
        net_tag: u64,
    ) -> Result<Self> {
        validate_layers(layers)?;
        if !(t_scale.is_finite() && t_scale > 0.0) {
            return Err(Error::Config(format!("invalid t_scale {t_scale}")));
        }
        let mut params = vec![0.0f64; param_count(layers)];
        let mut flat = 0u64;
        let mut off = 0usize;
        for w in layers.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            for p in params.iter_mut().skip(off).take(fan_in * fan_out) {
                *p = rng.uniform_in(-bound, bound, STREAM_WEIGHTS, net_tag, flat, 0);
                flat += 1;
            }
            off += fan_in * fan_out + fan_out; // biases stay zero
        }
        Ok(Mlp { layers: layers.to_vec(), head, params, t_scale })
    }

    /// Reassemble from stored pieces (checkpoint loading).
    pub fn from_parts(layers: Vec<usize>, head: Head, params: Vec<f64>, t_scale: f64) -> Result<Self> {
        validate_layers(&layers)?;
        if params.len() != param_count(&layers) {
            return Err(Error::Config(format!(
                "parameter vector length {} does not match layers {:?} (expected {})",
                params.len(),
                layers,
                param_count(&layers)
            )));
        }
        if !(t_scale.is_finite() && t_scale > 0.0) {
            return Err(Error::Config(format!("invalid t_scale {t_scale}")));
        }
        Ok(Mlp { layers, head, params, t_scale })
    }

    /// All-zero parameters; useful as a fixed point in tests (softplus(0)
    /// consumption, zero investment).
    pub fn zeros(layers: &[usize], head: Head, t_scale: f64) -> Result<Self> {
        validate_layers(layers)?;
        Ok(Mlp { layers: layers.to_vec(), head, params: vec![0.0; param_count(layers)], t_scale })
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn t_scale(&self) -> f64 {
        self.t_scale
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn weight_view(&self, layer: usize, off: usize) -> ArrayView2<'_, f64> {
        let (inp, out) = (self.layers[layer], self.layers[layer + 1]);
        ArrayView2::from_shape((out, inp), &self.params[off..off + out * inp]).unwrap()
    }

    /// Raw scalar output m(t, x) together with dm/dx, propagated as a
    /// forward tangent alongside the activations.
    pub fn eval_jet(&self, t: f64, x: f64) -> (f64, f64) {
        let mut h = vec![t * self.t_scale, x];
        let mut u = vec![0.0, 1.0];
        let mut off = 0usize;
        let n_layers = self.layers.len() - 1;
        for l in 0..n_layers {
            let (inp, out) = (self.layers[l], self.layers[l + 1]);
            let w = &self.params[off..off + out * inp];
            let b = &self.params[off + out * inp..off + out * inp + out];
            let mut zh = vec![0.0f64; out];
            let mut zu = vec![0.0f64; out];
            for o in 0..out {
                let row = &w[o * inp..(o + 1) * inp];
                let mut sh = 0.0;
                let mut su = 0.0;
                for i in 0..inp {
                    sh += row[i] * h[i];
                    su += row[i] * u[i];
                }
                zh[o] = sh + b[o];
                zu[o] = su;
            }
            if l + 1 < n_layers {
                for o in 0..out {
                    if zh[o] <= 0.0 {
                        zh[o] *= LEAKY_SLOPE;
                        zu[o] *= LEAKY_SLOPE;
                    }
                }
            }
            h = zh;
            u = zu;
            off += out * inp + out;
        }
        (h[0], u[0])
    }

    /// Raw scalar output only.
    pub fn eval_raw(&self, t: f64, x: f64) -> f64 {
        self.eval_jet(t, x).0
    }

    /// Head-mapped policy value.
    pub fn policy_value(&self, t: f64, x: f64) -> f64 {
        let m = self.eval_raw(t, x);
        match self.head {
            Head::Consumption => softplus_f64(m) * x,
            Head::Investment => m.clamp(-PI_CLAMP, PI_CLAMP),
        }
    }

    /// Record the head-mapped policy on `x`'s tape. The raw network output
    /// enters as an external node carrying (m, dm/dx, 0); the head transform
    /// is recorded as ordinary tape operations.
    pub fn policy_eval<'t>(&self, t: f64, x: Var<'t>) -> Result<Var<'t>> {
        if !t.is_finite() || !x.value().is_finite() {
            return Err(Error::NonFinite("policy evaluation input"));
        }
        let (m, d1) = self.eval_jet(t, x.value());
        let mvar = x.tape().external_unary(x, m, d1, 0.0)?;
        Ok(apply_head(mvar, x, self.head))
    }

    /// Batched raw outputs for a chunk of samples, with x-derivatives when
    /// `want_d1` is set. All paths of a lockstep chunk are evaluated with
    /// three matrix products per layer pass, which is where the training
    /// loop spends its time.
    pub fn eval_batch(&self, ts: &[f64], xs: &[f64], want_d1: bool) -> (Vec<f64>, Vec<f64>) {
        assert_eq!(ts.len(), xs.len());
        let n = ts.len();
        let mut h = Array2::<f64>::zeros((n, 2));
        for (i, (&t, &x)) in ts.iter().zip(xs).enumerate() {
            h[[i, 0]] = t * self.t_scale;
            h[[i, 1]] = x;
        }
        let mut u = Array2::<f64>::zeros((n, 2));
        if want_d1 {
            u.column_mut(1).fill(1.0);
        }
        let n_layers = self.layers.len() - 1;
        let mut off = 0usize;
        for l in 0..n_layers {
            let (inp, out) = (self.layers[l], self.layers[l + 1]);
            let w = self.weight_view(l, off);
            let b = &self.params[off + out * inp..off + out * inp + out];
            let mut z = h.dot(&w.t());
            for mut row in z.rows_mut() {
                for (o, zo) in row.iter_mut().enumerate() {
                    *zo += b[o];
                }
            }
            let mut zu = if want_d1 { u.dot(&w.t()) } else { Array2::zeros((0, 0)) };
            if l + 1 < n_layers {
                if want_d1 {
                    for (zv, uv) in z.iter_mut().zip(zu.iter_mut()) {
                        if *zv <= 0.0 {
                            *zv *= LEAKY_SLOPE;
                            *uv *= LEAKY_SLOPE;
                        }
                    }
                } else {
                    for zv in z.iter_mut() {
                        if *zv <= 0.0 {
                            *zv *= LEAKY_SLOPE;
                        }
                    }
                }
            }
            h = z;
            u = zu;
            off += out * inp + out;
        }
        let m = h.column(0).to_vec();
        let d1 = if want_d1 { u.column(0).to_vec() } else { vec![0.0; n] };
        (m, d1)
    }

    /// Accumulate parameter gradients for a chunk: given cotangents
    /// dL/dm per sample, add dL/dparams into `grad_acc` (same flat layout as
    /// [`Mlp::params`]). Activations are recomputed here rather than stored
    /// across the whole horizon; the caller invokes this once per time step.
    pub fn backprop_batch(&self, ts: &[f64], xs: &[f64], cot_m: &[f64], grad_acc: &mut [f64]) {
        let n = ts.len();
        assert_eq!(xs.len(), n);
        assert_eq!(cot_m.len(), n);
        assert_eq!(grad_acc.len(), self.params.len());
        let n_layers = self.layers.len() - 1;

        // Forward pass, keeping each layer's input and activation mask.
        let mut acts: Vec<Array2<f64>> = Vec::with_capacity(n_layers + 1);
        let mut masks: Vec<Array2<f64>> = Vec::with_capacity(n_layers.saturating_sub(1));
        let mut h = Array2::<f64>::zeros((n, 2));
        for (i, (&t, &x)) in ts.iter().zip(xs).enumerate() {
            h[[i, 0]] = t * self.t_scale;
            h[[i, 1]] = x;
        }
        acts.push(h);
        let mut off = 0usize;
        let mut offsets = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (inp, out) = (self.layers[l], self.layers[l + 1]);
            offsets.push(off);
            let w = self.weight_view(l, off);
            let b = &self.params[off + out * inp..off + out * inp + out];
            let mut z = acts[l].dot(&w.t());
            for mut row in z.rows_mut() {
                for (o, zo) in row.iter_mut().enumerate() {
                    *zo += b[o];
                }
            }
            if l + 1 < n_layers {
                let mut mask = Array2::<f64>::from_elem(z.dim(), 1.0);
                for (zv, mv) in z.iter_mut().zip(mask.iter_mut()) {
                    if *zv <= 0.0 {
                        *zv *= LEAKY_SLOPE;
                        *mv = LEAKY_SLOPE;
                    }
                }
                masks.push(mask);
            }
            acts.push(z);
            off += out * inp + out;
        }

        // Reverse pass: dz starts as the output cotangent column.
        let mut dz = Array2::<f64>::from_shape_vec((n, 1), cot_m.to_vec()).unwrap();
        for l in (0..n_layers).rev() {
            let (inp, out) = (self.layers[l], self.layers[l + 1]);
            let off = offsets[l];
            {
                let dw = &mut grad_acc[off..off + out * inp];
                let mut dw_view = ArrayViewMut2::from_shape((out, inp), dw).unwrap();
                ndarray::linalg::general_mat_mul(1.0, &dz.t(), &acts[l], 1.0, &mut dw_view);
            }
            {
                let db = &mut grad_acc[off + out * inp..off + out * inp + out];
                for row in dz.rows() {
                    for (o, v) in row.iter().enumerate() {
                        db[o] += v;
                    }
                }
            }
            if l > 0 {
                let w = self.weight_view(l, off);
                let dh = dz.dot(&w);
                dz = dh * &masks[l - 1];
            }
        }
    }
}

/// Map a raw-output tape node through a control head.
pub fn apply_head<'t>(m: Var<'t>, x: Var<'t>, head: Head) -> Var<'t> {
    match head {
        Head::Consumption => m.softplus() * x,
        Head::Investment => m.clamp_const(-PI_CLAMP, PI_CLAMP),
    }
}

/// Record the policy value on a tape from a precomputed (m, d1) pair, as the
/// lockstep engine does after a batched evaluation.
pub fn policy_from_jet<'t>(
    tape: &'t Tape,
    x: Var<'t>,
    m: f64,
    d1: f64,
    head: Head,
) -> Result<Var<'t>> {
    let mvar = tape.external_unary(x, m, d1, 0.0)?;
    Ok(apply_head(mvar, x, head))
}

/// Adam accumulator state for one parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Number of parameters this state tracks.
    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// One Adam update in gradient-ascent form: params move along the gradient.
/// Non-finite gradients leave both params and state untouched.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Usage(format!(
            "adam_step length mismatch: {} params, {} grads, {} accumulators",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if !(lr > 0.0) {
        return Err(Error::Usage(format!("adam_step requires lr > 0, got {lr}")));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient passed to adam_step"));
    }
    state.step += 1;
    let b1c = 1.0 - state.beta1.powi(state.step as i32);
    let b2c = 1.0 - state.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let mhat = state.m[i] / b1c;
        let vhat = state.v[i] / b2c;
        params[i] += lr * mhat / (vhat.sqrt() + state.eps);
    }
    Ok(())
}

/// Bundle of a policy pair: the investment network and the consumption
/// network that together define the control.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyPair {
    pub pi_net: Mlp,
    pub c_net: Mlp,
}
