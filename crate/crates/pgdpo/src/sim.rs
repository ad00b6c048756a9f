//! Wealth-path simulation: initial-node sampling, Euler-Maruyama steps, and
//! rollouts of the discounted objective, either recorded on autodiff tapes
//! or as plain values.
//!
//! The dynamics are written once, generic over a scalar type ([`Real`]); the
//! tape instantiation and the f64 instantiation therefore perform bit-for-bit
//! identical arithmetic, which the finite-difference checks rely on.
//!
//! Batches run in lockstep chunks of [`CHUNK`] paths: at each time step the
//! policy networks are evaluated for the whole chunk with two or three matrix
//! products ([`crate::nn::Mlp::eval_batch`]) and the results are spliced into
//! the per-path tapes as external nodes. Chunk boundaries depend only on the
//! path index, never on thread count, so reductions over chunks in index
//! order make every result independent of parallelism.

use rayon::prelude::*;

use crate::autodiff::{softplus_f64, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{self, Domain, MarketParams};
use crate::nn::{apply_head, Head, Mlp, PI_CLAMP};
use crate::rng::{KeyedRng, STREAM_NODES, STREAM_NOISE};

/// Paths per lockstep chunk. Fixed: chunk layout must not depend on the
/// environment or the batch size, or determinism across configurations dies.
pub const CHUNK: usize = 128;

/// Wealth is kept above this level by a smooth floor.
pub const WEALTH_FLOOR: f64 = 1e-6;

/// Stiffness of the smooth floor; a power of two so the two scalings are
/// exact, and the floor is an exact identity-with-slope-one for wealth a few
/// dozen ulps above the floor.
const FLOOR_BETA: f64 = 1_048_576.0; // 2^20

/// Fraction of current wealth per unit time that consumption may drain
/// inside the drift.
const DRAIN_CAP: f64 = 0.99;

/// A sampled starting point (t0, x0) of the extended objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitialNode {
    pub t0: f64,
    pub x0: f64,
}

/// Uniform draw of an initial node, keyed by (iteration, path).
pub fn sample_initial_node(d: &Domain, rng: &KeyedRng, iter: u64, path: u64) -> InitialNode {
    InitialNode {
        t0: rng.uniform_in(d.t_min, d.t_max, STREAM_NODES, iter, path, 0),
        x0: rng.uniform_in(d.x_min, d.x_max, STREAM_NODES, iter, path, 1),
    }
}

/// Scalar abstraction the dynamics are written against. Implemented by f64
/// (plain values) and [`Var`] (tape recording); the operations mirror each
/// other exactly.
pub(crate) trait Real: Copy {
    fn add(self, o: Self) -> Self;
    fn sub(self, o: Self) -> Self;
    fn mul(self, o: Self) -> Self;
    fn add_const(self, c: f64) -> Self;
    fn mul_const(self, c: f64) -> Self;
    fn powf_const(self, c: f64) -> Self;
    fn softplus(self) -> Self;
    /// Ties select `self`, matching the tape convention.
    fn minimum(self, o: Self) -> Self;
    fn val(self) -> f64;
}

impl Real for f64 {
    fn add(self, o: f64) -> f64 {
        self + o
    }
    fn sub(self, o: f64) -> f64 {
        self - o
    }
    fn mul(self, o: f64) -> f64 {
        self * o
    }
    fn add_const(self, c: f64) -> f64 {
        self + c
    }
    fn mul_const(self, c: f64) -> f64 {
        self * c
    }
    fn powf_const(self, c: f64) -> f64 {
        self.powf(c)
    }
    fn softplus(self) -> f64 {
        softplus_f64(self)
    }
    fn minimum(self, o: f64) -> f64 {
        if self <= o {
            self
        } else {
            o
        }
    }
    fn val(self) -> f64 {
        self
    }
}

impl<'t> Real for Var<'t> {
    fn add(self, o: Self) -> Self {
        self + o
    }
    fn sub(self, o: Self) -> Self {
        self - o
    }
    fn mul(self, o: Self) -> Self {
        self * o
    }
    fn add_const(self, c: f64) -> Self {
        self + c
    }
    fn mul_const(self, c: f64) -> Self {
        self * c
    }
    fn powf_const(self, c: f64) -> Self {
        self.powf(c)
    }
    fn softplus(self) -> Self {
        Var::softplus(self)
    }
    fn minimum(self, o: Self) -> Self {
        Var::minimum(self, o)
    }
    fn val(self) -> f64 {
        self.value()
    }
}

/// Handle to the raw network-output node backing a control, used to read
/// output cotangents after a backward sweep. Plain values have no handle.
pub(crate) trait SimReal: Real {
    type MHandle: Copy;
    const NEEDS_D1: bool;
    fn lift_net(m: f64, d1: f64, x: Self, head: Head) -> Result<(Self, Self::MHandle)>;
    fn lift_const(x: Self, v: f64) -> Self;
}

impl SimReal for f64 {
    type MHandle = ();
    const NEEDS_D1: bool = false;
    fn lift_net(m: f64, _d1: f64, x: f64, head: Head) -> Result<(f64, ())> {
        let v = match head {
            Head::Consumption => softplus_f64(m) * x,
            Head::Investment => {
                // Mirror the tape's max-then-min clamp exactly.
                let lo = if m >= -PI_CLAMP { m } else { -PI_CLAMP };
                if lo <= PI_CLAMP {
                    lo
                } else {
                    PI_CLAMP
                }
            }
        };
        Ok((v, ()))
    }
    fn lift_const(_x: f64, v: f64) -> f64 {
        v
    }
}

impl<'t> SimReal for Var<'t> {
    type MHandle = u32;
    const NEEDS_D1: bool = true;
    fn lift_net(m: f64, d1: f64, x: Var<'t>, head: Head) -> Result<(Var<'t>, u32)> {
        let mvar = x.tape().external_unary(x, m, d1, 0.0)?;
        Ok((apply_head(mvar, x, head), mvar.index()))
    }
    fn lift_const(x: Var<'t>, v: f64) -> Var<'t> {
        x.tape().constant(v)
    }
}

/// Smooth wealth floor: floor + softplus(beta (x - floor)) / beta. Healthy
/// wealth passes through with derivative exactly one; the output never
/// drops to the floor itself.
pub(crate) fn smooth_floor<R: Real>(x: R) -> R {
    x.add_const(-WEALTH_FLOOR)
        .mul_const(FLOOR_BETA)
        .softplus()
        .mul_const(1.0 / FLOOR_BETA)
        .add_const(WEALTH_FLOOR)
}

/// One Euler-Maruyama wealth update. Consumption is capped at
/// `DRAIN_CAP * x / dt` inside the drift only; `dw` is the Brownian
/// increment over the step. Returns the floored next wealth.
pub(crate) fn euler_core<R: Real>(x: R, pi: R, c: R, dt: f64, dw: f64, p: &MarketParams) -> R {
    let cap = x.mul_const(DRAIN_CAP / dt);
    let c_eff = c.minimum(cap);
    let px = pi.mul(x);
    let net_drift = x.mul_const(p.r).add(px.mul_const(p.mu - p.r)).sub(c_eff);
    let x_next = x.add(net_drift.mul_const(dt)).add(px.mul_const(p.sigma * dw));
    smooth_floor(x_next)
}

/// Tape-recorded Euler step; errors when the update leaves the
/// representable range.
pub fn euler_step<'t>(
    x: Var<'t>,
    pi: Var<'t>,
    c: Var<'t>,
    dt: f64,
    dw: f64,
    p: &MarketParams,
) -> Result<Var<'t>> {
    debug_assert!(dt >= 0.0);
    let next = euler_core(x, pi, c, dt, dw, p);
    if !next.value().is_finite() {
        return Err(Error::NonFinite("wealth update"));
    }
    Ok(next)
}

/// Discounted utility contribution U(c) * w with the constants folded into
/// one multiplier: c^{1-gamma} * (w / (1-gamma)).
fn utility_term<R: Real>(c: R, w: f64, gamma: f64) -> R {
    c.powf_const(1.0 - gamma).mul_const(w / (1.0 - gamma))
}

/// Investment policy by reference: a network or the closed form scaled by a
/// factor (scale 1.0 is the exact optimum).
#[derive(Clone, Copy)]
pub enum PiPolicyRef<'a> {
    Net(&'a Mlp),
    ClosedForm { scale: f64 },
}

/// Consumption policy by reference.
#[derive(Clone, Copy)]
pub enum CPolicyRef<'a> {
    Net(&'a Mlp),
    ClosedForm { scale: f64 },
}

impl PiPolicyRef<'_> {
    /// Pointwise policy value (grid evaluation, surface dumps).
    pub fn value(&self, p: &MarketParams, t: f64, x: f64) -> f64 {
        match self {
            PiPolicyRef::Net(net) => net.policy_value(t, x),
            PiPolicyRef::ClosedForm { scale } => scale * model::closed_form_pi(p),
        }
    }
}

impl CPolicyRef<'_> {
    pub fn value(&self, p: &MarketParams, t: f64, x: f64) -> f64 {
        match self {
            CPolicyRef::Net(net) => net.policy_value(t, x),
            CPolicyRef::ClosedForm { scale } => scale * model::closed_form_consumption(p, t, x),
        }
    }
}

/// Owned investment policy, as stored in checkpoints.
#[derive(Clone, Debug)]
pub enum PiPolicy {
    Net(Mlp),
    ClosedForm { scale: f64 },
}

/// Owned consumption policy.
#[derive(Clone, Debug)]
pub enum CPolicy {
    Net(Mlp),
    ClosedForm { scale: f64 },
}

impl PiPolicy {
    pub fn as_ref(&self) -> PiPolicyRef<'_> {
        match self {
            PiPolicy::Net(net) => PiPolicyRef::Net(net),
            PiPolicy::ClosedForm { scale } => PiPolicyRef::ClosedForm { scale: *scale },
        }
    }
}

impl CPolicy {
    pub fn as_ref(&self) -> CPolicyRef<'_> {
        match self {
            CPolicy::Net(net) => CPolicyRef::Net(net),
            CPolicy::ClosedForm { scale } => CPolicyRef::ClosedForm { scale: *scale },
        }
    }
}

/// Materialized batch: initial nodes plus the standard-normal draws for
/// every (path, step). Kept explicit so finite-difference tests can reuse
/// the exact same randomness while varying parameters.
#[derive(Clone, Debug)]
pub struct SimBatch {
    pub nodes: Vec<InitialNode>,
    /// noise[i][k]: standard normal for path i, step k.
    pub noise: Vec<Vec<f64>>,
    pub n_steps: usize,
}

impl SimBatch {
    /// Draw a fresh batch with the canonical keying (iteration, path, step).
    pub fn sample(d: &Domain, m: usize, n_steps: usize, rng: &KeyedRng, iter: u64) -> SimBatch {
        let nodes: Vec<InitialNode> =
            (0..m).map(|i| sample_initial_node(d, rng, iter, i as u64)).collect();
        let noise: Vec<Vec<f64>> = (0..m)
            .map(|i| {
                (0..n_steps).map(|k| rng.normal(STREAM_NOISE, iter, i as u64, k as u64)).collect()
            })
            .collect();
        SimBatch { nodes, noise, n_steps }
    }

    /// Wrap explicit nodes and noise (frozen-randomness tests).
    pub fn frozen(nodes: Vec<InitialNode>, noise: Vec<Vec<f64>>) -> Result<SimBatch> {
        if nodes.len() != noise.len() {
            return Err(Error::Usage("node and noise counts differ".into()));
        }
        let n_steps = noise.first().map_or(0, Vec::len);
        if noise.iter().any(|row| row.len() != n_steps) {
            return Err(Error::Usage("ragged noise matrix".into()));
        }
        Ok(SimBatch { nodes, noise, n_steps })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Everything recorded while simulating one lockstep chunk.
pub(crate) struct ChunkRun<R: SimReal> {
    /// Per-path discounted objective.
    pub j: Vec<R>,
    /// Per-path wealth sequence, `states[row][k]` for k in 0..=N; index 0 is
    /// the initial wealth leaf.
    pub states: Vec<Vec<R>>,
    /// Per-path controls per step.
    pub pis: Vec<Vec<R>>,
    pub cs: Vec<Vec<R>>,
    /// Raw network-output handles per path and step (empty for closed-form
    /// policies).
    pub m_pi: Vec<Vec<R::MHandle>>,
    pub m_c: Vec<Vec<R::MHandle>>,
    /// Network inputs per step (step-major), reused by the parameter
    /// backward pass.
    pub ts: Vec<Vec<f64>>,
    pub xs: Vec<Vec<f64>>,
    /// Per-path step size and Brownian increments.
    pub dts: Vec<f64>,
    pub dws: Vec<Vec<f64>>,
}

/// Simulate one chunk of paths in lockstep. `x0` carries the initial wealth
/// per path, already lifted into the scalar type (a tape leaf or a plain
/// value), which is what finite-difference probes perturb.
pub(crate) fn run_chunk<R: SimReal>(
    pi_pol: &PiPolicyRef<'_>,
    c_pol: &CPolicyRef<'_>,
    nodes: &[InitialNode],
    x0: Vec<R>,
    noise: &[Vec<f64>],
    n_steps: usize,
    p: &MarketParams,
) -> Result<ChunkRun<R>> {
    let rows = nodes.len();
    assert_eq!(x0.len(), rows);
    assert_eq!(noise.len(), rows);
    let dts: Vec<f64> = nodes.iter().map(|nd| (p.t_horizon - nd.t0) / n_steps as f64).collect();
    let mut dws: Vec<Vec<f64>> = vec![Vec::with_capacity(n_steps); rows];

    let mut states: Vec<Vec<R>> = x0
        .into_iter()
        .map(|x| {
            let mut v = Vec::with_capacity(n_steps + 1);
            v.push(x);
            v
        })
        .collect();
    let mut pis: Vec<Vec<R>> = vec![Vec::with_capacity(n_steps); rows];
    let mut cs: Vec<Vec<R>> = vec![Vec::with_capacity(n_steps); rows];
    let mut m_pi: Vec<Vec<R::MHandle>> = vec![Vec::with_capacity(n_steps); rows];
    let mut m_c: Vec<Vec<R::MHandle>> = vec![Vec::with_capacity(n_steps); rows];
    let mut ts_all: Vec<Vec<f64>> = Vec::with_capacity(n_steps);
    let mut xs_all: Vec<Vec<f64>> = Vec::with_capacity(n_steps);
    let mut j: Vec<Option<R>> = vec![None; rows];

    for k in 0..n_steps {
        let ts: Vec<f64> = (0..rows).map(|i| nodes[i].t0 + k as f64 * dts[i]).collect();
        let xs: Vec<f64> = (0..rows).map(|i| states[i][k].val()).collect();
        if xs.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("wealth state"));
        }

        let pi_eval = match pi_pol {
            PiPolicyRef::Net(net) => Some(net.eval_batch(&ts, &xs, R::NEEDS_D1)),
            PiPolicyRef::ClosedForm { .. } => None,
        };
        let c_eval = match c_pol {
            CPolicyRef::Net(net) => Some(net.eval_batch(&ts, &xs, R::NEEDS_D1)),
            CPolicyRef::ClosedForm { .. } => None,
        };

        for i in 0..rows {
            let x = states[i][k];
            let pi = match (pi_pol, &pi_eval) {
                (PiPolicyRef::Net(_), Some((m, d1))) => {
                    let (ctrl, handle) = R::lift_net(m[i], d1[i], x, Head::Investment)?;
                    m_pi[i].push(handle);
                    ctrl
                }
                (PiPolicyRef::ClosedForm { scale }, _) => {
                    R::lift_const(x, scale * model::closed_form_pi(p))
                }
                _ => unreachable!(),
            };
            let c = match (c_pol, &c_eval) {
                (CPolicyRef::Net(_), Some((m, d1))) => {
                    let (ctrl, handle) = R::lift_net(m[i], d1[i], x, Head::Consumption)?;
                    m_c[i].push(handle);
                    ctrl
                }
                (CPolicyRef::ClosedForm { scale }, _) => {
                    x.mul_const(scale * model::consumption_rate(p, ts[i]))
                }
                _ => unreachable!(),
            };

            let dt = dts[i];
            let dw = dt.sqrt() * noise[i][k];
            dws[i].push(dw);
            let x_next = euler_core(x, pi, c, dt, dw, p);
            if !x_next.val().is_finite() {
                return Err(Error::NonFinite("wealth update"));
            }

            // Running utility uses the raw (uncapped) consumption.
            let w = (-p.rho * ts[i]).exp() * dt;
            let term = utility_term(c, w, p.gamma);
            j[i] = Some(match j[i] {
                Some(acc) => acc.add(term),
                None => term,
            });

            states[i].push(x_next);
            pis[i].push(pi);
            cs[i].push(c);
        }
        ts_all.push(ts);
        xs_all.push(xs);
    }

    // Terminal bequest: kappa e^{-rho T} U(X_N).
    let w_term = p.kappa * (-p.rho * p.t_horizon).exp();
    let j: Vec<R> = (0..rows)
        .map(|i| {
            let term = utility_term(states[i][n_steps], w_term, p.gamma);
            match j[i] {
                Some(acc) => acc.add(term),
                None => term,
            }
        })
        .collect();
    if j.iter().any(|jv| !jv.val().is_finite()) {
        return Err(Error::NonFinite("path objective"));
    }

    Ok(ChunkRun { j, states, pis, cs, m_pi, m_c, ts: ts_all, xs: xs_all, dts, dws })
}

/// One simulated path recorded on a tape.
pub struct PathSim<'t> {
    pub node: InitialNode,
    /// Discounted objective of this path.
    pub j: Var<'t>,
    /// Wealth sequence; `states[0]` is the x0 leaf.
    pub states: Vec<Var<'t>>,
    pub pis: Vec<Var<'t>>,
    pub cs: Vec<Var<'t>>,
    pub dt: f64,
    pub dws: Vec<f64>,
}

/// Simulate one path under keyed noise, recording on `tape`. The noise keys
/// match [`SimBatch::sample`], so path `path` of iteration `iter` here is
/// exactly path `path` of the batched engine.
pub fn rollout<'t>(
    pi_net: &Mlp,
    c_net: &Mlp,
    node: InitialNode,
    n_steps: usize,
    p: &MarketParams,
    rng: &KeyedRng,
    iter: u64,
    path: u64,
    tape: &'t Tape,
) -> Result<PathSim<'t>> {
    let noise: Vec<f64> =
        (0..n_steps).map(|k| rng.normal(STREAM_NOISE, iter, path, k as u64)).collect();
    rollout_with_noise(pi_net, c_net, node, p, &noise, tape)
}

/// Simulate one path under explicit noise, recording on `tape`.
pub fn rollout_with_noise<'t>(
    pi_net: &Mlp,
    c_net: &Mlp,
    node: InitialNode,
    p: &MarketParams,
    noise: &[f64],
    tape: &'t Tape,
) -> Result<PathSim<'t>> {
    let x0 = tape.leaf(node.x0);
    let mut run = run_chunk(
        &PiPolicyRef::Net(pi_net),
        &CPolicyRef::Net(c_net),
        &[node],
        vec![x0],
        std::slice::from_ref(&noise.to_vec()),
        noise.len(),
        p,
    )?;
    Ok(PathSim {
        node,
        j: run.j[0],
        states: run.states.swap_remove(0),
        pis: run.pis.swap_remove(0),
        cs: run.cs.swap_remove(0),
        dt: run.dts[0],
        dws: run.dws.swap_remove(0),
    })
}

/// Plain-value rollout of one path under a frozen noise sequence, for
/// finite-difference probes in x0. Bit-identical arithmetic to the tape
/// variant.
pub fn rollout_value(
    pi_pol: &PiPolicyRef<'_>,
    c_pol: &CPolicyRef<'_>,
    t0: f64,
    x0: f64,
    p: &MarketParams,
    noise: &[f64],
) -> Result<f64> {
    let node = InitialNode { t0, x0 };
    let run = run_chunk::<f64>(
        pi_pol,
        c_pol,
        &[node],
        vec![x0],
        std::slice::from_ref(&noise.to_vec()),
        noise.len(),
        p,
    )?;
    Ok(run.j[0])
}

/// Plain-value trajectory of one path: the wealth sequence and the controls
/// applied at every step (diagnostic dumps).
#[derive(Clone, Debug)]
pub struct PathTrace {
    pub node: InitialNode,
    pub dt: f64,
    /// Wealth at steps 0..=N.
    pub states: Vec<f64>,
    pub pis: Vec<f64>,
    pub cs: Vec<f64>,
    pub j: f64,
}

/// Simulate one path in value mode and keep the whole trajectory.
pub fn rollout_trace(
    pi_pol: &PiPolicyRef<'_>,
    c_pol: &CPolicyRef<'_>,
    node: InitialNode,
    p: &MarketParams,
    noise: &[f64],
) -> Result<PathTrace> {
    let mut run = run_chunk::<f64>(
        pi_pol,
        c_pol,
        &[node],
        vec![node.x0],
        std::slice::from_ref(&noise.to_vec()),
        noise.len(),
        p,
    )?;
    Ok(PathTrace {
        node,
        dt: run.dts[0],
        states: std::mem::take(&mut run.states[0]),
        pis: std::mem::take(&mut run.pis[0]),
        cs: std::mem::take(&mut run.cs[0]),
        j: run.j[0],
    })
}

/// A batch of paths recorded on one shared tape, with the averaged
/// objective. Intended for small instances (tests, oracles); the training
/// engine uses per-path tapes in chunks instead.
pub struct RolloutBatch<'t> {
    pub paths: Vec<PathSim<'t>>,
    /// Mean of the per-path objectives, on the tape.
    pub j_hat: Var<'t>,
}

/// Sample M initial nodes and simulate them on one tape under keyed noise.
pub fn batch_objective<'t>(
    pi_net: &Mlp,
    c_net: &Mlp,
    d: &Domain,
    m: usize,
    n_steps: usize,
    p: &MarketParams,
    rng: &KeyedRng,
    iter: u64,
    tape: &'t Tape,
) -> Result<RolloutBatch<'t>> {
    if m == 0 {
        return Err(Error::Usage("batch_objective requires at least one path".into()));
    }
    let batch = SimBatch::sample(d, m, n_steps, rng, iter);
    batch_objective_frozen(pi_net, c_net, &batch, p, tape)
}

/// As [`batch_objective`], but over an explicit batch.
pub fn batch_objective_frozen<'t>(
    pi_net: &Mlp,
    c_net: &Mlp,
    batch: &SimBatch,
    p: &MarketParams,
    tape: &'t Tape,
) -> Result<RolloutBatch<'t>> {
    let m = batch.len();
    if m == 0 {
        return Err(Error::Usage("batch_objective requires at least one path".into()));
    }
    let x0: Vec<Var<'_>> = batch.nodes.iter().map(|nd| tape.leaf(nd.x0)).collect();
    let run = run_chunk(
        &PiPolicyRef::Net(pi_net),
        &CPolicyRef::Net(c_net),
        &batch.nodes,
        x0,
        &batch.noise,
        batch.n_steps,
        p,
    )?;
    let mut acc = run.j[0];
    for jv in &run.j[1..] {
        acc = acc + *jv;
    }
    let j_hat = acc * (1.0 / m as f64);
    let paths = (0..m)
        .map(|i| PathSim {
            node: batch.nodes[i],
            j: run.j[i],
            states: run.states[i].clone(),
            pis: run.pis[i].clone(),
            cs: run.cs[i].clone(),
            dt: run.dts[i],
            dws: run.dws[i].clone(),
        })
        .collect();
    Ok(RolloutBatch { paths, j_hat })
}

/// Value-only batch objective: chunked, parallel over chunks, reduced in
/// chunk order. Returns the mean objective and the per-path values.
pub fn batch_value(
    pi_pol: &PiPolicyRef<'_>,
    c_pol: &CPolicyRef<'_>,
    batch: &SimBatch,
    p: &MarketParams,
) -> Result<BatchValue> {
    let m = batch.len();
    if m == 0 {
        return Err(Error::Usage("batch_value requires at least one path".into()));
    }
    let n_chunks = m.div_ceil(CHUNK);
    let chunk_results: Vec<Result<Vec<f64>>> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| {
            let lo = ci * CHUNK;
            let hi = (lo + CHUNK).min(m);
            let nodes = &batch.nodes[lo..hi];
            let x0: Vec<f64> = nodes.iter().map(|nd| nd.x0).collect();
            let run = run_chunk::<f64>(
                pi_pol,
                c_pol,
                nodes,
                x0,
                &batch.noise[lo..hi],
                batch.n_steps,
                p,
            )?;
            Ok(run.j)
        })
        .collect();
    let mut per_path = Vec::with_capacity(m);
    let mut total = 0.0;
    for res in chunk_results {
        let js = res?;
        let mut chunk_sum = 0.0;
        for jv in js {
            chunk_sum += jv;
            per_path.push(jv);
        }
        total += chunk_sum;
    }
    Ok(BatchValue { j_hat: total / m as f64, per_path })
}

/// Result of a value-only batch run.
pub struct BatchValue {
    pub j_hat: f64,
    pub per_path: Vec<f64>,
}
