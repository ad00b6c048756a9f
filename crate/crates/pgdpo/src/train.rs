//! The two trainers: plain policy-gradient ascent by backpropagation through
//! the simulated paths, and the regularized variant that extracts adjoint
//! estimates in a second differentiation pass, converts them to Pontryagin
//! controls, and penalizes the distance between the policies and those
//! controls.
//!
//! Gradients run over lockstep chunks (see [`crate::sim`]): every chunk
//! simulates its paths on per-path tapes, one numeric backward sweep per path
//! yields the cotangents of the raw network outputs, and the parameter
//! gradient is assembled with one batched matrix backward per step. All
//! reductions are performed in fixed chunk-and-path order, so results do not
//! depend on how many threads rayon uses.

use std::time::Instant;

use log::warn;
use rayon::prelude::*;

use crate::autodiff::{grad, grad_as_var, Tape, Var};
use crate::checkpoint::{Checkpoint, PolicyRecord, CHECKPOINT_VERSION};
use crate::error::{Error, Result};
use crate::eval::{self, EVAL_GRID};
use crate::model::{self, Domain, MarketParams};
use crate::nn::{adam_step, AdamState, Head, Mlp};
use crate::rng::KeyedRng;
use crate::sim::{
    run_chunk, CPolicy, CPolicyRef, InitialNode, PiPolicy, PiPolicyRef, RolloutBatch, SimBatch,
    CHUNK,
};

/// Paths whose second-pass adjoint magnitude falls below this are excluded
/// from the penalty: the quotient lambda0 / (d lambda0 / dx) is numerically
/// meaningless there.
pub const DLAMBDA_FLOOR: f64 = 1e-12;

/// Iteration counts at which checkpoints are always kept.
pub const MILESTONES: [u64; 4] = [1_000, 10_000, 50_000, 100_000];

/// Per-path adjoint information extracted from a recorded objective.
#[derive(Clone, Copy, Debug)]
pub struct AdjointEstimate {
    /// dJ/dx0 along this path (the costate at the initial node).
    pub lambda0: f64,
    /// d^2 J / dx0^2 along this path.
    pub dlambda0_dx: f64,
    pub node: InitialNode,
}

/// Controls recovered from the Pontryagin first-order conditions at one node.
#[derive(Clone, Copy, Debug)]
pub struct PmpControls {
    pub c_pmp: f64,
    pub pi_pmp: f64,
}

/// Differentiate a recorded path objective twice with respect to its initial
/// wealth leaf: once for lambda0, then once more through the recorded
/// gradient for its x0-derivative.
pub fn adjoint_at_origin(j: Var<'_>, x0: Var<'_>, node: InitialNode) -> Result<AdjointEstimate> {
    let lambda0 = grad(j, &[x0])?[0];
    let lam_var = grad_as_var(j, x0)?;
    let dlambda0_dx = grad(lam_var, &[x0])?[0];
    Ok(AdjointEstimate { lambda0, dlambda0_dx, node })
}

/// Invert the first-order conditions: consumption from the marginal-utility
/// identity, investment from the costate ratio (sigma-squared form).
pub fn pmp_controls(a: &AdjointEstimate, p: &MarketParams) -> Result<PmpControls> {
    if !a.lambda0.is_finite() || !a.dlambda0_dx.is_finite() {
        return Err(Error::InvalidInput(
            "pontryagin controls undefined: non-finite adjoint estimate".into(),
        ));
    }
    if a.lambda0 <= 0.0 {
        return Err(Error::InvalidInput(
            "pontryagin controls undefined: lambda0 is not positive".into(),
        ));
    }
    if a.dlambda0_dx.abs() < DLAMBDA_FLOOR {
        return Err(Error::InvalidInput(
            "pontryagin controls undefined: second derivative below threshold".into(),
        ));
    }
    let c_pmp = ((p.rho * a.node.t0).exp() * a.lambda0).powf(-1.0 / p.gamma);
    let pi_pmp =
        -((p.mu - p.r) / (p.sigma * p.sigma * a.node.x0)) * (a.lambda0 / a.dlambda0_dx);
    Ok(PmpControls { c_pmp, pi_pmp })
}

/// Weighted L1 distance between the recorded step-0 controls and constant
/// Pontryagin targets, on the tape. No gradient flows through the targets.
pub fn alignment_penalty<'t>(
    c_policy: Var<'t>,
    pi_policy: Var<'t>,
    target: &PmpControls,
    alpha_c: f64,
    alpha_pi: f64,
) -> Var<'t> {
    let dc = (c_policy + (-target.c_pmp)).abs() * alpha_c;
    let dpi = (pi_policy + (-target.pi_pmp)).abs() * alpha_pi;
    dc + dpi
}

/// Penalty weights of the regularized trainer.
#[derive(Clone, Copy, Debug)]
pub struct RegSpec {
    pub alpha_c: f64,
    pub alpha_pi: f64,
}

/// Gradients (ascent direction) of one batch, plus the diagnostics the
/// metrics report carries.
#[derive(Clone, Debug)]
pub struct BatchGradients {
    pub j_hat: f64,
    pub grad_pi: Vec<f64>,
    pub grad_c: Vec<f64>,
    /// Mean penalty over the paths that produced valid Pontryagin targets
    /// (zero when the regularizer is off or no path was valid).
    pub penalty_mean: f64,
    /// Fraction of the batch excluded from the penalty.
    pub excluded_frac: f64,
    pub valid_paths: usize,
}

struct ChunkGrad {
    gj_pi: Vec<f64>,
    gj_c: Vec<f64>,
    gp_pi: Vec<f64>,
    gp_c: Vec<f64>,
    j_sum: f64,
    pen_sum: f64,
    valid: usize,
    excluded: usize,
}

/// Gradient of the (possibly penalized) batch objective with respect to both
/// networks' parameters, by backpropagation through the simulated paths.
/// Zero penalty weights short-circuit to exactly the unpenalized code path.
pub fn batch_gradients(
    pi_net: &Mlp,
    c_net: &Mlp,
    batch: &SimBatch,
    p: &MarketParams,
    reg: Option<RegSpec>,
) -> Result<BatchGradients> {
    let m = batch.len();
    if m == 0 {
        return Err(Error::Usage("batch_gradients requires at least one path".into()));
    }
    if let Some(r) = &reg {
        if r.alpha_c < 0.0 || r.alpha_pi < 0.0 {
            return Err(Error::Usage("penalty weights must be nonnegative".into()));
        }
    }
    let reg = reg.filter(|r| r.alpha_c != 0.0 || r.alpha_pi != 0.0);
    let n_steps = batch.n_steps;
    let np_pi = pi_net.n_params();
    let np_c = c_net.n_params();
    let n_chunks = m.div_ceil(CHUNK);

    let chunk_out: Vec<Result<ChunkGrad>> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| {
            let lo = ci * CHUNK;
            let hi = (lo + CHUNK).min(m);
            let rows = hi - lo;
            let nodes = &batch.nodes[lo..hi];
            let node_cap = 34 * n_steps + 16;
            let tapes: Vec<Tape> = (0..rows).map(|_| Tape::with_capacity(node_cap)).collect();
            let x0: Vec<Var<'_>> =
                (0..rows).map(|i| tapes[i].leaf(nodes[i].x0)).collect();
            let run = run_chunk(
                &PiPolicyRef::Net(pi_net),
                &CPolicyRef::Net(c_net),
                nodes,
                x0,
                &batch.noise[lo..hi],
                n_steps,
                p,
            )?;

            let mut cot_pi = vec![vec![0.0f64; rows]; n_steps];
            let mut cot_c = vec![vec![0.0f64; rows]; n_steps];
            let mut cot_p_pi0 = vec![0.0f64; rows];
            let mut cot_p_c0 = vec![0.0f64; rows];
            let mut j_sum = 0.0;
            let mut pen_sum = 0.0;
            let mut valid = 0usize;
            let mut excluded = 0usize;

            for row in 0..rows {
                let tape = &tapes[row];
                let jv = run.j[row];
                let sweep = tape.backward(jv)?;
                for k in 0..n_steps {
                    cot_pi[k][row] = sweep.wrt(tape.var_at(run.m_pi[row][k]));
                    cot_c[k][row] = sweep.wrt(tape.var_at(run.m_c[row][k]));
                }
                j_sum += jv.value();

                if let Some(r) = &reg {
                    let x0v = run.states[row][0];
                    let lambda0 = sweep.wrt(x0v);
                    let second: Result<f64> = (|| {
                        let lam_var = grad_as_var(jv, x0v)?;
                        Ok(tape.backward(lam_var)?.wrt(x0v))
                    })();
                    let dlambda0 = match second {
                        Ok(v) => v,
                        Err(Error::Numeric { .. }) | Err(Error::NonFinite(_)) => f64::NAN,
                        Err(e) => return Err(e),
                    };
                    let est =
                        AdjointEstimate { lambda0, dlambda0_dx: dlambda0, node: nodes[row] };
                    match pmp_controls(&est, p) {
                        Ok(target) => {
                            let pen = alignment_penalty(
                                run.cs[row][0],
                                run.pis[row][0],
                                &target,
                                r.alpha_c,
                                r.alpha_pi,
                            );
                            let s3 = tape.backward(pen)?;
                            cot_p_pi0[row] = s3.wrt(tape.var_at(run.m_pi[row][0]));
                            cot_p_c0[row] = s3.wrt(tape.var_at(run.m_c[row][0]));
                            pen_sum += pen.value();
                            valid += 1;
                        }
                        Err(_) => excluded += 1,
                    }
                }
            }

            let mut gj_pi = vec![0.0f64; np_pi];
            let mut gj_c = vec![0.0f64; np_c];
            for k in 0..n_steps {
                pi_net.backprop_batch(&run.ts[k], &run.xs[k], &cot_pi[k], &mut gj_pi);
                c_net.backprop_batch(&run.ts[k], &run.xs[k], &cot_c[k], &mut gj_c);
            }
            let (gp_pi, gp_c) = if reg.is_some() {
                let mut a = vec![0.0f64; np_pi];
                let mut b = vec![0.0f64; np_c];
                pi_net.backprop_batch(&run.ts[0], &run.xs[0], &cot_p_pi0, &mut a);
                c_net.backprop_batch(&run.ts[0], &run.xs[0], &cot_p_c0, &mut b);
                (a, b)
            } else {
                (Vec::new(), Vec::new())
            };
            Ok(ChunkGrad { gj_pi, gj_c, gp_pi, gp_c, j_sum, pen_sum, valid, excluded })
        })
        .collect();

    let mut sum_gj_pi = vec![0.0f64; np_pi];
    let mut sum_gj_c = vec![0.0f64; np_c];
    let mut sum_gp_pi = vec![0.0f64; np_pi];
    let mut sum_gp_c = vec![0.0f64; np_c];
    let mut j_total = 0.0;
    let mut pen_total = 0.0;
    let mut valid_total = 0usize;
    let mut excluded_total = 0usize;
    for out in chunk_out {
        let cg = out?;
        for (acc, v) in sum_gj_pi.iter_mut().zip(&cg.gj_pi) {
            *acc += v;
        }
        for (acc, v) in sum_gj_c.iter_mut().zip(&cg.gj_c) {
            *acc += v;
        }
        if !cg.gp_pi.is_empty() {
            for (acc, v) in sum_gp_pi.iter_mut().zip(&cg.gp_pi) {
                *acc += v;
            }
            for (acc, v) in sum_gp_c.iter_mut().zip(&cg.gp_c) {
                *acc += v;
            }
        }
        j_total += cg.j_sum;
        pen_total += cg.pen_sum;
        valid_total += cg.valid;
        excluded_total += cg.excluded;
    }

    let m_f = m as f64;
    let mut grad_pi = sum_gj_pi;
    let mut grad_c = sum_gj_c;
    if reg.is_some() && valid_total > 0 {
        let v_f = valid_total as f64;
        for (g, gp) in grad_pi.iter_mut().zip(&sum_gp_pi) {
            *g = *g / m_f - gp / v_f;
        }
        for (g, gp) in grad_c.iter_mut().zip(&sum_gp_c) {
            *g = *g / m_f - gp / v_f;
        }
    } else {
        for g in grad_pi.iter_mut() {
            *g /= m_f;
        }
        for g in grad_c.iter_mut() {
            *g /= m_f;
        }
    }

    Ok(BatchGradients {
        j_hat: j_total / m_f,
        grad_pi,
        grad_c,
        penalty_mean: if valid_total > 0 { pen_total / valid_total as f64 } else { 0.0 },
        excluded_frac: excluded_total as f64 / m_f,
        valid_paths: valid_total,
    })
}

/// Per-path adjoint estimates over a whole batch under arbitrary policies
/// (networks or closed forms). A failed second-order sweep yields a NaN
/// second derivative, which [`pmp_controls`] rejects path by path.
pub fn batch_adjoints(
    pi_pol: &PiPolicyRef<'_>,
    c_pol: &CPolicyRef<'_>,
    batch: &SimBatch,
    p: &MarketParams,
) -> Result<Vec<AdjointEstimate>> {
    let m = batch.len();
    if m == 0 {
        return Err(Error::Usage("batch_adjoints requires at least one path".into()));
    }
    let n_chunks = m.div_ceil(CHUNK);
    let chunk_out: Vec<Result<Vec<AdjointEstimate>>> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| {
            let lo = ci * CHUNK;
            let hi = (lo + CHUNK).min(m);
            let rows = hi - lo;
            let nodes = &batch.nodes[lo..hi];
            let node_cap = 34 * batch.n_steps + 16;
            let tapes: Vec<Tape> = (0..rows).map(|_| Tape::with_capacity(node_cap)).collect();
            let x0: Vec<Var<'_>> =
                (0..rows).map(|i| tapes[i].leaf(nodes[i].x0)).collect();
            let run = run_chunk(pi_pol, c_pol, nodes, x0, &batch.noise[lo..hi], batch.n_steps, p)?;
            let mut out = Vec::with_capacity(rows);
            for row in 0..rows {
                let tape = &tapes[row];
                let jv = run.j[row];
                let x0v = run.states[row][0];
                let lambda0 = tape.backward(jv)?.wrt(x0v);
                let second: Result<f64> = (|| {
                    let lam_var = grad_as_var(jv, x0v)?;
                    Ok(tape.backward(lam_var)?.wrt(x0v))
                })();
                let dlambda0_dx = match second {
                    Ok(v) => v,
                    Err(Error::Numeric { .. }) | Err(Error::NonFinite(_)) => f64::NAN,
                    Err(e) => return Err(e),
                };
                out.push(AdjointEstimate { lambda0, dlambda0_dx, node: nodes[row] });
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::with_capacity(m);
    for out in chunk_out {
        all.extend(out?);
    }
    Ok(all)
}

/// Assemble both parameter gradients from per-step adjoints instead of
/// backpropagation: the costate at each step weights the sensitivity of the
/// wealth update to the control, and policy Jacobians come from central
/// finite differences. Small instances only; this is a test oracle for the
/// production gradients, sharing none of their backward machinery.
pub fn explicit_gradient_oracle(
    rb: &RolloutBatch<'_>,
    pi_net: &Mlp,
    c_net: &Mlp,
    p: &MarketParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = rb.paths.len();
    let n_steps = rb.paths.first().map_or(0, |path| path.pis.len());
    let widest = pi_net
        .layers()
        .iter()
        .chain(c_net.layers().iter())
        .copied()
        .max()
        .unwrap_or(0);
    if m > 8 || n_steps > 10 || widest > 16 {
        return Err(Error::Usage(
            "instance too large for the explicit oracle (limits: 8 paths, 10 steps, width 16)"
                .into(),
        ));
    }
    if m == 0 || n_steps == 0 {
        return Err(Error::Usage("explicit oracle needs a nonempty batch".into()));
    }

    // Costates lambda_k = dJ_i/dX_k for every step, one backward sweep per
    // path; all paths share the caller's tape.
    let tape = rb.j_hat.tape();
    let mut lambdas: Vec<Vec<f64>> = Vec::with_capacity(m);
    for path in &rb.paths {
        let sweep = tape.backward(path.j)?;
        lambdas.push(path.states.iter().map(|s| sweep.wrt(*s)).collect());
    }

    // Flattened evaluation points and pathwise weight factors.
    let mut ts_flat = Vec::with_capacity(m * n_steps);
    let mut xs_flat = Vec::with_capacity(m * n_steps);
    let mut w_pi = Vec::with_capacity(m * n_steps);
    let mut w_c = Vec::with_capacity(m * n_steps);
    for (i, path) in rb.paths.iter().enumerate() {
        let dt = path.dt;
        for k in 0..n_steps {
            let t_k = path.node.t0 + k as f64 * dt;
            let x_k = path.states[k].value();
            let c_k = path.cs[k].value();
            let lam_next = lambdas[i][k + 1];
            ts_flat.push(t_k);
            xs_flat.push(x_k);
            w_pi.push(lam_next * x_k * ((p.mu - p.r) * dt + p.sigma * path.dws[k]));
            w_c.push(((-p.rho * t_k).exp() * model::utility_prime(c_k, p.gamma)? - lam_next) * dt);
        }
    }

    let h = 1e-5;
    let probe = |net: &Mlp, head: Head, weights: &[f64]| -> Vec<f64> {
        let mut pert = net.clone();
        let mut out = vec![0.0f64; net.n_params()];
        for j in 0..net.n_params() {
            let orig = net.params()[j];
            pert.params_mut()[j] = orig + h;
            let (m_plus, _) = pert.eval_batch(&ts_flat, &xs_flat, false);
            pert.params_mut()[j] = orig - h;
            let (m_minus, _) = pert.eval_batch(&ts_flat, &xs_flat, false);
            pert.params_mut()[j] = orig;
            let mut acc = 0.0;
            for idx in 0..ts_flat.len() {
                let (cp, cm) = match head {
                    Head::Investment => (
                        m_plus[idx].clamp(-crate::nn::PI_CLAMP, crate::nn::PI_CLAMP),
                        m_minus[idx].clamp(-crate::nn::PI_CLAMP, crate::nn::PI_CLAMP),
                    ),
                    Head::Consumption => (
                        crate::autodiff::softplus_f64(m_plus[idx]) * xs_flat[idx],
                        crate::autodiff::softplus_f64(m_minus[idx]) * xs_flat[idx],
                    ),
                };
                acc += weights[idx] * (cp - cm) / (2.0 * h);
            }
            out[j] = acc / m as f64;
        }
        out
    };

    let g_pi = probe(pi_net, Head::Investment, &w_pi);
    let g_c = probe(c_net, Head::Consumption, &w_c);
    Ok((g_pi, g_c))
}

/// Hyperparameters of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Iterations to run (K).
    pub iters: u64,
    /// Paths per iteration (M).
    pub batch: usize,
    /// Euler steps per path (N).
    pub steps: usize,
    pub lr_pi: f64,
    pub lr_c: f64,
    pub alpha_c: f64,
    pub alpha_pi: f64,
    pub seed: u64,
    /// Hidden layer widths shared by both networks.
    pub hidden: Vec<usize>,
    pub metric_every: u64,
    pub checkpoint_every: u64,
    /// Rollouts per empirical-utility measurement.
    pub eval_rollouts: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iters: 100_000,
            batch: 10_000,
            steps: 100,
            lr_pi: 1e-3,
            lr_c: 1e-5,
            alpha_c: 1e-3,
            alpha_pi: 1e-1,
            seed: 0,
            hidden: vec![200, 200],
            metric_every: 1_000,
            checkpoint_every: 1_000,
            eval_rollouts: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(self.lr_pi > 0.0 && self.lr_pi.is_finite()) {
            return Err(Error::Config("lr_pi must be positive and finite".into()));
        }
        if !(self.lr_c > 0.0 && self.lr_c.is_finite()) {
            return Err(Error::Config("lr_c must be positive and finite".into()));
        }
        if !(self.alpha_c >= 0.0 && self.alpha_c.is_finite()) {
            return Err(Error::Config("alpha_c must be nonnegative and finite".into()));
        }
        if !(self.alpha_pi >= 0.0 && self.alpha_pi.is_finite()) {
            return Err(Error::Config("alpha_pi must be nonnegative and finite".into()));
        }
        if self.hidden.is_empty() || self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::Config("hidden must list positive layer widths".into()));
        }
        if self.metric_every == 0 {
            return Err(Error::Config("metric_every must be at least 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be at least 1".into()));
        }
        if self.eval_rollouts == 0 {
            return Err(Error::Config("eval_rollouts must be at least 1".into()));
        }
        Ok(())
    }

    /// Full layer spec [2, hidden..., 1].
    pub fn layer_spec(&self) -> Vec<usize> {
        let mut layers = Vec::with_capacity(self.hidden.len() + 2);
        layers.push(2);
        layers.extend_from_slice(&self.hidden);
        layers.push(1);
        layers
    }
}

/// Which trainer a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algo {
    Pgdpo,
    PgdpoReg,
}

impl Algo {
    pub fn as_str(self) -> &'static str {
        match self {
            Algo::Pgdpo => "pgdpo",
            Algo::PgdpoReg => "pgdpo-reg",
        }
    }
}

impl std::str::FromStr for Algo {
    type Err = Error;
    fn from_str(s: &str) -> Result<Algo> {
        match s {
            "pgdpo" => Ok(Algo::Pgdpo),
            "pgdpo-reg" => Ok(Algo::PgdpoReg),
            other => Err(Error::Config(format!(
                "unknown algo {other:?}; expected \"pgdpo\" or \"pgdpo-reg\""
            ))),
        }
    }
}

/// Mutable state of a training run: both networks, their optimizer state,
/// and the next iteration to execute.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub pi_net: Mlp,
    pub c_net: Mlp,
    pub adam_pi: AdamState,
    pub adam_c: AdamState,
    pub next_iter: u64,
}

impl TrainState {
    /// Fresh networks and optimizer state from the config's seed.
    pub fn init(cfg: &TrainConfig, p: &MarketParams) -> Result<TrainState> {
        let rng = KeyedRng::new(cfg.seed);
        let layers = cfg.layer_spec();
        let t_scale = 1.0 / p.t_horizon;
        let pi_net = Mlp::new(&layers, Head::Investment, t_scale, &rng, 0)?;
        let c_net = Mlp::new(&layers, Head::Consumption, t_scale, &rng, 1)?;
        let adam_pi = AdamState::new(pi_net.n_params());
        let adam_c = AdamState::new(c_net.n_params());
        Ok(TrainState { pi_net, c_net, adam_pi, adam_c, next_iter: 0 })
    }

    /// Snapshot this state as a serializable checkpoint.
    pub fn to_checkpoint(&self, algo: Algo, seed: u64) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            algo: algo.as_str().to_string(),
            iter: self.next_iter,
            seed,
            pi: PolicyRecord::from_pi(&PiPolicy::Net(self.pi_net.clone())),
            c: PolicyRecord::from_c(&CPolicy::Net(self.c_net.clone())),
            adam_pi: Some(self.adam_pi.clone()),
            adam_c: Some(self.adam_c.clone()),
        }
    }

    /// Rebuild training state from a checkpoint. Requires network policies
    /// and optimizer state; closed-form policy checkpoints cannot resume.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<TrainState> {
        let next_iter = ck.iter;
        let pi_net = match ck.pi.into_pi()? {
            PiPolicy::Net(net) => net,
            PiPolicy::ClosedForm { .. } => {
                return Err(Error::Checkpoint(
                    "cannot resume from a closed-form investment policy".into(),
                ))
            }
        };
        let c_net = match ck.c.into_c()? {
            CPolicy::Net(net) => net,
            CPolicy::ClosedForm { .. } => {
                return Err(Error::Checkpoint(
                    "cannot resume from a closed-form consumption policy".into(),
                ))
            }
        };
        let adam_pi = ck
            .adam_pi
            .ok_or_else(|| Error::Checkpoint("checkpoint lacks investment optimizer state".into()))?;
        let adam_c = ck
            .adam_c
            .ok_or_else(|| Error::Checkpoint("checkpoint lacks consumption optimizer state".into()))?;
        if adam_pi.len() != pi_net.n_params() || adam_c.len() != c_net.n_params() {
            return Err(Error::Checkpoint(
                "optimizer state dimensions do not match the networks".into(),
            ));
        }
        Ok(TrainState { pi_net, c_net, adam_pi, adam_c, next_iter })
    }
}

/// One metrics row, as appended to the training CSV.
#[derive(Clone, Copy, Debug)]
pub struct MetricsRow {
    pub iter: u64,
    pub relmse_c: f64,
    pub relmse_pi: f64,
    pub empirical_utility: f64,
    pub penalty_mean: f64,
    pub excluded_frac: f64,
    pub wallclock_s: f64,
}

/// Column header of the metrics CSV.
pub const METRICS_CSV_HEADER: &str =
    "iter,relmse_c,relmse_pi,empirical_utility,penalty_mean,excluded_frac,wallclock_s";

impl MetricsRow {
    /// Serialize as one CSV line (no trailing newline). Floats use Rust's
    /// shortest round-trip formatting, so equal values always produce equal
    /// bytes.
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iter,
            self.relmse_c,
            self.relmse_pi,
            self.empirical_utility,
            self.penalty_mean,
            self.excluded_frac,
            self.wallclock_s
        )
    }
}

/// Receives metric rows and checkpoint snapshots as training progresses.
pub trait TrainSink {
    fn on_metrics(&mut self, _row: &MetricsRow) -> Result<()> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _state: &TrainState, _algo: Algo, _iter: u64) -> Result<()> {
        Ok(())
    }
}

/// Sink that drops everything.
pub struct NoSink;

impl TrainSink for NoSink {}

/// A finished (or aborted-at-K) training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<MetricsRow>,
}

/// Train with plain policy gradients (no penalty).
pub fn train_pgdpo(cfg: &TrainConfig, p: &MarketParams, d: &Domain) -> Result<TrainOutcome> {
    train_with_sink(Algo::Pgdpo, cfg, p, d, &mut NoSink)
}

/// Train with the Pontryagin alignment penalty.
pub fn train_pgdpo_reg(cfg: &TrainConfig, p: &MarketParams, d: &Domain) -> Result<TrainOutcome> {
    train_with_sink(Algo::PgdpoReg, cfg, p, d, &mut NoSink)
}

/// Train from a fresh initialization, reporting to `sink`.
pub fn train_with_sink(
    algo: Algo,
    cfg: &TrainConfig,
    p: &MarketParams,
    d: &Domain,
    sink: &mut dyn TrainSink,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let state = TrainState::init(cfg, p)?;
    train_resume(algo, cfg, p, d, state, sink)
}

/// Continue a run from `state.next_iter` up to `cfg.iters`. Because every
/// random draw is keyed by (seed, iteration, path, step), a resumed run
/// replays exactly the iterations an uninterrupted run would have executed.
pub fn train_resume(
    algo: Algo,
    cfg: &TrainConfig,
    p: &MarketParams,
    d: &Domain,
    mut state: TrainState,
    sink: &mut dyn TrainSink,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    p.validate()?;
    d.validate(p)?;
    let rng = KeyedRng::new(cfg.seed);
    let reg = match algo {
        Algo::Pgdpo => None,
        Algo::PgdpoReg => Some(RegSpec { alpha_c: cfg.alpha_c, alpha_pi: cfg.alpha_pi }),
    };
    let start = Instant::now();
    let mut history = Vec::new();
    let mut consecutive_failures = 0u32;
    let mut last_penalty = 0.0;
    let mut last_excluded = 0.0;

    for iter in state.next_iter..cfg.iters {
        let batch = SimBatch::sample(d, cfg.batch, cfg.steps, &rng, iter);
        match batch_gradients(&state.pi_net, &state.c_net, &batch, p, reg) {
            Ok(bg) => {
                let finite = bg.grad_pi.iter().all(|g| g.is_finite())
                    && bg.grad_c.iter().all(|g| g.is_finite());
                if finite {
                    adam_step(
                        state.pi_net.params_mut(),
                        &bg.grad_pi,
                        &mut state.adam_pi,
                        cfg.lr_pi,
                    )?;
                    adam_step(state.c_net.params_mut(), &bg.grad_c, &mut state.adam_c, cfg.lr_c)?;
                    last_penalty = bg.penalty_mean;
                    last_excluded = bg.excluded_frac;
                    consecutive_failures = 0;
                } else {
                    warn!("iteration {iter}: non-finite gradient, update skipped");
                    consecutive_failures += 1;
                }
            }
            Err(Error::NonFinite(what)) => {
                warn!("iteration {iter}: simulation failed ({what}), update skipped");
                consecutive_failures += 1;
            }
            Err(Error::Numeric { node, what }) => {
                warn!(
                    "iteration {iter}: backward sweep failed ({what} at node {node}), \
                     update skipped"
                );
                consecutive_failures += 1;
            }
            Err(e) => return Err(e),
        }
        if consecutive_failures >= 3 {
            return Err(Error::InvalidInput(format!(
                "training aborted at iteration {iter}: three consecutive failed iterations"
            )));
        }

        let done = iter + 1;
        state.next_iter = done;
        if done % cfg.metric_every == 0 || done == cfg.iters {
            let row =
                metrics_row(&state, cfg, p, d, done, last_penalty, last_excluded, &start)?;
            sink.on_metrics(&row)?;
            history.push(row);
        }
        if done % cfg.checkpoint_every == 0 || done == cfg.iters || MILESTONES.contains(&done) {
            sink.on_checkpoint(&state, algo, done)?;
        }
    }
    Ok(TrainOutcome { state, history })
}

#[allow(clippy::too_many_arguments)]
fn metrics_row(
    state: &TrainState,
    cfg: &TrainConfig,
    p: &MarketParams,
    d: &Domain,
    iter: u64,
    penalty_mean: f64,
    excluded_frac: f64,
    start: &Instant,
) -> Result<MetricsRow> {
    let pi_pol = PiPolicyRef::Net(&state.pi_net);
    let c_pol = CPolicyRef::Net(&state.c_net);
    let relmse_pi = eval::investment_relmse(&pi_pol, p, d, EVAL_GRID)?;
    let relmse_c = eval::consumption_relmse(&c_pol, p, d, EVAL_GRID)?;
    let utility =
        eval::empirical_utility(&pi_pol, &c_pol, d, cfg.eval_rollouts, cfg.steps, p, cfg.seed)?;
    Ok(MetricsRow {
        iter,
        relmse_c,
        relmse_pi,
        empirical_utility: utility.mean,
        penalty_mean,
        excluded_frac,
        wallclock_s: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{batch_objective_frozen, batch_value, rollout_value};

    fn params() -> MarketParams {
        MarketParams::default()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            iters: 2,
            batch: 32,
            steps: 4,
            hidden: vec![4],
            metric_every: 1,
            checkpoint_every: 1,
            eval_rollouts: 16,
            ..TrainConfig::default()
        }
    }

    fn tiny_nets(seed: u64) -> (Mlp, Mlp) {
        let rng = KeyedRng::new(seed);
        let pi = Mlp::new(&[2, 6, 1], Head::Investment, 1.0, &rng, 0).unwrap();
        let c = Mlp::new(&[2, 6, 1], Head::Consumption, 1.0, &rng, 1).unwrap();
        (pi, c)
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-12))
            .fold(0.0, f64::max)
    }

    #[test]
    fn deterministic_toy_adjoints_match_hand_values() {
        // J = kappa U(x0 e^{rT}) with gamma = 2, kappa = 0.01, r = 0.03,
        // T = 1: lambda0 = kappa U'(x0 e^{rT}) e^{rT} = 0.01 e^{-rT} and
        // d(lambda0)/dx0 = kappa U''(x0 e^{rT}) e^{2rT} = -0.02 e^{-rT}.
        let tape = Tape::new();
        let x0 = tape.leaf(1.0);
        let growth = (0.03f64).exp();
        let j = (x0 * growth).powf(-1.0) * (-0.01);
        let node = InitialNode { t0: 0.0, x0: 1.0 };
        let est = adjoint_at_origin(j, x0, node).unwrap();
        let expect_l = 0.009_704_455_335_485_082;
        let expect_d = -0.019_408_910_670_970_164;
        assert!((est.lambda0 - expect_l).abs() < 1e-15 * expect_l.abs() * 10.0, "{est:?}");
        assert!((est.dlambda0_dx - expect_d).abs() < 1e-14, "{est:?}");
    }

    #[test]
    fn stochastic_path_adjoints_match_finite_differences() {
        let (pi_net, c_net) = tiny_nets(3);
        let p = params();
        let node = InitialNode { t0: 0.25, x0: 1.1 };
        let rng = KeyedRng::new(8);
        let noise: Vec<f64> =
            (0..6).map(|k| rng.normal(crate::rng::STREAM_NOISE, 0, 0, k)).collect();
        let tape = Tape::new();
        let path =
            crate::sim::rollout_with_noise(&pi_net, &c_net, node, &p, &noise, &tape).unwrap();
        let est = adjoint_at_origin(path.j, path.states[0], node).unwrap();

        let f = |x0: f64| {
            rollout_value(
                &PiPolicyRef::Net(&pi_net),
                &CPolicyRef::Net(&c_net),
                node.t0,
                x0,
                &p,
                &noise,
            )
            .unwrap()
        };
        let h = 1e-5;
        let fd1 = (f(node.x0 + h) - f(node.x0 - h)) / (2.0 * h);
        let fd2 = (f(node.x0 + h) - 2.0 * f(node.x0) + f(node.x0 - h)) / (h * h);
        let rel1 = (est.lambda0 - fd1).abs() / fd1.abs().max(1e-12);
        let rel2 = (est.dlambda0_dx - fd2).abs() / fd2.abs().max(1e-12);
        assert!(rel1 < 1e-5, "lambda0 {} vs fd {fd1} (rel {rel1})", est.lambda0);
        assert!(rel2 < 1e-3, "dlambda0 {} vs fd {fd2} (rel {rel2})", est.dlambda0_dx);
    }

    #[test]
    fn pmp_consumption_inverts_marginal_utility() {
        let p = params();
        // Unit adjoint at t0 = 0 with gamma = 2 gives unit consumption.
        let a = AdjointEstimate {
            lambda0: 1.0,
            dlambda0_dx: -1.0,
            node: InitialNode { t0: 0.0, x0: 1.0 },
        };
        assert_eq!(pmp_controls(&a, &p).unwrap().c_pmp, 1.0);
        // lambda0 = e^{-rho t0} c^{-gamma} inverts back to c exactly.
        for (t0, c) in [(0.3f64, 0.7f64), (0.9, 2.5)] {
            let a = AdjointEstimate {
                lambda0: (-p.rho * t0).exp() * c.powf(-p.gamma),
                dlambda0_dx: -1.0,
                node: InitialNode { t0, x0: 1.0 },
            };
            let got = pmp_controls(&a, &p).unwrap().c_pmp;
            assert!((got - c).abs() < 1e-12 * c, "{got} vs {c}");
        }
    }

    #[test]
    fn pmp_investment_recovers_the_merton_fraction() {
        // Adjoint field lambda(x) = x^{-gamma} has lambda / lambda' = -x /
        // gamma, collapsing the formula to the constant Merton fraction.
        let p = params();
        for x0 in [0.2f64, 1.0, 1.7] {
            let a = AdjointEstimate {
                lambda0: x0.powf(-p.gamma),
                dlambda0_dx: -p.gamma * x0.powf(-p.gamma - 1.0),
                node: InitialNode { t0: 0.4, x0 },
            };
            let got = pmp_controls(&a, &p).unwrap().pi_pmp;
            assert!((got - 1.125).abs() < 1e-12, "x0={x0}: {got}");
        }
    }

    #[test]
    fn degenerate_adjoints_are_rejected() {
        let p = params();
        let node = InitialNode { t0: 0.0, x0: 1.0 };
        for (l, d) in [(0.0, -1.0), (-0.5, -1.0), (1.0, 5e-13), (f64::NAN, -1.0), (1.0, f64::NAN)]
        {
            let a = AdjointEstimate { lambda0: l, dlambda0_dx: d, node };
            assert!(pmp_controls(&a, &p).is_err(), "lambda0={l} dlambda0={d}");
        }
    }

    #[test]
    fn alignment_penalty_is_weighted_l1() {
        let tape = Tape::new();
        let c_pol = tape.leaf(1.5);
        let pi_pol = tape.leaf(1.0);
        let target = PmpControls { c_pmp: 1.0, pi_pmp: 1.1 };
        let pen = alignment_penalty(c_pol, pi_pol, &target, 1e-3, 1e-1);
        assert!((pen.value() - 1.05e-2).abs() < 1e-17, "{}", pen.value());
        let zero = alignment_penalty(
            tape.leaf(1.0),
            tape.leaf(1.1),
            &target,
            1e-3,
            1e-1,
        );
        assert_eq!(zero.value(), 0.0);
    }

    #[test]
    fn batch_gradients_match_finite_differences_of_the_value() {
        // The production BPTT gradient against central differences of the
        // value-mode objective, under frozen nodes and noise.
        let (pi_net, c_net) = tiny_nets(12);
        let p = params();
        let d = Domain::default();
        let rng = KeyedRng::new(42);
        let batch = SimBatch::sample(&d, 4, 6, &rng, 0);
        let bg = batch_gradients(&pi_net, &c_net, &batch, &p, None).unwrap();

        let f_pi = |q: &[f64]| {
            let mut net = pi_net.clone();
            net.params_mut().copy_from_slice(q);
            Ok(batch_value(&PiPolicyRef::Net(&net), &CPolicyRef::Net(&c_net), &batch, &p)?
                .j_hat)
        };
        let err_pi = eval::finite_diff_gradcheck(
            f_pi,
            &bg.grad_pi,
            pi_net.params(),
            1e-6,
            20,
            1,
        )
        .unwrap();
        assert!(err_pi < 1e-5, "investment gradient rel err {err_pi}");

        let f_c = |q: &[f64]| {
            let mut net = c_net.clone();
            net.params_mut().copy_from_slice(q);
            Ok(batch_value(&PiPolicyRef::Net(&pi_net), &CPolicyRef::Net(&net), &batch, &p)?
                .j_hat)
        };
        let err_c =
            eval::finite_diff_gradcheck(f_c, &bg.grad_c, c_net.params(), 1e-6, 20, 2).unwrap();
        assert!(err_c < 1e-5, "consumption gradient rel err {err_c}");
    }

    #[test]
    fn zero_penalty_weights_short_circuit_to_the_plain_gradient() {
        let (pi_net, c_net) = tiny_nets(7);
        let p = params();
        let d = Domain::default();
        let batch = SimBatch::sample(&d, 40, 5, &KeyedRng::new(1), 0);
        let plain = batch_gradients(&pi_net, &c_net, &batch, &p, None).unwrap();
        let off = batch_gradients(
            &pi_net,
            &c_net,
            &batch,
            &p,
            Some(RegSpec { alpha_c: 0.0, alpha_pi: 0.0 }),
        )
        .unwrap();
        assert_eq!(plain.j_hat.to_bits(), off.j_hat.to_bits());
        for (a, b) in plain.grad_pi.iter().zip(&off.grad_pi) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in plain.grad_c.iter().zip(&off.grad_c) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(off.penalty_mean, 0.0);
        assert_eq!(off.excluded_frac, 0.0);
    }

    #[test]
    fn regularized_gradients_subtract_the_penalty_direction() {
        // With weights on, the gradient must differ from plain BPTT and the
        // diagnostics must be populated.
        let (pi_net, c_net) = tiny_nets(7);
        let p = params();
        let d = Domain::default();
        let batch = SimBatch::sample(&d, 60, 5, &KeyedRng::new(2), 0);
        let plain = batch_gradients(&pi_net, &c_net, &batch, &p, None).unwrap();
        let reg = batch_gradients(
            &pi_net,
            &c_net,
            &batch,
            &p,
            Some(RegSpec { alpha_c: 1e-3, alpha_pi: 1e-1 }),
        )
        .unwrap();
        assert_eq!(plain.j_hat.to_bits(), reg.j_hat.to_bits());
        assert!(reg.valid_paths > 0, "no valid penalty paths");
        assert!(reg.penalty_mean > 0.0);
        assert!(reg.excluded_frac >= 0.0 && reg.excluded_frac <= 1.0);
        assert!(
            plain.grad_pi.iter().zip(&reg.grad_pi).any(|(a, b)| a != b),
            "penalty left the investment gradient untouched"
        );
        let err = max_rel_err(&plain.grad_pi, &reg.grad_pi);
        assert!(err > 0.0);
    }

    #[test]
    fn penalty_gradient_matches_finite_differences_of_the_penalized_value() {
        // End-to-end check of the two-pass gradient: J~ = J_hat - penalty,
        // with the PMP targets frozen at their unperturbed values (targets
        // are gradient-detached by design).
        let (pi_net, c_net) = tiny_nets(19);
        let p = params();
        let d = Domain::default();
        let batch = SimBatch::sample(&d, 6, 5, &KeyedRng::new(9), 0);
        let spec = RegSpec { alpha_c: 1e-2, alpha_pi: 1e-1 };
        let bg = batch_gradients(&pi_net, &c_net, &batch, &p, Some(spec)).unwrap();
        assert_eq!(bg.valid_paths, 6, "expected every path valid on this instance");

        let targets: Vec<PmpControls> =
            batch_adjoints(&PiPolicyRef::Net(&pi_net), &CPolicyRef::Net(&c_net), &batch, &p)
                .unwrap()
                .iter()
                .map(|a| pmp_controls(a, &p).unwrap())
                .collect();

        let value = |pi: &Mlp, c: &Mlp| -> f64 {
            let j = batch_value(&PiPolicyRef::Net(pi), &CPolicyRef::Net(c), &batch, &p)
                .unwrap()
                .j_hat;
            let mut pen = 0.0;
            for (i, tgt) in targets.iter().enumerate() {
                let node = batch.nodes[i];
                let c0 = c.policy_value(node.t0, node.x0);
                let pi0 = pi.policy_value(node.t0, node.x0);
                pen += spec.alpha_c * (c0 - tgt.c_pmp).abs()
                    + spec.alpha_pi * (pi0 - tgt.pi_pmp).abs();
            }
            j - pen / targets.len() as f64
        };

        let f_pi = |q: &[f64]| {
            let mut net = pi_net.clone();
            net.params_mut().copy_from_slice(q);
            Ok(value(&net, &c_net))
        };
        let err_pi =
            eval::finite_diff_gradcheck(f_pi, &bg.grad_pi, pi_net.params(), 1e-6, 15, 3)
                .unwrap();
        assert!(err_pi < 1e-4, "penalized investment gradient rel err {err_pi}");

        let f_c = |q: &[f64]| {
            let mut net = c_net.clone();
            net.params_mut().copy_from_slice(q);
            Ok(value(&pi_net, &net))
        };
        let err_c =
            eval::finite_diff_gradcheck(f_c, &bg.grad_c, c_net.params(), 1e-6, 15, 4).unwrap();
        assert!(err_c < 1e-4, "penalized consumption gradient rel err {err_c}");
    }

    #[test]
    fn explicit_oracle_matches_bptt_on_a_small_instance() {
        let (pi_net, c_net) = tiny_nets(5);
        let p = params();
        let d = Domain::default();
        let rng = KeyedRng::new(17);
        let batch = SimBatch::sample(&d, 2, 3, &rng, 0);
        let tape = Tape::new();
        let rb = batch_objective_frozen(&pi_net, &c_net, &batch, &p, &tape).unwrap();
        let (g_pi, g_c) = explicit_gradient_oracle(&rb, &pi_net, &c_net, &p).unwrap();
        let bg = batch_gradients(&pi_net, &c_net, &batch, &p, None).unwrap();
        let err_pi = max_rel_err(&g_pi, &bg.grad_pi);
        let err_c = max_rel_err(&g_c, &bg.grad_c);
        assert!(err_pi < 1e-5, "investment: oracle vs BPTT rel err {err_pi}");
        assert!(err_c < 1e-5, "consumption: oracle vs BPTT rel err {err_c}");
    }

    #[test]
    fn explicit_oracle_rejects_large_instances() {
        let (pi_net, c_net) = tiny_nets(5);
        let p = params();
        let d = Domain::default();
        let rng = KeyedRng::new(17);
        let batch = SimBatch::sample(&d, 9, 3, &rng, 0);
        let tape = Tape::new();
        let rb = batch_objective_frozen(&pi_net, &c_net, &batch, &p, &tape).unwrap();
        assert!(matches!(
            explicit_gradient_oracle(&rb, &pi_net, &c_net, &p),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn zero_iterations_returns_the_initialized_networks() {
        let cfg = TrainConfig { iters: 0, ..tiny_cfg() };
        let p = params();
        let d = Domain::default();
        let out = train_pgdpo(&cfg, &p, &d).unwrap();
        let fresh = TrainState::init(&cfg, &p).unwrap();
        assert_eq!(out.state.pi_net.params(), fresh.pi_net.params());
        assert_eq!(out.state.c_net.params(), fresh.c_net.params());
        assert!(out.history.is_empty());
        assert_eq!(out.state.next_iter, 0);
    }

    #[test]
    fn short_run_emits_metrics_and_checkpoints() {
        struct Counter {
            metrics: Vec<u64>,
            checkpoints: Vec<u64>,
        }
        impl TrainSink for Counter {
            fn on_metrics(&mut self, row: &MetricsRow) -> Result<()> {
                self.metrics.push(row.iter);
                Ok(())
            }
            fn on_checkpoint(&mut self, _s: &TrainState, _a: Algo, iter: u64) -> Result<()> {
                self.checkpoints.push(iter);
                Ok(())
            }
        }
        let cfg = tiny_cfg();
        let p = params();
        let d = Domain::default();
        let mut sink = Counter { metrics: vec![], checkpoints: vec![] };
        let out = train_with_sink(Algo::Pgdpo, &cfg, &p, &d, &mut sink).unwrap();
        assert_eq!(sink.metrics, vec![1, 2]);
        assert_eq!(sink.checkpoints, vec![1, 2]);
        assert_eq!(out.history.len(), 2);
        assert_eq!(out.state.next_iter, 2);
        assert_eq!(out.state.adam_pi.step_count(), 2);
        let r = &out.history[1];
        assert!(r.relmse_c.is_finite() && r.relmse_c >= 0.0);
        assert!(r.relmse_pi.is_finite() && r.relmse_pi >= 0.0);
        assert!(r.empirical_utility < 0.0);
        assert!(r.wallclock_s >= out.history[0].wallclock_s);
    }

    #[test]
    fn trainers_are_deterministic_and_reg_with_zero_weights_matches_plain() {
        let cfg = TrainConfig { alpha_c: 0.0, alpha_pi: 0.0, iters: 3, ..tiny_cfg() };
        let p = params();
        let d = Domain::default();
        let a = train_pgdpo(&cfg, &p, &d).unwrap();
        let b = train_pgdpo(&cfg, &p, &d).unwrap();
        let r = train_pgdpo_reg(&cfg, &p, &d).unwrap();
        for (x, y) in a.state.pi_net.params().iter().zip(b.state.pi_net.params()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in a.state.pi_net.params().iter().zip(r.state.pi_net.params()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in a.state.c_net.params().iter().zip(r.state.c_net.params()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let cfg = TrainConfig { iters: 4, ..tiny_cfg() };
        let p = params();
        let d = Domain::default();
        let full = train_pgdpo(&cfg, &p, &d).unwrap();

        let cfg_half = TrainConfig { iters: 2, ..cfg.clone() };
        let half = train_pgdpo(&cfg_half, &p, &d).unwrap();
        let resumed =
            train_resume(Algo::Pgdpo, &cfg, &p, &d, half.state, &mut NoSink).unwrap();
        for (x, y) in full.state.pi_net.params().iter().zip(resumed.state.pi_net.params()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in full.state.c_net.params().iter().zip(resumed.state.c_net.params()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(full.state.adam_pi, resumed.state.adam_pi);
    }

    #[test]
    fn state_survives_a_checkpoint_round_trip() {
        let cfg = TrainConfig { iters: 2, ..tiny_cfg() };
        let p = params();
        let d = Domain::default();
        let out = train_pgdpo(&cfg, &p, &d).unwrap();
        let ck = out.state.to_checkpoint(Algo::Pgdpo, cfg.seed);
        assert_eq!(ck.iter, 2);
        assert_eq!(ck.algo, "pgdpo");
        let back = TrainState::from_checkpoint(ck).unwrap();
        assert_eq!(back.next_iter, out.state.next_iter);
        assert_eq!(back.adam_pi, out.state.adam_pi);
        assert_eq!(back.adam_c, out.state.adam_c);
        for (x, y) in out.state.pi_net.params().iter().zip(back.pi_net.params()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn closed_form_checkpoints_cannot_resume() {
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            algo: "pgdpo".into(),
            iter: 0,
            seed: 0,
            pi: PolicyRecord::from_pi(&PiPolicy::ClosedForm { scale: 1.0 }),
            c: PolicyRecord::from_c(&CPolicy::ClosedForm { scale: 1.0 }),
            adam_pi: None,
            adam_c: None,
        };
        let err = TrainState::from_checkpoint(ck).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }

    #[test]
    fn config_validation_names_the_offending_field() {
        let p = params();
        let d = Domain::default();
        for (cfg, needle) in [
            (TrainConfig { batch: 0, ..tiny_cfg() }, "batch"),
            (TrainConfig { steps: 0, ..tiny_cfg() }, "steps"),
            (TrainConfig { lr_pi: 0.0, ..tiny_cfg() }, "lr_pi"),
            (TrainConfig { lr_c: -1.0, ..tiny_cfg() }, "lr_c"),
            (TrainConfig { alpha_c: -0.1, ..tiny_cfg() }, "alpha_c"),
            (TrainConfig { hidden: vec![], ..tiny_cfg() }, "hidden"),
            (TrainConfig { metric_every: 0, ..tiny_cfg() }, "metric_every"),
        ] {
            let err = train_pgdpo(&cfg, &p, &d).unwrap_err();
            let msg = err.to_string();
            assert!(msg.contains(needle), "{msg:?} should mention {needle}");
        }
    }

    #[test]
    fn algo_names_round_trip() {
        assert_eq!("pgdpo".parse::<Algo>().unwrap(), Algo::Pgdpo);
        assert_eq!("pgdpo-reg".parse::<Algo>().unwrap(), Algo::PgdpoReg);
        assert_eq!(Algo::Pgdpo.as_str(), "pgdpo");
        assert_eq!(Algo::PgdpoReg.as_str(), "pgdpo-reg");
        assert!("sgd".parse::<Algo>().is_err());
    }
}
