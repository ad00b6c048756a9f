//! Benchmark metrics against the closed-form solution: relative mean-squared
//! error of the policies on a grid, empirical utility over fresh rollouts,
//! finite-difference gradient checking, and a gradient-variance probe.

use crate::error::{Error, Result};
use crate::model::{self, Domain, MarketParams};
use crate::rng::{KeyedRng, STREAM_EVAL, STREAM_PROBE};
use crate::sim::{batch_value, CPolicyRef, InitialNode, PiPolicyRef, SimBatch};

/// Metrics of one checkpoint against the closed form.
#[derive(Clone, Copy, Debug)]
pub struct MetricsReport {
    pub iter: u64,
    pub relmse_c: f64,
    pub relmse_pi: f64,
    /// Mean realized objective (raw; negative for gamma > 1).
    pub empirical_utility: f64,
    /// Magnitude of the mean objective, for comparison with reports that
    /// quote utilities unsigned.
    pub empirical_utility_abs: f64,
    pub utility_se: f64,
    pub n_rollouts: usize,
}

/// i-th of n uniform grid points on [lo, hi]; both endpoints are hit
/// exactly.
fn grid_point(lo: f64, hi: f64, i: usize, n: usize) -> f64 {
    if i + 1 == n {
        hi
    } else {
        lo + (hi - lo) * i as f64 / (n - 1) as f64
    }
}

/// Mean over a uniform grid of (f - oracle)^2, divided by the mean of
/// oracle^2. The grid covers the domain inclusively with `grid.0` time
/// points and `grid.1` wealth points.
pub fn relative_mse<F, G>(f: F, oracle: G, d: &Domain, grid: (usize, usize)) -> Result<f64>
where
    F: Fn(f64, f64) -> f64,
    G: Fn(f64, f64) -> f64,
{
    let (nt, nx) = grid;
    if nt < 2 || nx < 2 {
        return Err(Error::Usage("relative_mse needs a grid of at least 2 x 2".into()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for it in 0..nt {
        let t = grid_point(d.t_min, d.t_max, it, nt);
        for ix in 0..nx {
            let x = grid_point(d.x_min, d.x_max, ix, nx);
            let fv = f(t, x);
            let ov = oracle(t, x);
            if !fv.is_finite() || !ov.is_finite() {
                return Err(Error::NonFinite("policy value on evaluation grid"));
            }
            num += (fv - ov) * (fv - ov);
            den += ov * ov;
        }
    }
    if den == 0.0 {
        return Err(Error::InvalidInput(
            "oracle mean square is zero on the grid; relative error undefined".into(),
        ));
    }
    Ok(num / den)
}

/// Relative MSE of an investment policy against the closed form.
pub fn investment_relmse(
    pol: &PiPolicyRef<'_>,
    p: &MarketParams,
    d: &Domain,
    grid: (usize, usize),
) -> Result<f64> {
    relative_mse(|t, x| pol.value(p, t, x), |_, _| model::closed_form_pi(p), d, grid)
}

/// Relative MSE of a consumption policy against the closed form.
pub fn consumption_relmse(
    pol: &CPolicyRef<'_>,
    p: &MarketParams,
    d: &Domain,
    grid: (usize, usize),
) -> Result<f64> {
    relative_mse(
        |t, x| pol.value(p, t, x),
        |t, x| model::closed_form_consumption(p, t, x),
        d,
        grid,
    )
}

/// Default evaluation grid resolution.
pub const EVAL_GRID: (usize, usize) = (101, 101);

/// Draw an evaluation batch from its own stream, keyed by (seed, tag), so
/// training batches and evaluation batches never share randomness and two
/// policies can be compared under common random numbers.
pub fn eval_batch_sample(d: &Domain, m: usize, n_steps: usize, seed: u64, tag: u64) -> SimBatch {
    let rng = KeyedRng::new(seed);
    let nodes: Vec<InitialNode> = (0..m)
        .map(|i| InitialNode {
            t0: rng.uniform_in(d.t_min, d.t_max, STREAM_EVAL, 2 * tag, i as u64, 0),
            x0: rng.uniform_in(d.x_min, d.x_max, STREAM_EVAL, 2 * tag, i as u64, 1),
        })
        .collect();
    let noise: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            (0..n_steps)
                .map(|k| rng.normal(STREAM_EVAL, 2 * tag + 1, i as u64, k as u64))
                .collect()
        })
        .collect();
    SimBatch { nodes, noise, n_steps }
}

/// Realized mean objective with its standard error.
#[derive(Clone, Copy, Debug)]
pub struct UtilityReport {
    pub mean: f64,
    pub abs_mean: f64,
    pub std_err: f64,
    pub n_rollouts: usize,
}

/// Mean realized objective over fresh seeded rollouts.
pub fn empirical_utility(
    pi: &PiPolicyRef<'_>,
    c: &CPolicyRef<'_>,
    d: &Domain,
    n_rollouts: usize,
    n_steps: usize,
    p: &MarketParams,
    seed: u64,
) -> Result<UtilityReport> {
    if n_rollouts == 0 {
        return Err(Error::Usage("empirical_utility needs at least one rollout".into()));
    }
    let batch = eval_batch_sample(d, n_rollouts, n_steps, seed, 0);
    empirical_utility_on(pi, c, &batch, p)
}

/// As [`empirical_utility`] over an explicit batch (common random numbers).
pub fn empirical_utility_on(
    pi: &PiPolicyRef<'_>,
    c: &CPolicyRef<'_>,
    batch: &SimBatch,
    p: &MarketParams,
) -> Result<UtilityReport> {
    let bv = batch_value(pi, c, batch, p)?;
    let n = batch.len();
    let mean = bv.j_hat;
    let var = if n > 1 {
        bv.per_path.iter().map(|j| (j - mean) * (j - mean)).sum::<f64>() / (n as f64 - 1.0)
    } else {
        0.0
    };
    Ok(UtilityReport {
        mean,
        abs_mean: mean.abs(),
        std_err: (var / n as f64).sqrt(),
        n_rollouts: n,
    })
}

/// Compare a gradient against central finite differences of `f` on up to
/// `max_coords` randomly chosen coordinates; returns the maximum relative
/// error, with denominators guarded by 1e-12.
pub fn finite_diff_gradcheck<F>(
    mut f: F,
    grad: &[f64],
    point: &[f64],
    h: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::Usage("gradcheck step h must be positive".into()));
    }
    if grad.len() != point.len() {
        return Err(Error::Usage("gradient and point dimensions differ".into()));
    }
    let dim = point.len();
    if dim == 0 {
        return Ok(0.0);
    }
    let coords: Vec<usize> = if dim <= max_coords {
        (0..dim).collect()
    } else {
        // Sample without replacement by rejection on a keyed stream.
        let rng = KeyedRng::new(seed);
        let mut chosen = Vec::with_capacity(max_coords);
        let mut draw = 0u64;
        while chosen.len() < max_coords {
            let idx = (rng.uniform(STREAM_PROBE, 0, draw, 0) * dim as f64) as usize;
            draw += 1;
            let idx = idx.min(dim - 1);
            if !chosen.contains(&idx) {
                chosen.push(idx);
            }
        }
        chosen
    };
    let mut work = point.to_vec();
    let mut max_rel = 0.0f64;
    for &j in &coords {
        let orig = work[j];
        work[j] = orig + h;
        let fp = f(&work)?;
        work[j] = orig - h;
        let fm = f(&work)?;
        work[j] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let denom = grad[j].abs().max(fd.abs()).max(1e-12);
        max_rel = max_rel.max((grad[j] - fd).abs() / denom);
    }
    Ok(max_rel)
}

/// Variance and unbiasedness summary of a stochastic gradient estimator.
#[derive(Clone, Debug)]
pub struct VarianceProbe {
    /// Coordinates actually probed.
    pub n_coords: usize,
    /// Fraction of probed coordinates whose repeat-mean is within three
    /// standard errors of the reference gradient.
    pub frac_within_3se: f64,
    /// Mean per-coordinate variance across repeats.
    pub mean_variance: f64,
}

/// Run `grad_at(rep)` for `n_repeats` independent repetitions and compare
/// the empirical mean per coordinate against `reference` with a z-test.
/// Coordinates are probed at random (up to `n_coords`, keyed by `seed`).
pub fn gradient_variance_probe<F>(
    mut grad_at: F,
    reference: &[f64],
    n_repeats: usize,
    n_coords: usize,
    seed: u64,
) -> Result<VarianceProbe>
where
    F: FnMut(u64) -> Result<Vec<f64>>,
{
    if n_repeats < 2 {
        return Err(Error::Usage("variance probe needs at least two repeats".into()));
    }
    let dim = reference.len();
    let rng = KeyedRng::new(seed);
    let coords: Vec<usize> = if dim <= n_coords {
        (0..dim).collect()
    } else {
        let mut chosen = Vec::with_capacity(n_coords);
        let mut draw = 0u64;
        while chosen.len() < n_coords {
            let idx =
                ((rng.uniform(STREAM_PROBE, 1, draw, 0) * dim as f64) as usize).min(dim - 1);
            draw += 1;
            if !chosen.contains(&idx) {
                chosen.push(idx);
            }
        }
        chosen
    };
    let mut sums = vec![0.0f64; coords.len()];
    let mut sq_sums = vec![0.0f64; coords.len()];
    for rep in 0..n_repeats {
        let g = grad_at(rep as u64)?;
        if g.len() != dim {
            return Err(Error::Usage("gradient dimension changed between repeats".into()));
        }
        for (slot, &j) in coords.iter().enumerate() {
            sums[slot] += g[j];
            sq_sums[slot] += g[j] * g[j];
        }
    }
    let n = n_repeats as f64;
    let mut within = 0usize;
    let mut var_acc = 0.0;
    for (slot, &j) in coords.iter().enumerate() {
        let mean = sums[slot] / n;
        let var = (sq_sums[slot] / n - mean * mean).max(0.0) * n / (n - 1.0);
        var_acc += var;
        let se = (var / n).sqrt();
        let z = if se > 0.0 {
            (mean - reference[j]).abs() / se
        } else if (mean - reference[j]).abs() <= 1e-12 {
            0.0
        } else {
            f64::INFINITY
        };
        if z <= 3.0 {
            within += 1;
        }
    }
    Ok(VarianceProbe {
        n_coords: coords.len(),
        frac_within_3se: within as f64 / coords.len() as f64,
        mean_variance: var_acc / coords.len() as f64,
    })
}

/// One row of the policy-surface dump.
#[derive(Clone, Copy, Debug)]
pub struct SurfaceRow {
    pub t: f64,
    pub x: f64,
    pub c_learned: f64,
    pub c_exact: f64,
    pub pi_learned: f64,
    pub pi_exact: f64,
}

/// Evaluate both policies and their closed forms on a uniform grid, in
/// row-major (t outer, x inner) order.
pub fn surface_rows(
    pi: &PiPolicyRef<'_>,
    c: &CPolicyRef<'_>,
    p: &MarketParams,
    d: &Domain,
    grid: (usize, usize),
) -> Result<Vec<SurfaceRow>> {
    let (nt, nx) = grid;
    if nt < 2 || nx < 2 {
        return Err(Error::Usage("surface dump needs a grid of at least 2 x 2".into()));
    }
    let mut rows = Vec::with_capacity(nt * nx);
    for it in 0..nt {
        let t = grid_point(d.t_min, d.t_max, it, nt);
        for ix in 0..nx {
            let x = grid_point(d.x_min, d.x_max, ix, nx);
            rows.push(SurfaceRow {
                t,
                x,
                c_learned: c.value(p, t, x),
                c_exact: model::closed_form_consumption(p, t, x),
                pi_learned: pi.value(p, t, x),
                pi_exact: model::closed_form_pi(p),
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> MarketParams {
        MarketParams::default()
    }

    #[test]
    fn identical_fields_have_zero_error() {
        let p = params();
        let d = Domain::default();
        let got = relative_mse(
            |t, x| model::closed_form_consumption(&p, t, x),
            |t, x| model::closed_form_consumption(&p, t, x),
            &d,
            (21, 21),
        )
        .unwrap();
        assert_eq!(got, 0.0);
    }

    #[test]
    fn doubled_field_has_unit_error() {
        let p = params();
        let d = Domain::default();
        let got = relative_mse(
            |t, x| 2.0 * model::closed_form_consumption(&p, t, x),
            |t, x| model::closed_form_consumption(&p, t, x),
            &d,
            (21, 21),
        )
        .unwrap();
        assert!((got - 1.0).abs() < 1e-12, "{got}");
    }

    #[test]
    fn constant_fields_reduce_to_scalar_arithmetic() {
        let d = Domain::default();
        let got = relative_mse(|_, _| 1.0, |_, _| 1.125, &d, (11, 11)).unwrap();
        let expect = (0.125 / 1.125) * (0.125 / 1.125);
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn zero_oracle_is_degenerate() {
        let d = Domain::default();
        let err = relative_mse(|_, _| 1.0, |_, _| 0.0, &d, (5, 5)).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn undersized_grid_is_rejected() {
        let d = Domain::default();
        assert!(relative_mse(|_, _| 1.0, |_, _| 1.0, &d, (1, 5)).is_err());
    }

    #[test]
    fn closed_form_policies_have_zero_relmse() {
        let p = params();
        let d = Domain::default();
        let pi = PiPolicyRef::ClosedForm { scale: 1.0 };
        let c = CPolicyRef::ClosedForm { scale: 1.0 };
        assert_eq!(investment_relmse(&pi, &p, &d, (31, 31)).unwrap(), 0.0);
        assert_eq!(consumption_relmse(&c, &p, &d, (31, 31)).unwrap(), 0.0);
    }

    #[test]
    fn grid_refinement_is_stable_for_smooth_fields() {
        let p = params();
        let d = Domain::default();
        let c = CPolicyRef::ClosedForm { scale: 1.2 };
        let coarse = consumption_relmse(&c, &p, &d, (51, 51)).unwrap();
        let fine = consumption_relmse(&c, &p, &d, (101, 101)).unwrap();
        assert!((coarse - fine).abs() <= 0.05 * fine.max(1e-300), "{coarse} vs {fine}");
    }

    #[test]
    fn empirical_utility_is_deterministic_and_negative() {
        let p = params();
        let d = Domain::default();
        let pi = PiPolicyRef::ClosedForm { scale: 1.0 };
        let c = CPolicyRef::ClosedForm { scale: 1.0 };
        let a = empirical_utility(&pi, &c, &d, 200, 20, &p, 11).unwrap();
        let b = empirical_utility(&pi, &c, &d, 200, 20, &p, 11).unwrap();
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        assert!(a.mean < 0.0);
        assert!(a.std_err > 0.0);
        assert_eq!(a.abs_mean, -a.mean);
        let other = empirical_utility(&pi, &c, &d, 200, 20, &p, 12).unwrap();
        assert_ne!(a.mean.to_bits(), other.mean.to_bits());
    }

    #[test]
    fn single_rollout_has_no_spread() {
        let p = params();
        let d = Domain::default();
        let pi = PiPolicyRef::ClosedForm { scale: 1.0 };
        let c = CPolicyRef::ClosedForm { scale: 1.0 };
        let rep = empirical_utility(&pi, &c, &d, 1, 10, &p, 3).unwrap();
        assert_eq!(rep.n_rollouts, 1);
        assert_eq!(rep.std_err, 0.0);
    }

    #[test]
    fn exact_policy_beats_perturbed_under_common_random_numbers() {
        let p = params();
        let d = Domain::default();
        let batch = eval_batch_sample(&d, 2000, 25, 5, 1);
        let c = CPolicyRef::ClosedForm { scale: 1.0 };
        let exact =
            empirical_utility_on(&PiPolicyRef::ClosedForm { scale: 1.0 }, &c, &batch, &p)
                .unwrap();
        for scale in [0.8, 1.2] {
            let perturbed =
                empirical_utility_on(&PiPolicyRef::ClosedForm { scale }, &c, &batch, &p)
                    .unwrap();
            assert!(
                exact.mean >= perturbed.mean,
                "scale {scale}: exact {} < perturbed {}",
                exact.mean,
                perturbed.mean
            );
        }
    }

    #[test]
    fn gradcheck_is_exact_on_quadratics() {
        // f(p) = sum of squares; central differences are exact up to rounding.
        let point: Vec<f64> = (0..10).map(|i| 0.3 * i as f64 - 1.0).collect();
        let grad: Vec<f64> = point.iter().map(|v| 2.0 * v).collect();
        // Central differences are exact on quadratics at any step size, so a
        // generous h avoids cancellation noise entirely.
        let err = finite_diff_gradcheck(
            |q| Ok(q.iter().map(|v| v * v).sum()),
            &grad,
            &point,
            1e-3,
            50,
            0,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn gradcheck_documents_h_sensitivity() {
        // On exp-heavy functions a coarse step inflates the error.
        let point: Vec<f64> = vec![1.0, 2.0];
        let grad = vec![point[0].exp(), point[1].exp()];
        let f = |q: &[f64]| Ok(q.iter().map(|v| v.exp()).sum::<f64>());
        let fine = finite_diff_gradcheck(f, &grad, &point, 1e-6, 50, 0).unwrap();
        let coarse = finite_diff_gradcheck(f, &grad, &point, 0.1, 50, 0).unwrap();
        assert!(fine < 1e-9, "{fine}");
        assert!(coarse > 100.0 * fine, "coarse {coarse} fine {fine}");
    }

    #[test]
    fn gradcheck_probes_a_bounded_subset() {
        // 1000 coordinates, at most 50 probed: wrong entries outside the
        // probe set must not fail, and the call must stay cheap.
        let point = vec![1.0; 1000];
        let grad = vec![2.0; 1000];
        let mut calls = 0usize;
        let err = finite_diff_gradcheck(
            |q| {
                calls += 1;
                Ok(q.iter().map(|v| v * v).sum())
            },
            &grad,
            &point,
            1e-6,
            50,
            9,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
        assert_eq!(calls, 100);
    }

    #[test]
    fn variance_probe_flags_bias_and_accepts_unbiased_noise() {
        // Pseudo-random zero-mean noise around the reference passes; a
        // shifted estimator fails.
        let dim = 8;
        let reference = vec![1.0; dim];
        let noise = |rep: u64, j: usize, shift: f64| {
            let rng = KeyedRng::new(99);
            reference[j] + shift + 0.1 * rng.normal(STREAM_PROBE, 7, rep, j as u64)
        };
        let unbiased = gradient_variance_probe(
            |rep| Ok((0..dim).map(|j| noise(rep, j, 0.0)).collect()),
            &reference,
            60,
            dim,
            1,
        )
        .unwrap();
        assert!(unbiased.frac_within_3se >= 0.95, "{:?}", unbiased);
        let biased = gradient_variance_probe(
            |rep| Ok((0..dim).map(|j| noise(rep, j, 1.0)).collect()),
            &reference,
            60,
            dim,
            1,
        )
        .unwrap();
        assert!(biased.frac_within_3se < 0.5, "{:?}", biased);
    }

    #[test]
    fn variance_probe_sees_zero_variance_for_frozen_gradients() {
        let reference = vec![0.5; 4];
        let probe = gradient_variance_probe(
            |_| Ok(vec![0.5; 4]),
            &reference,
            30,
            4,
            0,
        )
        .unwrap();
        assert_eq!(probe.mean_variance, 0.0);
        assert_eq!(probe.frac_within_3se, 1.0);
    }

    #[test]
    fn surface_rows_cover_the_grid_with_exact_columns() {
        let p = params();
        let d = Domain::default();
        let rows = surface_rows(
            &PiPolicyRef::ClosedForm { scale: 1.0 },
            &CPolicyRef::ClosedForm { scale: 1.0 },
            &p,
            &d,
            (5, 7),
        )
        .unwrap();
        assert_eq!(rows.len(), 35);
        assert_eq!(rows[0].t, d.t_min);
        assert_eq!(rows[0].x, d.x_min);
        let last = rows.last().unwrap();
        assert_eq!(last.t, d.t_max);
        assert_eq!(last.x, d.x_max);
        for r in &rows {
            assert_eq!(r.c_learned, r.c_exact);
            assert_eq!(r.pi_learned, r.pi_exact);
        }
    }
}
