//! The four subcommands: train, eval, dump-surface, and gradcheck.

use std::path::Path;

use anyhow::{anyhow, bail, Context};

use pgdpo::checkpoint;
use pgdpo::error::Result as PgResult;
use pgdpo::eval::{self, EVAL_GRID};
use pgdpo::model::{Domain, MarketParams};
use pgdpo::nn::{Head, Mlp};
use pgdpo::rng::KeyedRng;
use pgdpo::sim::{batch_value, rollout_trace, CPolicyRef, PiPolicyRef, SimBatch};
use pgdpo::train::{
    batch_gradients, train_resume, Algo, MetricsRow, TrainSink, TrainState, METRICS_CSV_HEADER,
};

use crate::config::RunConfig;
use crate::output::{
    latest_checkpoint, metrics_path, paths_path, save_checkpoint_pruning, write_surface, CsvFile,
    PATHS_CSV_HEADER,
};

/// Trajectories dumped per checkpoint event when --dump-paths is set.
const DUMP_PATHS_PER_EVENT: usize = 8;

/// Sink wiring training callbacks to the output directory: metric rows go to
/// metrics.csv, checkpoint events write pruned checkpoint files and optional
/// trajectory dumps.
struct RunSink {
    out: std::path::PathBuf,
    metrics: CsvFile,
    traces: Option<CsvFile>,
    seed: u64,
    market: MarketParams,
    domain: Domain,
    steps: usize,
}

impl TrainSink for RunSink {
    fn on_metrics(&mut self, row: &MetricsRow) -> PgResult<()> {
        self.metrics.append(row.csv_line())
    }

    fn on_checkpoint(&mut self, state: &TrainState, algo: Algo, iter: u64) -> PgResult<()> {
        save_checkpoint_pruning(&self.out, &state.to_checkpoint(algo, self.seed))?;
        if let Some(traces) = &mut self.traces {
            let batch = eval::eval_batch_sample(
                &self.domain,
                DUMP_PATHS_PER_EVENT,
                self.steps,
                self.seed,
                iter + 1,
            );
            let mut rows = Vec::with_capacity(DUMP_PATHS_PER_EVENT * self.steps);
            for (i, node) in batch.nodes.iter().enumerate() {
                let tr = rollout_trace(
                    &PiPolicyRef::Net(&state.pi_net),
                    &CPolicyRef::Net(&state.c_net),
                    *node,
                    &self.market,
                    &batch.noise[i],
                )?;
                for k in 0..self.steps {
                    let t = node.t0 + k as f64 * tr.dt;
                    rows.push(format!(
                        "{iter},{i},{k},{},{},{},{}",
                        t, tr.states[k], tr.pis[k], tr.cs[k]
                    ));
                }
            }
            traces.append_all(rows)?;
        }
        Ok(())
    }
}

pub fn cmd_train(run: &RunConfig, resume: bool, dump_paths: bool) -> anyhow::Result<()> {
    let out = run.out_dir();
    let mut cfg = run.train_config();

    let (algo, state) = if resume {
        let (ck_iter, ck_path) = latest_checkpoint(&out)?
            .ok_or_else(|| anyhow!("no checkpoint found in {} to resume from", out.display()))?;
        let ck = checkpoint::load(&ck_path)
            .with_context(|| format!("cannot resume from {}", ck_path.display()))?;
        let ck_algo: Algo = ck.algo.parse()?;
        if let Some(requested) = run.algo {
            if requested != ck_algo {
                bail!(
                    "checkpoint {} was trained with --algo {} but --algo {} was given",
                    ck_path.display(),
                    ck_algo.as_str(),
                    requested.as_str()
                );
            }
        }
        if let Some(requested) = run.seed {
            if requested != ck.seed {
                bail!(
                    "checkpoint {} used seed {} but --seed {requested} was given; a resumed \
                     run must keep the original seed to replay the same iterations",
                    ck_path.display(),
                    ck.seed
                );
            }
        }
        cfg.seed = ck.seed;
        log::info!(
            "resuming {} from {} at iteration {ck_iter}",
            ck_algo.as_str(),
            ck_path.display()
        );
        (ck_algo, TrainState::from_checkpoint(ck)?)
    } else {
        (run.algo_or_default(), TrainState::init(&cfg, &run.market)?)
    };
    cfg.validate()?;

    std::fs::create_dir_all(&out)
        .with_context(|| format!("cannot create output directory {}", out.display()))?;
    let resume_iter = state.next_iter;
    let metrics = if resume {
        CsvFile::resume(metrics_path(&out), METRICS_CSV_HEADER, resume_iter)?
    } else {
        CsvFile::fresh(metrics_path(&out), METRICS_CSV_HEADER)
    };
    let traces = if dump_paths {
        Some(if resume {
            CsvFile::resume(paths_path(&out), PATHS_CSV_HEADER, resume_iter)?
        } else {
            CsvFile::fresh(paths_path(&out), PATHS_CSV_HEADER)
        })
    } else {
        None
    };
    let mut sink = RunSink {
        out: out.clone(),
        metrics,
        traces,
        seed: cfg.seed,
        market: run.market,
        domain: run.domain,
        steps: cfg.steps,
    };

    let outcome = train_resume(algo, &cfg, &run.market, &run.domain, state, &mut sink)?;

    write_surface(
        &out.join("surface.csv"),
        &PiPolicyRef::Net(&outcome.state.pi_net),
        &CPolicyRef::Net(&outcome.state.c_net),
        &run.market,
        &run.domain,
    )?;
    if let Some(last) = outcome.history.last() {
        println!(
            "trained {} to iteration {}: relmse_c {}, relmse_pi {}, empirical utility {}",
            algo.as_str(),
            outcome.state.next_iter,
            last.relmse_c,
            last.relmse_pi,
            last.empirical_utility
        );
    } else {
        println!(
            "trained {} to iteration {} (no new metric rows)",
            algo.as_str(),
            outcome.state.next_iter
        );
    }
    println!("outputs in {}", out.display());
    Ok(())
}

pub fn cmd_eval(run: &RunConfig, ck_path: &Path) -> anyhow::Result<()> {
    let ck = checkpoint::load(ck_path)
        .with_context(|| format!("cannot evaluate {}", ck_path.display()))?;
    let iter = ck.iter;
    let algo = ck.algo.clone();
    let pi = ck.pi.into_pi()?;
    let c = ck.c.into_c()?;
    let cfg = run.train_config();

    let relmse_c = eval::consumption_relmse(&c.as_ref(), &run.market, &run.domain, EVAL_GRID)?;
    let relmse_pi = eval::investment_relmse(&pi.as_ref(), &run.market, &run.domain, EVAL_GRID)?;
    let utility = eval::empirical_utility(
        &pi.as_ref(),
        &c.as_ref(),
        &run.domain,
        cfg.eval_rollouts,
        cfg.steps,
        &run.market,
        cfg.seed,
    )?;

    let out = run.out_dir();
    std::fs::create_dir_all(&out)
        .with_context(|| format!("cannot create output directory {}", out.display()))?;
    let surface = out.join(format!("surface-{iter:07}.csv"));
    write_surface(&surface, &pi.as_ref(), &c.as_ref(), &run.market, &run.domain)?;

    println!("checkpoint {} (algo {algo}, iteration {iter})", ck_path.display());
    println!("relmse_c {relmse_c}");
    println!("relmse_pi {relmse_pi}");
    println!(
        "empirical_utility {} abs {} se {} n {}",
        utility.mean, utility.abs_mean, utility.std_err, utility.n_rollouts
    );
    println!("surface written to {}", surface.display());
    Ok(())
}

pub fn cmd_dump_surface(run: &RunConfig, ck_path: &Path) -> anyhow::Result<()> {
    let ck = checkpoint::load(ck_path)
        .with_context(|| format!("cannot dump surface of {}", ck_path.display()))?;
    let iter = ck.iter;
    let pi = ck.pi.into_pi()?;
    let c = ck.c.into_c()?;
    let out = run.out_dir();
    std::fs::create_dir_all(&out)
        .with_context(|| format!("cannot create output directory {}", out.display()))?;
    let surface = out.join(format!("surface-{iter:07}.csv"));
    write_surface(&surface, &pi.as_ref(), &c.as_ref(), &run.market, &run.domain)?;
    println!("surface written to {}", surface.display());
    Ok(())
}

/// Compare BPTT gradients of both networks against central finite
/// differences on a small frozen-noise instance. Exits nonzero above the
/// 1e-5 gate.
pub fn cmd_gradcheck(run: &RunConfig) -> anyhow::Result<()> {
    const GATE: f64 = 1e-5;
    let m = run.batch.unwrap_or(4);
    let n = run.steps.unwrap_or(10);
    let hidden = run.hidden.clone().unwrap_or_else(|| vec![8]);
    let seed = run.seed.unwrap_or(0);
    let mut layers = vec![2usize];
    layers.extend(&hidden);
    layers.push(1);

    let rng = KeyedRng::new(seed);
    let t_scale = 1.0 / run.market.t_horizon;
    let pi_net = Mlp::new(&layers, Head::Investment, t_scale, &rng, 0)?;
    let c_net = Mlp::new(&layers, Head::Consumption, t_scale, &rng, 1)?;
    let batch = SimBatch::sample(&run.domain, m, n, &rng, 0);
    let bg = batch_gradients(&pi_net, &c_net, &batch, &run.market, None)?;

    let h = 1e-4;
    let f_pi = |q: &[f64]| {
        let mut net = pi_net.clone();
        net.params_mut().copy_from_slice(q);
        Ok(batch_value(&PiPolicyRef::Net(&net), &CPolicyRef::Net(&c_net), &batch, &run.market)?
            .j_hat)
    };
    let err_pi = eval::finite_diff_gradcheck(f_pi, &bg.grad_pi, pi_net.params(), h, 50, 1)?;
    let f_c = |q: &[f64]| {
        let mut net = c_net.clone();
        net.params_mut().copy_from_slice(q);
        Ok(batch_value(&PiPolicyRef::Net(&pi_net), &CPolicyRef::Net(&net), &batch, &run.market)?
            .j_hat)
    };
    let err_c = eval::finite_diff_gradcheck(f_c, &bg.grad_c, c_net.params(), h, 50, 2)?;

    println!(
        "gradcheck on {m} paths x {n} steps, hidden {hidden:?}, step {h}: investment max rel \
         err {err_pi:.3e}, consumption max rel err {err_c:.3e}"
    );
    let worst = err_pi.max(err_c);
    if worst < GATE {
        println!("gradcheck PASS ({worst:.3e} < {GATE:.0e})");
        Ok(())
    } else {
        bail!("gradcheck FAIL: max relative error {worst:.3e} exceeds {GATE:.0e}")
    }
}
