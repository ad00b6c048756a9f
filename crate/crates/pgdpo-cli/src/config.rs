//! Run configuration: TOML file plus command-line overrides, with the
//! canonical calibration filling anything left unset. Flags take precedence
//! over file values, file values over defaults.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::Args;
use serde::Deserialize;

use pgdpo::model::{Domain, MarketParams};
use pgdpo::train::{Algo, TrainConfig};

/// Flags shared by every subcommand. Every field is optional; unset fields
/// fall back to the config file and then to defaults.
#[derive(Args, Clone, Debug, Default)]
pub struct CommonArgs {
    /// TOML config file; flags override its values.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Trainer variant: pgdpo or pgdpo-reg.
    #[arg(long, value_parser = parse_algo)]
    pub algo: Option<Algo>,
    /// Training iterations (K).
    #[arg(long)]
    pub iters: Option<u64>,
    /// Simulated paths per iteration (M).
    #[arg(long)]
    pub batch: Option<usize>,
    /// Euler steps per path (N).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Learning rate of the investment network.
    #[arg(long)]
    pub lr_pi: Option<f64>,
    /// Learning rate of the consumption network.
    #[arg(long)]
    pub lr_c: Option<f64>,
    /// Consumption alignment-penalty weight.
    #[arg(long)]
    pub alpha_c: Option<f64>,
    /// Investment alignment-penalty weight.
    #[arg(long)]
    pub alpha_pi: Option<f64>,
    /// Seed all randomness derives from.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

fn parse_algo(s: &str) -> Result<Algo, String> {
    s.parse::<Algo>().map_err(|e| e.to_string())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    algo: Option<String>,
    out: Option<PathBuf>,
    #[serde(default)]
    market: MarketSection,
    #[serde(default)]
    domain: DomainSection,
    #[serde(default)]
    train: TrainSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct MarketSection {
    r: Option<f64>,
    mu: Option<f64>,
    sigma: Option<f64>,
    rho: Option<f64>,
    gamma: Option<f64>,
    kappa: Option<f64>,
    epsilon: Option<f64>,
    t_horizon: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DomainSection {
    t_min: Option<f64>,
    t_max: Option<f64>,
    x_min: Option<f64>,
    x_max: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    iters: Option<u64>,
    batch: Option<usize>,
    steps: Option<usize>,
    lr_pi: Option<f64>,
    lr_c: Option<f64>,
    alpha_c: Option<f64>,
    alpha_pi: Option<f64>,
    seed: Option<u64>,
    hidden: Option<Vec<usize>>,
    metric_every: Option<u64>,
    checkpoint_every: Option<u64>,
    eval_rollouts: Option<usize>,
}

/// Merged configuration. Market and domain are fully resolved and validated;
/// the training knobs stay optional so each command can tell explicit
/// settings apart from defaults (resume reconciles seed and algorithm with
/// the checkpoint, gradcheck substitutes a tiny instance).
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub market: MarketParams,
    pub domain: Domain,
    pub algo: Option<Algo>,
    pub out: Option<PathBuf>,
    pub iters: Option<u64>,
    pub batch: Option<usize>,
    pub steps: Option<usize>,
    pub lr_pi: Option<f64>,
    pub lr_c: Option<f64>,
    pub alpha_c: Option<f64>,
    pub alpha_pi: Option<f64>,
    pub seed: Option<u64>,
    pub hidden: Option<Vec<usize>>,
    pub metric_every: Option<u64>,
    pub checkpoint_every: Option<u64>,
    pub eval_rollouts: Option<usize>,
}

impl RunConfig {
    /// Merge defaults, the optional config file, and flags.
    pub fn load(args: &CommonArgs) -> anyhow::Result<RunConfig> {
        let file = match &args.config {
            Some(path) => read_file_config(path)?,
            None => FileConfig::default(),
        };

        let mut market = MarketParams::default();
        let m = &file.market;
        if let Some(v) = m.r {
            market.r = v;
        }
        if let Some(v) = m.mu {
            market.mu = v;
        }
        if let Some(v) = m.sigma {
            market.sigma = v;
        }
        if let Some(v) = m.rho {
            market.rho = v;
        }
        if let Some(v) = m.gamma {
            market.gamma = v;
        }
        if let Some(v) = m.t_horizon {
            market.t_horizon = v;
        }
        match (m.kappa, m.epsilon) {
            (Some(_), Some(_)) => {
                bail!("invalid configuration: set either kappa or epsilon, not both")
            }
            (Some(k), None) => market.kappa = k,
            (None, Some(e)) => {
                if !(e >= 0.0 && e.is_finite()) {
                    bail!("invalid configuration: epsilon must be nonnegative and finite");
                }
                market.kappa = e.powf(market.gamma);
            }
            (None, None) => {}
        }
        market.validate()?;

        let mut domain = Domain { t_max: market.t_horizon, ..Domain::default() };
        let d = &file.domain;
        if let Some(v) = d.t_min {
            domain.t_min = v;
        }
        if let Some(v) = d.t_max {
            domain.t_max = v;
        }
        if let Some(v) = d.x_min {
            domain.x_min = v;
        }
        if let Some(v) = d.x_max {
            domain.x_max = v;
        }
        domain.validate(&market)?;

        let file_algo = match &file.algo {
            Some(s) => Some(s.parse::<Algo>()?),
            None => None,
        };
        let t = &file.train;
        Ok(RunConfig {
            market,
            domain,
            algo: args.algo.or(file_algo),
            out: args.out.clone().or(file.out),
            iters: args.iters.or(t.iters),
            batch: args.batch.or(t.batch),
            steps: args.steps.or(t.steps),
            lr_pi: args.lr_pi.or(t.lr_pi),
            lr_c: args.lr_c.or(t.lr_c),
            alpha_c: args.alpha_c.or(t.alpha_c),
            alpha_pi: args.alpha_pi.or(t.alpha_pi),
            seed: args.seed.or(t.seed),
            hidden: t.hidden.clone(),
            metric_every: t.metric_every,
            checkpoint_every: t.checkpoint_every,
            eval_rollouts: t.eval_rollouts,
        })
    }

    /// Training hyperparameters with defaults applied to whatever is unset.
    pub fn train_config(&self) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            iters: self.iters.unwrap_or(d.iters),
            batch: self.batch.unwrap_or(d.batch),
            steps: self.steps.unwrap_or(d.steps),
            lr_pi: self.lr_pi.unwrap_or(d.lr_pi),
            lr_c: self.lr_c.unwrap_or(d.lr_c),
            alpha_c: self.alpha_c.unwrap_or(d.alpha_c),
            alpha_pi: self.alpha_pi.unwrap_or(d.alpha_pi),
            seed: self.seed.unwrap_or(d.seed),
            hidden: self.hidden.clone().unwrap_or(d.hidden),
            metric_every: self.metric_every.unwrap_or(d.metric_every),
            checkpoint_every: self.checkpoint_every.unwrap_or(d.checkpoint_every),
            eval_rollouts: self.eval_rollouts.unwrap_or(d.eval_rollouts),
        }
    }

    pub fn algo_or_default(&self) -> Algo {
        self.algo.unwrap_or(Algo::Pgdpo)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}

fn read_file_config(path: &Path) -> anyhow::Result<FileConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config file {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("invalid config file {}", path.display()))
}
