//! Merton market model: parameters, CRRA utility, and the closed-form
//! optimal controls and value function used as benchmarks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Market and preference parameters of the consumption-investment problem.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketParams {
    /// Risk-free rate per year.
    pub r: f64,
    /// Risky-asset drift per year.
    pub mu: f64,
    /// Risky-asset volatility per sqrt-year.
    pub sigma: f64,
    /// Utility discount rate per year.
    pub rho: f64,
    /// Relative risk aversion (dimensionless, != 1).
    pub gamma: f64,
    /// Bequest weight on terminal wealth (dimensionless).
    pub kappa: f64,
    /// Horizon in years.
    pub t_horizon: f64,
}

impl Default for MarketParams {
    /// Canonical one-year calibration used throughout the tests:
    /// r=3%, mu=12%, sigma=20%, rho=2%, gamma=2, kappa=0.01 (epsilon=0.1).
    fn default() -> Self {
        MarketParams {
            r: 0.03,
            mu: 0.12,
            sigma: 0.2,
            rho: 0.02,
            gamma: 2.0,
            kappa: kappa_from_epsilon(0.1, 2.0),
            t_horizon: 1.0,
        }
    }
}

impl MarketParams {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.to_string()))
            }
        };
        check(self.sigma > 0.0, "sigma must be > 0")?;
        check(self.gamma > 0.0, "gamma must be > 0")?;
        check(self.gamma != 1.0, "gamma = 1 (log utility) is not supported")?;
        check(self.t_horizon > 0.0, "t_horizon must be > 0")?;
        check(self.kappa >= 0.0, "kappa must be >= 0")?;
        check(self.rho >= 0.0, "rho must be >= 0")?;
        check(
            [self.r, self.mu, self.sigma, self.rho, self.gamma, self.kappa, self.t_horizon]
                .iter()
                .all(|v| v.is_finite()),
            "market parameters must be finite",
        )?;
        if self.mu <= self.r {
            log::warn!(
                "mu ({}) <= r ({}): no excess return, the risky asset is never attractive",
                self.mu,
                self.r
            );
        }
        Ok(())
    }

    /// epsilon = kappa^{1/gamma}, the bequest weight on the consumption
    /// scale.
    pub fn epsilon(&self) -> f64 {
        self.kappa.powf(1.0 / self.gamma)
    }
}

/// Sampling region for initial nodes (t0, x0).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub t_min: f64,
    pub t_max: f64,
    pub x_min: f64,
    pub x_max: f64,
}

impl Default for Domain {
    /// Full time range with wealth in [0.1, 2], matching the canonical
    /// calibration's horizon.
    fn default() -> Self {
        Domain { t_min: 0.0, t_max: 1.0, x_min: 0.1, x_max: 2.0 }
    }
}

impl Domain {
    pub fn validate(&self, p: &MarketParams) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.to_string()))
            }
        };
        check(self.t_min >= 0.0, "t_min must be >= 0")?;
        check(self.t_min < self.t_max, "t_min must be < t_max")?;
        check(self.t_max <= p.t_horizon, "t_max must be <= t_horizon")?;
        check(self.x_min > 0.0, "x_min must be > 0")?;
        check(self.x_min < self.x_max, "x_min must be < x_max")?;
        Ok(())
    }
}

/// CRRA utility U(c) = c^{1-gamma} / (1-gamma).
pub fn utility(c: f64, gamma: f64) -> Result<f64> {
    if gamma == 1.0 {
        return Err(Error::InvalidInput("gamma = 1 is not supported".into()));
    }
    if c <= 0.0 {
        return Err(Error::InvalidInput(format!("utility requires c > 0, got {c}")));
    }
    Ok(c.powf(1.0 - gamma) / (1.0 - gamma))
}

/// Marginal utility U'(c) = c^{-gamma}.
pub fn utility_prime(c: f64, gamma: f64) -> Result<f64> {
    if c <= 0.0 {
        return Err(Error::InvalidInput(format!("utility_prime requires c > 0, got {c}")));
    }
    Ok(c.powf(-gamma))
}

/// Optimal risky fraction pi* = (mu - r) / (gamma sigma^2); constant in
/// both time and wealth.
pub fn closed_form_pi(p: &MarketParams) -> f64 {
    (p.mu - p.r) / (p.gamma * p.sigma * p.sigma)
}

/// The rate constant nu = (rho - (1-gamma)((mu-r)^2 / (2 sigma^2 gamma) + r)) / gamma
/// appearing in the optimal consumption rate.
pub fn closed_form_nu(p: &MarketParams) -> f64 {
    let excess = p.mu - p.r;
    let half_sharpe_sq = excess * excess / (2.0 * p.sigma * p.sigma * p.gamma);
    (p.rho - (1.0 - p.gamma) * (half_sharpe_sq + p.r)) / p.gamma
}

/// kappa = epsilon^gamma, the inverse of [`MarketParams::epsilon`].
pub fn kappa_from_epsilon(epsilon: f64, gamma: f64) -> f64 {
    epsilon.powf(gamma)
}

/// Optimal consumption rate c(t) such that C*(t, x) = c(t) x:
/// c(t) = nu / (1 + (nu epsilon - 1) e^{-nu (T-t)}).
pub fn consumption_rate(p: &MarketParams, t: f64) -> f64 {
    let nu = closed_form_nu(p);
    nu / rate_denominator(p, nu, t)
}

/// The denominator 1 + (nu epsilon - 1) e^{-nu (T-t)}, arranged as
/// (1 - e^{-nu (T-t)}) + nu epsilon e^{-nu (T-t)} so that t = T yields
/// exactly nu epsilon and the terminal rate is 1/epsilon to rounding.
fn rate_denominator(p: &MarketParams, nu: f64, t: f64) -> f64 {
    let decay = (-nu * (p.t_horizon - t)).exp();
    (1.0 - decay) + nu * p.epsilon() * decay
}

/// Optimal consumption C*(t, x) = c(t) x.
pub fn closed_form_consumption(p: &MarketParams, t: f64, x: f64) -> f64 {
    consumption_rate(p, t) * x
}

/// The value-function shape factor phi(t) = 1 / c(t); at t = T it equals
/// epsilon.
pub fn phi(p: &MarketParams, t: f64) -> f64 {
    let nu = closed_form_nu(p);
    rate_denominator(p, nu, t) / nu
}

/// Closed-form value function J*(t, x) = e^{-rho t} phi(t)^gamma U(x).
pub fn closed_form_value(p: &MarketParams, t: f64, x: f64) -> Result<f64> {
    let u = utility(x, p.gamma)?;
    Ok((-p.rho * t).exp() * phi(p, t).powf(p.gamma) * u)
}
