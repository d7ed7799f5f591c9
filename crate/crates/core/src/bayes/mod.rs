//! Online MAP estimation of the normal-behaviour distribution and the
//! decoupled surprise scores derived from it.
//!
//! Each ego carries a diagonal Gaussian belief over its flow-aligned velocity
//! `[v_par, v_perp]`. The mean blends a prior with the neighbourhood
//! observations using the precision ratio `lambda = sigma_obs^2 / sigma_prior^2`;
//! the spread follows the neighbourhood's observed dispersion, smoothed and
//! floored. A dimension contributes surprise only once its z-score leaves the
//! `1 - alpha` credible region.

mod normal;

pub use normal::{inv_norm_cdf, norm_cdf};

use crate::frenet::KinematicFeature;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BayesError {
    #[error("probability {0} outside (0, 1)")]
    Domain(f64),

    #[error("invalid parameter: {0}")]
    Parameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    /// Flow-aligned axes with continuous posterior updates.
    #[default]
    Full,
    /// Image x/y axes instead of flow-aligned axes.
    NoFrenet,
    /// Posterior frozen after a per-track warmup.
    StaticPrior,
}

impl std::str::FromStr for ScoringMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Self::Full),
            "no_frenet" => Ok(Self::NoFrenet),
            "static_prior" => Ok(Self::StaticPrior),
            other => Err(format!("unknown scoring mode '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BayesConfig {
    pub alpha_par: f64,
    pub alpha_perp: f64,
    pub lambda: f64,
    pub sigma_floor: f64,
    pub ema_alpha: f64,
    /// Number of most recent flow-speed samples averaged into the
    /// longitudinal prior. Frames without neighbours add no sample.
    pub flow_history_len: u64,
    pub mode: ScoringMode,
    /// Scored frames before the posterior freezes in `static_prior` mode.
    pub static_warmup: u64,
}

impl Default for BayesConfig {
    fn default() -> Self {
        Self {
            alpha_par: 0.1,
            alpha_perp: 0.1,
            lambda: 4.0,
            sigma_floor: 0.5,
            ema_alpha: 0.3,
            flow_history_len: 50,
            mode: ScoringMode::Full,
            static_warmup: 50,
        }
    }
}

impl BayesConfig {
    pub fn validate(&self) -> Result<(), BayesError> {
        for (name, a) in [
            ("alpha_par", self.alpha_par),
            ("alpha_perp", self.alpha_perp),
        ] {
            if !(a > 0.0 && a < 0.5) {
                return Err(BayesError::Parameter(format!(
                    "{name} = {a} not in (0, 0.5)"
                )));
            }
        }
        if !(self.lambda >= 0.0) {
            return Err(BayesError::Parameter(format!(
                "lambda = {} must be >= 0",
                self.lambda
            )));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(BayesError::Parameter(format!(
                "sigma_floor = {} must be > 0",
                self.sigma_floor
            )));
        }
        if !(self.ema_alpha > 0.0 && self.ema_alpha <= 1.0) {
            return Err(BayesError::Parameter(format!(
                "ema_alpha = {} not in (0, 1]",
                self.ema_alpha
            )));
        }
        if self.flow_history_len == 0 {
            return Err(BayesError::Parameter(
                "flow_history_len must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub mu_post_par: f64,
    pub mu_post_perp: f64,
    pub sigma_post_par: f64,
    pub sigma_post_perp: f64,
    pub n_obs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SurpriseScore {
    pub s_par: f64,
    pub s_perp: f64,
    pub s_ego: f64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Posterior mean from `N` observations: `w_obs = N / (N + lambda)`,
/// `mu = (1 - w_obs) * prior + w_obs * mean(obs)`.
pub fn map_update(prior_mean: f64, observations: &[f64], lambda: f64) -> f64 {
    let n = observations.len() as f64;
    if observations.is_empty() {
        return prior_mean;
    }
    let w_obs = n / (n + lambda);
    (1.0 - w_obs) * prior_mean + w_obs * mean(observations)
}

/// Floored, exponentially smoothed population standard deviation.
pub fn posterior_std(
    observations: &[f64],
    sigma_floor: f64,
    ema_alpha: f64,
    previous: Option<f64>,
) -> f64 {
    let raw = if observations.len() <= 1 {
        0.0
    } else {
        let m = mean(observations);
        (observations.iter().map(|x| (x - m).powi(2)).sum::<f64>() / observations.len() as f64)
            .sqrt()
    };
    let smoothed = match previous {
        Some(prev) => ema_alpha * raw + (1.0 - ema_alpha) * prev,
        None => raw,
    };
    smoothed.max(sigma_floor)
}

/// Mean flow speed over the history, else the current observation mean.
pub fn longitudinal_prior(history: &[f64], current_obs_mean: Option<f64>) -> Option<f64> {
    if history.is_empty() {
        current_obs_mean
    } else {
        Some(mean(history))
    }
}

/// Credible-region quantiles `Φ⁻¹(1 - alpha)` for both dimensions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    pub q_par: f64,
    pub q_perp: f64,
}

impl Thresholds {
    pub fn new(alpha_par: f64, alpha_perp: f64) -> Result<Self, BayesError> {
        for a in [alpha_par, alpha_perp] {
            if !(a > 0.0 && a < 0.5) {
                return Err(BayesError::Parameter(format!("alpha {a} not in (0, 0.5)")));
            }
        }
        Ok(Self {
            q_par: inv_norm_cdf(1.0 - alpha_par)?,
            q_perp: inv_norm_cdf(1.0 - alpha_perp)?,
        })
    }

    /// Excess z-scores beyond the credible region. The lateral mean is zero.
    pub fn score(&self, effective: KinematicFeature, posterior: &Posterior) -> SurpriseScore {
        let z_par = (effective.v_par - posterior.mu_post_par).abs() / posterior.sigma_post_par;
        let z_perp = effective.v_perp.abs() / posterior.sigma_post_perp;
        let s_par = (z_par - self.q_par).max(0.0);
        let s_perp = (z_perp - self.q_perp).max(0.0);
        SurpriseScore {
            s_par,
            s_perp,
            s_ego: s_par.max(s_perp),
        }
    }
}

pub fn surprise(
    effective: KinematicFeature,
    posterior: &Posterior,
    alpha_par: f64,
    alpha_perp: f64,
) -> Result<SurpriseScore, BayesError> {
    Ok(Thresholds::new(alpha_par, alpha_perp)?.score(effective, posterior))
}

/// Squared Mahalanobis distance under a diagonal covariance, written as the
/// sum of per-dimension squared z-scores.
pub fn mahalanobis_check(
    feature: [f64; 2],
    mean: [f64; 2],
    cov_diag: [f64; 2],
) -> Result<f64, BayesError> {
    if !(cov_diag[0] > 0.0 && cov_diag[1] > 0.0) {
        return Err(BayesError::Parameter(format!(
            "non-positive variance {cov_diag:?}"
        )));
    }
    Ok((feature[0] - mean[0]).powi(2) / cov_diag[0] + (feature[1] - mean[1]).powi(2) / cov_diag[1])
}

/// Inputs gathered for one ego at one frame.
#[derive(Debug, Clone, Default)]
pub struct FrameEvidence<'a> {
    pub frame: u64,
    /// Neighbour velocities projected on the ego's longitudinal axis.
    pub obs_par: &'a [f64],
    /// Neighbour velocities projected on the ego's lateral axis.
    pub obs_perp: &'a [f64],
    /// Flow speed along the longitudinal axis, when the neighbourhood is non-empty.
    pub flow_speed: Option<f64>,
}

/// Per-ego running belief: flow-speed history, smoothed spreads and the
/// freeze state used by the static-prior mode.
#[derive(Debug, Clone, Default)]
pub struct EgoBelief {
    flow_history: VecDeque<f64>,
    sigma_prev: Option<(f64, f64)>,
    updates: u64,
    frozen: Option<Posterior>,
}

impl EgoBelief {
    pub fn is_frozen(&self) -> bool {
        self.frozen.is_some()
    }

    /// Updates the belief and returns the posterior to score against, or
    /// `None` when no longitudinal prior can be formed yet.
    pub fn update(&mut self, evidence: &FrameEvidence<'_>, cfg: &BayesConfig) -> Option<Posterior> {
        if let Some(p) = self.frozen {
            return Some(p);
        }
        let obs_mean = (!evidence.obs_par.is_empty()).then(|| mean(evidence.obs_par));
        let mu_prior_par = longitudinal_prior(self.flow_history.make_contiguous(), obs_mean)?;
        if let Some(speed) = evidence.flow_speed {
            if self.flow_history.len() as u64 >= cfg.flow_history_len {
                self.flow_history.pop_front();
            }
            self.flow_history.push_back(speed);
        }

        let mu_post_par = map_update(mu_prior_par, evidence.obs_par, cfg.lambda);
        let mu_post_perp = map_update(0.0, evidence.obs_perp, cfg.lambda);
        let (prev_par, prev_perp) = match self.sigma_prev {
            Some((a, b)) => (Some(a), Some(b)),
            None => (None, None),
        };
        let sigma_post_par =
            posterior_std(evidence.obs_par, cfg.sigma_floor, cfg.ema_alpha, prev_par);
        let sigma_post_perp =
            posterior_std(evidence.obs_perp, cfg.sigma_floor, cfg.ema_alpha, prev_perp);
        self.sigma_prev = Some((sigma_post_par, sigma_post_perp));

        let posterior = Posterior {
            mu_post_par,
            mu_post_perp,
            sigma_post_par,
            sigma_post_perp,
            n_obs: evidence.obs_par.len(),
        };
        self.updates += 1;
        if cfg.mode == ScoringMode::StaticPrior && self.updates >= cfg.static_warmup {
            self.frozen = Some(posterior);
        }
        Some(posterior)
    }
}
