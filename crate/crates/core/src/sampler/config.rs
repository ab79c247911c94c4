use serde::{Deserialize, Serialize};

use super::SamplerError;

/// Robbins-Monro step sizes `γ_t = γ0 / (t0 + t)^a`, increments clipped to `±δ_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub gamma0: f64,
    pub decay: f64,
    pub offset: f64,
    pub clip: f64,
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule {
            gamma0: 1.0,
            decay: 0.6,
            offset: 1.0,
            clip: 0.5,
        }
    }
}

impl StepSchedule {
    pub fn gamma(&self, t: u64) -> f64 {
        self.gamma0 / (self.offset + t as f64).powf(self.decay)
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        if !(self.gamma0 > 0.0 && self.gamma0.is_finite()) {
            return Err(SamplerError::Config("gamma0 must be positive".into()));
        }
        if !(self.decay > 0.5 && self.decay <= 1.0) {
            return Err(SamplerError::Config("decay exponent must lie in (1/2, 1]".into()));
        }
        if !(self.offset >= 0.0 && self.offset.is_finite()) {
            return Err(SamplerError::Config("offset must be non-negative".into()));
        }
        if !(self.clip > 0.0) {
            return Err(SamplerError::Config("clip must be positive".into()));
        }
        Ok(())
    }
}

/// How hard-constraint residuals are combined before comparison with `theta`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reducer {
    #[default]
    Sum,
    Max,
}

/// Stage-2 hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Proposal rate; particle `i` joins a block with probability `min(1, α w_i)`.
    pub alpha: f64,
    /// Sigmoid scale in days for time thresholds.
    pub epsilon: f64,
    pub gamma0: f64,
    /// Step decay exponent `a`.
    pub decay: f64,
    /// Step offset `t0`.
    pub t0: f64,
    /// Per-iteration clip on multiplier increments.
    pub delta_max: f64,
    /// Number of particle partitions for the between/within diagnostic.
    pub partitions: usize,
    /// Bound on the aggregate hard residual.
    pub theta: f64,
    pub max_iterations: u64,
    /// Fixed burn-in; adaptive when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<u64>,
    /// Thinning interval of stored chain samples.
    pub spacing: u64,
    /// Stored samples per particle.
    pub chain_depth: usize,
    pub rhat_threshold: f64,
    pub soft_tolerance: f64,
    /// Iterations between diagnostic snapshots.
    pub snapshot_interval: u64,
    /// Snapshots used by the between/within diagnostic.
    pub rhat_window: usize,
    /// Steps in the moving acceptance-rate window.
    pub acceptance_window: usize,
    pub reducer: Reducer,
    /// Multiplier turning probability residuals into the units of `theta`.
    pub probability_scale: f64,
    /// Iterations between exact recomputations of the running estimates.
    pub resync_interval: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            alpha: 1e-3,
            epsilon: 10.0,
            gamma0: 1.0,
            decay: 0.6,
            t0: 1.0,
            delta_max: 0.5,
            partitions: 400,
            theta: 50.0,
            max_iterations: 1_000_000,
            burn_in: None,
            spacing: 100,
            chain_depth: 64,
            rhat_threshold: 1.05,
            soft_tolerance: 0.01,
            snapshot_interval: 500,
            rhat_window: 200,
            acceptance_window: 1000,
            reducer: Reducer::Sum,
            probability_scale: 1000.0,
            resync_interval: 1024,
        }
    }
}

impl SamplerConfig {
    pub fn schedule(&self) -> StepSchedule {
        StepSchedule {
            gamma0: self.gamma0,
            decay: self.decay,
            offset: self.t0,
            clip: self.delta_max,
        }
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(SamplerError::Config(format!("alpha = {} outside (0, 1]", self.alpha)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(SamplerError::Config("epsilon must be positive".into()));
        }
        self.schedule().validate()?;
        if self.partitions < 2 {
            return Err(SamplerError::Config("at least two partitions are required".into()));
        }
        if !(self.theta > 0.0) {
            return Err(SamplerError::Config("theta must be positive".into()));
        }
        if self.max_iterations == 0 || self.spacing == 0 || self.chain_depth == 0 {
            return Err(SamplerError::Config(
                "max_iterations, spacing and chain_depth must be positive".into(),
            ));
        }
        if self.snapshot_interval == 0 || self.rhat_window < 10 || self.acceptance_window == 0 {
            return Err(SamplerError::Config(
                "snapshot_interval > 0, rhat_window >= 10 and acceptance_window > 0 are required".into(),
            ));
        }
        if !(self.rhat_threshold > 1.0) || !(self.soft_tolerance > 0.0) {
            return Err(SamplerError::Config("stopping thresholds must be positive".into()));
        }
        if self.resync_interval == 0 {
            return Err(SamplerError::Config("resync_interval must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, SamplerError> {
        let cfg: SamplerConfig = toml::from_str(text).map_err(|e| SamplerError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("sampler config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_decreases() {
        let s = StepSchedule::default();
        assert_eq!(s.gamma(0), 1.0);
        assert!(s.gamma(1) < s.gamma(0));
        assert!(s.gamma(1000) > 0.0);
    }

    #[test]
    fn schedule_validation() {
        let mut s = StepSchedule {
            decay: 0.5,
            ..Default::default()
        };
        assert!(s.validate().is_err());
        s.decay = 1.0;
        assert!(s.validate().is_ok());
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg = SamplerConfig::from_toml("alpha = 0.01\nchain_depth = 8\n").unwrap();
        assert_eq!(cfg.alpha, 0.01);
        assert_eq!(cfg.chain_depth, 8);
        assert_eq!(cfg.partitions, 400);
        assert!(SamplerConfig::from_toml("alpah = 0.01").is_err());
        assert!(SamplerConfig::from_toml("alpha = 2.0").is_err());
    }
}
