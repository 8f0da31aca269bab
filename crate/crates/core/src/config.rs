//! Experiment configuration: a flat `section.key = value` text format with
//! documented defaults for every field.
//!
//! Files are line-oriented: blank lines and `#` comments are ignored,
//! everything else must be `key = value` with a known dotted key. Unknown
//! keys and unparsable values are rejected by name, so a typo cannot
//! silently fall back to a default. [`ExperimentConfig::to_text`] emits
//! every key in a fixed order with defaults expanded; parsing that text
//! reproduces the config exactly, which is what makes a frozen
//! `resolved.cfg` sufficient to rerun an experiment bit for bit.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::dataset::Tier;
use crate::env::EnvSpec;
use crate::policy::{PolicyConfig, SyntheticMode};
use crate::rollout::RolloutConfig;
use crate::world::WorldModelConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`")]
    BadValue { key: String, value: String },
    #[error("expected `key = value`, got `{0}`")]
    BadLine(String),
    #[error("invalid `{key}`: {why}")]
    Invalid { key: String, why: String },
}

/// Particle environment shape. `gamma` lives here because the env spec is
/// its single source of truth; the policy trainer reads it from the spec.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvCfg {
    pub n_agents: usize,
    pub episode_cap: u32,
    pub gamma: f64,
    pub sensing_radius: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataCfg {
    pub tier: Tier,
    pub episodes: usize,
    pub val_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WmCfg {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub hidden: usize,
    pub feature: usize,
    pub val_every: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutCfg {
    pub horizon: usize,
    pub starts: usize,
    pub noise: f64,
    /// Priority clip constant; None means use the world model's calibrated
    /// value (spelled `auto` in config files).
    pub clip: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyCfg {
    pub steps: usize,
    pub batch: usize,
    pub q_lr: f64,
    pub pi_lr: f64,
    pub hidden: usize,
    pub alpha: f64,
    pub lambda_bc: f64,
    pub tau: f64,
    pub refresh_every: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblateCfg {
    /// Train on real data only (the plain conservative backbone).
    pub disable_buffer: bool,
    /// Sample the synthetic half uniformly with penalized rewards instead
    /// of by confidence weight.
    pub reward_penalty: bool,
    pub lambda_pen: f64,
    /// Compare against the single-network state predictor.
    pub direct_state: bool,
    pub ensemble_k: usize,
    /// Time chained inference against an `ensemble_k`-member baseline and
    /// record wall-clock seconds in `timing.csv`.
    pub timing: bool,
    pub mpc: bool,
    pub mpc_k: usize,
    pub mpc_sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunCfg {
    pub experiment: String,
    pub seeds: Vec<u64>,
    pub out: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub env: EnvCfg,
    pub data: DataCfg,
    pub wm: WmCfg,
    pub rollout: RolloutCfg,
    pub policy: PolicyCfg,
    pub ablate: AblateCfg,
    pub run: RunCfg,
}

/// Every settable key, in emission order. The CLI registers one override
/// flag per entry.
pub const KEYS: &[&str] = &[
    "env.n_agents",
    "env.episode_cap",
    "env.gamma",
    "env.sensing_radius",
    "data.tier",
    "data.episodes",
    "data.val_fraction",
    "wm.steps",
    "wm.batch",
    "wm.lr",
    "wm.hidden",
    "wm.feature",
    "wm.val_every",
    "rollout.horizon",
    "rollout.starts",
    "rollout.noise",
    "rollout.clip",
    "policy.steps",
    "policy.batch",
    "policy.q_lr",
    "policy.pi_lr",
    "policy.hidden",
    "policy.alpha",
    "policy.lambda_bc",
    "policy.tau",
    "policy.refresh_every",
    "policy.eval_every",
    "policy.eval_episodes",
    "ablate.disable_buffer",
    "ablate.reward_penalty",
    "ablate.lambda_pen",
    "ablate.direct_state",
    "ablate.ensemble_k",
    "ablate.timing",
    "ablate.mpc",
    "ablate.mpc_k",
    "ablate.mpc_sigma",
    "run.experiment",
    "run.seeds",
    "run.out",
];

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: EnvCfg { n_agents: 2, episode_cap: 25, gamma: 0.99, sensing_radius: 1.0 },
            data: DataCfg { tier: Tier::Medium, episodes: 100, val_fraction: 0.2 },
            wm: WmCfg { steps: 2000, batch: 32, lr: 1e-3, hidden: 128, feature: 64, val_every: 100 },
            rollout: RolloutCfg { horizon: 15, starts: 100, noise: 0.1, clip: None },
            policy: PolicyCfg {
                steps: 2000,
                batch: 32,
                q_lr: 3e-4,
                pi_lr: 3e-4,
                hidden: 128,
                alpha: 1.0,
                lambda_bc: 2.5,
                tau: 0.005,
                refresh_every: 1000,
                eval_every: 500,
                eval_episodes: 5,
            },
            ablate: AblateCfg {
                disable_buffer: false,
                reward_penalty: false,
                lambda_pen: 1.0,
                direct_state: false,
                ensemble_k: 5,
                timing: false,
                mpc: false,
                mpc_k: 3,
                mpc_sigma: 0.1,
            },
            run: RunCfg { experiment: "default".into(), seeds: vec![0], out: "out".into() },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.trim().parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.trim().to_string(),
    })
}

fn parse_seeds(key: &str, value: &str) -> Result<Vec<u64>, ConfigError> {
    let seeds: Result<Vec<u64>, _> = value.split(',').map(|s| parse(key, s)).collect();
    let seeds = seeds?;
    if seeds.is_empty() {
        return Err(ConfigError::BadValue { key: key.into(), value: value.trim().into() });
    }
    Ok(seeds)
}

impl ExperimentConfig {
    /// Sets one dotted key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "env.n_agents" => self.env.n_agents = parse(key, value)?,
            "env.episode_cap" => self.env.episode_cap = parse(key, value)?,
            "env.gamma" => self.env.gamma = parse(key, value)?,
            "env.sensing_radius" => self.env.sensing_radius = parse(key, value)?,
            "data.tier" => {
                self.data.tier = Tier::parse(value.trim()).ok_or_else(|| {
                    ConfigError::BadValue { key: key.into(), value: value.trim().into() }
                })?
            }
            "data.episodes" => self.data.episodes = parse(key, value)?,
            "data.val_fraction" => self.data.val_fraction = parse(key, value)?,
            "wm.steps" => self.wm.steps = parse(key, value)?,
            "wm.batch" => self.wm.batch = parse(key, value)?,
            "wm.lr" => self.wm.lr = parse(key, value)?,
            "wm.hidden" => self.wm.hidden = parse(key, value)?,
            "wm.feature" => self.wm.feature = parse(key, value)?,
            "wm.val_every" => self.wm.val_every = parse(key, value)?,
            "rollout.horizon" => self.rollout.horizon = parse(key, value)?,
            "rollout.starts" => self.rollout.starts = parse(key, value)?,
            "rollout.noise" => self.rollout.noise = parse(key, value)?,
            "rollout.clip" => {
                self.rollout.clip = if value.trim() == "auto" {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            "policy.steps" => self.policy.steps = parse(key, value)?,
            "policy.batch" => self.policy.batch = parse(key, value)?,
            "policy.q_lr" => self.policy.q_lr = parse(key, value)?,
            "policy.pi_lr" => self.policy.pi_lr = parse(key, value)?,
            "policy.hidden" => self.policy.hidden = parse(key, value)?,
            "policy.alpha" => self.policy.alpha = parse(key, value)?,
            "policy.lambda_bc" => self.policy.lambda_bc = parse(key, value)?,
            "policy.tau" => self.policy.tau = parse(key, value)?,
            "policy.refresh_every" => self.policy.refresh_every = parse(key, value)?,
            "policy.eval_every" => self.policy.eval_every = parse(key, value)?,
            "policy.eval_episodes" => self.policy.eval_episodes = parse(key, value)?,
            "ablate.disable_buffer" => self.ablate.disable_buffer = parse(key, value)?,
            "ablate.reward_penalty" => self.ablate.reward_penalty = parse(key, value)?,
            "ablate.lambda_pen" => self.ablate.lambda_pen = parse(key, value)?,
            "ablate.direct_state" => self.ablate.direct_state = parse(key, value)?,
            "ablate.ensemble_k" => self.ablate.ensemble_k = parse(key, value)?,
            "ablate.timing" => self.ablate.timing = parse(key, value)?,
            "ablate.mpc" => self.ablate.mpc = parse(key, value)?,
            "ablate.mpc_k" => self.ablate.mpc_k = parse(key, value)?,
            "ablate.mpc_sigma" => self.ablate.mpc_sigma = parse(key, value)?,
            "run.experiment" => self.run.experiment = value.trim().to_string(),
            "run.seeds" => self.run.seeds = parse_seeds(key, value)?,
            "run.out" => self.run.out = value.trim().to_string(),
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for raw in text.lines() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| ConfigError::BadLine(line.to_string()))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, std::io::Error> {
        let text = std::fs::read_to_string(path)?;
        ExperimentConfig::parse_text(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))
    }

    /// Cross-field checks; errors name the offending key.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, why: &str| {
            Err(ConfigError::Invalid { key: key.into(), why: why.into() })
        };
        if self.env.n_agents == 0 {
            return bad("env.n_agents", "need at least one agent");
        }
        if self.env.episode_cap == 0 {
            return bad("env.episode_cap", "episodes must be able to end");
        }
        if !(0.0..1.0).contains(&self.env.gamma) {
            return bad("env.gamma", "discount must lie in [0, 1)");
        }
        if !(0.0 < self.data.val_fraction && self.data.val_fraction < 0.5) {
            return bad("data.val_fraction", "fraction must lie in (0, 0.5)");
        }
        if self.data.episodes == 0 {
            return bad("data.episodes", "need at least one episode");
        }
        if self.policy.batch < 2 || self.policy.batch % 2 != 0 {
            return bad("policy.batch", "batch must be even (half real, half synthetic)");
        }
        if self.policy.eval_episodes == 0 {
            return bad("policy.eval_episodes", "need at least one evaluation episode");
        }
        if self.policy.refresh_every == 0 {
            return bad("policy.refresh_every", "refresh cadence must be positive");
        }
        if self.rollout.horizon == 0 {
            return bad("rollout.horizon", "need at least one rollout step");
        }
        if self.rollout.starts == 0 {
            return bad("rollout.starts", "need at least one rollout start");
        }
        if let Some(c) = self.rollout.clip {
            if !(c > 0.0) {
                return bad("rollout.clip", "clip constant must be positive");
            }
        }
        if self.ablate.ensemble_k == 0 {
            return bad("ablate.ensemble_k", "need at least one member");
        }
        if self.ablate.mpc_k == 0 {
            return bad("ablate.mpc_k", "need at least one candidate");
        }
        if self.ablate.disable_buffer && self.ablate.reward_penalty {
            return bad("ablate.reward_penalty", "conflicts with ablate.disable_buffer");
        }
        Ok(())
    }

    /// Every key in a fixed order with current values; parsing the result
    /// reproduces this config exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: &dyn Display| {
            out.push_str(&format!("{k} = {v}\n"));
        };
        line("env.n_agents", &self.env.n_agents);
        line("env.episode_cap", &self.env.episode_cap);
        line("env.gamma", &self.env.gamma);
        line("env.sensing_radius", &self.env.sensing_radius);
        line("data.tier", &self.data.tier.name());
        line("data.episodes", &self.data.episodes);
        line("data.val_fraction", &self.data.val_fraction);
        line("wm.steps", &self.wm.steps);
        line("wm.batch", &self.wm.batch);
        line("wm.lr", &self.wm.lr);
        line("wm.hidden", &self.wm.hidden);
        line("wm.feature", &self.wm.feature);
        line("wm.val_every", &self.wm.val_every);
        line("rollout.horizon", &self.rollout.horizon);
        line("rollout.starts", &self.rollout.starts);
        line("rollout.noise", &self.rollout.noise);
        match self.rollout.clip {
            Some(c) => line("rollout.clip", &c),
            None => line("rollout.clip", &"auto"),
        }
        line("policy.steps", &self.policy.steps);
        line("policy.batch", &self.policy.batch);
        line("policy.q_lr", &self.policy.q_lr);
        line("policy.pi_lr", &self.policy.pi_lr);
        line("policy.hidden", &self.policy.hidden);
        line("policy.alpha", &self.policy.alpha);
        line("policy.lambda_bc", &self.policy.lambda_bc);
        line("policy.tau", &self.policy.tau);
        line("policy.refresh_every", &self.policy.refresh_every);
        line("policy.eval_every", &self.policy.eval_every);
        line("policy.eval_episodes", &self.policy.eval_episodes);
        line("ablate.disable_buffer", &self.ablate.disable_buffer);
        line("ablate.reward_penalty", &self.ablate.reward_penalty);
        line("ablate.lambda_pen", &self.ablate.lambda_pen);
        line("ablate.direct_state", &self.ablate.direct_state);
        line("ablate.ensemble_k", &self.ablate.ensemble_k);
        line("ablate.timing", &self.ablate.timing);
        line("ablate.mpc", &self.ablate.mpc);
        line("ablate.mpc_k", &self.ablate.mpc_k);
        line("ablate.mpc_sigma", &self.ablate.mpc_sigma);
        line("run.experiment", &self.run.experiment);
        let seeds: Vec<String> = self.run.seeds.iter().map(u64::to_string).collect();
        line("run.seeds", &seeds.join(","));
        line("run.out", &self.run.out);
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), std::io::Error> {
        std::fs::write(path, self.to_text())
    }

    pub fn spec(&self) -> EnvSpec {
        EnvSpec::particle(
            self.env.n_agents,
            self.env.episode_cap,
            self.env.gamma,
            self.env.sensing_radius,
        )
    }

    pub fn world_cfg(&self, seed: u64) -> WorldModelConfig {
        WorldModelConfig {
            steps: self.wm.steps,
            batch: self.wm.batch,
            lr: self.wm.lr,
            hidden: self.wm.hidden,
            feature: self.wm.feature,
            val_every: self.wm.val_every,
            seed,
        }
    }

    /// Rollout settings for buffer generation; `clip` must already be
    /// resolved (the caller substitutes the world model's calibrated value
    /// for `auto`).
    pub fn rollout_cfg(&self, clip: f64) -> RolloutConfig {
        RolloutConfig::new(self.rollout.horizon, self.rollout.starts, self.rollout.noise, clip)
    }

    /// Policy trainer settings with the ablation switches folded in.
    pub fn policy_cfg(&self, seed: u64) -> PolicyConfig {
        let synthetic = if self.ablate.disable_buffer {
            SyntheticMode::Off
        } else if self.ablate.reward_penalty {
            SyntheticMode::RewardPenalty { lambda_pen: self.ablate.lambda_pen }
        } else {
            SyntheticMode::Weighted
        };
        PolicyConfig {
            steps: self.policy.steps,
            batch: self.policy.batch,
            q_lr: self.policy.q_lr,
            pi_lr: self.policy.pi_lr,
            hidden: self.policy.hidden,
            alpha: self.policy.alpha,
            lambda_bc: self.policy.lambda_bc,
            tau: self.policy.tau,
            synthetic,
            rollout_horizon: self.rollout.horizon,
            rollout_starts: self.rollout.starts,
            rollout_noise: self.rollout.noise,
            clip_override: self.rollout.clip,
            refresh_every: self.policy.refresh_every,
            eval_every: self.policy.eval_every,
            eval_episodes: self.policy.eval_episodes,
            mpc: self.ablate.mpc,
            mpc_k: self.ablate.mpc_k,
            mpc_sigma: self.ablate.mpc_sigma,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_text();
        let back = ExperimentConfig::parse_text(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let mut cfg = ExperimentConfig::default();
        let err = cfg.set("policy.alhpa", "1.0").unwrap_err();
        assert_eq!(err, ConfigError::UnknownKey("policy.alhpa".into()));
    }

    #[test]
    fn bad_values_name_the_key_and_value() {
        let mut cfg = ExperimentConfig::default();
        let err = cfg.set("policy.alpha", "one").unwrap_err();
        assert_eq!(err, ConfigError::BadValue { key: "policy.alpha".into(), value: "one".into() });
    }

    #[test]
    fn lines_without_equals_are_rejected() {
        let err = ExperimentConfig::parse_text("policy.alpha 1.0").unwrap_err();
        assert_eq!(err, ConfigError::BadLine("policy.alpha 1.0".into()));
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let text = "# a comment\n\npolicy.alpha = 0.5\n";
        let cfg = ExperimentConfig::parse_text(text).unwrap();
        assert_eq!(cfg.policy.alpha, 0.5);
    }

    #[test]
    fn seeds_parse_as_a_comma_list() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("run.seeds", "3,1,4").unwrap();
        assert_eq!(cfg.run.seeds, vec![3, 1, 4]);
        assert!(cfg.to_text().contains("run.seeds = 3,1,4\n"));
        assert!(cfg.set("run.seeds", "").is_err());
    }

    #[test]
    fn clip_accepts_auto_and_numbers() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("rollout.clip", "0.25").unwrap();
        assert_eq!(cfg.rollout.clip, Some(0.25));
        cfg.set("rollout.clip", "auto").unwrap();
        assert_eq!(cfg.rollout.clip, None);
    }

    #[test]
    fn validation_names_the_offending_field() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("policy.batch", "7").unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { ref key, .. } if key == "policy.batch"));

        let mut cfg = ExperimentConfig::default();
        cfg.set("ablate.disable_buffer", "true").unwrap();
        cfg.set("ablate.reward_penalty", "true").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn ablation_switches_select_the_synthetic_mode() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(cfg.policy_cfg(0).synthetic, SyntheticMode::Weighted);
        cfg.set("ablate.reward_penalty", "true").unwrap();
        cfg.set("ablate.lambda_pen", "2.0").unwrap();
        assert_eq!(cfg.policy_cfg(0).synthetic, SyntheticMode::RewardPenalty { lambda_pen: 2.0 });
        cfg.set("ablate.reward_penalty", "false").unwrap();
        cfg.set("ablate.disable_buffer", "true").unwrap();
        assert_eq!(cfg.policy_cfg(0).synthetic, SyntheticMode::Off);
    }

    #[test]
    fn the_key_listing_matches_the_emission_order() {
        let text = ExperimentConfig::default().to_text();
        let emitted: Vec<&str> =
            text.lines().map(|l| l.split_once(" = ").unwrap().0).collect();
        assert_eq!(emitted, KEYS);
    }

    #[test]
    fn tier_values_are_validated() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("data.tier", "expert").unwrap();
        assert_eq!(cfg.data.tier, Tier::Expert);
        assert!(cfg.set("data.tier", "legendary").is_err());
    }
}
