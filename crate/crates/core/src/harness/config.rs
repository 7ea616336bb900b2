use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::env::TaskParams;
use crate::executor::{Capabilities, ExecutorConfig};
use crate::learn::{AdvantageConfig, AdvantageSource, IlConfig, OptimizeConfig, PpoConfig};

/// Capabilities removed for an ablation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub no_memory: bool,
    pub no_reflection: bool,
    pub no_advice: bool,
    pub no_tool: bool,
}

impl AblationFlags {
    pub fn capabilities(&self) -> Capabilities {
        Capabilities {
            memory: !self.no_memory,
            reflection: !self.no_reflection,
            advice: !self.no_advice,
            tool: !self.no_tool,
        }
    }

    pub fn label(&self) -> String {
        let names: Vec<&str> = [
            (self.no_memory, "no_memory"),
            (self.no_reflection, "no_reflection"),
            (self.no_advice, "no_advice"),
            (self.no_tool, "no_tool"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
        if names.is_empty() {
            "full".into()
        } else {
            names.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub task: TaskParams,
    pub advice_cost: f64,
    pub ablation: AblationFlags,
    pub il: IlConfig,
    pub advantage: AdvantageConfig,
    pub advantage_source: AdvantageSource,
    pub ppo: PpoConfig,
    /// Outer iterations K of session-level optimization.
    pub outer_iters: usize,
    pub rollouts_per_iter: usize,
    /// Questions in the held-out evaluation task.
    pub eval_sessions: usize,
    pub decision_budget: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let opt = OptimizeConfig::default();
        Self {
            seed: 0,
            task: TaskParams::default(),
            advice_cost: 0.3,
            ablation: AblationFlags::default(),
            il: IlConfig::default(),
            advantage: opt.advantage,
            advantage_source: opt.advantage_source,
            ppo: opt.ppo,
            outer_iters: opt.outer_iters,
            rollouts_per_iter: opt.rollouts_per_iter,
            eval_sessions: 1000,
            decision_budget: ExecutorConfig::default().decision_budget,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidConfig(m));
        self.task.validate()?;
        let c = self.advice_cost;
        if !(c.is_finite() && c < 1.0) || (c <= 0.0 && !self.ablation.no_advice) {
            return bad(format!("advice cost {c} must be in (0, 1)"));
        }
        if self.eval_sessions == 0 {
            return bad("eval_sessions must be positive".into());
        }
        if self.rollouts_per_iter == 0 {
            return bad("rollouts_per_iter must be positive".into());
        }
        self.advantage.validate()?;
        self.ppo.validate()?;
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// sha256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn executor_config(&self) -> ExecutorConfig {
        ExecutorConfig {
            decision_budget: self.decision_budget,
            capabilities: self.ablation.capabilities(),
            ..ExecutorConfig::default()
        }
    }

    pub fn optimize_config(&self) -> OptimizeConfig {
        OptimizeConfig {
            outer_iters: self.outer_iters,
            rollouts_per_iter: self.rollouts_per_iter,
            advantage: self.advantage,
            advantage_source: self.advantage_source,
            ppo: self.ppo,
            seed: self.seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig {
            seed: 7,
            advice_cost: 0.4,
            ablation: AblationFlags { no_tool: true, ..AblationFlags::default() },
            ..ExperimentConfig::default()
        };
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = ExperimentConfig::from_toml_str("seed = 3\n[ablation]\nno_memory = true\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert!(cfg.ablation.no_memory && !cfg.ablation.no_tool);
        assert_eq!(cfg.advice_cost, 0.3);
        assert_eq!(cfg.ablation.label(), "no_memory");
    }

    #[test]
    fn cost_must_be_positive_unless_advice_is_off() {
        assert!(ExperimentConfig::from_toml_str("advice_cost = 0.0").is_err());
        assert!(ExperimentConfig::from_toml_str("advice_cost = 0.0\n[ablation]\nno_advice = true").is_ok());
        assert!(ExperimentConfig::from_toml_str("advice_cost = 1.5").is_err());
    }

    #[test]
    fn flags_map_to_capabilities() {
        let f = AblationFlags { no_memory: true, no_reflection: false, no_advice: true, no_tool: false };
        let c = f.capabilities();
        assert!(!c.memory && c.reflection && !c.advice && c.tool);
    }
}
