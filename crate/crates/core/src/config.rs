//! The experiment configuration: one versioned JSON document.
//!
//! Every section fills missing keys from its defaults and rejects unknown
//! keys. Per-module configs are derived from it with the run seed injected,
//! so the seed lives in exactly one place.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacker::AttackConfig;
use crate::datagen::{AuxMode, ConditionId, MixtureSpec};
use crate::epsnet::{Arch, SamplerConfig};
use crate::evaluator::OracleConfig;
use crate::numerics::OptimConfig;
use crate::schedule::ScheduleConfig;
use crate::trainer::TrainConfig;
use crate::unlearner::{Method, UnlearnConfig};
use crate::Error;

pub const CONFIG_VERSION: u32 = 1;

/// Environment variable that replaces `seed` when set.
pub const SEED_ENV: &str = "UF_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub version: u32,
    pub seed: u64,
    pub data: DataConfig,
    pub arch: Arch,
    pub schedule: ScheduleConfig,
    pub pretrain: TrainConfig,
    pub unlearn: UnlearnSection,
    pub attack: AttackSection,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            data: DataConfig::default(),
            arch: Arch::default(),
            schedule: ScheduleConfig::default(),
            pretrain: TrainConfig::default(),
            unlearn: UnlearnSection::default(),
            attack: AttackSection::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub mixture: MixtureSpec,
    /// Fresh points per class for the oracle's test set and the heldout auxiliary set.
    pub heldout_per_class: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            mixture: MixtureSpec::default(),
            heldout_per_class: 1000,
        }
    }
}

/// Per-method settings that replace the section-wide value when present.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodOverride {
    pub lr: Option<f64>,
    pub balance_coef: Option<f64>,
    pub abort_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnlearnSection {
    pub unlearn_class: ConditionId,
    pub methods: Vec<Method>,
    pub balance_coef: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub alternative_class: Option<ConditionId>,
    pub snapshot_every: usize,
    pub abort_threshold: f64,
    pub replacement_size: Option<usize>,
    pub overrides: BTreeMap<Method, MethodOverride>,
}

impl Default for UnlearnSection {
    fn default() -> Self {
        let base = UnlearnConfig::default();
        Self {
            unlearn_class: ConditionId(0),
            methods: Method::ALL.to_vec(),
            balance_coef: base.balance_coef,
            steps: 2000,
            batch_size: base.batch_size,
            optim: OptimConfig {
                lr: 1e-3,
                ..OptimConfig::default()
            },
            alternative_class: None,
            snapshot_every: 500,
            abort_threshold: base.abort_threshold,
            replacement_size: None,
            // Ascent diverges. A small step and an early stop keep it in the
            // regime where the class is gone but the model is still a model.
            overrides: BTreeMap::from([(
                Method::GaRetain,
                MethodOverride {
                    lr: Some(5e-6),
                    balance_coef: Some(0.3),
                    abort_threshold: Some(20.0),
                },
            )]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub snapshot_every: usize,
    pub aux_per_class: usize,
    /// Auxiliary sets the pipeline attacks with.
    pub aux_modes: Vec<AuxMode>,
    /// Unlearning snapshots (by step) the pipeline attacks.
    pub from_unlearn_steps: Vec<usize>,
}

impl Default for AttackSection {
    fn default() -> Self {
        let base = AttackConfig::default();
        Self {
            steps: base.steps,
            batch_size: base.batch_size,
            optim: OptimConfig {
                lr: 1e-3,
                ..OptimConfig::default()
            },
            snapshot_every: base.snapshot_every,
            aux_per_class: base.aux_per_class,
            aux_modes: vec![AuxMode::Retain, AuxMode::Heldout],
            from_unlearn_steps: vec![500, 2000],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub sampler: SamplerConfig,
    pub samples_per_eval: usize,
    /// Also compute the Fréchet distance on attack snapshots.
    pub attack_frechet: bool,
    pub oracle: OracleConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::default(),
            samples_per_eval: 500,
            attack_frechet: false,
            oracle: OracleConfig::default(),
        }
    }
}

impl Config {
    /// Parses and validates a document; the seed override is not applied here.
    pub fn from_json(text: &str) -> Result<Self, Error> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Reads a config file and applies `UF_SEED`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, Error> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
        Ok(cfg)
    }

    /// `Some(text)` replaces the seed; the text must be a `u64`.
    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<(), Error> {
        if let Some(v) = value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        let m = &self.data.mixture;
        m.validate()?;
        self.arch.validate()?;
        if m.dim != self.arch.dim || m.class_count != self.arch.class_count {
            return Err(Error::Config(format!(
                "mixture is {}-d with {} classes, arch is {}-d with {}",
                m.dim, m.class_count, self.arch.dim, self.arch.class_count
            )));
        }
        if self.data.heldout_per_class == 0 {
            return Err(Error::Config("heldout_per_class must be >= 1".into()));
        }
        self.schedule.build()?;
        self.pretrain_config().validate()?;
        let u = &self.unlearn;
        if u.unlearn_class.index() >= m.class_count {
            return Err(Error::Config(format!("unlearn_class {} is not a class", u.unlearn_class.0)));
        }
        if u.methods.is_empty() {
            return Err(Error::Config("unlearn.methods is empty".into()));
        }
        for method in &u.methods {
            let c = self.unlearn_config(*method);
            c.validate()?;
            c.alternative_for(u.unlearn_class, m.class_count)?;
        }
        let a = &self.attack;
        self.attack_config(AuxMode::Retain).validate()?;
        if let Some(s) = a.from_unlearn_steps.iter().find(|s| **s > u.steps || **s % u.snapshot_every != 0 && **s != u.steps) {
            return Err(Error::Config(format!("attack.from_unlearn_steps entry {s} is not an unlearning snapshot")));
        }
        self.eval.sampler.validate()?;
        if self.eval.samples_per_eval == 0 {
            return Err(Error::Config("samples_per_eval must be >= 1".into()));
        }
        self.eval.oracle.optim.validate()?;
        Ok(())
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.pretrain
        }
    }

    pub fn unlearn_config(&self, method: Method) -> UnlearnConfig {
        let u = &self.unlearn;
        let o = u.overrides.get(&method).copied().unwrap_or_default();
        UnlearnConfig {
            method,
            balance_coef: o.balance_coef.unwrap_or(u.balance_coef),
            steps: u.steps,
            batch_size: u.batch_size,
            optim: OptimConfig {
                lr: o.lr.unwrap_or(u.optim.lr),
                ..u.optim
            },
            alternative_class: u.alternative_class,
            seed: self.seed,
            snapshot_every: u.snapshot_every,
            abort_threshold: o.abort_threshold.unwrap_or(u.abort_threshold),
            replacement_size: u.replacement_size,
        }
    }

    pub fn attack_config(&self, aux_mode: AuxMode) -> AttackConfig {
        let a = &self.attack;
        AttackConfig {
            steps: a.steps,
            batch_size: a.batch_size,
            optim: a.optim,
            aux_mode,
            seed: self.seed,
            snapshot_every: a.snapshot_every,
            aux_per_class: a.aux_per_class,
        }
    }

    pub fn oracle_config(&self) -> OracleConfig {
        OracleConfig {
            seed: self.seed,
            ..self.eval.oracle
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            seed: self.seed,
            ..self.eval.sampler
        }
    }

    pub fn alternative_class(&self) -> Result<ConditionId, Error> {
        UnlearnConfig {
            alternative_class: self.unlearn.alternative_class,
            ..UnlearnConfig::default()
        }
        .alternative_for(self.unlearn.unlearn_class, self.arch.class_count)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        assert_eq!(Config::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(Config::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for doc in [
            r#"{"sede": 3}"#,
            r#"{"pretrain": {"step": 10}}"#,
            r#"{"unlearn": {"optim": {"learning_rate": 0.1}}}"#,
            r#"{"unlearn": {"overrides": {"dimum": {"lr": 1e-3, "momentum": 0.9}}}}"#,
            r#"{"eval": {"sampler": {"seed": 4}}}"#,
        ] {
            assert!(matches!(Config::from_json(doc), Err(Error::Config(_))), "{doc}");
        }
    }

    #[test]
    fn version_and_consistency_checks() {
        assert!(Config::from_json(r#"{"version": 2}"#).is_err());
        assert!(Config::from_json(r#"{"arch": {"dim": 3}}"#).is_err());
        assert!(Config::from_json(r#"{"unlearn": {"unlearn_class": 3}}"#).is_err());
        assert!(Config::from_json(r#"{"unlearn": {"methods": []}}"#).is_err());
        assert!(Config::from_json(r#"{"attack": {"from_unlearn_steps": [700]}}"#).is_err());
        assert!(Config::from_json(r#"{"pretrain": {"p_uncond": 1.0}}"#).is_err());
    }

    #[test]
    fn seed_flows_into_every_section() {
        let mut cfg = Config::from_json(r#"{"seed": 11}"#).unwrap();
        assert_eq!(cfg.pretrain_config().seed, 11);
        cfg.apply_seed_override(Some("42")).unwrap();
        assert_eq!(cfg.pretrain_config().seed, 42);
        assert_eq!(cfg.unlearn_config(Method::Dimum).seed, 42);
        assert_eq!(cfg.attack_config(AuxMode::Heldout).seed, 42);
        assert_eq!(cfg.oracle_config().seed, 42);
        assert_eq!(cfg.sampler_config().seed, 42);
        assert!(cfg.apply_seed_override(Some("-1")).is_err());
        cfg.apply_seed_override(None).unwrap();
        assert_eq!(cfg.seed, 42);
    }

    #[test]
    fn overrides_replace_only_their_fields() {
        let cfg = Config::from_json(
            r#"{"unlearn": {"optim": {"lr": 0.01}, "overrides": {"replace": {"balance_coef": 2.0}}}}"#,
        )
        .unwrap();
        let r = cfg.unlearn_config(Method::Replace);
        assert_eq!((r.optim.lr, r.balance_coef), (0.01, 2.0));
        let d = cfg.unlearn_config(Method::Dimum);
        assert_eq!((d.optim.lr, d.balance_coef), (0.01, 1.0));
        // a document that names `overrides` replaces the default map
        let g = cfg.unlearn_config(Method::GaRetain);
        assert_eq!((g.optim.lr, g.abort_threshold), (0.01, cfg.unlearn.abort_threshold));
        let g = Config::default().unlearn_config(Method::GaRetain);
        assert_eq!((g.optim.lr, g.balance_coef, g.abort_threshold), (5e-6, 0.3, 20.0));
    }
}
