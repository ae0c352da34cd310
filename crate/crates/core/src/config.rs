//! TOML run and experiment configuration. Every field has a default; unknown keys are rejected.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::{AuditSetup, NamedConfig};
use crate::attack::AttackSpec;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::synthdata::SyntheticConfig;
use crate::trainer::{Method, ModelConfig, Regularizer, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditConfig {
    pub n_shadows: usize,
    pub n_targets: usize,
    pub frac: f64,
    pub stratified: bool,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            n_shadows: 16,
            n_targets: 8,
            frac: 0.5,
            stratified: true,
        }
    }
}

impl AuditConfig {
    pub fn setup(&self, seed: u64) -> AuditSetup {
        AuditSetup {
            n_shadows: self.n_shadows,
            n_targets: self.n_targets,
            frac: self.frac,
            stratified: self.stratified,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_shadows < 2 {
            return Err(Error::Config("audit.n_shadows must be >= 2".into()));
        }
        if !(self.frac > 0.0 && self.frac < 1.0) {
            return Err(Error::Config("audit.frac must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

pub fn default_model() -> ModelConfig {
    ModelConfig::mlp(&[32])
}

pub fn default_erm() -> TrainConfig {
    TrainConfig::erm(0.1, 1e-2, 60, 32)
}

pub fn default_dro() -> TrainConfig {
    default_erm().with_dro(1.0, 1.0)
}

pub fn default_dfr() -> TrainConfig {
    default_erm().with_dfr(Regularizer::L1, 1e-3, 10)
}

pub fn default_fprs() -> Vec<f64> {
    vec![0.001, 0.01, 0.1]
}

fn check_fprs(fprs: &[f64]) -> Result<()> {
    if fprs.is_empty() || fprs.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
        return Err(Error::Config(
            "fprs must be a nonempty list in (0, 1]".into(),
        ));
    }
    Ok(())
}

fn config_err(e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::Config(m),
        other => other,
    }
}

/// Parameters shared by the single-step CLI commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: SyntheticConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub audit: AuditConfig,
    pub attack: AttackSpec,
    pub fprs: Vec<f64>,
    pub tau: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: SyntheticConfig::default(),
            model: default_model(),
            train: default_erm(),
            audit: AuditConfig::default(),
            attack: AttackSpec::ONLINE,
            fprs: default_fprs(),
            tau: 0.95,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fsutil::read_to_string(path)?).map_err(|e| with_path(e, path))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate().map_err(config_err)?;
        self.model.validate().map_err(config_err)?;
        self.train.validate().map_err(config_err)?;
        self.audit.validate()?;
        check_fprs(&self.fprs)?;
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config("tau must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentName {
    Disparity,
    Complexity,
    Robust,
    Memorization,
    CkaProfile,
    Matrix,
}

impl ExperimentName {
    pub const ALL: [ExperimentName; 6] = [
        ExperimentName::Disparity,
        ExperimentName::Complexity,
        ExperimentName::Robust,
        ExperimentName::Memorization,
        ExperimentName::CkaProfile,
        ExperimentName::Matrix,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentName::Disparity => "disparity",
            ExperimentName::Complexity => "complexity",
            ExperimentName::Robust => "robust",
            ExperimentName::Memorization => "memorization",
            ExperimentName::CkaProfile => "cka_profile",
            ExperimentName::Matrix => "matrix",
        }
    }
}

impl fmt::Display for ExperimentName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ExperimentName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown experiment {s:?}")))
    }
}

/// Settings of the class-merging study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComplexityConfig {
    pub n_classes: usize,
    pub n_attributes: usize,
    pub d_core: usize,
    pub d_spur: usize,
    /// Class counts to audit, each obtained by merging the `n_classes` dataset.
    pub merge_to: Vec<usize>,
    pub tau: f64,
}

impl Default for ComplexityConfig {
    fn default() -> Self {
        ComplexityConfig {
            n_classes: 8,
            n_attributes: 8,
            d_core: 10,
            d_spur: 8,
            merge_to: vec![8, 4, 2],
            tau: 0.95,
        }
    }
}

fn default_matrix() -> Vec<NamedConfig> {
    [
        ("linear", ModelConfig::linear()),
        ("mlp-16", ModelConfig::mlp(&[16])),
        ("mlp-64", ModelConfig::mlp(&[64])),
    ]
    .into_iter()
    .map(|(label, model)| NamedConfig {
        label: label.to_string(),
        model,
        train: default_erm(),
    })
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSpec {
    pub seed: u64,
    pub data: SyntheticConfig,
    pub model: ModelConfig,
    pub erm: TrainConfig,
    pub dro: TrainConfig,
    pub dfr: TrainConfig,
    pub audit: AuditConfig,
    pub attack: AttackSpec,
    pub fprs: Vec<f64>,
    /// FPR at which disparity ratios and headline TPRs are taken.
    pub headline_fpr: f64,
    /// `spur_strength` of the no-correlation control run.
    pub control_spur_strength: f64,
    pub complexity: ComplexityConfig,
    pub matrix: Vec<NamedConfig>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            seed: 0,
            data: SyntheticConfig::default(),
            model: default_model(),
            erm: default_erm(),
            dro: default_dro(),
            dfr: default_dfr(),
            audit: AuditConfig::default(),
            attack: AttackSpec::ONLINE,
            fprs: default_fprs(),
            headline_fpr: 0.01,
            control_spur_strength: 0.5,
            complexity: ComplexityConfig::default(),
            matrix: default_matrix(),
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fsutil::read_to_string(path)?).map_err(|e| with_path(e, path))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment spec serializes")
    }

    pub fn validate(&self, name: ExperimentName) -> Result<()> {
        self.data.validate().map_err(config_err)?;
        self.model.validate().map_err(config_err)?;
        for (label, cfg, method) in [
            ("erm", &self.erm, Method::Erm),
            ("dro", &self.dro, Method::Dro),
            ("dfr", &self.dfr, Method::Dfr),
        ] {
            cfg.validate()
                .map_err(|e| Error::Config(format!("{label}: {e}")))?;
            // The robust study may swap any method for ERM as a control.
            if cfg.method != method && cfg.method != Method::Erm {
                return Err(Error::Config(format!(
                    "{label} block has method {}",
                    cfg.method.as_str()
                )));
            }
        }
        self.audit.validate()?;
        if matches!(name, ExperimentName::Disparity | ExperimentName::Robust)
            && self.audit.n_shadows < 8
        {
            return Err(Error::Config(format!(
                "{name} needs at least 8 shadow models"
            )));
        }
        if self.audit.n_targets < 1 {
            return Err(Error::Config("audit.n_targets must be >= 1".into()));
        }
        check_fprs(&self.fprs)?;
        if !self.fprs.contains(&self.headline_fpr) {
            return Err(Error::Config("headline_fpr must be one of fprs".into()));
        }
        if !(0.0..=1.0).contains(&self.control_spur_strength) {
            return Err(Error::Config(
                "control_spur_strength must lie in [0, 1]".into(),
            ));
        }
        let c = &self.complexity;
        if c.merge_to.is_empty() || c.merge_to.iter().any(|&k| k < 2 || k > c.n_classes) {
            return Err(Error::Config(
                "complexity.merge_to entries must lie in [2, n_classes]".into(),
            ));
        }
        if name == ExperimentName::Matrix {
            if self.matrix.is_empty() {
                return Err(Error::Config("matrix needs at least one config".into()));
            }
            for m in &self.matrix {
                m.model.validate().map_err(config_err)?;
                m.train.validate().map_err(config_err)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
        assert_eq!(
            ExperimentSpec::from_toml("").unwrap(),
            ExperimentSpec::default()
        );
        for name in ExperimentName::ALL {
            ExperimentSpec::default().validate(name).unwrap();
        }
    }

    #[test]
    fn partial_sections_override_fields() {
        let cfg = RunConfig::from_toml(
            "seed = 7\nattack = \"lira_offline_fixed\"\n[data]\nspur_strength = 0.5\n[audit]\nn_shadows = 4\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.data.spur_strength, 0.5);
        assert_eq!(cfg.data.d_core, 10);
        assert_eq!(cfg.audit.n_shadows, 4);
        assert_eq!(cfg.attack.to_string(), "lira_offline_fixed");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            RunConfig::from_toml("sed = 1\n"),
            Err(Error::Config(_))
        ));
        assert!(RunConfig::from_toml("[data]\ncore_spe = 1.0\n").is_err());
        assert!(ExperimentSpec::from_toml("[audit]\nshadows = 3\n").is_err());
        assert!(RunConfig::from_toml("attack = \"nonsense\"\n").is_err());
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let spec = ExperimentSpec::default();
        assert_eq!(ExperimentSpec::from_toml(&spec.to_toml()).unwrap(), spec);
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut spec = ExperimentSpec::default();
        spec.audit.n_shadows = 4;
        assert!(spec.validate(ExperimentName::Robust).is_err());
        assert!(spec.validate(ExperimentName::Memorization).is_ok());
        let mut spec = ExperimentSpec::default();
        spec.headline_fpr = 0.05;
        assert!(spec.validate(ExperimentName::Disparity).is_err());
        let mut spec = ExperimentSpec::default();
        spec.dro = default_dfr();
        assert!(spec.validate(ExperimentName::Robust).is_err());
        spec.dro = default_erm();
        assert!(spec.validate(ExperimentName::Robust).is_ok());
        assert!(RunConfig::from_toml("tau = 0.0\n").is_err());
    }
}
