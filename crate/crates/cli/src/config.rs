//! Run configuration: one TOML file with a section per pipeline stage.
//!
//! Every field has a desk-scale default, unknown keys are rejected, and the
//! run seed is copied into every stage so a single `seed` (or `--seed`)
//! controls the whole run.

use std::path::{Path, PathBuf};

use nearbypatch::augment::{AugmentPolicy, EvalTransform};
use nearbypatch::corpus::CorpusConfig;
use nearbypatch::lineval::EvalConfig;
use nearbypatch::losses::LossVariant;
use nearbypatch::model::ModelConfig;
use nearbypatch::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Ablation cells: every `(nearby, variant)` pair, each evaluated at every
/// label fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    pub nearby: Vec<usize>,
    pub variants: Vec<LossVariant>,
    pub fractions: Vec<f64>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self {
            nearby: vec![0, 1, 2, 4, 8],
            variants: vec![LossVariant::Dcl, LossVariant::Naive],
            fractions: vec![0.01, 0.1, 0.2, 1.0],
        }
    }
}

impl AblationGrid {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.nearby.is_empty() || self.variants.is_empty() || self.fractions.is_empty() {
            return Err(CliError::Config("ablation lists must be non-empty".into()));
        }
        if let Some(n) = self.nearby.iter().find(|&&n| n > 8) {
            return Err(CliError::Config(format!("ablation N={n} exceeds the 8-neighborhood")));
        }
        if self.fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return Err(CliError::Config("ablation fractions must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub augment: AugmentPolicy,
    /// Evaluation transform; its mean/std also normalize pretraining views.
    pub eval: EvalTransform,
    pub model: ModelConfig,
    pub trainer: TrainConfig,
    pub lineval: EvalConfig,
    pub ablation: AblationGrid,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "desk".into(),
            out_dir: PathBuf::from("runs/desk"),
            seed: 0,
            corpus: CorpusConfig {
                slide_size: 2048,
                patch_size: 64,
                region_scale: 6.0,
                stain_shift: 0.15,
                unlabeled_budget: 600,
                ..CorpusConfig::default()
            },
            augment: AugmentPolicy { target_size: 32, ..AugmentPolicy::default() },
            eval: EvalTransform { resize_size: 64, crop_size: 56, ..EvalTransform::default() },
            model: ModelConfig::default(),
            trainer: TrainConfig { base_lr: 0.1, ..TrainConfig::default() },
            lineval: EvalConfig::desk(),
            ablation: AblationGrid::default(),
        }
    }
}

impl RunConfig {
    /// Parses `text` as overrides on top of the desk defaults. Sections are
    /// merged key by key, so a partial `[corpus]` keeps the desk values for
    /// the keys it omits.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let err = |e: &dyn std::fmt::Display| CliError::Config(e.to_string());
        let user: toml::Table = toml::from_str(text).map_err(|e| err(&e))?;
        let mut base = toml::Table::try_from(Self::default()).map_err(|e| err(&e))?;
        merge(&mut base, user);
        base.try_into().map_err(|e| err(&e))
    }

    /// Reads `path`, or returns the defaults when no path is given. The raw
    /// text is returned alongside for echoing.
    pub fn load(path: Option<&Path>) -> Result<(Self, String), CliError> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                Ok((Self::from_toml(&text)?, text))
            }
            None => {
                let cfg = Self::default();
                let text = toml::to_string(&cfg).map_err(|e| CliError::Config(e.to_string()))?;
                Ok((cfg, text))
            }
        }
    }

    /// Copies the run seed into every stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.corpus.seed = seed;
        self.trainer.seed = seed;
        self.lineval.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: &dyn std::fmt::Display| CliError::Config(e.to_string());
        self.corpus.validate().map_err(|e| cfg(&e))?;
        self.augment.validate().map_err(|e| cfg(&e))?;
        self.eval.validate().map_err(|e| cfg(&e))?;
        self.model.validate().map_err(|e| cfg(&e))?;
        self.trainer.validate().map_err(|e| cfg(&e))?;
        self.lineval.validate().map_err(|e| cfg(&e))?;
        self.ablation.validate()
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_files_fill_in_defaults() {
        let cfg = RunConfig::from_toml("seed = 3\n[trainer]\nepochs = 2\nwarmup_epochs = 1\n").unwrap();
        assert_eq!(cfg.trainer.epochs, 2);
        assert_eq!(cfg.corpus, RunConfig::default().corpus);
    }

    #[test]
    fn partial_sections_keep_desk_values() {
        let cfg = RunConfig::from_toml("[corpus]\nregion_scale = 3.0\n").unwrap();
        let desk = RunConfig::default().corpus;
        assert_eq!(cfg.corpus.region_scale, 3.0);
        assert_eq!((cfg.corpus.slide_size, cfg.corpus.patch_size), (desk.slide_size, desk.patch_size));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("colour = 1\n").is_err());
        assert!(RunConfig::from_toml("[trainer]\nepoch = 2\n").is_err());
    }

    #[test]
    fn seed_reaches_every_stage() {
        let cfg = RunConfig::default().with_seed(9);
        assert_eq!((cfg.corpus.seed, cfg.trainer.seed, cfg.lineval.seed), (9, 9, 9));
    }

    #[test]
    fn empty_ablation_lists_are_rejected() {
        let grid = AblationGrid { variants: vec![], ..AblationGrid::default() };
        assert!(grid.validate().is_err());
    }
}
