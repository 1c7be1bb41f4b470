//! Experiment configuration: a TOML document validated up front (unknown
//! keys rejected), with one global seed fanned out to per-stage child seeds
//! so stages can be rerun independently yet reproducibly.

use crate::encoder::{EncoderArch, TrainConfig};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::ndpp::NdppConfig;
use crate::odpp::OdppConfig;
use crate::rng::SeededRng;
use crate::synth::SynthConfig;
use std::path::{Path, PathBuf};

/// Network shape of one model, joined with the data input dimension to form
/// an [`EncoderArch`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    #[serde(default = "default_true")]
    pub cosine_logits: bool,
    #[serde(default = "default_tau_cls")]
    pub tau_cls: f64,
}

fn default_true() -> bool {
    true
}

fn default_tau_cls() -> f64 {
    0.07
}

impl ModelSection {
    pub fn arch(&self, input_dim: usize) -> EncoderArch {
        EncoderArch {
            input_dim,
            hidden: self.hidden.clone(),
            embed_dim: self.embed_dim,
            cosine_logits: self.cosine_logits,
            tau_cls: self.tau_cls,
        }
    }
}

/// Method selection plus the configs of every method family (so one file can
/// drive all ablations).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodSection {
    /// baseline | ndpp | ndpp-old | odpp | odpp-old
    pub kind: String,
    pub loss: LossConfig,
    pub ndpp: NdppConfig,
    pub odpp: OdppConfig,
}

impl Default for MethodSection {
    fn default() -> Self {
        MethodSection {
            kind: "baseline".into(),
            loss: LossConfig::default(),
            ndpp: NdppConfig::default(),
            odpp: OdppConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Dump a 2-D PCA projection of new-model gallery embeddings and
    /// prototypes next to the report.
    pub pca_dump: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { pca_dump: true }
    }
}

/// Full experiment description.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: SynthConfig,
    pub old_model: ModelSection,
    pub new_model: ModelSection,
    pub old_train: TrainConfig,
    pub new_train: TrainConfig,
    #[serde(default)]
    pub method: MethodSection,
    #[serde(default)]
    pub eval: EvalSection,
}

impl ExperimentConfig {
    /// Parse and validate a TOML document.
    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.resolve_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(&path).map_err(|e| {
            Error::config(format!(
                "cannot read config {}: {e}",
                path.as_ref().display()
            ))
        })?;
        ExperimentConfig::from_toml(&text)
    }

    /// Fan the global seed out to the per-stage seeds.
    fn resolve_seeds(&mut self) {
        let root = SeededRng::new(self.seed);
        self.data.seed = root.child("gen-data").seed();
        self.old_train.seed = root.child("train-old").seed();
        self.new_train.seed = root.child("train-new").seed();
    }

    /// Seed for sequential chain step `i` (step 0 is the independent model).
    pub fn sequential_seed(&self, step: usize) -> u64 {
        SeededRng::new(self.seed)
            .child(&format!("train-seq-{step}"))
            .seed()
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        for (name, t) in [("old_train", &self.old_train), ("new_train", &self.new_train)] {
            if t.batch_size == 0 {
                return Err(Error::config(format!("{name}.batch_size must be positive")));
            }
            if !(0.0..1.0).contains(&t.momentum) {
                return Err(Error::config(format!("{name}.momentum must be in [0, 1)")));
            }
        }
        for (name, m) in [("old_model", &self.old_model), ("new_model", &self.new_model)] {
            if m.embed_dim == 0 {
                return Err(Error::config(format!("{name}.embed_dim must be positive")));
            }
            if m.hidden.len() > 2 {
                return Err(Error::config(format!(
                    "{name}.hidden supports at most two hidden layers"
                )));
            }
            if m.tau_cls <= 0.0 {
                return Err(Error::config(format!("{name}.tau_cls must be positive")));
            }
        }
        if self.old_model.embed_dim != self.new_model.embed_dim {
            return Err(Error::config(
                "old_model.embed_dim and new_model.embed_dim must match",
            ));
        }
        if self.method.loss.tau <= 0.0 {
            return Err(Error::config("method.loss.tau must be positive"));
        }
        if self.method.loss.lambda < 0.0 {
            return Err(Error::config("method.loss.lambda must be non-negative"));
        }
        if self.method.ndpp.k == 0 || self.method.ndpp.k >= self.data.class_count {
            return Err(Error::config(format!(
                "method.ndpp.k must be in [1, {})",
                self.data.class_count
            )));
        }
        match self.method.kind.as_str() {
            "baseline" | "ndpp" | "ndpp-old" | "odpp" | "odpp-old" => {}
            other => return Err(Error::config(format!("unknown method.kind '{other}'"))),
        }
        Ok(())
    }

    /// The desk-scale default experiment, serialized as a commented template
    /// by the CLI's `init-config`.
    pub fn desk_default() -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            seed: 17,
            output_dir: PathBuf::from("runs/default"),
            data: SynthConfig::default(),
            old_model: ModelSection {
                hidden: vec![48],
                embed_dim: 32,
                cosine_logits: true,
                tau_cls: 0.07,
            },
            new_model: ModelSection {
                hidden: vec![96],
                embed_dim: 32,
                cosine_logits: true,
                tau_cls: 0.07,
            },
            old_train: TrainConfig::default(),
            new_train: TrainConfig::default(),
            method: MethodSection {
                kind: "ndpp".into(),
                loss: LossConfig::default(),
                ndpp: NdppConfig {
                    k: 10,
                    ..NdppConfig::default()
                },
                odpp: OdppConfig::default(),
            },
            eval: EvalSection::default(),
        };
        cfg.resolve_seeds();
        cfg
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
