//! The run configuration: one TOML file per run, unknown keys rejected.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{AttributeColumn, AttributeRule, RuleShape};
use crate::error::{Error, Result};
use crate::manipulation::{ManipLossConfig, ManipModelConfig};
use crate::nn::OptimConfig;
use crate::synthesis::{SynthLossConfig, SynthModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Manipulation,
    Synthesis,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Manipulation => "manipulation",
            Stage::Synthesis => "synthesis",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Toy,
}

/// Procedural toy data. Resolution and class count come from the model
/// block. Test samples follow the training samples in index order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyDataConfig {
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
    pub min_pixels: usize,
    pub rules: Vec<AttributeRule>,
}

/// On-disk data as read by [`crate::data::load_directory`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectoryDataConfig {
    pub root: PathBuf,
    #[serde(default)]
    pub test_root: Option<PathBuf>,
    /// One column per attribute domain, in domain order.
    #[serde(default)]
    pub columns: Vec<AttributeColumn>,
}

/// Exactly one of `toy` and `directory`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toy: Option<ToyDataConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub directory: Option<DirectoryDataConfig>,
    /// Random horizontal flips of training samples.
    #[serde(default)]
    pub flip: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub checkpoint_every: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManipulationConfig {
    pub stage: Stage,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ManipModelConfig,
    pub loss: ManipLossConfig,
    pub optim: OptimConfig,
    pub run: RunConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisConfig {
    pub stage: Stage,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: SynthModelConfig,
    pub loss: SynthLossConfig,
    pub optim: OptimConfig,
    pub run: RunConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Config {
    Manipulation(ManipulationConfig),
    Synthesis(SynthesisConfig),
}

fn toy_rules(domains: &[String]) -> Vec<AttributeRule> {
    let shapes = [RuleShape::Bar, RuleShape::Hat, RuleShape::Fringe, RuleShape::Earrings];
    domains
        .iter()
        .enumerate()
        .map(|(i, name)| AttributeRule {
            name: name.clone(),
            region: 3 + i,
            shape: shapes[i % shapes.len()],
            presence: 0.5,
        })
        .collect()
}

fn toy_dataset(rules: Vec<AttributeRule>, seed: u64) -> DatasetConfig {
    DatasetConfig {
        toy: Some(ToyDataConfig {
            train_size: 512,
            test_size: 64,
            seed,
            min_pixels: 4,
            rules,
        }),
        directory: None,
        flip: false,
    }
}

fn celeba_dataset() -> DatasetConfig {
    let col = |c: &str, invert: bool| AttributeColumn {
        column: c.into(),
        invert,
    };
    DatasetConfig {
        toy: None,
        directory: Some(DirectoryDataConfig {
            root: PathBuf::from("data/celebamask-hq/train"),
            test_root: Some(PathBuf::from("data/celebamask-hq/test")),
            columns: vec![
                col("Male", false),
                col("Eyeglasses", false),
                col("Wearing_Hat", false),
                col("Bald", true),
                col("Bangs", false),
                col("Wearing_Earrings", false),
            ],
        }),
        flip: true,
    }
}

impl Config {
    pub fn preset(stage: Stage, preset: Preset) -> Config {
        match (stage, preset) {
            (Stage::Manipulation, Preset::Paper) => Config::Manipulation(ManipulationConfig {
                stage,
                seed: 0,
                dataset: celeba_dataset(),
                model: ManipModelConfig::paper(),
                loss: ManipLossConfig::paper(),
                optim: OptimConfig {
                    lr: 1e-4,
                    beta1: 0.0,
                    beta2: 0.99,
                    eps: 1e-8,
                    batch_size: 6,
                    steps: 200_000,
                    accumulate: 1,
                },
                run: RunConfig { checkpoint_every: 5000 },
            }),
            (Stage::Manipulation, Preset::Toy) => {
                let model = ManipModelConfig::toy();
                let steps = 2000;
                Config::Manipulation(ManipulationConfig {
                    stage,
                    seed: 1,
                    dataset: toy_dataset(toy_rules(&model.domains), 1),
                    model,
                    loss: ManipLossConfig {
                        sd_decay_steps: steps,
                        ..ManipLossConfig::paper()
                    },
                    optim: OptimConfig {
                        lr: TOY_MANIP_LR,
                        beta1: 0.0,
                        beta2: 0.99,
                        eps: 1e-8,
                        batch_size: 6,
                        steps,
                        accumulate: 1,
                    },
                    run: RunConfig { checkpoint_every: 500 },
                })
            }
            (Stage::Synthesis, Preset::Paper) => {
                let mut dataset = celeba_dataset();
                if let Some(d) = dataset.directory.as_mut() {
                    d.columns.clear();
                }
                Config::Synthesis(SynthesisConfig {
                    stage,
                    seed: 0,
                    dataset,
                    model: SynthModelConfig::paper(),
                    loss: SynthLossConfig::paper(),
                    optim: OptimConfig {
                        lr: 2e-3,
                        beta1: 0.0,
                        beta2: 0.99,
                        eps: 1e-8,
                        batch_size: 4,
                        steps: 300_000,
                        accumulate: 1,
                    },
                    run: RunConfig { checkpoint_every: 5000 },
                })
            }
            (Stage::Synthesis, Preset::Toy) => Config::Synthesis(SynthesisConfig {
                stage,
                seed: 1,
                dataset: toy_dataset(toy_rules(&["eyeglasses".to_string()]), 1),
                model: SynthModelConfig::toy(),
                loss: SynthLossConfig::toy(),
                optim: OptimConfig {
                    lr: TOY_SYNTH_LR,
                    beta1: 0.0,
                    beta2: 0.99,
                    eps: 1e-8,
                    batch_size: 4,
                    steps: 1000,
                    accumulate: 1,
                },
                run: RunConfig { checkpoint_every: 250 },
            }),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Config> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config {
            path: String::new(),
            message: e.message().to_string(),
        })?;
        let stage = match table.get("stage") {
            Some(toml::Value::String(s)) if s == "manipulation" => Stage::Manipulation,
            Some(toml::Value::String(s)) if s == "synthesis" => Stage::Synthesis,
            Some(v) => {
                return Err(Error::Config {
                    path: "stage".into(),
                    message: format!("expected `manipulation` or `synthesis`, got {v}"),
                })
            }
            None => {
                return Err(Error::Config {
                    path: "stage".into(),
                    message: "missing field".into(),
                })
            }
        };
        let cfg = match stage {
            Stage::Manipulation => Config::Manipulation(parse_typed(text)?),
            Stage::Synthesis => Config::Synthesis(parse_typed(text)?),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        let out = match self {
            Config::Manipulation(c) => toml::to_string_pretty(c),
            Config::Synthesis(c) => toml::to_string_pretty(c),
        };
        out.expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml_string().as_bytes()))
    }

    pub fn stage(&self) -> Stage {
        match self {
            Config::Manipulation(_) => Stage::Manipulation,
            Config::Synthesis(_) => Stage::Synthesis,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Config::Manipulation(c) => c.seed,
            Config::Synthesis(c) => c.seed,
        }
    }

    pub fn dataset(&self) -> &DatasetConfig {
        match self {
            Config::Manipulation(c) => &c.dataset,
            Config::Synthesis(c) => &c.dataset,
        }
    }

    pub fn optim(&self) -> &OptimConfig {
        match self {
            Config::Manipulation(c) => &c.optim,
            Config::Synthesis(c) => &c.optim,
        }
    }

    pub fn optim_mut(&mut self) -> &mut OptimConfig {
        match self {
            Config::Manipulation(c) => &mut c.optim,
            Config::Synthesis(c) => &mut c.optim,
        }
    }

    pub fn run(&self) -> &RunConfig {
        match self {
            Config::Manipulation(c) => &c.run,
            Config::Synthesis(c) => &c.run,
        }
    }

    pub fn resolution(&self) -> usize {
        match self {
            Config::Manipulation(c) => c.model.resolution,
            Config::Synthesis(c) => c.model.resolution,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Config::Manipulation(c) => c.model.num_classes,
            Config::Synthesis(c) => c.model.num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let at = |path: &str, e: Error| Error::Config {
            path: path.into(),
            message: e.to_string(),
        };
        let stage_field = match self {
            Config::Manipulation(c) => c.stage,
            Config::Synthesis(c) => c.stage,
        };
        if stage_field != self.stage() {
            return Err(Error::Config {
                path: "stage".into(),
                message: "stage does not match the config layout".into(),
            });
        }
        match self {
            Config::Manipulation(c) => {
                c.model.validate().map_err(|e| at("model", e))?;
                c.loss.validate().map_err(|e| at("loss", e))?;
            }
            Config::Synthesis(c) => {
                c.model.validate().map_err(|e| at("model", e))?;
                c.loss.validate().map_err(|e| at("loss", e))?;
            }
        }
        let o = self.optim();
        if o.batch_size < 2 {
            return Err(Error::Config {
                path: "optim.batch_size".into(),
                message: "batch size must be at least 2".into(),
            });
        }
        o.validate().map_err(|e| at("optim", e))?;
        if o.accumulate == 0 {
            return Err(Error::Config {
                path: "optim.accumulate".into(),
                message: "must be at least 1".into(),
            });
        }
        if self.run().checkpoint_every == 0 {
            return Err(Error::Config {
                path: "run.checkpoint_every".into(),
                message: "must be at least 1".into(),
            });
        }
        self.validate_dataset()
    }

    fn validate_dataset(&self) -> Result<()> {
        let d = self.dataset();
        let err = |path: &str, message: String| Error::Config {
            path: path.into(),
            message,
        };
        let domains = match self {
            Config::Manipulation(c) => Some(c.model.num_domains()),
            Config::Synthesis(_) => None,
        };
        match (&d.toy, &d.directory) {
            (Some(_), Some(_)) | (None, None) => Err(err(
                "dataset",
                "exactly one of `dataset.toy` and `dataset.directory` is required".into(),
            )),
            (Some(t), None) => {
                if t.train_size < self.optim().batch_size {
                    return Err(err("dataset.toy.train_size", "smaller than one batch".into()));
                }
                if let Some(n) = domains {
                    if t.rules.len() != n {
                        return Err(err(
                            "dataset.toy.rules",
                            format!("{} rules for {n} model domains", t.rules.len()),
                        ));
                    }
                }
                self.toy_spec(t).validate().map_err(|e| err("dataset.toy", e.to_string()))
            }
            (None, Some(dir)) => match domains {
                Some(n) if dir.columns.len() != n => Err(err(
                    "dataset.directory.columns",
                    format!("{} columns for {n} model domains", dir.columns.len()),
                )),
                _ => Ok(()),
            },
        }
    }

    /// Toy generator spec for this run.
    pub fn toy_spec(&self, toy: &ToyDataConfig) -> crate::data::ToySpec {
        crate::data::ToySpec {
            resolution: self.resolution(),
            num_classes: self.num_classes(),
            rules: toy.rules.clone(),
            seed: toy.seed,
            min_pixels: toy.min_pixels,
            rgb: self.stage() == Stage::Synthesis,
        }
    }
}

/// Learning rates of the toy presets.
pub const TOY_MANIP_LR: f64 = 3e-4;
pub const TOY_SYNTH_LR: f64 = 2e-3;

fn parse_typed<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let de = toml::Deserializer::parse(text).map_err(|e| Error::Config {
        path: String::new(),
        message: e.message().to_string(),
    })?;
    serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
        path: e.path().to_string(),
        message: e.inner().message().to_string(),
    })
}
