//! Run configuration: a TOML file with an explicit schema version, unknown
//! keys rejected, every section optional and defaulting to desk scale.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::search::{OptimizerConfig, StagePlan, StageSpec};
use crate::supernet::NetworkConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanChoice {
    /// Depths 5/8/11, 12 epochs per stage.
    Desk,
    /// Depths 5/11/17, 25 epochs per stage, batch 96.
    Paper,
    /// The explicit `stages` list.
    Custom,
}

impl PlanChoice {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "desk" => Some(PlanChoice::Desk),
            "paper" => Some(PlanChoice::Paper),
            "custom" => Some(PlanChoice::Custom),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub init_channels: usize,
    pub n_intermediate: usize,
    pub stem_multiplier: usize,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            init_channels: 8,
            n_intermediate: 4,
            stem_multiplier: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    pub plan: PlanChoice,
    /// Initial skip dropout per stage for the named plans.
    pub skip_dropout: [f64; 3],
    /// Stage list, only with `plan = "custom"`.
    pub stages: Option<Vec<StageSpec>>,
    pub optimizer: OptimizerConfig,
}

impl Default for SearchSection {
    fn default() -> Self {
        SearchSection {
            plan: PlanChoice::Desk,
            skip_dropout: [0.0, 0.4, 0.7],
            stages: None,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl SearchSection {
    pub fn plan(&self) -> Result<StagePlan> {
        let plan = match (self.plan, &self.stages) {
            (PlanChoice::Desk, None) => StagePlan::desk(self.skip_dropout),
            (PlanChoice::Paper, None) => StagePlan::paper(self.skip_dropout),
            (PlanChoice::Custom, Some(stages)) => StagePlan { stages: stages.clone() },
            (PlanChoice::Custom, None) => return Err(Error::config("plan = \"custom\" needs a `stages` list")),
            (_, Some(_)) => {
                return Err(Error::config("`stages` is only allowed with plan = \"custom\""));
            }
        };
        plan.validate()?;
        Ok(plan)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineSection {
    /// Upper bound on skip connections in the normal cell.
    pub m_skip: usize,
}

impl Default for RefineSection {
    fn default() -> Self {
        RefineSection { m_skip: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub seeds: Vec<u64>,
    /// Skip caps of the skip-count sweep.
    pub m_values: Vec<usize>,
    /// Random candidate sets tried per seed; the best one is reported.
    pub random_repeats: usize,
    /// Dataset generator of the dropout ablation.
    pub ablation_dataset: String,
    pub ablation_dropout: [f64; 3],
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            seeds: (0..5).collect(),
            m_values: (0..5).collect(),
            random_repeats: 3,
            ablation_dataset: "shortcut".into(),
            ablation_dropout: [0.0, 0.3, 0.6],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dataset")]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub search: SearchSection,
    #[serde(default)]
    pub refine: RefineSection,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub experiment: ExperimentSection,
}

fn default_dataset() -> DatasetSpec {
    DatasetSpec::desk("shapes")
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            dataset: default_dataset(),
            network: NetworkSection::default(),
            search: SearchSection::default(),
            refine: RefineSection::default(),
            eval: EvalConfig::default(),
            experiment: ExperimentSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Parse {
            path: origin.to_string(),
            field: String::new(),
            message: e.to_string(),
        })?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
            path: origin.to_string(),
            field: e.path().to_string(),
            message: e.inner().message().to_string(),
        })?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Parse {
                path: origin.to_string(),
                field: "schema_version".into(),
                message: format!(
                    "unsupported schema version {}, expected {CONFIG_SCHEMA_VERSION}",
                    cfg.schema_version
                ),
            });
        }
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes to TOML")
    }

    /// Geometry of the search network for this configuration's dataset.
    pub fn network(&self, channels: usize, classes: usize, image_size: usize) -> NetworkConfig {
        NetworkConfig {
            in_channels: channels,
            num_classes: classes,
            image_size,
            init_channels: self.network.init_channels,
            n_intermediate: self.network.n_intermediate,
            stem_multiplier: self.network.stem_multiplier,
        }
    }
}
