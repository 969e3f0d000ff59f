//! Strict JSON run configuration: `model`, `grid`, `trainer` and an optional
//! `study` section. Unknown keys anywhere are rejected.

use serde::{Deserialize, Serialize};

use crate::control::{cloud_init, InitLaw, ParticleCloud};
use crate::dataset::{generate_dataset, Dataset, DatasetKind};
use crate::error::{Error, Result};
use crate::langevin::TrainerConfig;
use crate::model::{make_builtin_model, Model, ModelKind};
use crate::ode::TimeGrid;

use super::{ChaosParams, ContractionParams, EulerParams, GeneralizationParams, GibbsParams, GradCheckParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub dim_state: usize,
    /// Hidden width of the tanh families; parameter dimension for `drift_free`.
    #[serde(default)]
    pub hidden: usize,
    pub dataset: DatasetKind,
    pub n_samples: usize,
    #[serde(default)]
    pub data_seed: u64,
    pub n_particles: usize,
    pub init: InitLaw,
}

impl ModelSection {
    pub fn build(&self) -> Result<Box<dyn Model>> {
        let data = match (&self.kind, &self.dataset) {
            (ModelKind::TimeseriesInterp, DatasetKind::Timeseries { channels, .. }) => *channels,
            (ModelKind::DriftFree, DatasetKind::Timeseries { channels, .. }) => 2 * channels,
            _ => self.dim_state,
        };
        make_builtin_model(self.kind, self.dim_state, self.hidden, data)
    }

    pub fn dataset(&self, grid: &TimeGrid, n_samples: usize, seed: u64) -> Result<Dataset> {
        generate_dataset(&self.dataset, n_samples, self.dim_state, seed, grid)
    }

    pub fn cloud(&self, model: &dyn Model, grid: &TimeGrid, n_particles: usize, seed: u64) -> Result<ParticleCloud> {
        cloud_init(n_particles, *grid, model.dim_param(), self.init, seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StudyParams {
    GradCheck(GradCheckParams),
    Chaos(ChaosParams),
    Euler(EulerParams),
    Contraction(ContractionParams),
    Gibbs(GibbsParams),
    Generalization(GeneralizationParams),
}

impl StudyParams {
    pub fn name(&self) -> &'static str {
        match self {
            StudyParams::GradCheck(_) => "grad_check",
            StudyParams::Chaos(_) => "chaos",
            StudyParams::Euler(_) => "euler",
            StudyParams::Contraction(_) => "contraction",
            StudyParams::Gibbs(_) => "gibbs",
            StudyParams::Generalization(_) => "generalization",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub grid: TimeGrid,
    pub trainer: TrainerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub study: Option<StudyParams>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        TimeGrid::new(self.grid.horizon(), self.grid.n_steps()).map_err(|e| Error::Config(e.to_string()))?;
        self.trainer.validate()?;
        if self.model.n_samples == 0 || self.model.n_particles == 0 {
            return Err(Error::Config("n_samples and n_particles must be positive".into()));
        }
        self.model.build().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Model, dataset and initial cloud as described by the `model` section.
    pub fn setup(&self) -> Result<(Box<dyn Model>, Dataset, ParticleCloud)> {
        let model = self.model.build()?;
        let data = self
            .model
            .dataset(&self.grid, self.model.n_samples, self.model.data_seed)?;
        let cloud = self
            .model
            .cloud(model.as_ref(), &self.grid, self.model.n_particles, self.trainer.seed)?;
        Ok((model, data, cloud))
    }
}
