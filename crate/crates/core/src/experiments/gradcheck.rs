//! Exact discrete gradient against central finite differences on many
//! small random instances, plus the analytic-derivative self-check of the
//! model.

use serde::{Deserialize, Serialize};

use super::{combine_hashes, derive_seed, tags, Check, ModelSection, RunConfig, Series, StudyParams, StudyReport};
use crate::control::InitLaw;
use crate::dataset::{DatasetKind, Target};
use crate::error::Result;
use crate::langevin::TrainerConfig;
use crate::model::{model_grad_selfcheck, ModelKind, SELFCHECK_TOLERANCE};
use crate::objective::{discrete_gradient, finite_diff_gradient, max_relative_deviation};
use crate::ode::TimeGrid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckParams {
    pub n_instances: usize,
    pub fd_step: f64,
    pub tolerance: f64,
    pub selfcheck_probes: usize,
}

impl Default for GradCheckParams {
    fn default() -> Self {
        Self {
            n_instances: 20,
            fd_step: 1e-5,
            tolerance: 1e-6,
            selfcheck_probes: 100,
        }
    }
}

pub(super) fn default_config() -> RunConfig {
    RunConfig {
        model: ModelSection {
            kind: ModelKind::NeuralOdeTanh,
            dim_state: 2,
            hidden: 1,
            dataset: DatasetKind::Regression { target: Target::Sine },
            n_samples: 2,
            data_seed: 0,
            n_particles: 3,
            init: InitLaw::Gaussian { mean: 0.0, std: 1.0 },
        },
        grid: TimeGrid::new(1.0, 4).unwrap(),
        trainer: TrainerConfig::uniform(0.0, 1.0, 0.01, 0, 0),
        study: Some(StudyParams::GradCheck(GradCheckParams::default())),
    }
}

pub fn run_grad_check(cfg: &RunConfig, params: &GradCheckParams) -> Result<StudyReport> {
    let model = cfg.model.build()?;
    let mut report = StudyReport::new("grad_check", serde_json::to_value(cfg)?);
    let mut series = Series::new("deviation", &["instance", "max_rel_dev", "max_abs_grad"]);
    let mut hashes = Vec::new();
    let mut worst: f64 = 0.0;
    for r in 0..params.n_instances as u64 {
        let data = cfg.model.dataset(
            &cfg.grid,
            cfg.model.n_samples,
            derive_seed(cfg.trainer.seed, tags::DATA, r),
        )?;
        let cloud = cfg.model.cloud(
            model.as_ref(),
            &cfg.grid,
            cfg.model.n_particles,
            derive_seed(cfg.trainer.seed, tags::INIT, r),
        )?;
        let exact = discrete_gradient(model.as_ref(), &cloud, &data, &cfg.grid)?;
        let fd = finite_diff_gradient(model.as_ref(), &cloud, &data, &cfg.grid, params.fd_step)?;
        let dev = max_relative_deviation(&exact, &fd);
        worst = worst.max(dev);
        series.push(vec![r as f64, dev, exact.max_abs()]);
        hashes.push(data.content_hash());
    }
    report.series.push(series);
    report
        .checks
        .push(Check::at_most("max_relative_deviation", worst, params.tolerance));
    if params.selfcheck_probes > 0 {
        let sc = model_grad_selfcheck(model.as_ref(), params.selfcheck_probes, cfg.trainer.seed)?;
        report.checks.push(Check::at_most(
            "model_derivative_selfcheck",
            sc.max_error(),
            SELFCHECK_TOLERANCE,
        ));
    }
    report.dataset_hash = combine_hashes(hashes.iter().map(String::as_str));
    Ok(report)
}
