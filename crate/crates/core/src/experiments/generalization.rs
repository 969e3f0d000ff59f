//! Generalisation gap in the number of training samples.
//!
//! The population objective is approximated by a large holdout set. The
//! unobservable optimum is replaced by a proxy: a run trained on the holdout
//! itself with the same initial cloud and Brownian increments as the run
//! under study. Both are scored on the holdout, so the squared gap isolates
//! the statistical error of training on `N1` samples; optimisation,
//! particle and step-size errors are common to both runs.

use serde::{Deserialize, Serialize};

use super::{
    combine_hashes, derive_seed, linear_fit, mean_se, tags, Check, ModelSection, RunConfig, Series, StudyParams,
    StudyReport,
};
use crate::control::InitLaw;
use crate::dataset::{DatasetKind, Target};
use crate::error::{Error, Result};
use crate::langevin::{train, TrainerConfig};
use crate::model::ModelKind;
use crate::objective::objective_j;
use crate::ode::TimeGrid;
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneralizationParams {
    pub n1_list: Vec<usize>,
    pub holdout_n: usize,
    pub n_reps: usize,
}

impl Default for GeneralizationParams {
    fn default() -> Self {
        Self {
            n1_list: vec![8, 16, 32, 64],
            holdout_n: 4096,
            n_reps: 200,
        }
    }
}

/// Per replicate: squared gap per `N1`, the holdout-trained gap, data hash.
type RepOutcome = (Vec<f64>, Option<f64>, String);

pub(super) fn default_config() -> RunConfig {
    let mut trainer = TrainerConfig::uniform(0.5, 1.0, 0.02, 150, 0);
    trainer.record_every = 150;
    trainer.record_entropy = false;
    RunConfig {
        model: ModelSection {
            kind: ModelKind::OneLayerResidual,
            dim_state: 1,
            hidden: 2,
            dataset: DatasetKind::Regression {
                target: Target::Affine {
                    scale: 0.5,
                    offset: 1.0,
                },
            },
            n_samples: 64,
            data_seed: 0,
            n_particles: 32,
            init: InitLaw::Gaussian { mean: 0.0, std: 1.0 },
        },
        grid: TimeGrid::new(1.0, 4).unwrap(),
        trainer,
        study: Some(StudyParams::Generalization(GeneralizationParams::default())),
    }
}

pub fn run_generalization_study(cfg: &RunConfig, params: &GeneralizationParams) -> Result<StudyReport> {
    let n1 = &params.n1_list;
    if n1.is_empty() || n1[0] == 0 || n1.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(
            "n1_list must be nonempty, positive and increasing".into(),
        ));
    }
    if params.holdout_n < 4 * n1.last().unwrap() || params.n_reps == 0 {
        return Err(Error::Config(
            "holdout_n must be well above max(n1_list) and n_reps positive".into(),
        ));
    }
    let model = cfg.model.build()?;
    let grid = cfg.grid;
    let base = cfg.trainer.seed;
    let holdout = cfg
        .model
        .dataset(&grid, params.holdout_n, derive_seed(base, tags::HOLDOUT, 0))?;
    let n_max = *n1.last().unwrap();

    let reps: Vec<Result<RepOutcome>> = par::map_indexed(params.n_reps, |r| {
        let r = r as u64;
        let train_data = cfg.model.dataset(&grid, n_max, derive_seed(base, tags::DATA, r))?;
        let init = cfg.model.cloud(
            model.as_ref(),
            &grid,
            cfg.model.n_particles,
            derive_seed(base, tags::INIT, r),
        )?;
        let mut tc = cfg.trainer.clone();
        tc.seed = derive_seed(base, tags::NOISE, r);
        let (proxy, _) = train(model.as_ref(), &holdout, &grid, &tc, &init)?;
        let j_proxy = objective_j(model.as_ref(), &proxy, &holdout, &grid)?;
        let mut gaps = Vec::with_capacity(n1.len());
        for &n in n1 {
            let (out, _) = train(model.as_ref(), &train_data.prefix(n)?, &grid, &tc, &init)?;
            gaps.push((objective_j(model.as_ref(), &out, &holdout, &grid)? - j_proxy).powi(2));
        }
        // training on the holdout itself leaves no statistical error
        let degenerate = if r == 0 {
            let (again, _) = train(model.as_ref(), &holdout, &grid, &tc, &init)?;
            Some((objective_j(model.as_ref(), &again, &holdout, &grid)? - j_proxy).powi(2))
        } else {
            None
        };
        Ok((gaps, degenerate, train_data.content_hash()))
    });
    let reps: Vec<(Vec<f64>, Option<f64>, String)> = reps.into_iter().collect::<Result<_>>()?;

    let mut report = StudyReport::new("generalization", serde_json::to_value(cfg)?);
    let mut series = Series::new("gap_sq", &["n1", "gap_sq", "gap_sq_se"]);
    let (mut lx, mut ly) = (Vec::new(), Vec::new());
    for (k, &n) in n1.iter().enumerate() {
        let vals: Vec<f64> = reps.iter().map(|(g, _, _)| g[k]).collect();
        let (m, se) = mean_se(&vals);
        series.push(vec![n as f64, m, se]);
        lx.push((1.0 / n as f64).ln());
        ly.push(m.ln());
    }
    report.series.push(series);
    let fit = linear_fit("log_gap_sq_vs_log_inv_n1", "ln(1/N1)", "ln E[gap^2]", &lx, &ly)?;
    report
        .checks
        .push(Check::within("generalization_slope", fit.slope, 0.6, 1.4));
    report.fits.push(fit);
    if let Some(d) = reps[0].1 {
        report.checks.push(Check::at_most("holdout_trained_gap_sq", d, 1e-24));
    }
    report.notes.push(format!(
        "population objective approximated on {} holdout samples; reference optimum replaced by a run trained on the holdout with the same initial cloud and noise",
        params.holdout_n
    ));
    let mut hashes = vec![holdout.content_hash()];
    hashes.extend(reps.iter().map(|(_, _, h)| h.clone()));
    report.dataset_hash = combine_hashes(hashes.iter().map(String::as_str));
    Ok(report)
}
