//! Propagation of chaos: a run with `N2` particles on `N1` samples against a
//! large surrogate of the mean-field limit.
//!
//! The surrogate has `n_ref` particles trained on `n1_ref` samples. A studied
//! run uses the surrogate's first `N1` samples and first `N2` initial
//! particles, and particle `i` receives the same Brownian increments in both
//! runs, so the per-particle difference is driven only by the empirical
//! measures. The mean squared difference is averaged over repetitions.

use serde::{Deserialize, Serialize};

use super::{
    combine_hashes, derive_seed, linear_fit, mean_se, tags, Check, ModelSection, RunConfig, Series, StudyParams,
    StudyReport,
};
use crate::control::{paired_distance, InitLaw};
use crate::dataset::{DatasetKind, Target};
use crate::error::{Error, Result};
use crate::langevin::{train, TrainerConfig};
use crate::model::ModelKind;
use crate::ode::TimeGrid;
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChaosParams {
    pub n2_list: Vec<usize>,
    pub n1_list: Vec<usize>,
    pub n_ref: usize,
    pub n1_ref: usize,
    pub n_reps: usize,
}

impl Default for ChaosParams {
    fn default() -> Self {
        Self {
            n2_list: vec![16, 32, 64, 128],
            n1_list: vec![8, 32, 128],
            n_ref: 2048,
            n1_ref: 2048,
            n_reps: 100,
        }
    }
}

pub(super) fn default_config() -> RunConfig {
    let mut trainer = TrainerConfig::uniform(0.5, 1.0, 0.02, 50, 0);
    trainer.record_every = 50;
    trainer.record_entropy = false;
    RunConfig {
        model: ModelSection {
            kind: ModelKind::OneLayerResidual,
            dim_state: 1,
            hidden: 2,
            dataset: DatasetKind::Regression {
                target: Target::Affine {
                    scale: 2.0,
                    offset: 0.0,
                },
            },
            n_samples: 2048,
            data_seed: 0,
            n_particles: 2048,
            init: InitLaw::Gaussian { mean: 0.0, std: 1.0 },
        },
        grid: TimeGrid::new(1.0, 4).unwrap(),
        trainer,
        study: Some(StudyParams::Chaos(ChaosParams::default())),
    }
}

fn check_params(p: &ChaosParams) -> Result<()> {
    let increasing = |v: &[usize]| !v.is_empty() && v[0] > 0 && v.windows(2).all(|w| w[0] < w[1]);
    if !increasing(&p.n2_list) || !increasing(&p.n1_list) {
        return Err(Error::Config(
            "n2_list and n1_list must be nonempty, positive and increasing".into(),
        ));
    }
    if *p.n2_list.last().unwrap() > p.n_ref || *p.n1_list.last().unwrap() > p.n1_ref {
        return Err(Error::Config(
            "studied sizes must not exceed the reference sizes".into(),
        ));
    }
    if p.n_reps == 0 {
        return Err(Error::Config("n_reps must be positive".into()));
    }
    Ok(())
}

struct RepOutcome {
    /// Indexed like `n1_list x n2_list`, then the `n1_ref` row.
    mse: Vec<f64>,
    self_mse: Option<f64>,
    hash: String,
}

pub fn run_chaos_study(cfg: &RunConfig, params: &ChaosParams) -> Result<StudyReport> {
    check_params(params)?;
    let model = cfg.model.build()?;
    let grid = cfg.grid;
    let base = cfg.trainer.seed;
    let mut n1_rows = params.n1_list.clone();
    let sweep_n2_at_ref = *n1_rows.last().unwrap() != params.n1_ref;
    if sweep_n2_at_ref {
        n1_rows.push(params.n1_ref);
    }

    let outcomes: Vec<Result<RepOutcome>> = par::map_indexed(params.n_reps, |r| {
        let r = r as u64;
        let data = cfg
            .model
            .dataset(&grid, params.n1_ref, derive_seed(base, tags::DATA, r))?;
        let init = cfg
            .model
            .cloud(model.as_ref(), &grid, params.n_ref, derive_seed(base, tags::INIT, r))?;
        let mut tc = cfg.trainer.clone();
        tc.seed = derive_seed(base, tags::NOISE, r);
        let (reference, _) = train(model.as_ref(), &data, &grid, &tc, &init)?;
        let mut mse = Vec::new();
        for &n1 in &n1_rows {
            let sub = data.prefix(n1)?;
            for &n2 in &params.n2_list {
                let (out, _) = train(model.as_ref(), &sub, &grid, &tc, &init.truncated(n2)?)?;
                mse.push(paired_distance(&out, &reference.truncated(n2)?)?.powi(2));
            }
        }
        // N2 = n_ref on all n1_ref samples is the surrogate itself
        let self_mse = if r == 0 {
            let (again, _) = train(model.as_ref(), &data, &grid, &tc, &init)?;
            Some(paired_distance(&again, &reference)?.powi(2))
        } else {
            None
        };
        Ok(RepOutcome {
            mse,
            self_mse,
            hash: data.content_hash(),
        })
    });
    let outcomes: Vec<RepOutcome> = outcomes.into_iter().collect::<Result<_>>()?;

    let mut report = StudyReport::new("chaos", serde_json::to_value(cfg)?);
    let mut series = Series::new("mse", &["inv_n1_plus_inv_n2", "mse", "mse_se", "n1", "n2"]);
    let (mut lx, mut ly) = (Vec::new(), Vec::new());
    let mut at_ref = Vec::new();
    let n2s = params.n2_list.len();
    for (a, &n1) in n1_rows.iter().enumerate() {
        for (b, &n2) in params.n2_list.iter().enumerate() {
            let vals: Vec<f64> = outcomes.iter().map(|o| o.mse[a * n2s + b]).collect();
            let (m, se) = mean_se(&vals);
            let x = 1.0 / n1 as f64 + 1.0 / n2 as f64;
            if a < params.n1_list.len() {
                series.push(vec![x, m, se, n1 as f64, n2 as f64]);
                lx.push(x.ln());
                ly.push(m.ln());
            }
            if n1 == params.n1_ref {
                at_ref.push((n2, m));
            }
        }
    }
    report.series.push(series);
    let fit = linear_fit("log_mse_vs_log_inv_n", "ln(1/N1 + 1/N2)", "ln MSE", &lx, &ly)?;
    report.checks.push(Check::within("chaos_slope", fit.slope, 0.7, 1.3));
    report.fits.push(fit);

    if at_ref.len() >= 2 {
        let mut s = Series::new("mse_at_n1_ref", &["n2", "mse"]);
        for &(n2, m) in &at_ref {
            s.push(vec![n2 as f64, m]);
        }
        report.series.push(s);
        let x: Vec<f64> = at_ref.iter().map(|(n2, _)| (*n2 as f64).ln()).collect();
        let y: Vec<f64> = at_ref.iter().map(|(_, m)| m.ln()).collect();
        let fit = linear_fit("log_mse_vs_log_n2_at_n1_ref", "ln N2", "ln MSE", &x, &y)?;
        // mean MSE ratio per doubling of N2
        report
            .checks
            .push(Check::within("mse_ratio_per_doubling", 2f64.powf(fit.slope), 0.35, 0.7));
        report.fits.push(fit);
    }
    if let Some(m) = outcomes[0].self_mse {
        report.checks.push(Check::at_most("self_comparison_mse", m, 1e-24));
    }
    report.notes.push(format!(
        "surrogate of the mean-field limit: {} particles on {} samples; studied runs share its first particles, samples and Brownian increments",
        params.n_ref, params.n1_ref
    ));
    report.dataset_hash = combine_hashes(outcomes.iter().map(|o| o.hash.as_str()));
    Ok(report)
}
