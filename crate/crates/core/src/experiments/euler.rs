//! Strong error of the Euler–Maruyama scheme in the training time `s`.
//!
//! Every run, whatever its step size, uses increments of one Brownian path
//! sampled at the reference step `gamma_ref = min(gammas) / ref_factor`, so
//! the error against the reference run is a pathwise error.

use serde::{Deserialize, Serialize};

use super::{
    combine_hashes, derive_seed, linear_fit, mean_se, tags, Check, ModelSection, RunConfig, Series, StudyParams,
    StudyReport,
};
use crate::control::{paired_distance, InitLaw, ParticleCloud};
use crate::dataset::{Dataset, DatasetKind, Target};
use crate::error::{Error, Result};
use crate::langevin::{train_with, BridgedNoise, StepSchedule, TrainerConfig};
use crate::model::{Model, ModelKind};
use crate::ode::TimeGrid;
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EulerParams {
    /// Decreasing step sizes.
    pub gammas: Vec<f64>,
    pub ref_factor: usize,
    /// Common final training time, a whole multiple of every step size.
    pub final_s: f64,
    pub n_reps: usize,
    /// Also run without noise, where halving the step should divide the error by four.
    pub deterministic_probe: bool,
}

impl Default for EulerParams {
    fn default() -> Self {
        Self {
            gammas: vec![4e-3, 2e-3, 1e-3, 5e-4],
            ref_factor: 8,
            final_s: 0.2,
            n_reps: 20,
            deterministic_probe: true,
        }
    }
}

pub(super) fn default_config() -> RunConfig {
    let mut trainer = TrainerConfig::uniform(0.5, 1.0, 1e-3, 0, 0);
    trainer.record_every = 1_000_000;
    trainer.record_entropy = false;
    RunConfig {
        model: ModelSection {
            kind: ModelKind::NeuralOdeTanh,
            dim_state: 1,
            hidden: 2,
            dataset: DatasetKind::Regression { target: Target::Sine },
            n_samples: 8,
            data_seed: 0,
            n_particles: 16,
            init: InitLaw::Gaussian { mean: 0.0, std: 1.0 },
        },
        grid: TimeGrid::new(1.0, 4).unwrap(),
        trainer,
        study: Some(StudyParams::Euler(EulerParams::default())),
    }
}

fn iterations(final_s: f64, gamma: f64) -> Result<usize> {
    let k = final_s / gamma;
    let r = k.round();
    if r < 1.0 || (k - r).abs() > 1e-9 * k {
        return Err(Error::Config(format!(
            "final_s = {final_s} is not a whole multiple of gamma = {gamma}"
        )));
    }
    Ok(r as usize)
}

#[allow(clippy::too_many_arguments)]
fn run_to(
    model: &dyn Model,
    data: &Dataset,
    grid: &TimeGrid,
    base: &TrainerConfig,
    init: &ParticleCloud,
    noise: &BridgedNoise,
    gamma: f64,
    final_s: f64,
) -> Result<ParticleCloud> {
    let mut tc = base.clone();
    tc.schedule = StepSchedule::Uniform { gamma };
    tc.n_iters = iterations(final_s, gamma)?;
    tc.record_every = tc.n_iters.max(1);
    Ok(train_with(model, data, grid, &tc, init, noise, &mut |_, _| {})?.0)
}

pub fn run_euler_study(cfg: &RunConfig, params: &EulerParams) -> Result<StudyReport> {
    let g = &params.gammas;
    if g.is_empty() || g.iter().any(|v| !(*v > 0.0)) || g.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config("gammas must be positive and decreasing".into()));
    }
    if params.ref_factor == 0 || params.n_reps == 0 {
        return Err(Error::Config("ref_factor and n_reps must be positive".into()));
    }
    let gamma_ref = g.last().unwrap() / params.ref_factor as f64;
    for &gamma in g.iter().chain(std::iter::once(&gamma_ref)) {
        iterations(params.final_s, gamma)?;
    }
    let model = cfg.model.build()?;
    let grid = cfg.grid;
    let base = cfg.trainer.seed;

    let run_reps = |sigma: f64, reps: usize| -> Result<Vec<(Vec<f64>, String)>> {
        par::map_indexed(reps, |r| {
            let r = r as u64;
            let data = cfg
                .model
                .dataset(&grid, cfg.model.n_samples, derive_seed(base, tags::DATA, r))?;
            let init = cfg.model.cloud(
                model.as_ref(),
                &grid,
                cfg.model.n_particles,
                derive_seed(base, tags::INIT, r),
            )?;
            let mut tc = cfg.trainer.clone();
            tc.sigma = sigma;
            let noise = BridgedNoise::new(derive_seed(base, tags::NOISE, r), gamma_ref)?;
            let reference = run_to(
                model.as_ref(),
                &data,
                &grid,
                &tc,
                &init,
                &noise,
                gamma_ref,
                params.final_s,
            )?;
            let mut errs = Vec::with_capacity(g.len() + 1);
            for &gamma in g {
                let out = run_to(model.as_ref(), &data, &grid, &tc, &init, &noise, gamma, params.final_s)?;
                errs.push(paired_distance(&out, &reference)?.powi(2));
            }
            if r == 0 {
                let again = run_to(
                    model.as_ref(),
                    &data,
                    &grid,
                    &tc,
                    &init,
                    &noise,
                    gamma_ref,
                    params.final_s,
                )?;
                errs.push(paired_distance(&again, &reference)?.powi(2));
            }
            Ok((errs, data.content_hash()))
        })
        .into_iter()
        .collect()
    };

    let mut report = StudyReport::new("euler", serde_json::to_value(cfg)?);
    let reps = run_reps(cfg.trainer.sigma, params.n_reps)?;
    let mut series = Series::new("mse", &["gamma", "mse", "mse_se"]);
    let (mut lx, mut ly) = (Vec::new(), Vec::new());
    for (k, &gamma) in g.iter().enumerate() {
        let vals: Vec<f64> = reps.iter().map(|(e, _)| e[k]).collect();
        let (m, se) = mean_se(&vals);
        series.push(vec![gamma, m, se]);
        lx.push(gamma.ln());
        ly.push(m.ln());
    }
    report.series.push(series);
    let fit = linear_fit("log_mse_vs_log_gamma", "ln gamma", "ln MSE", &lx, &ly)?;
    report.checks.push(Check::within("euler_slope", fit.slope, 1.6, 2.4));
    report.fits.push(fit);
    report
        .checks
        .push(Check::at_most("reference_self_mse", reps[0].0[g.len()], 1e-24));

    if params.deterministic_probe && g.len() >= 2 {
        let det = run_reps(0.0, 1)?;
        let mut s = Series::new("mse_noiseless", &["gamma", "mse"]);
        for (k, &gamma) in g.iter().enumerate() {
            s.push(vec![gamma, det[0].0[k]]);
        }
        let ratios: Vec<f64> = det[0].0[..g.len()].windows(2).map(|w| w[0] / w[1]).collect();
        // second order in gamma: the ratio should be (gamma_k / gamma_{k+1})^2, i.e. 4 per halving
        let worst = ratios
            .iter()
            .zip(g.windows(2))
            .map(|(r, w)| (r / (w[0] / w[1]).powi(2) - 1.0).abs())
            .fold(0.0, f64::max);
        report.series.push(s);
        report
            .notes
            .push(format!("noiseless error ratios per halving: {ratios:?}"));
        report
            .checks
            .push(Check::at_most("noiseless_ratio_relative_deviation", worst, 0.25));
    }
    report.notes.push(format!(
        "reference step {gamma_ref:e}, shared Brownian path at that resolution"
    ));
    report.dataset_hash = combine_hashes(reps.iter().map(|(_, h)| h.as_str()));
    Ok(report)
}
