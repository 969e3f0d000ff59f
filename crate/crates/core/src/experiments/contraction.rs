//! Exponential contraction of synchronously coupled runs when the entropic
//! regularisation dominates the Lipschitz constant of the drift.
//!
//! The drift's Lipschitz constant `L` is estimated with
//! [`lipschitz_probe`](crate::langevin::lipschitz_probe) at the first
//! initial cloud. Unless `kappa` is given, it is set so that
//! `sigma^2 kappa = regime_factor * L * max(1, T)`, and the step size so
//! that `gamma * sigma^2 kappa = step_fraction`. For each pair, a line is fit
//! to `ln d(s)^2` against `s`; its negative slope is compared with
//! `sigma^2 kappa - 4 L`.

use serde::{Deserialize, Serialize};

use super::{
    combine_hashes, derive_seed, linear_fit, tags, Check, ModelSection, RunConfig, Series, StudyParams, StudyReport,
};
use crate::control::{cloud_init, InitLaw};
use crate::dataset::{DatasetKind, Target};
use crate::error::{Error, Result};
use crate::langevin::{coupled_pair_run, lipschitz_probe, StepSchedule, TrainerConfig};
use crate::model::{GaussianPrior, ModelKind};
use crate::ode::TimeGrid;
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContractionParams {
    pub n_pairs: usize,
    /// Law of the second cloud of each pair (the first uses `model.init`).
    pub init_b: InitLaw,
    pub regime_factor: f64,
    /// Overrides the automatic choice of `kappa`.
    pub kappa: Option<f64>,
    pub step_fraction: f64,
    /// Length of each run in units of `1 / (sigma^2 kappa)`.
    pub horizon_units: f64,
    pub n_probes: usize,
    pub probe_scale: f64,
    pub rate_factor: f64,
}

impl Default for ContractionParams {
    fn default() -> Self {
        Self {
            n_pairs: 20,
            init_b: InitLaw::Gaussian { mean: 1.5, std: 1.0 },
            regime_factor: 10.0,
            kappa: None,
            step_fraction: 0.05,
            horizon_units: 6.0,
            n_probes: 16,
            probe_scale: 0.1,
            rate_factor: 3.0,
        }
    }
}

pub(super) fn default_config() -> RunConfig {
    let mut trainer = TrainerConfig::uniform(1.0, 1.0, 0.01, 0, 0);
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
        study: Some(StudyParams::Contraction(ContractionParams::default())),
    }
}

pub fn run_contraction_study(cfg: &RunConfig, params: &ContractionParams) -> Result<StudyReport> {
    if params.n_pairs == 0 || !(params.step_fraction > 0.0) || !(params.horizon_units > 0.0) {
        return Err(Error::Config(
            "n_pairs, step_fraction and horizon_units must be positive".into(),
        ));
    }
    let sigma = cfg.trainer.sigma;
    if !(sigma > 0.0) {
        return Err(Error::Config("the contraction study needs sigma > 0".into()));
    }
    let model = cfg.model.build()?;
    let grid = cfg.grid;
    let base = cfg.trainer.seed;
    let data = cfg.model.dataset(&grid, cfg.model.n_samples, cfg.model.data_seed)?;
    let probe_cloud = cfg.model.cloud(
        model.as_ref(),
        &grid,
        cfg.model.n_particles,
        derive_seed(base, tags::INIT, 0),
    )?;
    let l_hat = lipschitz_probe(
        model.as_ref(),
        &data,
        &grid,
        &probe_cloud,
        params.n_probes,
        params.probe_scale,
        base,
    )?;
    let t_factor = grid.horizon().max(1.0);
    let kappa = params
        .kappa
        .unwrap_or_else(|| params.regime_factor * l_hat * t_factor / (sigma * sigma));
    let reg = sigma * sigma * kappa;
    if !(reg > 0.0) {
        return Err(Error::Config("sigma^2 kappa must be positive".into()));
    }
    let gamma = params.step_fraction / reg;
    let n_iters = (params.horizon_units / params.step_fraction).ceil() as usize;
    let mut tc = cfg.trainer.clone();
    tc.prior = GaussianPrior { kappa };
    tc.schedule = StepSchedule::Uniform { gamma };
    tc.n_iters = n_iters;
    let predicted = reg - 4.0 * l_hat;

    let runs: Vec<Result<Vec<f64>>> = par::map_indexed(params.n_pairs, |r| {
        let r = r as u64;
        let a = cfg.model.cloud(
            model.as_ref(),
            &grid,
            cfg.model.n_particles,
            derive_seed(base, tags::INIT, r),
        )?;
        let b = cloud_init(
            cfg.model.n_particles,
            grid,
            model.dim_param(),
            params.init_b,
            derive_seed(base, tags::INIT, 1_000_000 + r),
        )?;
        let mut t = tc.clone();
        t.seed = derive_seed(base, tags::NOISE, r);
        Ok(coupled_pair_run(model.as_ref(), &data, &grid, &t, &a, &b)?.distance)
    });
    let runs: Vec<Vec<f64>> = runs.into_iter().collect::<Result<_>>()?;

    let mut report = StudyReport::new("contraction", serde_json::to_value(cfg)?);
    let s: Vec<f64> = (0..=n_iters).map(|k| tc.schedule.time(k)).collect();
    let mut dist = Series::new("log_distance_sq", &["s", "pair_0", "mean_over_pairs"]);
    let mut rates = Series::new("rates", &["pair", "fitted_rate", "slope_se"]);
    let (mut negative, mut in_band) = (0, 0);
    for (k, run) in runs.iter().enumerate() {
        let (x, y): (Vec<f64>, Vec<f64>) = s
            .iter()
            .zip(run)
            .filter(|(_, d)| **d > 1e-150)
            .map(|(s, d)| (*s, (d * d).ln()))
            .unzip();
        let fit = linear_fit(&format!("pair_{k}"), "s", "ln d^2", &x, &y)?;
        let rate = -fit.slope;
        if fit.slope < 0.0 {
            negative += 1;
        }
        if predicted > 0.0 && rate >= predicted / params.rate_factor && rate <= predicted * params.rate_factor {
            in_band += 1;
        }
        rates.push(vec![k as f64, rate, fit.slope_se]);
    }
    for (k, &sk) in s.iter().enumerate() {
        let logs: Vec<f64> = runs.iter().map(|r| (r[k] * r[k]).max(1e-300).ln()).collect();
        dist.push(vec![sk, logs[0], logs.iter().sum::<f64>() / logs.len() as f64]);
    }
    let fitted = rates.column("fitted_rate").unwrap();
    let mean_rate = fitted.iter().sum::<f64>() / fitted.len() as f64;
    report.series.push(dist);
    report.series.push(rates);
    report.checks.push(Check::flag(
        "strong_regularisation_regime",
        reg >= params.regime_factor * l_hat * t_factor * (1.0 - 1e-12),
        &format!("sigma^2 kappa >= {} * L_hat * max(1, T)", params.regime_factor),
    ));
    report.checks.push(Check::count(
        "negative_slopes",
        negative,
        params.n_pairs,
        params.n_pairs,
    ));
    report.checks.push(Check::count(
        "rate_within_factor",
        in_band,
        params.n_pairs,
        params.n_pairs,
    ));
    report.notes.push(format!(
        "L_hat = {l_hat:.6}, kappa = {kappa:.6}, sigma^2 kappa = {reg:.6}, predicted rate sigma^2 kappa - 4 L_hat = {predicted:.6}, mean fitted rate = {mean_rate:.6}, gamma = {gamma:.3e}, iterations = {n_iters}"
    ));
    report.notes.push(format!(
        "rate band: fitted rate within a factor {} of the predicted rate",
        params.rate_factor
    ));
    report.dataset_hash = combine_hashes([data.content_hash().as_str()]);
    Ok(report)
}
