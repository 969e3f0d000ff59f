//! Stationary law against the Gibbs first-order condition, for one-dimensional
//! parameters.
//!
//! At node `l` the invariant measure has density
//! `q_l(a) ∝ exp(-U(a) - (2 / sigma^2) bold-h_l(a))`, with `bold-h_l` built
//! from the state and costate of the current cloud. After burn-in, snapshots
//! are pooled into a histogram with fixed uniform bins over the pooled range
//! widened by a fixed fraction on each side, and the histogram is compared
//! in total variation with the bin masses of `q_l`, averaged over the same
//! snapshots.

use serde::{Deserialize, Serialize};

use super::{combine_hashes, Check, ModelSection, RunConfig, Series, StudyParams, StudyReport};
use crate::control::{InitLaw, ParticleCloud};
use crate::dataset::{Dataset, DatasetKind, Target};
use crate::error::{Error, Result};
use crate::langevin::{train_with, KeyedNoise, TrainerConfig};
use crate::model::{make_builtin_model, GaussianPrior, Model, ModelKind};
use crate::ode::{hamiltonian_field, sweep, Sweeps};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GibbsParams {
    pub burn_in_fraction: f64,
    pub snapshot_every: usize,
    pub n_bins: usize,
    /// Fraction of the pooled range added on each side of the histogram.
    pub range_extension: f64,
    /// Trapezoid sub-intervals per bin when integrating the density.
    pub sub_intervals: usize,
    pub drift_free_tolerance: f64,
    pub toy_tolerance: f64,
    pub sigma_sweep: Vec<f64>,
    /// Run the drift-free control case.
    pub drift_free: bool,
}

impl Default for GibbsParams {
    fn default() -> Self {
        Self {
            burn_in_fraction: 0.5,
            snapshot_every: 25,
            n_bins: 64,
            range_extension: 0.1,
            sub_intervals: 16,
            drift_free_tolerance: 0.08,
            toy_tolerance: 0.1,
            sigma_sweep: vec![1.0, 2.0, 4.0],
            drift_free: true,
        }
    }
}

pub(super) fn default_config() -> RunConfig {
    // relaxation rate of the prior part is sigma^2 kappa / 2 = 0.5, so s = 30
    // leaves the burn-in point e^{-7.5} away from the initial law
    let mut trainer = TrainerConfig::uniform(1.0, 1.0, 0.02, 1500, 0);
    trainer.record_every = 500;
    trainer.record_entropy = false;
    RunConfig {
        model: ModelSection {
            kind: ModelKind::LinearControl,
            dim_state: 1,
            hidden: 0,
            dataset: DatasetKind::Regression {
                target: Target::Affine {
                    scale: 0.5,
                    offset: 1.0,
                },
            },
            n_samples: 8,
            data_seed: 0,
            n_particles: 4096,
            init: InitLaw::Gaussian { mean: 2.0, std: 0.5 },
        },
        grid: crate::ode::TimeGrid::new(1.0, 4).unwrap(),
        trainer,
        study: Some(StudyParams::Gibbs(GibbsParams::default())),
    }
}

/// Probability masses of `values` in `n_bins` equal bins over `[lo, hi]`;
/// values outside the range are dropped from the numerator, not the count.
pub fn histogram(values: &[f64], lo: f64, hi: f64, n_bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; n_bins];
    let w = (hi - lo) / n_bins as f64;
    for &v in values {
        if v >= lo && v <= hi {
            let b = (((v - lo) / w) as usize).min(n_bins - 1);
            h[b] += 1.0;
        }
    }
    let n = values.len() as f64;
    h.iter_mut().for_each(|c| *c /= n);
    h
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Bin masses of the density `∝ exp(log_weight)` over `n_bins` bins of
/// `[lo, hi]`, trapezoid rule with `sub` sub-intervals per bin, normalised to
/// one on the interval.
pub fn bin_masses(log_weight: impl Fn(f64) -> f64, (lo, hi, n_bins, sub): (f64, f64, usize, usize)) -> Vec<f64> {
    let m = n_bins * sub;
    let h = (hi - lo) / m as f64;
    let log_q: Vec<f64> = (0..=m).map(|k| log_weight(lo + k as f64 * h)).collect();
    let top = log_q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let q: Vec<f64> = log_q.iter().map(|v| (v - top).exp()).collect();
    let mut mass: Vec<f64> = (0..n_bins)
        .map(|b| (0..sub).map(|j| 0.5 * h * (q[b * sub + j] + q[b * sub + j + 1])).sum())
        .collect();
    let total: f64 = mass.iter().sum();
    mass.iter_mut().for_each(|v| *v /= total);
    mass
}

/// Bin masses of `q_l ∝ exp(-U - (2 / sigma^2) bold-h_l)` for a
/// one-dimensional parameter; see [`bin_masses`].
pub fn gibbs_density(
    model: &dyn Model,
    sweeps: &Sweeps,
    dataset: &Dataset,
    node: usize,
    prior: &GaussianPrior,
    sigma: f64,
    bins: (f64, f64, usize, usize),
) -> Vec<f64> {
    let beta = 2.0 / (sigma * sigma);
    bin_masses(
        |a| -prior.potential(&[a]) - beta * hamiltonian_field(model, sweeps, dataset, node, &[a]),
        bins,
    )
}

struct PooledTv {
    per_node: Vec<f64>,
}

/// Trains from `init`, pools post-burn-in snapshots, and returns the
/// per-node total variation to the snapshot-averaged Gibbs masses.
fn pooled_tv(
    model: &dyn Model,
    data: &Dataset,
    cfg: &RunConfig,
    tc: &TrainerConfig,
    init: &ParticleCloud,
    p: &GibbsParams,
) -> Result<PooledTv> {
    let grid = cfg.grid;
    let start = ((tc.n_iters as f64) * p.burn_in_fraction).ceil() as usize;
    let mut snaps: Vec<ParticleCloud> = Vec::new();
    let every = p.snapshot_every.max(1);
    train_with(model, data, &grid, tc, init, &KeyedNoise::new(tc.seed), &mut |k, c| {
        if k >= start && (k - start).is_multiple_of(every) {
            snaps.push(c.clone());
        }
    })?;
    if snaps.is_empty() {
        return Err(Error::Config("no snapshots after burn-in".into()));
    }
    let sweeps: Vec<Sweeps> = snaps
        .iter()
        .map(|c| sweep(model, c, data, &grid))
        .collect::<Result<_>>()?;
    let mut per_node = Vec::with_capacity(grid.n_nodes());
    for l in 0..grid.n_nodes() {
        let pooled: Vec<f64> = snaps.iter().flat_map(|c| c.node(l).iter().copied()).collect();
        let (mn, mx) = pooled
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let pad = p.range_extension * (mx - mn).max(1e-12);
        let (lo, hi) = (mn - pad, mx + pad);
        let hist = histogram(&pooled, lo, hi, p.n_bins);
        let mut q = vec![0.0; p.n_bins];
        for sw in &sweeps {
            let m = gibbs_density(
                model,
                sw,
                data,
                l,
                &tc.prior,
                tc.sigma,
                (lo, hi, p.n_bins, p.sub_intervals),
            );
            q.iter_mut().zip(&m).for_each(|(a, b)| *a += b / sweeps.len() as f64);
        }
        per_node.push(total_variation(&hist, &q));
    }
    Ok(PooledTv { per_node })
}

pub fn run_gibbs_check(cfg: &RunConfig, params: &GibbsParams) -> Result<StudyReport> {
    let model = cfg.model.build()?;
    if model.dim_param() != 1 {
        return Err(Error::Config(
            "the Gibbs check needs a one-dimensional parameter".into(),
        ));
    }
    if !(cfg.trainer.sigma > 0.0) || !(cfg.trainer.prior.kappa > 0.0) {
        return Err(Error::Config("the Gibbs check needs sigma > 0 and kappa > 0".into()));
    }
    if params.n_bins == 0 || params.sub_intervals == 0 || !(0.0..1.0).contains(&params.burn_in_fraction) {
        return Err(Error::Config("invalid histogram or burn-in settings".into()));
    }
    let (_, data, init) = cfg.setup()?;
    let grid = cfg.grid;
    let mut report = StudyReport::new("gibbs", serde_json::to_value(cfg)?);
    let mut tv_series = Series::new("tv_per_node", &["node", "tv_model"]);

    let toy = pooled_tv(model.as_ref(), &data, cfg, &cfg.trainer, &init, params)?;
    let toy_worst = toy.per_node.iter().cloned().fold(0.0, f64::max);

    let mut drift_free_worst = None;
    if params.drift_free {
        let width = data.samples[0].zeta.width();
        let free = make_builtin_model(ModelKind::DriftFree, cfg.model.dim_state, 1, width)?;
        let res = pooled_tv(free.as_ref(), &data, cfg, &cfg.trainer, &init, params)?;
        tv_series = Series::new("tv_per_node", &["node", "tv_model", "tv_drift_free"]);
        for l in 0..grid.n_nodes() {
            tv_series.push(vec![l as f64, toy.per_node[l], res.per_node[l]]);
        }
        drift_free_worst = Some(res.per_node.iter().cloned().fold(0.0, f64::max));
    } else {
        for l in 0..grid.n_nodes() {
            tv_series.push(vec![l as f64, toy.per_node[l]]);
        }
    }
    report.series.push(tv_series);
    if let Some(w) = drift_free_worst {
        report.checks.push(Check::at_most(
            "drift_free_tv_max_over_nodes",
            w,
            params.drift_free_tolerance,
        ));
    }
    report.checks.push(Check::at_most(
        "model_tv_max_over_nodes",
        toy_worst,
        params.toy_tolerance,
    ));

    if params.sigma_sweep.len() >= 2 {
        // distance of the self-consistent Gibbs law from the prior as sigma grows
        let mut s = Series::new("gibbs_vs_prior", &["sigma", "tv_max_over_nodes"]);
        let mut values = Vec::new();
        for &sigma in &params.sigma_sweep {
            let mut tc = cfg.trainer.clone();
            tc.sigma = sigma;
            let (out, _) = train_with(
                model.as_ref(),
                &data,
                &grid,
                &tc,
                &init,
                &KeyedNoise::new(tc.seed),
                &mut |_, _| {},
            )?;
            let sw = sweep(model.as_ref(), &out, &data, &grid)?;
            let sd = 1.0 / tc.prior.kappa.sqrt();
            let (lo, hi) = (-8.0 * sd - 8.0, 8.0 * sd + 8.0);
            let bins = (lo, hi, params.n_bins * 4, params.sub_intervals);
            let worst = (0..grid.n_nodes())
                .map(|l| {
                    let q = gibbs_density(model.as_ref(), &sw, &data, l, &tc.prior, sigma, bins);
                    let g = bin_masses(|a| -tc.prior.potential(&[a]), bins);
                    total_variation(&q, &g)
                })
                .fold(0.0, f64::max);
            s.push(vec![sigma, worst]);
            values.push(worst);
        }
        report.series.push(s);
        let monotone = values.windows(2).all(|w| w[1] < w[0]);
        report.checks.push(Check::flag(
            "gibbs_approaches_prior_as_sigma_grows",
            monotone,
            "strictly decreasing in sigma",
        ));
    }
    report.notes.push(format!(
        "burn-in: first {:.0}% of iterations; snapshots every {} iterations; {} bins over the pooled range widened by {:.0}% on each side",
        100.0 * params.burn_in_fraction,
        params.snapshot_every,
        params.n_bins,
        100.0 * params.range_extension
    ));
    report.dataset_hash = combine_hashes([data.content_hash().as_str()]);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prior_masses_match_normal_cdf() {
        // mass of N(0, 1) on [0, 1] relative to [-4, 4]; the composite
        // trapezoid error with h = 1/64 is about h^2/12 * |phi'(1)| ~ 5e-6
        let m = bin_masses(|a| -0.5 * a * a, (-4.0, 4.0, 8, 64));
        assert!((m[4] - 0.341_344_746 / 0.999_936_658).abs() < 2e-5, "{}", m[4]);
        assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn histogram_and_tv_basics() {
        let h = histogram(&[0.1, 0.2, 0.9, 1.0], 0.0, 1.0, 2);
        assert_eq!(h, vec![0.5, 0.5]);
        assert_eq!(total_variation(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
        assert_eq!(total_variation(&h, &h), 0.0);
    }
}
