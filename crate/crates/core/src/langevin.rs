//! Euler–Maruyama discretisation of the mean-field Langevin dynamics
//!
//! `d theta_s = -(grad_a bold-h(theta_s, nu_s) + sigma^2/2 grad U(theta_s)) ds + sigma dB_s`
//!
//! for all particles and grid nodes at once, plus the coupled and fixed-point
//! variants used by the studies.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::control::{paired_distance, ParamArray, ParticleCloud};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{GaussianPrior, Model};
use crate::objective::{objective_jsigma, EntropyTerm};
use crate::ode::{drift_at, mean_field_drift, sweep, TimeGrid};
use crate::par;
use crate::rng::{domain, StreamKey};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum StepSchedule {
    Uniform {
        gamma: f64,
    },
    /// Increments `s_{l+1} - s_l`, one per iteration.
    Explicit {
        steps: Vec<f64>,
    },
}

impl StepSchedule {
    pub fn step(&self, iter: usize) -> f64 {
        match self {
            StepSchedule::Uniform { gamma } => *gamma,
            StepSchedule::Explicit { steps } => steps[iter],
        }
    }

    /// Training time after `iter` steps.
    pub fn time(&self, iter: usize) -> f64 {
        match self {
            StepSchedule::Uniform { gamma } => *gamma * iter as f64,
            StepSchedule::Explicit { steps } => steps[..iter].iter().sum(),
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub sigma: f64,
    /// `kappa = 0` switches the prior off (allowed only for the dynamics;
    /// the entropy term then has no reference measure and is not reported).
    pub prior: GaussianPrior,
    pub schedule: StepSchedule,
    pub n_iters: usize,
    pub seed: u64,
    pub record_every: usize,
    /// Whether history rows include the entropy-regularised objective.
    #[serde(default = "default_true")]
    pub record_entropy: bool,
}

impl TrainerConfig {
    pub fn uniform(sigma: f64, kappa: f64, gamma: f64, n_iters: usize, seed: u64) -> Self {
        Self {
            sigma,
            prior: GaussianPrior { kappa },
            schedule: StepSchedule::Uniform { gamma },
            n_iters,
            seed,
            record_every: 1,
            record_entropy: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be nonnegative, got {}", self.sigma)));
        }
        if !(self.prior.kappa >= 0.0 && self.prior.kappa.is_finite()) {
            return Err(Error::Config(format!(
                "kappa must be nonnegative, got {}",
                self.prior.kappa
            )));
        }
        if self.record_every == 0 {
            return Err(Error::Config("record_every must be at least 1".into()));
        }
        match &self.schedule {
            StepSchedule::Uniform { gamma } if !(*gamma > 0.0 && gamma.is_finite()) => {
                Err(Error::Config(format!("step size must be positive, got {gamma}")))
            }
            StepSchedule::Explicit { steps } if steps.len() < self.n_iters => Err(Error::Config(format!(
                "schedule has {} steps but n_iters is {}",
                steps.len(),
                self.n_iters
            ))),
            StepSchedule::Explicit { steps } if steps.iter().any(|g| !(*g > 0.0 && g.is_finite())) => {
                Err(Error::Config("all step increments must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    /// `sigma^2 kappa`, the strong-convexity budget of the regulariser.
    pub fn regularisation(&self) -> f64 {
        self.sigma * self.sigma * self.prior.kappa
    }
}

/// Brownian increments `B^i_{s + gamma} - B^i_s` for every particle and node.
pub trait NoiseSource: Sync {
    fn increment(&self, iter: usize, s: f64, gamma: f64, particle: usize, node: usize, out: &mut [f64]);
}

/// Independent `N(0, gamma)` draws keyed by `(seed, iter, particle, node)`.
/// Particle `i` sees the same draws whatever the cloud size.
#[derive(Clone, Copy, Debug)]
pub struct KeyedNoise {
    key: StreamKey,
}

impl KeyedNoise {
    pub fn new(seed: u64) -> Self {
        Self {
            key: StreamKey::new(seed).child(domain::LANGEVIN),
        }
    }
}

impl NoiseSource for KeyedNoise {
    fn increment(&self, iter: usize, _s: f64, gamma: f64, particle: usize, node: usize, out: &mut [f64]) {
        self.key
            .child(iter as u64)
            .child(particle as u64)
            .child(node as u64)
            .fill_normal(out);
        let scale = gamma.sqrt();
        out.iter_mut().for_each(|v| *v *= scale);
    }
}

/// One Brownian path sampled at resolution `fine`: an increment over
/// `[s, s + gamma]` is the sum of the fine increments it covers, so runs with
/// different step sizes discretise the same path. With `gamma = fine` this is
/// draw-for-draw identical to [`KeyedNoise`] with the same seed.
#[derive(Clone, Copy, Debug)]
pub struct BridgedNoise {
    key: StreamKey,
    fine: f64,
}

impl BridgedNoise {
    pub fn new(seed: u64, fine: f64) -> Result<Self> {
        if !(fine > 0.0 && fine.is_finite()) {
            return Err(Error::Precondition(format!("fine step must be positive, got {fine}")));
        }
        Ok(Self {
            key: StreamKey::new(seed).child(domain::LANGEVIN),
            fine,
        })
    }

    /// Number of fine steps in `gamma`, if it is a whole multiple.
    pub fn ratio(&self, gamma: f64) -> Option<usize> {
        let r = gamma / self.fine;
        let k = r.round();
        ((r - k).abs() < 1e-9 * r.max(1.0) && k >= 1.0).then_some(k as usize)
    }
}

impl NoiseSource for BridgedNoise {
    fn increment(&self, _iter: usize, s: f64, gamma: f64, particle: usize, node: usize, out: &mut [f64]) {
        let m = self
            .ratio(gamma)
            .expect("step size must be a whole multiple of the fine step");
        let start = (s / self.fine).round() as u64;
        out.fill(0.0);
        let mut buf = vec![0.0; out.len()];
        for k in start..start + m as u64 {
            self.key
                .child(k)
                .child(particle as u64)
                .child(node as u64)
                .fill_normal(&mut buf);
            out.iter_mut().zip(&buf).for_each(|(o, b)| *o += b);
        }
        let scale = self.fine.sqrt();
        out.iter_mut().for_each(|v| *v *= scale);
    }
}

/// Integrated root-mean-square of a drift array: `sqrt(sum_{l<n} dt (1/N) sum_i |b^i_l|^2)`.
pub fn drift_norm(drift: &ParamArray, grid: &TimeGrid) -> f64 {
    let n = drift.n_particles() as f64;
    let sq: f64 = (0..grid.n_steps())
        .map(|l| drift.node(l).iter().map(|v| v * v).sum::<f64>() / n * grid.dt())
        .sum();
    sq.sqrt()
}

/// Moves `positions` one step with the given drift, prior and noise.
fn apply_step(
    positions: &mut ParamArray,
    drift: &ParamArray,
    cfg: &TrainerConfig,
    noise: &dyn NoiseSource,
    iter: usize,
    s: f64,
    gamma: f64,
) -> Result<()> {
    let (np, p) = (positions.n_particles(), positions.dim());
    let half = 0.5 * cfg.sigma * cfg.sigma;
    let kappa = cfg.prior.kappa;
    let sigma = cfg.sigma;
    let drift = drift.as_slice();
    par::chunks_mut(positions.as_mut_slice(), p, |idx, theta| {
        let (l, i) = (idx / np, idx % np);
        let b = &drift[idx * p..(idx + 1) * p];
        let mut db = vec![0.0; p];
        if sigma > 0.0 {
            noise.increment(iter, s, gamma, i, l, &mut db);
        }
        for k in 0..p {
            theta[k] += -gamma * (b[k] + half * kappa * theta[k]) + sigma * db[k];
        }
    });
    if let Some(pos) = positions.as_slice().iter().position(|v| !v.is_finite()) {
        let idx = pos / p;
        return Err(Error::NonFiniteParticle {
            particle: idx % np,
            node: idx / np,
        });
    }
    Ok(())
}

/// One step of the scheme; returns the new cloud and the drift norm at the old one.
pub fn step_with_noise(
    model: &dyn Model,
    cloud: &ParticleCloud,
    dataset: &Dataset,
    cfg: &TrainerConfig,
    iter: usize,
    noise: &dyn NoiseSource,
) -> Result<(ParticleCloud, f64)> {
    let grid = cloud.grid;
    let drift = mean_field_drift(model, cloud, dataset, &grid)?;
    let norm = drift_norm(&drift, &grid);
    let mut next = cloud.clone();
    let (s, gamma) = (cfg.schedule.time(iter), cfg.schedule.step(iter));
    apply_step(&mut next.params, &drift, cfg, noise, iter, s, gamma)?;
    Ok((next, norm))
}

/// `theta <- theta - gamma (b + sigma^2/2 grad U) + sigma (B_{s+gamma} - B_s)`
/// with noise keyed by `(cfg.seed, iter, particle, node)`.
pub fn langevin_step(
    model: &dyn Model,
    cloud: &ParticleCloud,
    dataset: &Dataset,
    grid: &TimeGrid,
    cfg: &TrainerConfig,
    iter: usize,
) -> Result<ParticleCloud> {
    cfg.validate()?;
    if cloud.grid != *grid {
        return Err(Error::DimensionMismatch(
            "cloud grid differs from the training grid".into(),
        ));
    }
    if !cloud.params.is_finite() {
        return Err(Error::Precondition("cloud contains non-finite values".into()));
    }
    if let StepSchedule::Explicit { steps } = &cfg.schedule {
        if iter >= steps.len() {
            return Err(Error::Precondition(format!("no step size for iteration {iter}")));
        }
    }
    let noise = KeyedNoise::new(cfg.seed);
    step_with_noise(model, cloud, dataset, cfg, iter, &noise).map(|(c, _)| c)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRecord {
    pub iter: usize,
    pub s: f64,
    pub j: f64,
    pub j_sigma: Option<f64>,
    pub grad_norm: f64,
    pub second_moment: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<HistoryRecord>,
}

pub const HISTORY_HEADER: &str = "iter,s,J,Jsigma,grad_norm,second_moment";

impl TrainHistory {
    /// `Jsigma` is left empty when it was not computed or is undefined.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{HISTORY_HEADER}")?;
        for r in &self.records {
            let js = r.j_sigma.map(|v| format!("{v:.16e}")).unwrap_or_default();
            writeln!(
                w,
                "{},{:.16e},{:.16e},{},{:.16e},{:.16e}",
                r.iter, r.s, r.j, js, r.grad_norm, r.second_moment
            )?;
        }
        Ok(())
    }

    pub fn last(&self) -> Option<&HistoryRecord> {
        self.records.last()
    }
}

fn record(
    model: &dyn Model,
    cloud: &ParticleCloud,
    dataset: &Dataset,
    cfg: &TrainerConfig,
    iter: usize,
    grad_norm: f64,
) -> Result<HistoryRecord> {
    let grid = cloud.grid;
    let want_entropy = cfg.record_entropy && cfg.sigma > 0.0 && cfg.prior.kappa > 0.0 && cloud.n_particles() >= 8;
    let sigma = if want_entropy { cfg.sigma } else { 0.0 };
    let v = objective_jsigma(model, cloud, dataset, &grid, sigma, &cfg.prior)?;
    let j_sigma = match v.ent_term {
        EntropyTerm::Absent => None,
        _ => v.j_sigma(),
    };
    Ok(HistoryRecord {
        iter,
        s: cfg.schedule.time(iter),
        j: v.j,
        j_sigma,
        grad_norm,
        second_moment: cloud.second_moment(),
    })
}

/// Runs `cfg.n_iters` steps from `init` and records every `record_every`-th
/// iterate (and the last). `observer` sees every iterate `0..=n_iters`.
pub fn train_with(
    model: &dyn Model,
    dataset: &Dataset,
    grid: &TimeGrid,
    cfg: &TrainerConfig,
    init: &ParticleCloud,
    noise: &dyn NoiseSource,
    observer: &mut dyn FnMut(usize, &ParticleCloud),
) -> Result<(ParticleCloud, TrainHistory)> {
    cfg.validate()?;
    if init.grid != *grid {
        return Err(Error::DimensionMismatch(
            "initial cloud grid differs from the training grid".into(),
        ));
    }
    if !init.params.is_finite() {
        return Err(Error::Precondition("initial cloud contains non-finite values".into()));
    }
    dataset.validate(model, grid)?;
    let mut history = TrainHistory::default();
    let mut cloud = init.clone();
    observer(0, &cloud);
    for iter in 0..cfg.n_iters {
        let (next, norm) = step_with_noise(model, &cloud, dataset, cfg, iter, noise).map_err(|e| e.at_iter(iter))?;
        if iter % cfg.record_every == 0 {
            history
                .records
                .push(record(model, &cloud, dataset, cfg, iter, norm).map_err(|e| e.at_iter(iter))?);
        }
        cloud = next;
        observer(iter + 1, &cloud);
    }
    let n = cfg.n_iters;
    let drift = mean_field_drift(model, &cloud, dataset, grid).map_err(|e| e.at_iter(n))?;
    history
        .records
        .push(record(model, &cloud, dataset, cfg, n, drift_norm(&drift, grid)).map_err(|e| e.at_iter(n))?);
    Ok((cloud, history))
}

pub fn train(
    model: &dyn Model,
    dataset: &Dataset,
    grid: &TimeGrid,
    cfg: &TrainerConfig,
    init: &ParticleCloud,
) -> Result<(ParticleCloud, TrainHistory)> {
    train_with(
        model,
        dataset,
        grid,
        cfg,
        init,
        &KeyedNoise::new(cfg.seed),
        &mut |_, _| {},
    )
}

/// Paired-coupling distance between two synchronously coupled runs.
#[derive(Clone, Debug, PartialEq)]
pub struct CoupledSeries {
    pub s: Vec<f64>,
    pub distance: Vec<f64>,
}

/// Evolves both clouds with identical noise draws and records
/// [`paired_distance`] at every iterate, including the initial one.
pub fn coupled_pair_run(
    model: &dyn Model,
    dataset: &Dataset,
    grid: &TimeGrid,
    cfg: &TrainerConfig,
    init_a: &ParticleCloud,
    init_b: &ParticleCloud,
) -> Result<CoupledSeries> {
    cfg.validate()?;
    if !init_a.params.same_shape(&init_b.params) || init_a.grid != *grid || init_b.grid != *grid {
        return Err(Error::DimensionMismatch(
            "coupled runs need clouds of equal shape on the same grid".into(),
        ));
    }
    let noise = KeyedNoise::new(cfg.seed);
    let (mut a, mut b) = (init_a.clone(), init_b.clone());
    let mut out = CoupledSeries {
        s: vec![0.0],
        distance: vec![paired_distance(&a, &b)?],
    };
    for iter in 0..cfg.n_iters {
        a = step_with_noise(model, &a, dataset, cfg, iter, &noise)
            .map_err(|e| e.at_iter(iter))?
            .0;
        b = step_with_noise(model, &b, dataset, cfg, iter, &noise)
            .map_err(|e| e.at_iter(iter))?
            .0;
        out.s.push(cfg.schedule.time(iter + 1));
        out.distance.push(paired_distance(&a, &b)?);
    }
    Ok(out)
}

/// Largest observed `|b(theta') - b(theta)| / |theta' - theta|` for the
/// mean-field drift map, both norms the paired `V2` norm over nodes `l < n`.
///
/// Half of the probes perturb every coordinate independently; the other
/// half shift every particle and node by one common random vector, which
/// is the direction in which mean-field interactions add up.
pub fn lipschitz_probe(
    model: &dyn Model,
    dataset: &Dataset,
    grid: &TimeGrid,
    cloud: &ParticleCloud,
    n_probes: usize,
    scale: f64,
    seed: u64,
) -> Result<f64> {
    if n_probes == 0 || !(scale > 0.0) {
        return Err(Error::Precondition(
            "lipschitz probe needs n_probes > 0 and scale > 0".into(),
        ));
    }
    let base = mean_field_drift(model, cloud, dataset, grid)?;
    let root = StreamKey::new(seed).child(domain::PROBE);
    let p = cloud.dim();
    let mut best: f64 = 0.0;
    for k in 0..n_probes {
        let key = root.child(k as u64);
        let mut moved = cloud.clone();
        let mut delta = vec![0.0; moved.params.as_slice().len()];
        if k % 2 == 0 {
            key.fill_normal(&mut delta);
        } else {
            let mut common = vec![0.0; p];
            key.fill_normal(&mut common);
            for chunk in delta.chunks_exact_mut(p) {
                chunk.copy_from_slice(&common);
            }
        }
        for (v, dv) in moved.params.as_mut_slice().iter_mut().zip(&delta) {
            *v += scale * dv;
        }
        let dist = paired_distance(&moved, cloud)?;
        if dist == 0.0 {
            continue;
        }
        let drift = mean_field_drift(model, &moved, dataset, grid)?;
        let mut diff = drift.clone();
        for (d, b) in diff.as_mut_slice().iter_mut().zip(base.as_slice()) {
            *d -= b;
        }
        best = best.max(drift_norm(&diff, grid) / dist);
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PicardResult {
    pub cloud: ParticleCloud,
    /// `sup_s` paired distance between the flows of successive iterates.
    pub increments: Vec<f64>,
}

/// Fixed-point iteration `mu -> Law(theta(mu))` for the mean-field law.
///
/// The flow of measures is frozen as one cloud per training step; `n_ref`
/// particles are then simulated against it (drift evaluated at their own
/// positions, measure taken from the frozen flow) with the same noise every
/// iteration, and their trajectory becomes the next flow. Particle `i`
/// starts from initial particle `i mod N`. The first frozen flow is the
/// initial cloud held constant in `s`.
pub fn picard_solve(
    model: &dyn Model,
    dataset: &Dataset,
    grid: &TimeGrid,
    cfg: &TrainerConfig,
    init: &ParticleCloud,
    n_picard: usize,
    n_ref: usize,
) -> Result<PicardResult> {
    cfg.validate()?;
    if n_ref < init.n_particles() {
        return Err(Error::Precondition(format!(
            "n_ref = {n_ref} is smaller than the initial cloud ({})",
            init.n_particles()
        )));
    }
    if init.grid != *grid {
        return Err(Error::DimensionMismatch(
            "initial cloud grid differs from the training grid".into(),
        ));
    }
    if n_picard == 0 {
        return Ok(PicardResult {
            cloud: init.clone(),
            increments: Vec::new(),
        });
    }
    let p = init.dim();
    let mut start = ParamArray::zeros(n_ref, grid.n_nodes(), p);
    for l in 0..grid.n_nodes() {
        for i in 0..n_ref {
            start.get_mut(i, l).copy_from_slice(init.get(i % init.n_particles(), l));
        }
    }
    let start = ParticleCloud::new(start, *grid, init.seed)?;
    let noise = KeyedNoise::new(cfg.seed);

    let mut flow: Vec<ParticleCloud> = vec![init.clone()];
    let mut increments = Vec::with_capacity(n_picard);
    for _ in 0..n_picard {
        let mut traj = Vec::with_capacity(cfg.n_iters + 1);
        let mut cur = start.clone();
        traj.push(cur.clone());
        let mut frozen_sweeps = None;
        for iter in 0..cfg.n_iters {
            let frozen = &flow[iter.min(flow.len() - 1)];
            if flow.len() > 1 || frozen_sweeps.is_none() {
                frozen_sweeps = Some(sweep(model, frozen, dataset, grid).map_err(|e| e.at_iter(iter))?);
            }
            let sw = frozen_sweeps.as_ref().unwrap();
            let drift = drift_at(model, sw, dataset, &cur.params)?;
            let (s, gamma) = (cfg.schedule.time(iter), cfg.schedule.step(iter));
            apply_step(&mut cur.params, &drift, cfg, &noise, iter, s, gamma).map_err(|e| e.at_iter(iter))?;
            traj.push(cur.clone());
        }
        if flow.len() == traj.len() {
            let mut sup: f64 = 0.0;
            for (a, b) in flow.iter().zip(&traj) {
                sup = sup.max(paired_distance(a, b)?);
            }
            increments.push(sup);
        }
        flow = traj;
    }
    Ok(PicardResult {
        cloud: flow.pop().expect("flow is never empty"),
        increments,
    })
}
