//! Browser bindings for three small interactive demos. Every function
//! returns a JSON string so the page needs nothing beyond `JSON.parse`.

use mflangevin::control::{cloud_init, InitLaw, ParticleCloud};
use mflangevin::dataset::{generate_dataset, DatasetKind, Target};
use mflangevin::experiments::{gibbs_density, histogram, total_variation};
use mflangevin::langevin::{coupled_pair_run, langevin_step, TrainerConfig};
use mflangevin::model::{make_builtin_model, Model, ModelKind};
use mflangevin::objective::objective_j;
use mflangevin::ode::{forward_solve, sweep};
use mflangevin::{Dataset, TimeGrid};
use serde_json::json;
use wasm_bindgen::prelude::*;

fn js<E: std::fmt::Display>(e: E) -> JsError {
    JsError::new(&e.to_string())
}

fn toy_problem(n_steps: usize) -> Result<(Box<dyn Model>, Dataset, TimeGrid), JsError> {
    let grid = TimeGrid::new(1.0, n_steps).map_err(js)?;
    let model = make_builtin_model(ModelKind::LinearControl, 1, 0, 1).map_err(js)?;
    let kind = DatasetKind::Regression {
        target: Target::Affine {
            scale: 0.5,
            offset: 1.0,
        },
    };
    let data = generate_dataset(&kind, 8, 1, 0, &grid).map_err(js)?;
    Ok((model, data, grid))
}

/// Trains the linear-control toy and compares the particle histogram at
/// `node` with the Gibbs density built from the final cloud.
#[wasm_bindgen]
pub fn gibbs_demo(
    sigma: f64,
    kappa: f64,
    n_particles: usize,
    n_iters: usize,
    node: usize,
    seed: u64,
) -> Result<String, JsError> {
    let (model, data, grid) = toy_problem(4)?;
    if node > grid.n_steps() {
        return Err(JsError::new("node is outside the grid"));
    }
    let cfg = TrainerConfig::uniform(sigma, kappa, 0.02, n_iters, seed);
    cfg.validate().map_err(js)?;
    let mut cloud = cloud_init(n_particles, grid, 1, InitLaw::Gaussian { mean: 2.0, std: 0.5 }, seed).map_err(js)?;
    for k in 0..n_iters {
        cloud = langevin_step(model.as_ref(), &cloud, &data, &grid, &cfg, k).map_err(js)?;
    }
    let values = cloud.node(node);
    let (mn, mx) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let pad = 0.1 * (mx - mn).max(1e-9);
    let (lo, hi, bins) = (mn - pad, mx + pad, 40);
    let hist = histogram(values, lo, hi, bins);
    let sw = sweep(model.as_ref(), &cloud, &data, &grid).map_err(js)?;
    let density = gibbs_density(model.as_ref(), &sw, &data, node, &cfg.prior, sigma, (lo, hi, bins, 16));
    let width = (hi - lo) / bins as f64;
    let centers: Vec<f64> = (0..bins).map(|b| lo + (b as f64 + 0.5) * width).collect();
    Ok(json!({
        "centers": centers,
        "histogram": hist,
        "density": density,
        "tv": total_variation(&hist, &density),
    })
    .to_string())
}

/// Two synchronously coupled runs from different initial laws; returns the
/// paired distance over training time and the fitted log-slope.
#[wasm_bindgen]
pub fn contraction_demo(
    sigma: f64,
    kappa: f64,
    gamma: f64,
    n_iters: usize,
    n_particles: usize,
    seed: u64,
) -> Result<String, JsError> {
    let (model, data, grid) = toy_problem(4)?;
    let cfg = TrainerConfig::uniform(sigma, kappa, gamma, n_iters, seed);
    let a = cloud_init(n_particles, grid, 1, InitLaw::Gaussian { mean: 0.0, std: 1.0 }, seed).map_err(js)?;
    let b = cloud_init(
        n_particles,
        grid,
        1,
        InitLaw::Gaussian { mean: 3.0, std: 2.0 },
        seed + 1,
    )
    .map_err(js)?;
    let series = coupled_pair_run(model.as_ref(), &data, &grid, &cfg, &a, &b).map_err(js)?;
    let pts: Vec<(f64, f64)> = series
        .s
        .iter()
        .zip(&series.distance)
        .filter(|(_, d)| **d > 0.0)
        .map(|(s, d)| (*s, (d * d).ln()))
        .collect();
    let slope = if pts.len() >= 2 {
        let n = pts.len() as f64;
        let (mx, my) = pts.iter().fold((0.0, 0.0), |(x, y), p| (x + p.0 / n, y + p.1 / n));
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        sxy / sxx
    } else {
        f64::NAN
    };
    Ok(json!({ "s": series.s, "distance": series.distance, "log_sq_slope": slope }).to_string())
}

/// A step-wise trainer for a small tanh neural ODE on `x -> sin(pi x)`
/// style regression data; the page advances it a few steps per frame.
#[wasm_bindgen]
pub struct Trainer {
    model: Box<dyn Model>,
    data: Dataset,
    grid: TimeGrid,
    cfg: TrainerConfig,
    cloud: ParticleCloud,
    iter: usize,
}

#[wasm_bindgen]
impl Trainer {
    #[wasm_bindgen(constructor)]
    pub fn new(hidden: usize, n_particles: usize, sigma: f64, gamma: f64, seed: u64) -> Result<Trainer, JsError> {
        let grid = TimeGrid::new(1.0, 8).map_err(js)?;
        let model = make_builtin_model(ModelKind::NeuralOdeTanh, 1, hidden, 1).map_err(js)?;
        let data =
            generate_dataset(&DatasetKind::Regression { target: Target::Sine }, 32, 1, seed, &grid).map_err(js)?;
        let cfg = TrainerConfig::uniform(sigma, 1.0, gamma, usize::MAX, seed);
        cfg.validate().map_err(js)?;
        let cloud = cloud_init(
            n_particles,
            grid,
            model.dim_param(),
            InitLaw::Gaussian { mean: 0.0, std: 1.0 },
            seed,
        )
        .map_err(js)?;
        Ok(Trainer {
            model,
            data,
            grid,
            cfg,
            cloud,
            iter: 0,
        })
    }

    /// Advances `k` iterations and reports the state after them.
    pub fn step(&mut self, k: usize) -> Result<String, JsError> {
        for _ in 0..k {
            self.cloud = langevin_step(
                self.model.as_ref(),
                &self.cloud,
                &self.data,
                &self.grid,
                &self.cfg,
                self.iter,
            )
            .map_err(js)?;
            self.iter += 1;
        }
        let j = objective_j(self.model.as_ref(), &self.cloud, &self.data, &self.grid).map_err(js)?;
        let d = self.model.dim_state();
        let n = self.grid.n_steps();
        let mut fit = Vec::with_capacity(self.data.len());
        for s in &self.data.samples {
            let path = forward_solve(self.model.as_ref(), &self.cloud, s, &self.grid).map_err(js)?;
            fit.push([s.xi[0], path[n * d], s.zeta.slice(n)[0]]);
        }
        fit.sort_by(|a, b| a[0].total_cmp(&b[0]));
        Ok(json!({
            "iter": self.iter,
            "s": self.cfg.schedule.time(self.iter),
            "J": j,
            "second_moment": self.cloud.second_moment(),
            "fit": fit,
        })
        .to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demos_return_parseable_json() {
        let g: serde_json::Value = serde_json::from_str(&gibbs_demo(1.0, 1.0, 64, 20, 0, 1).ok().unwrap()).unwrap();
        assert_eq!(g["histogram"].as_array().unwrap().len(), 40);
        let c: serde_json::Value =
            serde_json::from_str(&contraction_demo(1.0, 4.0, 0.02, 30, 16, 2).ok().unwrap()).unwrap();
        assert!(c["log_sq_slope"].as_f64().unwrap() < 0.0);
        let mut t = Trainer::new(3, 8, 0.05, 0.05, 0).ok().unwrap();
        let first: serde_json::Value = serde_json::from_str(&t.step(1).ok().unwrap()).unwrap();
        let later: serde_json::Value = serde_json::from_str(&t.step(50).ok().unwrap()).unwrap();
        assert_eq!(later["iter"], 51);
        assert!(later["J"].as_f64().unwrap() < first["J"].as_f64().unwrap());
    }
}
