//! Data-averaged cost on the discrete grid, its exact gradient, and a
//! finite-difference oracle for that gradient.

use crate::control::{entropy_estimate, ParamArray, ParticleCloud};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{GaussianPrior, Model};
use crate::ode::{forward_all, mean_field_drift, TimeGrid};
use crate::par;

/// `(1/N1) sum_k [ sum_{l<n} dt (1/N) sum_i f(t_l, x^k_l, theta^i_l, z^k_l) + g(x^k_n, z^k_n) ]`.
pub fn objective_j(model: &dyn Model, cloud: &ParticleCloud, dataset: &Dataset, grid: &TimeGrid) -> Result<f64> {
    let paths = forward_all(model, cloud, dataset, grid)?;
    let (d, n) = (model.dim_state(), grid.n_steps());
    let total: f64 = paths
        .iter()
        .zip(&dataset.samples)
        .map(|((x, running), s)| running + model.terminal_cost(&x[n * d..], s.zeta.slice(n)))
        .sum();
    Ok(total / dataset.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EntropyTerm {
    /// `sigma = 0`.
    Absent,
    /// `sigma^2/2 sum_{l<n} Ent(nu_l) dt`.
    Value(f64),
    /// The nearest-neighbour estimator broke down (coincident particles).
    Undefined,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveValue {
    pub j: f64,
    pub ent_term: EntropyTerm,
}

impl ObjectiveValue {
    /// `j + ent_term`; equals `j` at `sigma = 0`, `None` when the entropy is undefined.
    pub fn j_sigma(&self) -> Option<f64> {
        match self.ent_term {
            EntropyTerm::Absent => Some(self.j),
            EntropyTerm::Value(e) => Some(self.j + e),
            EntropyTerm::Undefined => None,
        }
    }
}

pub fn objective_jsigma(
    model: &dyn Model,
    cloud: &ParticleCloud,
    dataset: &Dataset,
    grid: &TimeGrid,
    sigma: f64,
    prior: &GaussianPrior,
) -> Result<ObjectiveValue> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Precondition(format!("sigma must be nonnegative, got {sigma}")));
    }
    let j = objective_j(model, cloud, dataset, grid)?;
    if sigma == 0.0 {
        return Ok(ObjectiveValue {
            j,
            ent_term: EntropyTerm::Absent,
        });
    }
    let prior = GaussianPrior::new(prior.kappa)?;
    let mut sum = 0.0;
    for l in 0..grid.n_steps() {
        sum += entropy_estimate(cloud, l, &prior)?;
    }
    let ent_term = if sum.is_finite() {
        EntropyTerm::Value(0.5 * sigma * sigma * sum * grid.dt())
    } else {
        EntropyTerm::Undefined
    };
    Ok(ObjectiveValue { j, ent_term })
}

/// Exact gradient of [`objective_j`] with respect to every particle
/// coordinate: `(dt / N) * drift`. The last node's entries are zero.
pub fn discrete_gradient(
    model: &dyn Model,
    cloud: &ParticleCloud,
    dataset: &Dataset,
    grid: &TimeGrid,
) -> Result<ParamArray> {
    let mut g = mean_field_drift(model, cloud, dataset, grid)?;
    let scale = grid.dt() / cloud.n_particles() as f64;
    g.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
    Ok(g)
}

/// Central differences of [`objective_j`], one coordinate at a time.
/// Costs two objective evaluations per coordinate.
pub fn finite_diff_gradient(
    model: &dyn Model,
    cloud: &ParticleCloud,
    dataset: &Dataset,
    grid: &TimeGrid,
    step: f64,
) -> Result<ParamArray> {
    if !(step > 0.0) {
        return Err(Error::Precondition(format!("step must be positive, got {step}")));
    }
    objective_j(model, cloud, dataset, grid)?;
    let len = cloud.params.as_slice().len();
    let values: Result<Vec<f64>> = par::map_indexed(len, |idx| {
        let mut c = cloud.clone();
        let v0 = c.params.as_slice()[idx];
        c.params.as_mut_slice()[idx] = v0 + step;
        let up = objective_j(model, &c, dataset, grid)?;
        c.params.as_mut_slice()[idx] = v0 - step;
        let down = objective_j(model, &c, dataset, grid)?;
        Ok((up - down) / (2.0 * step))
    })
    .into_iter()
    .collect();
    ParamArray::from_vec(cloud.n_particles(), cloud.n_nodes(), cloud.dim(), values?)
}

/// `max |a - b| / (1 + |b|)` over coordinates.
pub fn max_relative_deviation(a: &ParamArray, b: &ParamArray) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs() / (1.0 + y.abs()))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{cloud_init, InitLaw};
    use crate::dataset::{generate_dataset, DataSample, DataValue, DatasetKind, Target};
    use crate::model::{make_builtin_model, ModelKind};

    /// phi = 0, f = 1, g = 0.
    struct UnitCost;
    impl Model for UnitCost {
        fn dim_state(&self) -> usize {
            1
        }
        fn dim_param(&self) -> usize {
            1
        }
        fn data_width(&self) -> usize {
            1
        }
        fn phi(&self, _: f64, _: &[f64], _: &[f64], _: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn grad_x_phi(&self, _: f64, _: &[f64], _: &[f64], _: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn grad_a_phi(&self, _: f64, _: &[f64], _: &[f64], _: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn running_cost(&self, _: f64, _: &[f64], _: &[f64], _: &[f64]) -> f64 {
            1.0
        }
        fn terminal_cost(&self, _: &[f64], _: &[f64]) -> f64 {
            0.0
        }
        fn grad_x_terminal_cost(&self, _: &[f64], _: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
    }

    fn gauss(n: usize, grid: TimeGrid, p: usize, seed: u64) -> ParticleCloud {
        cloud_init(n, grid, p, InitLaw::Gaussian { mean: 0.0, std: 1.0 }, seed).unwrap()
    }

    fn regression(n: usize, d: usize, seed: u64, grid: &TimeGrid) -> Dataset {
        generate_dataset(&DatasetKind::Regression { target: Target::Sine }, n, d, seed, grid).unwrap()
    }

    #[test]
    fn zero_field_gives_data_misfit() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let m = make_builtin_model(ModelKind::NeuralOdeTanh, 2, 2, 2).unwrap();
        let c = cloud_init(3, g, m.dim_param(), InitLaw::Constant { value: 0.0 }, 0).unwrap();
        let ds = regression(5, 2, 1, &g);
        let expect: f64 = ds
            .samples
            .iter()
            .map(|s| {
                s.xi.iter()
                    .zip(s.zeta.slice(0))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / 5.0;
        let j = objective_j(m.as_ref(), &c, &ds, &g).unwrap();
        assert!((j - expect).abs() < 1e-15);
    }

    #[test]
    fn unit_running_cost_integrates_to_horizon() {
        let g = TimeGrid::new(2.5, 7).unwrap();
        let c = gauss(3, g, 1, 0);
        let ds = Dataset::new(
            vec![DataSample {
                xi: vec![0.0],
                zeta: DataValue::Vector(vec![0.0]),
            }],
            "t",
            0,
        )
        .unwrap();
        let j = objective_j(&UnitCost, &c, &ds, &g).unwrap();
        assert!((j - 2.5).abs() < 1e-14);
    }

    #[test]
    fn linear_control_closed_form() {
        let g = TimeGrid::new(1.5, 6).unwrap();
        let m = make_builtin_model(ModelKind::LinearControl, 1, 0, 1).unwrap();
        // constant in time per particle, so the time average is the particle mean
        let vals = [0.3, -1.2, 0.7, 2.0];
        let mut data = Vec::new();
        for _ in 0..g.n_nodes() {
            data.extend_from_slice(&vals);
        }
        let c = ParticleCloud::new(ParamArray::from_vec(4, 7, 1, data).unwrap(), g, 0).unwrap();
        let abar = vals.iter().sum::<f64>() / 4.0;
        let samples: Vec<DataSample> = [(0.1, 0.5), (-0.4, 1.0), (0.9, -0.2)]
            .iter()
            .map(|&(xi, z)| DataSample {
                xi: vec![xi],
                zeta: DataValue::Vector(vec![z]),
            })
            .collect();
        let expect = samples
            .iter()
            .map(|s| (s.xi[0] + abar * 1.5 - s.zeta.slice(0)[0]).powi(2))
            .sum::<f64>()
            / 3.0;
        let ds = Dataset::new(samples, "hand", 0).unwrap();
        let j = objective_j(m.as_ref(), &c, &ds, &g).unwrap();
        assert!((j - expect).abs() < 1e-13);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let tanh = make_builtin_model(ModelKind::NeuralOdeTanh, 2, 1, 2).unwrap();
        let res = make_builtin_model(ModelKind::OneLayerResidual, 2, 1, 2).unwrap();
        assert_eq!(res.dim_param(), 3);
        for m in [tanh.as_ref(), res.as_ref()] {
            for seed in 0..20 {
                let c = gauss(3, g, m.dim_param(), seed);
                let ds = regression(2, 2, 100 + seed, &g);
                let exact = discrete_gradient(m, &c, &ds, &g).unwrap();
                let fd = finite_diff_gradient(m, &c, &ds, &g, 1e-5).unwrap();
                let dev = max_relative_deviation(&exact, &fd);
                assert!(dev <= 1e-6, "seed {seed}: {dev}");
            }
        }
    }

    #[test]
    fn timeseries_gradient_matches_finite_differences() {
        let g = TimeGrid::new(1.0, 5).unwrap();
        let m = make_builtin_model(ModelKind::TimeseriesInterp, 3, 2, 2).unwrap();
        let kind = DatasetKind::Timeseries {
            channels: 2,
            observation_nodes: vec![0, 2, 4],
        };
        for seed in 0..5 {
            let c = gauss(3, g, m.dim_param(), seed);
            let ds = generate_dataset(&kind, 3, 3, seed, &g).unwrap();
            let exact = discrete_gradient(m.as_ref(), &c, &ds, &g).unwrap();
            let fd = finite_diff_gradient(m.as_ref(), &c, &ds, &g, 1e-5).unwrap();
            assert!(max_relative_deviation(&exact, &fd) <= 1e-6);
        }
    }

    #[test]
    fn richardson_behaviour() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let m = make_builtin_model(ModelKind::NeuralOdeTanh, 2, 2, 2).unwrap();
        let c = gauss(3, g, m.dim_param(), 4);
        let ds = regression(2, 2, 5, &g);
        let exact = discrete_gradient(m.as_ref(), &c, &ds, &g).unwrap();
        let err = |h: f64| {
            let fd = finite_diff_gradient(m.as_ref(), &c, &ds, &g, h).unwrap();
            max_relative_deviation(&fd, &exact)
        };
        // central differences: error ~ h^2, so 1e-2 -> 5e-3 is a factor of about four
        let ratio = err(1e-2) / err(5e-3);
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
        let d13 = max_relative_deviation(
            &finite_diff_gradient(m.as_ref(), &c, &ds, &g, 1e-3).unwrap(),
            &finite_diff_gradient(m.as_ref(), &c, &ds, &g, 1e-5).unwrap(),
        );
        assert!(d13 > 1e-9 && d13 < 1e-4, "{d13}");
    }

    #[test]
    fn zero_cost_gradients_vanish() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let m = make_builtin_model(ModelKind::DriftFree, 2, 2, 2).unwrap();
        let c = gauss(3, g, 2, 1);
        let ds = regression(2, 2, 1, &g);
        assert!(discrete_gradient(m.as_ref(), &c, &ds, &g)
            .unwrap()
            .as_slice()
            .iter()
            .all(|&v| v == 0.0));
        assert!(finite_diff_gradient(m.as_ref(), &c, &ds, &g, 1e-4)
            .unwrap()
            .as_slice()
            .iter()
            .all(|&v| v == 0.0));
        assert!(finite_diff_gradient(m.as_ref(), &c, &ds, &g, 0.0).is_err());
    }

    #[test]
    fn small_step_against_gradient_descends() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let m = make_builtin_model(ModelKind::NeuralOdeTanh, 2, 1, 2).unwrap();
        for seed in 0..20 {
            let c = gauss(3, g, m.dim_param(), seed);
            let ds = regression(2, 2, 100 + seed, &g);
            let grad = discrete_gradient(m.as_ref(), &c, &ds, &g).unwrap();
            let mut next = c.clone();
            for (v, gv) in next.params.as_mut_slice().iter_mut().zip(grad.as_slice()) {
                *v -= 1e-4 * gv;
            }
            let j0 = objective_j(m.as_ref(), &c, &ds, &g).unwrap();
            let j1 = objective_j(m.as_ref(), &next, &ds, &g).unwrap();
            assert!(j1 < j0, "seed {seed}");
        }
    }

    #[test]
    fn residual_layer_gives_regression_gradient() {
        // n = 1, one particle: x_1 = xi + W1 tanh(b)
        let g = TimeGrid::new(1.0, 1).unwrap();
        let (d, m) = (2, 3);
        let model = make_builtin_model(ModelKind::OneLayerResidual, d, m, d).unwrap();
        let c = gauss(1, g, model.dim_param(), 11);
        let ds = regression(4, d, 12, &g);
        let a = c.get(0, 0);
        let (w1, b) = (&a[..d * m], &a[d * m..]);
        let mut expect = vec![0.0; a.len()];
        for s in &ds.samples {
            let z = s.zeta.slice(0);
            for i in 0..d {
                let out: f64 = (0..m).map(|h| w1[i * m + h] * b[h].tanh()).sum();
                let r = 2.0 * (s.xi[i] + out - z[i]) / ds.len() as f64;
                for h in 0..m {
                    expect[i * m + h] += r * b[h].tanh();
                    expect[d * m + h] += r * w1[i * m + h] * (1.0 - b[h].tanh().powi(2));
                }
            }
        }
        let grad = discrete_gradient(model.as_ref(), &c, &ds, &g).unwrap();
        for (x, y) in grad.get(0, 0).iter().zip(&expect) {
            assert!((x - y).abs() < 1e-14);
        }
        assert!(grad.get(0, 1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn entropy_term() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let m = make_builtin_model(ModelKind::DriftFree, 1, 1, 1).unwrap();
        let ds = regression(1, 1, 0, &g);
        let prior = GaussianPrior::new(1.0).unwrap();
        let at_prior = gauss(10_000, g, 1, 3);
        let v0 = objective_jsigma(m.as_ref(), &at_prior, &ds, &g, 0.0, &prior).unwrap();
        assert_eq!(v0.ent_term, EntropyTerm::Absent);
        assert_eq!(v0.j_sigma(), Some(v0.j));
        let v = objective_jsigma(m.as_ref(), &at_prior, &ds, &g, 1.0, &prior).unwrap();
        let EntropyTerm::Value(e) = v.ent_term else { panic!() };
        assert!(e.abs() < 0.05, "{e}");
        let shifted = cloud_init(10_000, g, 1, InitLaw::Gaussian { mean: 1.0, std: 1.0 }, 3).unwrap();
        let v = objective_jsigma(m.as_ref(), &shifted, &ds, &g, 1.0, &prior).unwrap();
        let EntropyTerm::Value(e) = v.ent_term else { panic!() };
        assert!((e - 0.25).abs() < 0.05, "{e}");
        assert_eq!(v.j_sigma(), Some(v.j + e));
        let collapsed = cloud_init(16, g, 1, InitLaw::Constant { value: 0.5 }, 0).unwrap();
        let v = objective_jsigma(m.as_ref(), &collapsed, &ds, &g, 1.0, &prior).unwrap();
        assert_eq!(v.ent_term, EntropyTerm::Undefined);
        assert_eq!(v.j_sigma(), None);
        assert!(objective_jsigma(m.as_ref(), &collapsed, &ds, &g, -1.0, &prior).is_err());
    }
}
