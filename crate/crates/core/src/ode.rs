//! Forward state and discrete adjoint under the empirical control, and the
//! data-averaged Hamiltonian gradient that drives the particles.
//!
//! The forward map is explicit Euler,
//! `x_{l+1} = x_l + dt (1/N) sum_j phi(t_l, x_l, theta^j_l, z_l)`,
//! and the adjoint is the transpose of its Jacobian,
//! `p_n = grad_x g(x_n)`,
//! `p_l = p_{l+1} + dt (1/N) sum_j [grad_x phi^T p_{l+1} + grad_x f]`,
//! evaluated at `(x_l, theta^j_l)`. With this pairing the drift at node `l`,
//! built from `(x_l, p_{l+1})`, is exactly `N / dt` times the gradient of the
//! discrete objective with respect to `theta^i_l`.
//!
//! The last node does not enter the discrete objective (costs are summed
//! with the left-point rule over `l < n`), so its drift is zero.

use serde::{Deserialize, Serialize};

use crate::control::{ParamArray, ParticleCloud};
use crate::dataset::{DataSample, Dataset};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::par;

/// Uniform grid `0 = t_0 < ... < t_n = T`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Precondition(format!("horizon must be positive, got {horizon}")));
        }
        if n_steps == 0 {
            return Err(Error::Precondition("grid needs at least one step".into()));
        }
        Ok(Self { horizon, n_steps })
    }

    /// Accepts explicit nodes only if they start at 0 and are uniformly spaced.
    pub fn from_nodes(nodes: &[f64]) -> Result<Self> {
        if nodes.len() < 2 || nodes[0] != 0.0 {
            return Err(Error::Precondition(
                "nodes must start at 0 and have at least two entries".into(),
            ));
        }
        let n = nodes.len() - 1;
        let grid = Self::new(nodes[n], n)?;
        let tol = 1e-12 * grid.horizon;
        for (l, &t) in nodes.iter().enumerate() {
            if (t - grid.node(l)).abs() > tol {
                return Err(Error::Precondition(format!(
                    "non-uniform grid: node {l} is {t}, expected {}",
                    grid.node(l)
                )));
            }
        }
        Ok(grid)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }
    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }
    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn node(&self, l: usize) -> f64 {
        if l == self.n_steps {
            self.horizon
        } else {
            l as f64 * self.dt()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_nodes()).map(|l| self.node(l)).collect()
    }
}

/// Forward and adjoint paths of one sample, `(n+1) x d` each.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryPair {
    pub x_path: Vec<f64>,
    pub p_path: Vec<f64>,
    pub sample_id: usize,
    dim: usize,
}

impl TrajectoryPair {
    pub fn x(&self, node: usize) -> &[f64] {
        &self.x_path[node * self.dim..(node + 1) * self.dim]
    }
    pub fn p(&self, node: usize) -> &[f64] {
        &self.p_path[node * self.dim..(node + 1) * self.dim]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardScheme {
    Euler,
    /// Classical RK4 with the control and data frozen on each step. Forward
    /// accuracy studies only: gradients are always taken through Euler.
    Rk4,
}

/// Node-wise particle averages of phi and f, valid when the model is
/// `param_only` and therefore shared by every sample.
struct SharedField {
    phi: Vec<f64>,
    cost: Vec<f64>,
}

fn shared_field(model: &dyn Model, cloud: &ParticleCloud, probe: &DataSample) -> SharedField {
    let (d, n_steps, np) = (model.dim_state(), cloud.grid.n_steps(), cloud.n_particles());
    let mut phi = vec![0.0; n_steps * d];
    let mut cost = vec![0.0; n_steps];
    let mut buf = vec![0.0; d];
    for l in 0..n_steps {
        let t = cloud.grid.node(l);
        let z = probe.zeta.slice(l);
        let acc = &mut phi[l * d..(l + 1) * d];
        let mut c = 0.0;
        for j in 0..np {
            model.phi(t, &probe.xi, cloud.get(j, l), z, &mut buf);
            for (a, b) in acc.iter_mut().zip(&buf) {
                *a += b;
            }
            c += model.running_cost(t, &probe.xi, cloud.get(j, l), z);
        }
        acc.iter_mut().for_each(|a| *a /= np as f64);
        cost[l] = c / np as f64;
    }
    SharedField { phi, cost }
}

fn check_inputs(model: &dyn Model, cloud: &ParticleCloud, grid: &TimeGrid) -> Result<()> {
    if cloud.grid != *grid {
        return Err(Error::DimensionMismatch(format!(
            "cloud grid {:?} differs from solver grid {:?}",
            cloud.grid, grid
        )));
    }
    if cloud.dim() != model.dim_param() {
        return Err(Error::DimensionMismatch(format!(
            "cloud parameter dimension {} differs from model's {}",
            cloud.dim(),
            model.dim_param()
        )));
    }
    Ok(())
}

fn check_sample(model: &dyn Model, sample: &DataSample, grid: &TimeGrid) -> Result<()> {
    let ds = Dataset {
        samples: vec![sample.clone()],
        tag: String::new(),
        seed: 0,
    };
    ds.validate(model, grid)
}

/// Euler forward pass; also returns the running-cost integral
/// `sum_{l<n} dt (1/N) sum_j f(t_l, x_l, theta^j_l, z_l)`.
fn forward_inner(
    model: &dyn Model,
    cloud: &ParticleCloud,
    sample: &DataSample,
    shared: Option<&SharedField>,
) -> Result<(Vec<f64>, f64)> {
    let grid = cloud.grid;
    let (d, n, np) = (model.dim_state(), grid.n_steps(), cloud.n_particles());
    let dt = grid.dt();
    let mut x = vec![0.0; (n + 1) * d];
    x[..d].copy_from_slice(&sample.xi);
    let mut acc = vec![0.0; d];
    let mut buf = vec![0.0; d];
    let mut running = 0.0;
    for l in 0..n {
        let t = grid.node(l);
        let z = sample.zeta.slice(l);
        let (head, tail) = x.split_at_mut((l + 1) * d);
        let xl = &head[l * d..];
        match shared {
            Some(s) => {
                acc.copy_from_slice(&s.phi[l * d..(l + 1) * d]);
                running += dt * s.cost[l];
            }
            None => {
                acc.fill(0.0);
                let mut c = 0.0;
                for j in 0..np {
                    let a = cloud.get(j, l);
                    model.phi(t, xl, a, z, &mut buf);
                    for (s, b) in acc.iter_mut().zip(&buf) {
                        *s += b;
                    }
                    c += model.running_cost(t, xl, a, z);
                }
                acc.iter_mut().for_each(|s| *s /= np as f64);
                running += dt * (c / np as f64);
            }
        }
        let next = &mut tail[..d];
        for k in 0..d {
            next[k] = xl[k] + dt * acc[k];
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { node: l + 1 });
        }
    }
    Ok((x, running))
}

fn adjoint_inner(model: &dyn Model, cloud: &ParticleCloud, sample: &DataSample, x: &[f64]) -> Result<Vec<f64>> {
    let grid = cloud.grid;
    let (d, n, np) = (model.dim_state(), grid.n_steps(), cloud.n_particles());
    let dt = grid.dt();
    let mut p = vec![0.0; (n + 1) * d];
    model.grad_x_terminal_cost(&x[n * d..], sample.zeta.slice(n), &mut p[n * d..]);
    if p[n * d..].iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteCostate { node: n });
    }
    let mut acc = vec![0.0; d];
    for l in (0..n).rev() {
        let t = grid.node(l);
        let z = sample.zeta.slice(l);
        let xl = &x[l * d..(l + 1) * d];
        let (head, tail) = p.split_at_mut((l + 1) * d);
        let next = &tail[..d];
        acc.fill(0.0);
        if !model.param_only() {
            for j in 0..np {
                model.state_vjp(t, xl, cloud.get(j, l), z, next, &mut acc);
            }
        }
        let cur = &mut head[l * d..];
        for k in 0..d {
            cur[k] = next[k] + dt * (acc[k] / np as f64);
        }
        if cur.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteCostate { node: l });
        }
    }
    Ok(p)
}

pub fn forward_solve(
    model: &dyn Model,
    cloud: &ParticleCloud,
    sample: &DataSample,
    grid: &TimeGrid,
) -> Result<Vec<f64>> {
    forward_solve_with(model, cloud, sample, grid, ForwardScheme::Euler)
}

pub fn forward_solve_with(
    model: &dyn Model,
    cloud: &ParticleCloud,
    sample: &DataSample,
    grid: &TimeGrid,
    scheme: ForwardScheme,
) -> Result<Vec<f64>> {
    check_inputs(model, cloud, grid)?;
    check_sample(model, sample, grid)?;
    match scheme {
        ForwardScheme::Euler => Ok(forward_inner(model, cloud, sample, None)?.0),
        ForwardScheme::Rk4 => forward_rk4(model, cloud, sample),
    }
}

fn forward_rk4(model: &dyn Model, cloud: &ParticleCloud, sample: &DataSample) -> Result<Vec<f64>> {
    let grid = cloud.grid;
    let (d, n, np) = (model.dim_state(), grid.n_steps(), cloud.n_particles());
    let dt = grid.dt();
    let mut x = vec![0.0; (n + 1) * d];
    x[..d].copy_from_slice(&sample.xi);
    let mut buf = vec![0.0; d];
    let field = |l: usize, t: f64, y: &[f64], out: &mut [f64], buf: &mut [f64]| {
        out.fill(0.0);
        let z = sample.zeta.slice(l);
        for j in 0..np {
            model.phi(t, y, cloud.get(j, l), z, buf);
            for (o, b) in out.iter_mut().zip(buf.iter()) {
                *o += b;
            }
        }
        out.iter_mut().for_each(|o| *o /= np as f64);
    };
    let (mut k1, mut k2, mut k3, mut k4, mut y) =
        (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    for l in 0..n {
        let t = grid.node(l);
        let xl = x[l * d..(l + 1) * d].to_vec();
        field(l, t, &xl, &mut k1, &mut buf);
        for k in 0..d {
            y[k] = xl[k] + 0.5 * dt * k1[k];
        }
        field(l, t + 0.5 * dt, &y, &mut k2, &mut buf);
        for k in 0..d {
            y[k] = xl[k] + 0.5 * dt * k2[k];
        }
        field(l, t + 0.5 * dt, &y, &mut k3, &mut buf);
        for k in 0..d {
            y[k] = xl[k] + dt * k3[k];
        }
        field(l, t + dt, &y, &mut k4, &mut buf);
        for k in 0..d {
            let v = xl[k] + dt / 6.0 * (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k]);
            if !v.is_finite() {
                return Err(Error::NonFiniteState { node: l + 1 });
            }
            x[(l + 1) * d + k] = v;
        }
    }
    Ok(x)
}

pub fn adjoint_solve(
    model: &dyn Model,
    cloud: &ParticleCloud,
    sample: &DataSample,
    x_path: &[f64],
    grid: &TimeGrid,
) -> Result<Vec<f64>> {
    check_inputs(model, cloud, grid)?;
    check_sample(model, sample, grid)?;
    if x_path.len() != grid.n_nodes() * model.dim_state() {
        return Err(Error::DimensionMismatch("state path does not match grid".into()));
    }
    adjoint_inner(model, cloud, sample, x_path)
}

/// Forward and adjoint paths of every sample under one cloud, plus each
/// sample's running-cost integral.
pub struct Sweeps {
    pub pairs: Vec<TrajectoryPair>,
    pub running_costs: Vec<f64>,
    grid: TimeGrid,
}

impl Sweeps {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
}

/// Forward pass only, for every sample: `(x_path, running cost integral)`.
pub(crate) fn forward_all(
    model: &dyn Model,
    cloud: &ParticleCloud,
    dataset: &Dataset,
    grid: &TimeGrid,
) -> Result<Vec<(Vec<f64>, f64)>> {
    check_inputs(model, cloud, grid)?;
    dataset.validate(model, grid)?;
    let shared = model
        .param_only()
        .then(|| shared_field(model, cloud, &dataset.samples[0]));
    par::map_indexed(dataset.len(), |k| {
        forward_inner(model, cloud, &dataset.samples[k], shared.as_ref()).map_err(|e| e.at_sample(k))
    })
    .into_iter()
    .collect()
}

pub fn sweep(model: &dyn Model, cloud: &ParticleCloud, dataset: &Dataset, grid: &TimeGrid) -> Result<Sweeps> {
    check_inputs(model, cloud, grid)?;
    dataset.validate(model, grid)?;
    let shared = model
        .param_only()
        .then(|| shared_field(model, cloud, &dataset.samples[0]));
    let d = model.dim_state();
    let results: Result<Vec<(TrajectoryPair, f64)>> = par::map_indexed(dataset.len(), |k| {
        let sample = &dataset.samples[k];
        let (x, running) = forward_inner(model, cloud, sample, shared.as_ref()).map_err(|e| e.at_sample(k))?;
        let p = adjoint_inner(model, cloud, sample, &x).map_err(|e| e.at_sample(k))?;
        Ok((
            TrajectoryPair {
                x_path: x,
                p_path: p,
                sample_id: k,
                dim: d,
            },
            running,
        ))
    })
    .into_iter()
    .collect();
    let (pairs, running_costs) = results?.into_iter().unzip();
    Ok(Sweeps {
        pairs,
        running_costs,
        grid: *grid,
    })
}

/// `grad_a h_t(a)` averaged over the data, at node `l < n`, with the state
/// and costate frozen to `sweeps`. Adds into `out`.
fn drift_one(
    model: &dyn Model,
    sweeps: &Sweeps,
    dataset: &Dataset,
    mean_costate: Option<&[f64]>,
    l: usize,
    a: &[f64],
    out: &mut [f64],
) {
    let t = sweeps.grid.node(l);
    match mean_costate {
        Some(q) => {
            let s = &sweeps.pairs[0];
            let z = dataset.samples[0].zeta.slice(l);
            model.param_vjp(t, s.x(l), a, z, q, out);
        }
        None => {
            for (pair, sample) in sweeps.pairs.iter().zip(&dataset.samples) {
                model.param_vjp(t, pair.x(l), a, sample.zeta.slice(l), pair.p(l + 1), out);
            }
            let n1 = sweeps.pairs.len() as f64;
            out.iter_mut().for_each(|v| *v /= n1);
        }
    }
}

fn mean_costates(sweeps: &Sweeps, d: usize) -> Vec<f64> {
    let n = sweeps.grid.n_steps();
    let mut q = vec![0.0; n * d];
    for pair in &sweeps.pairs {
        for l in 0..n {
            for (acc, v) in q[l * d..(l + 1) * d].iter_mut().zip(pair.p(l + 1)) {
                *acc += v;
            }
        }
    }
    let n1 = sweeps.pairs.len() as f64;
    q.iter_mut().for_each(|v| *v /= n1);
    q
}

/// Drift `grad_a bold-h` evaluated at the particle positions `at`, with the
/// measure flow frozen to the one that produced `sweeps`.
pub fn drift_at(model: &dyn Model, sweeps: &Sweeps, dataset: &Dataset, at: &ParamArray) -> Result<ParamArray> {
    let grid = sweeps.grid;
    if at.n_nodes() != grid.n_nodes() || at.dim() != model.dim_param() {
        return Err(Error::DimensionMismatch(
            "evaluation points do not match model and grid".into(),
        ));
    }
    if sweeps.pairs.len() != dataset.len() {
        return Err(Error::DimensionMismatch("sweeps and dataset differ in size".into()));
    }
    let (m, p, d) = (at.n_particles(), at.dim(), model.dim_state());
    let shared_q = model.param_only().then(|| mean_costates(sweeps, d));
    let mut out = ParamArray::zeros(m, grid.n_nodes(), p);
    let n = grid.n_steps();
    par::chunks_mut(&mut out.as_mut_slice()[..n * m * p], p, |idx, slot| {
        let (l, i) = (idx / m, idx % m);
        let q = shared_q.as_ref().map(|q| &q[l * d..(l + 1) * d]);
        drift_one(model, sweeps, dataset, q, l, at.get(i, l), slot);
    });
    Ok(out)
}

/// `grad_a bold-h_{t_l}(theta^i_l, nu^N, M^{N1})` for every particle and node.
pub fn mean_field_drift(
    model: &dyn Model,
    cloud: &ParticleCloud,
    dataset: &Dataset,
    grid: &TimeGrid,
) -> Result<ParamArray> {
    let sweeps = sweep(model, cloud, dataset, grid)?;
    drift_at(model, &sweeps, dataset, &cloud.params)
}

/// `bold-h_{t_l}(a) = (1/N1) sum_k [phi(t_l, x^k_l, a, z^k_l) . p^k_{l+1} + f(...)]`,
/// whose gradient in `a` is the drift at node `l`. Zero at the last node.
pub fn hamiltonian_field(model: &dyn Model, sweeps: &Sweeps, dataset: &Dataset, node: usize, a: &[f64]) -> f64 {
    let grid = sweeps.grid;
    if node >= grid.n_steps() {
        return 0.0;
    }
    let t = grid.node(node);
    let mut buf = vec![0.0; model.dim_state()];
    let total: f64 = sweeps
        .pairs
        .iter()
        .zip(&dataset.samples)
        .map(|(pair, s)| {
            let z = s.zeta.slice(node);
            model.phi(t, pair.x(node), a, z, &mut buf);
            buf.iter().zip(pair.p(node + 1)).map(|(f, q)| f * q).sum::<f64>()
                + model.running_cost(t, pair.x(node), a, z)
        })
        .sum();
    total / sweeps.pairs.len() as f64
}

#[cfg(test)]
pub(crate) mod test_models {
    use crate::model::Model;

    /// `phi(x, a) = a x` in one dimension, `g(x, z) = c x` with `c = z`.
    pub struct LinearState;

    impl Model for LinearState {
        fn dim_state(&self) -> usize {
            1
        }
        fn dim_param(&self) -> usize {
            1
        }
        fn data_width(&self) -> usize {
            1
        }
        fn phi(&self, _: f64, x: &[f64], a: &[f64], _: &[f64], out: &mut [f64]) {
            out[0] = a[0] * x[0];
        }
        fn grad_x_phi(&self, _: f64, _: &[f64], a: &[f64], _: &[f64], out: &mut [f64]) {
            out[0] = a[0];
        }
        fn grad_a_phi(&self, _: f64, x: &[f64], _: &[f64], _: &[f64], out: &mut [f64]) {
            out[0] = x[0];
        }
        fn terminal_cost(&self, x: &[f64], z: &[f64]) -> f64 {
            z[0] * x[0]
        }
        fn grad_x_terminal_cost(&self, _: &[f64], z: &[f64], out: &mut [f64]) {
            out[0] = z[0];
        }
    }

    /// Forwards everything to the inner model but hides `param_only` and the
    /// specialised VJPs, forcing the generic per-sample code paths.
    pub struct Generic<'a>(pub &'a dyn Model);

    impl Model for Generic<'_> {
        fn dim_state(&self) -> usize {
            self.0.dim_state()
        }
        fn dim_param(&self) -> usize {
            self.0.dim_param()
        }
        fn data_width(&self) -> usize {
            self.0.data_width()
        }
        fn phi(&self, t: f64, x: &[f64], a: &[f64], z: &[f64], out: &mut [f64]) {
            self.0.phi(t, x, a, z, out)
        }
        fn grad_x_phi(&self, t: f64, x: &[f64], a: &[f64], z: &[f64], out: &mut [f64]) {
            self.0.grad_x_phi(t, x, a, z, out)
        }
        fn grad_a_phi(&self, t: f64, x: &[f64], a: &[f64], z: &[f64], out: &mut [f64]) {
            self.0.grad_a_phi(t, x, a, z, out)
        }
        fn running_cost(&self, t: f64, x: &[f64], a: &[f64], z: &[f64]) -> f64 {
            self.0.running_cost(t, x, a, z)
        }
        fn grad_x_running_cost(&self, t: f64, x: &[f64], a: &[f64], z: &[f64], out: &mut [f64]) {
            self.0.grad_x_running_cost(t, x, a, z, out)
        }
        fn grad_a_running_cost(&self, t: f64, x: &[f64], a: &[f64], z: &[f64], out: &mut [f64]) {
            self.0.grad_a_running_cost(t, x, a, z, out)
        }
        fn terminal_cost(&self, x: &[f64], z: &[f64]) -> f64 {
            self.0.terminal_cost(x, z)
        }
        fn grad_x_terminal_cost(&self, x: &[f64], z: &[f64], out: &mut [f64]) {
            self.0.grad_x_terminal_cost(x, z, out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::test_models::{Generic, LinearState};
    use super::*;
    use crate::control::{cloud_init, InitLaw};
    use crate::dataset::{generate_dataset, DataValue, DatasetKind, Target};
    use crate::model::{make_builtin_model, ModelKind};

    fn sample(xi: f64, z: f64) -> DataSample {
        DataSample {
            xi: vec![xi],
            zeta: DataValue::Vector(vec![z]),
        }
    }

    fn constant_cloud(grid: TimeGrid, value: f64) -> ParticleCloud {
        cloud_init(1, grid, 1, InitLaw::Constant { value }, 0).unwrap()
    }

    #[test]
    fn grid_basics() {
        let g = TimeGrid::new(2.0, 4).unwrap();
        assert_eq!(g.nodes(), vec![0.0, 0.5, 1.0, 1.5, 2.0]);
        assert_eq!(g.dt(), 0.5);
        assert!(TimeGrid::new(0.0, 3).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
        assert_eq!(
            TimeGrid::from_nodes(&[0.0, 0.25, 0.5]).unwrap(),
            TimeGrid::new(0.5, 2).unwrap()
        );
        assert!(TimeGrid::from_nodes(&[0.0, 0.1, 0.5]).is_err());
    }

    #[test]
    fn zero_field_keeps_state() {
        let g = TimeGrid::new(1.0, 5).unwrap();
        let m = make_builtin_model(ModelKind::DriftFree, 1, 2, 1).unwrap();
        let c = cloud_init(3, g, 2, InitLaw::Gaussian { mean: 0.0, std: 1.0 }, 1).unwrap();
        let x = forward_solve(m.as_ref(), &c, &sample(0.7, 0.0), &g).unwrap();
        assert!(x.iter().all(|&v| v == 0.7));
    }

    #[test]
    fn state_independent_drift_is_exact() {
        let g = TimeGrid::new(1.0, 8).unwrap();
        let m = make_builtin_model(ModelKind::LinearControl, 1, 0, 1).unwrap();
        let x = forward_solve(m.as_ref(), &constant_cloud(g, 2.0), &sample(1.0, 0.0), &g).unwrap();
        assert_eq!(x[8], 3.0);
    }

    #[test]
    fn euler_first_order() {
        let mut errs = Vec::new();
        for k in 3..9 {
            let n = 1usize << k;
            let g = TimeGrid::new(1.0, n).unwrap();
            let x = forward_solve(&LinearState, &constant_cloud(g, 1.0), &sample(1.0, 0.0), &g).unwrap();
            errs.push((x[n] - std::f64::consts::E).abs());
        }
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!((0.9..=1.1).contains(&order), "order {order}");
        }
    }

    #[test]
    fn rk4_fourth_order() {
        let mut errs = Vec::new();
        for n in [4usize, 8, 16] {
            let g = TimeGrid::new(1.0, n).unwrap();
            let x = forward_solve_with(
                &LinearState,
                &constant_cloud(g, 1.0),
                &sample(1.0, 0.0),
                &g,
                ForwardScheme::Rk4,
            )
            .unwrap();
            errs.push((x[n] - std::f64::consts::E).abs());
        }
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!((3.8..=4.2).contains(&order), "order {order}");
        }
    }

    #[test]
    fn adjoint_constant_when_state_free() {
        let g = TimeGrid::new(1.0, 6).unwrap();
        let m = make_builtin_model(ModelKind::OneLayerResidual, 1, 2, 1).unwrap();
        let c = cloud_init(4, g, m.dim_param(), InitLaw::Gaussian { mean: 0.0, std: 1.0 }, 3).unwrap();
        let s = sample(0.2, -0.4);
        let x = forward_solve(m.as_ref(), &c, &s, &g).unwrap();
        let p = adjoint_solve(m.as_ref(), &c, &s, &x, &g).unwrap();
        let expect = 2.0 * (x[6] + 0.4);
        assert!(p.iter().all(|&v| v == expect));
    }

    #[test]
    fn adjoint_product_form() {
        let n = 10;
        let g = TimeGrid::new(1.0, n).unwrap();
        let c = constant_cloud(g, 1.0);
        let s = sample(1.0, 3.0);
        let x = forward_solve(&LinearState, &c, &s, &g).unwrap();
        let p = adjoint_solve(&LinearState, &c, &s, &x, &g).unwrap();
        for (l, pl) in p.iter().enumerate() {
            let expect = 3.0 * (1.0 + g.dt()).powi((n - l) as i32);
            assert!((pl - expect).abs() < 1e-13 * expect);
        }
        // continuous limit: 3 e^{T - t}
        let fine = 1 << 14;
        let g = TimeGrid::new(1.0, fine).unwrap();
        let c = constant_cloud(g, 1.0);
        let x = forward_solve(&LinearState, &c, &s, &g).unwrap();
        let p = adjoint_solve(&LinearState, &c, &s, &x, &g).unwrap();
        assert!((p[0] - 3.0 * std::f64::consts::E).abs() < 1e-3);
    }

    #[test]
    fn zero_costs_give_zero_costate_and_drift() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let m = make_builtin_model(ModelKind::DriftFree, 2, 3, 2).unwrap();
        let c = cloud_init(5, g, 3, InitLaw::Gaussian { mean: 0.0, std: 1.0 }, 2).unwrap();
        let ds = generate_dataset(&DatasetKind::Regression { target: Target::Sine }, 3, 2, 0, &g).unwrap();
        let x = forward_solve(m.as_ref(), &c, &ds.samples[0], &g).unwrap();
        let p = adjoint_solve(m.as_ref(), &c, &ds.samples[0], &x, &g).unwrap();
        assert!(p.iter().all(|&v| v == 0.0));
        let drift = mean_field_drift(m.as_ref(), &c, &ds, &g).unwrap();
        assert!(drift.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn trajectory_invariants() {
        let g = TimeGrid::new(1.5, 6).unwrap();
        let m = make_builtin_model(ModelKind::NeuralOdeTanh, 2, 3, 2).unwrap();
        let c = cloud_init(4, g, m.dim_param(), InitLaw::Gaussian { mean: 0.0, std: 1.0 }, 8).unwrap();
        let ds = generate_dataset(&DatasetKind::Regression { target: Target::Sine }, 3, 2, 4, &g).unwrap();
        let sw = sweep(m.as_ref(), &c, &ds, &g).unwrap();
        for (pair, s) in sw.pairs.iter().zip(&ds.samples) {
            assert_eq!(pair.x(0), &s.xi[..]);
            let mut gx = vec![0.0; 2];
            m.grad_x_terminal_cost(pair.x(6), s.zeta.slice(6), &mut gx);
            assert_eq!(pair.p(6), &gx[..]);
        }
    }

    #[test]
    fn shared_field_matches_generic_path() {
        let g = TimeGrid::new(1.0, 5).unwrap();
        for kind in [ModelKind::OneLayerResidual, ModelKind::LinearControl] {
            let m = make_builtin_model(kind, 2, 3, 2).unwrap();
            let c = cloud_init(7, g, m.dim_param(), InitLaw::Gaussian { mean: 0.1, std: 0.8 }, 5).unwrap();
            let ds = generate_dataset(&DatasetKind::Regression { target: Target::Cubic }, 6, 2, 9, &g).unwrap();
            let fast = mean_field_drift(m.as_ref(), &c, &ds, &g).unwrap();
            let slow = mean_field_drift(&Generic(m.as_ref()), &c, &ds, &g).unwrap();
            for (a, b) in fast.as_slice().iter().zip(slow.as_slice()) {
                assert!((a - b).abs() <= 1e-13 * (1.0 + b.abs()));
            }
            let fx = forward_all(m.as_ref(), &c, &ds, &g).unwrap();
            let sx = forward_all(&Generic(m.as_ref()), &c, &ds, &g).unwrap();
            assert_eq!(fx, sx);
        }
    }

    #[test]
    fn terminal_node_has_no_drift() {
        let g = TimeGrid::new(1.0, 3).unwrap();
        let m = make_builtin_model(ModelKind::NeuralOdeTanh, 1, 2, 1).unwrap();
        let c = cloud_init(3, g, m.dim_param(), InitLaw::Gaussian { mean: 0.0, std: 1.0 }, 1).unwrap();
        let ds = generate_dataset(&DatasetKind::Regression { target: Target::Sine }, 2, 1, 1, &g).unwrap();
        let drift = mean_field_drift(m.as_ref(), &c, &ds, &g).unwrap();
        assert!(drift.node(3).iter().all(|&v| v == 0.0));
        assert!(drift.node(0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn hamiltonian_field_gradient_is_drift() {
        let g = TimeGrid::new(1.0, 3).unwrap();
        let m = make_builtin_model(ModelKind::TimeseriesInterp, 2, 2, 1).unwrap();
        let c = cloud_init(3, g, m.dim_param(), InitLaw::Gaussian { mean: 0.0, std: 1.0 }, 1).unwrap();
        let kind = DatasetKind::Timeseries {
            channels: 1,
            observation_nodes: vec![0, 2],
        };
        let ds = generate_dataset(&kind, 3, 2, 1, &g).unwrap();
        let sw = sweep(m.as_ref(), &c, &ds, &g).unwrap();
        let drift = drift_at(m.as_ref(), &sw, &ds, &c.params).unwrap();
        let h = 1e-6;
        for l in 0..3 {
            let mut a = c.get(1, l).to_vec();
            for k in 0..a.len() {
                let a0 = a[k];
                a[k] = a0 + h;
                let up = hamiltonian_field(m.as_ref(), &sw, &ds, l, &a);
                a[k] = a0 - h;
                let dn = hamiltonian_field(m.as_ref(), &sw, &ds, l, &a);
                a[k] = a0;
                let fd = (up - dn) / (2.0 * h);
                assert!((fd - drift.get(1, l)[k]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn blowup_is_reported() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let c = constant_cloud(g, 1e200);
        let err = forward_solve(&LinearState, &c, &sample(1e200, 0.0), &g).unwrap_err();
        assert!(matches!(err, Error::NonFiniteState { .. }));
        let ds = Dataset::new(vec![sample(0.0, 0.0), sample(1e200, 0.0)], "t", 0).unwrap();
        let err = mean_field_drift(&LinearState, &c, &ds, &g).err().unwrap();
        assert!(matches!(err, Error::Sample { sample: 1, .. }));
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let m = make_builtin_model(ModelKind::NeuralOdeTanh, 1, 2, 1).unwrap();
        let c = cloud_init(2, g, 1, InitLaw::Constant { value: 0.0 }, 0).unwrap();
        assert!(forward_solve(m.as_ref(), &c, &sample(0.0, 0.0), &g).is_err());
        let c = cloud_init(2, g, 2, InitLaw::Constant { value: 0.0 }, 0).unwrap();
        let other = TimeGrid::new(1.0, 5).unwrap();
        assert!(forward_solve(m.as_ref(), &c, &sample(0.0, 0.0), &other).is_err());
    }
}
