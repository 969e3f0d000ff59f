//! Controlled vector field, running and terminal costs, their analytic
//! derivatives, and the Hamiltonian built from them.
//!
//! Matrices are row-major slices: a `d x d` state Jacobian stores
//! `d phi_i / d x_j` at `i * d + j`, a `d x p` parameter Jacobian stores
//! `d phi_i / d a_k` at `i * p + k`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{domain, StreamKey};

/// The triple (phi, f, g) together with all first derivatives.
///
/// `z` is the data slice seen by the layer at time `t` (for vector-valued data
/// this is the whole vector, for path-valued data the value on the current
/// grid node). The terminal cost receives the slice at the final node.
pub trait Model: Send + Sync {
    fn dim_state(&self) -> usize;
    fn dim_param(&self) -> usize;
    /// Length of the data slice `z`.
    fn data_width(&self) -> usize;

    fn phi(&self, t: f64, x: &[f64], a: &[f64], z: &[f64], out: &mut [f64]);
    fn grad_x_phi(&self, t: f64, x: &[f64], a: &[f64], z: &[f64], out: &mut [f64]);
    fn grad_a_phi(&self, t: f64, x: &[f64], a: &[f64], z: &[f64], out: &mut [f64]);

    fn running_cost(&self, _t: f64, _x: &[f64], _a: &[f64], _z: &[f64]) -> f64 {
        0.0
    }
    fn grad_x_running_cost(&self, _t: f64, _x: &[f64], _a: &[f64], _z: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn grad_a_running_cost(&self, _t: f64, _x: &[f64], _a: &[f64], _z: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn terminal_cost(&self, x: &[f64], z: &[f64]) -> f64;
    fn grad_x_terminal_cost(&self, x: &[f64], z: &[f64], out: &mut [f64]);

    /// True when phi and f depend on neither the state nor the data slice.
    /// Solvers use this to share the mean field across samples.
    fn param_only(&self) -> bool {
        false
    }

    /// Adds `(grad_a phi)^T q + grad_a f` to `out` (length p).
    fn param_vjp(&self, t: f64, x: &[f64], a: &[f64], z: &[f64], q: &[f64], out: &mut [f64]) {
        let (d, p) = (self.dim_state(), self.dim_param());
        let mut jac = vec![0.0; d * p];
        self.grad_a_phi(t, x, a, z, &mut jac);
        for i in 0..d {
            for k in 0..p {
                out[k] += jac[i * p + k] * q[i];
            }
        }
        let mut gf = vec![0.0; p];
        self.grad_a_running_cost(t, x, a, z, &mut gf);
        for k in 0..p {
            out[k] += gf[k];
        }
    }

    /// Adds `(grad_x phi)^T q + grad_x f` to `out` (length d).
    fn state_vjp(&self, t: f64, x: &[f64], a: &[f64], z: &[f64], q: &[f64], out: &mut [f64]) {
        let d = self.dim_state();
        let mut jac = vec![0.0; d * d];
        self.grad_x_phi(t, x, a, z, &mut jac);
        for i in 0..d {
            for j in 0..d {
                out[j] += jac[i * d + j] * q[i];
            }
        }
        let mut gf = vec![0.0; d];
        self.grad_x_running_cost(t, x, a, z, &mut gf);
        for j in 0..d {
            out[j] += gf[j];
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// `phi(a) = W1 tanh(b)`: one hidden layer, no dependence on the state.
    OneLayerResidual,
    /// `phi(x, a) = W1 tanh(W2 x)`, terminal cost `|x - z|^2`.
    NeuralOdeTanh,
    /// `phi(t, x, a, z) = W1 tanh(W2 x + W3 z_obs(t))`, running cost
    /// `|L x - z_true(t)|^2` with `L` the projection on the first channels.
    TimeseriesInterp,
    /// `phi(a) = a` with `|x - z|^2` terminal cost (a convex toy problem).
    LinearControl,
    /// `phi = f = g = 0`. The Langevin dynamics reduce to sampling the prior.
    DriftFree,
}

/// Tanh network family shared by the three architectures above.
#[derive(Clone, Debug)]
pub struct TanhNet {
    kind: ModelKind,
    d: usize,
    hidden: usize,
    channels: usize,
}

impl TanhNet {
    fn has_state_weights(&self) -> bool {
        self.kind != ModelKind::OneLayerResidual
    }
    fn has_bias(&self) -> bool {
        self.kind == ModelKind::OneLayerResidual
    }
    fn obs_channels(&self) -> usize {
        if self.kind == ModelKind::TimeseriesInterp {
            self.channels
        } else {
            0
        }
    }
    fn off_w2(&self) -> usize {
        self.d * self.hidden
    }
    fn off_w3(&self) -> usize {
        self.off_w2()
            + if self.has_state_weights() {
                self.hidden * self.d
            } else {
                0
            }
    }
    fn off_b(&self) -> usize {
        self.off_w3() + self.hidden * self.obs_channels()
    }

    #[inline]
    fn preactivation(&self, h: usize, x: &[f64], a: &[f64], z: &[f64]) -> f64 {
        let mut s = 0.0;
        if self.has_state_weights() {
            let w2 = &a[self.off_w2() + h * self.d..][..self.d];
            s += w2.iter().zip(x).map(|(w, x)| w * x).sum::<f64>();
        }
        let c = self.obs_channels();
        if c > 0 {
            let w3 = &a[self.off_w3() + h * c..][..c];
            s += w3.iter().zip(&z[..c]).map(|(w, z)| w * z).sum::<f64>();
        }
        if self.has_bias() {
            s += a[self.off_b() + h];
        }
        s
    }

    #[inline]
    fn w1(&self, a: &[f64], i: usize, h: usize) -> f64 {
        a[i * self.hidden + h]
    }
}

impl Model for TanhNet {
    fn dim_state(&self) -> usize {
        self.d
    }

    fn dim_param(&self) -> usize {
        self.off_b() + if self.has_bias() { self.hidden } else { 0 }
    }

    fn data_width(&self) -> usize {
        match self.kind {
            ModelKind::TimeseriesInterp => 2 * self.channels,
            _ => self.d,
        }
    }

    fn phi(&self, _t: f64, x: &[f64], a: &[f64], z: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for h in 0..self.hidden {
            let th = self.preactivation(h, x, a, z).tanh();
            for (i, o) in out.iter_mut().enumerate() {
                *o += self.w1(a, i, h) * th;
            }
        }
    }

    fn grad_x_phi(&self, _t: f64, x: &[f64], a: &[f64], z: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        if !self.has_state_weights() {
            return;
        }
        let d = self.d;
        for h in 0..self.hidden {
            let th = self.preactivation(h, x, a, z).tanh();
            let s = 1.0 - th * th;
            let w2 = &a[self.off_w2() + h * d..][..d];
            for i in 0..d {
                let c = self.w1(a, i, h) * s;
                for j in 0..d {
                    out[i * d + j] += c * w2[j];
                }
            }
        }
    }

    fn grad_a_phi(&self, _t: f64, x: &[f64], a: &[f64], z: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let (d, p, m, c) = (self.d, self.dim_param(), self.hidden, self.obs_channels());
        for h in 0..m {
            let th = self.preactivation(h, x, a, z).tanh();
            let s = 1.0 - th * th;
            for i in 0..d {
                let row = &mut out[i * p..(i + 1) * p];
                row[i * m + h] = th;
                let u = self.w1(a, i, h) * s;
                if self.has_state_weights() {
                    for j in 0..d {
                        row[self.off_w2() + h * d + j] = u * x[j];
                    }
                }
                for ch in 0..c {
                    row[self.off_w3() + h * c + ch] = u * z[ch];
                }
                if self.has_bias() {
                    row[self.off_b() + h] = u;
                }
            }
        }
    }

    fn running_cost(&self, _t: f64, x: &[f64], _a: &[f64], z: &[f64]) -> f64 {
        if self.kind != ModelKind::TimeseriesInterp {
            return 0.0;
        }
        let c = self.channels;
        (0..c).map(|j| (x[j] - z[c + j]).powi(2)).sum()
    }

    fn grad_x_running_cost(&self, _t: f64, x: &[f64], _a: &[f64], z: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        if self.kind == ModelKind::TimeseriesInterp {
            let c = self.channels;
            for j in 0..c {
                out[j] = 2.0 * (x[j] - z[c + j]);
            }
        }
    }

    fn terminal_cost(&self, x: &[f64], z: &[f64]) -> f64 {
        if self.kind == ModelKind::TimeseriesInterp {
            return 0.0;
        }
        squared_distance(x, z)
    }

    fn grad_x_terminal_cost(&self, x: &[f64], z: &[f64], out: &mut [f64]) {
        if self.kind == ModelKind::TimeseriesInterp {
            out.fill(0.0);
            return;
        }
        for ((o, x), z) in out.iter_mut().zip(x).zip(z) {
            *o = 2.0 * (x - z);
        }
    }

    fn param_only(&self) -> bool {
        self.kind == ModelKind::OneLayerResidual
    }

    fn param_vjp(&self, _t: f64, x: &[f64], a: &[f64], z: &[f64], q: &[f64], out: &mut [f64]) {
        let (d, m, c) = (self.d, self.hidden, self.obs_channels());
        for h in 0..m {
            let th = self.preactivation(h, x, a, z).tanh();
            let s = 1.0 - th * th;
            let mut u = 0.0;
            for i in 0..d {
                out[i * m + h] += q[i] * th;
                u += q[i] * self.w1(a, i, h);
            }
            u *= s;
            if self.has_state_weights() {
                for j in 0..d {
                    out[self.off_w2() + h * d + j] += u * x[j];
                }
            }
            for ch in 0..c {
                out[self.off_w3() + h * c + ch] += u * z[ch];
            }
            if self.has_bias() {
                out[self.off_b() + h] += u;
            }
        }
    }

    fn state_vjp(&self, _t: f64, x: &[f64], a: &[f64], z: &[f64], q: &[f64], out: &mut [f64]) {
        let (d, m) = (self.d, self.hidden);
        if self.has_state_weights() {
            for h in 0..m {
                let th = self.preactivation(h, x, a, z).tanh();
                let s = 1.0 - th * th;
                let u = s * (0..d).map(|i| q[i] * self.w1(a, i, h)).sum::<f64>();
                let w2 = &a[self.off_w2() + h * d..][..d];
                for j in 0..d {
                    out[j] += u * w2[j];
                }
            }
        }
        if self.kind == ModelKind::TimeseriesInterp {
            let c = self.channels;
            for j in 0..c {
                out[j] += 2.0 * (x[j] - z[c + j]);
            }
        }
    }
}

/// `phi(a) = a`, `f = 0`, `g(x, z) = |x - z|^2`.
#[derive(Clone, Debug)]
pub struct LinearControl {
    d: usize,
}

impl Model for LinearControl {
    fn dim_state(&self) -> usize {
        self.d
    }
    fn dim_param(&self) -> usize {
        self.d
    }
    fn data_width(&self) -> usize {
        self.d
    }
    fn phi(&self, _t: f64, _x: &[f64], a: &[f64], _z: &[f64], out: &mut [f64]) {
        out.copy_from_slice(a);
    }
    fn grad_x_phi(&self, _t: f64, _x: &[f64], _a: &[f64], _z: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn grad_a_phi(&self, _t: f64, _x: &[f64], _a: &[f64], _z: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for i in 0..self.d {
            out[i * self.d + i] = 1.0;
        }
    }
    fn terminal_cost(&self, x: &[f64], z: &[f64]) -> f64 {
        squared_distance(x, z)
    }
    fn grad_x_terminal_cost(&self, x: &[f64], z: &[f64], out: &mut [f64]) {
        for ((o, x), z) in out.iter_mut().zip(x).zip(z) {
            *o = 2.0 * (x - z);
        }
    }
    fn param_only(&self) -> bool {
        true
    }
    fn param_vjp(&self, _t: f64, _x: &[f64], _a: &[f64], _z: &[f64], q: &[f64], out: &mut [f64]) {
        for (o, q) in out.iter_mut().zip(q) {
            *o += q;
        }
    }
    fn state_vjp(&self, _t: f64, _x: &[f64], _a: &[f64], _z: &[f64], _q: &[f64], _out: &mut [f64]) {}
}

/// Zero dynamics and zero cost.
#[derive(Clone, Debug)]
pub struct DriftFree {
    d: usize,
    p: usize,
    width: usize,
}

impl Model for DriftFree {
    fn dim_state(&self) -> usize {
        self.d
    }
    fn dim_param(&self) -> usize {
        self.p
    }
    fn data_width(&self) -> usize {
        self.width
    }
    fn phi(&self, _t: f64, _x: &[f64], _a: &[f64], _z: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn grad_x_phi(&self, _t: f64, _x: &[f64], _a: &[f64], _z: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn grad_a_phi(&self, _t: f64, _x: &[f64], _a: &[f64], _z: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn terminal_cost(&self, _x: &[f64], _z: &[f64]) -> f64 {
        0.0
    }
    fn grad_x_terminal_cost(&self, _x: &[f64], _z: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn param_only(&self) -> bool {
        true
    }
    fn param_vjp(&self, _t: f64, _x: &[f64], _a: &[f64], _z: &[f64], _q: &[f64], _out: &mut [f64]) {}
    fn state_vjp(&self, _t: f64, _x: &[f64], _a: &[f64], _z: &[f64], _q: &[f64], _out: &mut [f64]) {}
}

fn squared_distance(x: &[f64], z: &[f64]) -> f64 {
    x.iter().zip(z).map(|(x, z)| (x - z) * (x - z)).sum()
}

/// Builds one of the built-in architectures.
///
/// `hidden` is the hidden width (ignored by `LinearControl` and `DriftFree`).
/// `dim_data` is the target dimension for the regression-style models (it
/// must equal `d`) and the channel count for `TimeseriesInterp` (at most
/// `d`, since the running cost compares the first channels of the state).
/// For `DriftFree`, `hidden` is the parameter dimension.
pub fn make_builtin_model(kind: ModelKind, d: usize, hidden: usize, dim_data: usize) -> Result<Box<dyn Model>> {
    if d == 0 {
        return Err(Error::InvalidDimension("state dimension must be positive".into()));
    }
    let needs_hidden = !matches!(kind, ModelKind::LinearControl);
    if needs_hidden && hidden == 0 {
        return Err(Error::InvalidDimension("hidden width must be positive".into()));
    }
    match kind {
        ModelKind::OneLayerResidual | ModelKind::NeuralOdeTanh => {
            if dim_data != d {
                return Err(Error::InvalidDimension(format!(
                    "regression target dimension {dim_data} must equal state dimension {d}"
                )));
            }
            Ok(Box::new(TanhNet {
                kind,
                d,
                hidden,
                channels: 0,
            }))
        }
        ModelKind::TimeseriesInterp => {
            if dim_data == 0 || dim_data > d {
                return Err(Error::InvalidDimension(format!(
                    "timeseries channel count must be in 1..={d}, got {dim_data}"
                )));
            }
            Ok(Box::new(TanhNet {
                kind,
                d,
                hidden,
                channels: dim_data,
            }))
        }
        ModelKind::LinearControl => {
            if dim_data != d {
                return Err(Error::InvalidDimension(format!(
                    "target dimension {dim_data} must equal state dimension {d}"
                )));
            }
            Ok(Box::new(LinearControl { d }))
        }
        ModelKind::DriftFree => Ok(Box::new(DriftFree {
            d,
            p: hidden,
            width: dim_data,
        })),
    }
}

/// Value and gradients of `h = phi . p + f`.
#[derive(Clone, Debug, PartialEq)]
pub struct HamiltonianEval {
    pub value: f64,
    pub grad_a: Vec<f64>,
    pub grad_x: Vec<f64>,
}

pub fn hamiltonian(
    model: &dyn Model,
    t: f64,
    x: &[f64],
    costate: &[f64],
    a: &[f64],
    z: &[f64],
) -> Result<HamiltonianEval> {
    let (d, p) = (model.dim_state(), model.dim_param());
    check_len("state", x.len(), d)?;
    check_len("costate", costate.len(), d)?;
    check_len("parameter", a.len(), p)?;
    check_len("data slice", z.len(), model.data_width())?;
    let mut phi = vec![0.0; d];
    model.phi(t, x, a, z, &mut phi);
    let value = phi.iter().zip(costate).map(|(f, q)| f * q).sum::<f64>() + model.running_cost(t, x, a, z);
    let mut grad_a = vec![0.0; p];
    model.param_vjp(t, x, a, z, costate, &mut grad_a);
    let mut grad_x = vec![0.0; d];
    model.state_vjp(t, x, a, z, costate, &mut grad_x);
    Ok(HamiltonianEval { value, grad_a, grad_x })
}

pub(crate) fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::DimensionMismatch(format!(
            "{what} has length {got}, expected {want}"
        )));
    }
    Ok(())
}

/// Strongly convex Gaussian prior `U(a) = kappa |a|^2 / 2 + (p/2) log(2 pi / kappa)`,
/// normalised so that `exp(-U)` integrates to one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianPrior {
    pub kappa: f64,
}

impl GaussianPrior {
    pub fn new(kappa: f64) -> Result<Self> {
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(Error::Precondition(format!("kappa must be positive, got {kappa}")));
        }
        Ok(Self { kappa })
    }

    pub fn potential(&self, a: &[f64]) -> f64 {
        let p = a.len() as f64;
        0.5 * self.kappa * a.iter().map(|v| v * v).sum::<f64>() + 0.5 * p * (std::f64::consts::TAU / self.kappa).ln()
    }

    pub fn grad_potential(&self, a: &[f64], out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip(a) {
            *o = self.kappa * v;
        }
    }

    /// `-U(a)`, i.e. the log-density of `gamma = exp(-U)`.
    pub fn log_density(&self, a: &[f64]) -> f64 {
        -self.potential(a)
    }
}

/// Smallest observed value of `(grad U(a') - grad U(a)).(a' - a) / |a' - a|^2`
/// over random pairs. A prior is `kappa`-convex on the probes when the result
/// is at least `kappa`.
pub fn convexity_modulus(grad_u: impl Fn(&[f64], &mut [f64]), dim: usize, n_pairs: usize, seed: u64) -> f64 {
    let root = StreamKey::new(seed).child(domain::PROBE);
    let mut a = vec![0.0; dim];
    let mut b = vec![0.0; dim];
    let (mut ga, mut gb) = (vec![0.0; dim], vec![0.0; dim]);
    let mut worst = f64::INFINITY;
    for k in 0..n_pairs as u64 {
        root.child(k).child(0).fill_normal(&mut a);
        root.child(k).child(1).fill_normal(&mut b);
        for v in a.iter_mut().chain(b.iter_mut()) {
            *v *= 3.0;
        }
        grad_u(&a, &mut ga);
        grad_u(&b, &mut gb);
        let num: f64 = (0..dim).map(|j| (gb[j] - ga[j]) * (b[j] - a[j])).sum();
        let den: f64 = (0..dim).map(|j| (b[j] - a[j]).powi(2)).sum();
        if den > 0.0 {
            worst = worst.min(num / den);
        }
    }
    worst
}

/// Threshold above which a derivative field is reported as wrong.
pub const SELFCHECK_TOLERANCE: f64 = 1e-4;
const SELFCHECK_STEP: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct FieldError {
    pub field: &'static str,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Max relative error of every analytic derivative against central
/// differences, over random probes.
#[derive(Clone, Debug, Serialize)]
pub struct SelfCheckReport {
    pub n_probes: usize,
    pub tolerance: f64,
    pub fields: Vec<FieldError>,
}

impl SelfCheckReport {
    pub fn passed(&self) -> bool {
        self.fields.iter().all(|f| f.passed)
    }

    pub fn max_error(&self) -> f64 {
        self.fields.iter().map(|f| f.max_rel_error).fold(0.0, f64::max)
    }

    pub fn field(&self, name: &str) -> Option<&FieldError> {
        self.fields.iter().find(|f| f.field == name)
    }
}

// relative error in the max norm, floored at 1 so vanishing derivatives are
// compared absolutely
fn rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
    let diff = analytic.iter().zip(fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = fd.iter().map(|v| v.abs()).fold(1.0, f64::max);
    diff / scale
}

/// Central-difference Jacobian of `map: R^n -> R^m` at `at`, row-major `m x n`.
fn fd_jacobian(at: &[f64], m: usize, map: impl Fn(&[f64], &mut [f64])) -> Vec<f64> {
    let n = at.len();
    let mut jac = vec![0.0; m * n];
    let mut probe = at.to_vec();
    let (mut plus, mut minus) = (vec![0.0; m], vec![0.0; m]);
    for k in 0..n {
        probe[k] = at[k] + SELFCHECK_STEP;
        map(&probe, &mut plus);
        probe[k] = at[k] - SELFCHECK_STEP;
        map(&probe, &mut minus);
        probe[k] = at[k];
        for i in 0..m {
            jac[i * n + k] = (plus[i] - minus[i]) / (2.0 * SELFCHECK_STEP);
        }
    }
    jac
}

pub fn model_grad_selfcheck(model: &dyn Model, n_probes: usize, seed: u64) -> Result<SelfCheckReport> {
    if n_probes == 0 {
        return Err(Error::Precondition("n_probes must be at least 1".into()));
    }
    let (d, p, w) = (model.dim_state(), model.dim_param(), model.data_width());
    let names = [
        "grad_x_phi",
        "grad_a_phi",
        "grad_x_f",
        "grad_a_f",
        "grad_x_g",
        "param_vjp",
        "state_vjp",
    ];
    let mut worst = [0.0f64; 7];
    let root = StreamKey::new(seed).child(domain::SELFCHECK);
    for probe in 0..n_probes as u64 {
        let key = root.child(probe);
        let t = key.uniform(0);
        let mut x = vec![0.0; d];
        let mut a = vec![0.0; p];
        let mut z = vec![0.0; w];
        let mut q = vec![0.0; d];
        key.child(1).fill_normal(&mut x);
        key.child(2).fill_normal(&mut a);
        key.child(3).fill_normal(&mut z);
        key.child(4).fill_normal(&mut q);

        let mut an = vec![0.0; d * d];
        model.grad_x_phi(t, &x, &a, &z, &mut an);
        let fd = fd_jacobian(&x, d, |xx, out| model.phi(t, xx, &a, &z, out));
        worst[0] = worst[0].max(rel_err(&an, &fd));

        let mut an = vec![0.0; d * p];
        model.grad_a_phi(t, &x, &a, &z, &mut an);
        let fd = fd_jacobian(&a, d, |aa, out| model.phi(t, &x, aa, &z, out));
        worst[1] = worst[1].max(rel_err(&an, &fd));

        let mut an = vec![0.0; d];
        model.grad_x_running_cost(t, &x, &a, &z, &mut an);
        let fd = fd_jacobian(&x, 1, |xx, out| out[0] = model.running_cost(t, xx, &a, &z));
        worst[2] = worst[2].max(rel_err(&an, &fd));

        let mut an = vec![0.0; p];
        model.grad_a_running_cost(t, &x, &a, &z, &mut an);
        let fd = fd_jacobian(&a, 1, |aa, out| out[0] = model.running_cost(t, &x, aa, &z));
        worst[3] = worst[3].max(rel_err(&an, &fd));

        let mut an = vec![0.0; d];
        model.grad_x_terminal_cost(&x, &z, &mut an);
        let fd = fd_jacobian(&x, 1, |xx, out| out[0] = model.terminal_cost(xx, &z));
        worst[4] = worst[4].max(rel_err(&an, &fd));

        // the Hamiltonian's gradients, through the (possibly overridden) VJPs
        let h = |xx: &[f64], aa: &[f64]| {
            let mut phi = vec![0.0; d];
            model.phi(t, xx, aa, &z, &mut phi);
            phi.iter().zip(&q).map(|(f, q)| f * q).sum::<f64>() + model.running_cost(t, xx, aa, &z)
        };
        let mut an = vec![0.0; p];
        model.param_vjp(t, &x, &a, &z, &q, &mut an);
        let fd = fd_jacobian(&a, 1, |aa, out| out[0] = h(&x, aa));
        worst[5] = worst[5].max(rel_err(&an, &fd));

        let mut an = vec![0.0; d];
        model.state_vjp(t, &x, &a, &z, &q, &mut an);
        let fd = fd_jacobian(&x, 1, |xx, out| out[0] = h(xx, &a));
        worst[6] = worst[6].max(rel_err(&an, &fd));
    }
    let fields = names
        .iter()
        .zip(worst)
        .map(|(&field, e)| FieldError {
            field,
            max_rel_error: e,
            passed: e <= SELFCHECK_TOLERANCE,
        })
        .collect();
    Ok(SelfCheckReport {
        n_probes,
        tolerance: SELFCHECK_TOLERANCE,
        fields,
    })
}
