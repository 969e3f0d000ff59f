//! Particle representation of a relaxed control: `N` parameter paths over the
//! layer-time grid. The empirical measure of the particles at node `l` is the
//! control's time marginal at `t_l`.

use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::assignment;
use crate::error::{Error, Result};
use crate::model::GaussianPrior;
use crate::ode::TimeGrid;
use crate::par;
use crate::rng::{domain, StreamKey};

/// `N x (n+1) x p` block of parameter vectors, stored node-major so that the
/// particles of one time slice are contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamArray {
    n_particles: usize,
    n_nodes: usize,
    dim: usize,
    data: Vec<f64>,
}

impl ParamArray {
    pub fn zeros(n_particles: usize, n_nodes: usize, dim: usize) -> Self {
        Self {
            n_particles,
            n_nodes,
            dim,
            data: vec![0.0; n_particles * n_nodes * dim],
        }
    }

    pub fn from_vec(n_particles: usize, n_nodes: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_particles * n_nodes * dim {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {n_particles}x{n_nodes}x{dim} array",
                data.len()
            )));
        }
        Ok(Self {
            n_particles,
            n_nodes,
            dim,
            data,
        })
    }

    pub fn n_particles(&self) -> usize {
        self.n_particles
    }
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    fn offset(&self, particle: usize, node: usize) -> usize {
        (node * self.n_particles + particle) * self.dim
    }

    #[inline]
    pub fn get(&self, particle: usize, node: usize) -> &[f64] {
        let o = self.offset(particle, node);
        &self.data[o..o + self.dim]
    }

    #[inline]
    pub fn get_mut(&mut self, particle: usize, node: usize) -> &mut [f64] {
        let o = self.offset(particle, node);
        &mut self.data[o..o + self.dim]
    }

    /// All particles at one node, `N x p`.
    pub fn node(&self, node: usize) -> &[f64] {
        let len = self.n_particles * self.dim;
        &self.data[node * len..(node + 1) * len]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &ParamArray) -> bool {
        self.n_particles == other.n_particles && self.n_nodes == other.n_nodes && self.dim == other.dim
    }
}

/// Empirical relaxed control on a time grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleCloud {
    pub params: ParamArray,
    pub grid: TimeGrid,
    pub seed: u64,
}

impl ParticleCloud {
    pub fn new(params: ParamArray, grid: TimeGrid, seed: u64) -> Result<Self> {
        if params.n_nodes() != grid.n_nodes() {
            return Err(Error::DimensionMismatch(format!(
                "cloud has {} nodes, grid has {}",
                params.n_nodes(),
                grid.n_nodes()
            )));
        }
        if params.n_particles() == 0 {
            return Err(Error::InvalidDimension("a cloud needs at least one particle".into()));
        }
        Ok(Self { params, grid, seed })
    }

    pub fn n_particles(&self) -> usize {
        self.params.n_particles()
    }
    pub fn n_nodes(&self) -> usize {
        self.params.n_nodes()
    }
    pub fn dim(&self) -> usize {
        self.params.dim()
    }
    pub fn get(&self, particle: usize, node: usize) -> &[f64] {
        self.params.get(particle, node)
    }
    pub fn node(&self, node: usize) -> &[f64] {
        self.params.node(node)
    }

    /// `(1/N) sum_i sum_{l<n} |theta^i_l|^2 dt`, the V2 second moment.
    pub fn second_moment(&self) -> f64 {
        let dt = self.grid.dt();
        let n = self.n_particles() as f64;
        (0..self.grid.n_steps())
            .map(|l| self.node(l).iter().map(|v| v * v).sum::<f64>() / n * dt)
            .sum()
    }

    /// Per-node mean of the particles, `(n+1) x p`.
    pub fn node_means(&self) -> Vec<f64> {
        let (p, n) = (self.dim(), self.n_particles());
        let mut out = vec![0.0; self.n_nodes() * p];
        for l in 0..self.n_nodes() {
            for i in 0..n {
                for (c, v) in self.get(i, l).iter().enumerate() {
                    out[l * p + c] += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        out
    }

    /// Cloud made of the first `n` particles.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.n_particles() {
            return Err(Error::Precondition(format!(
                "cannot keep {n} of {} particles",
                self.n_particles()
            )));
        }
        let p = self.dim();
        let mut out = ParamArray::zeros(n, self.n_nodes(), p);
        for l in 0..self.n_nodes() {
            out.as_mut_slice()[l * n * p..(l + 1) * n * p].copy_from_slice(&self.node(l)[..n * p]);
        }
        Self::new(out, self.grid, self.seed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitLaw {
    Gaussian { mean: f64, std: f64 },
    Constant { value: f64 },
}

/// Draws every `theta^i_l` independently from `init`, keyed by
/// `(seed, i, l)`: particle `i` is the same whatever `n_particles` is.
pub fn cloud_init(n_particles: usize, grid: TimeGrid, dim: usize, init: InitLaw, seed: u64) -> Result<ParticleCloud> {
    if n_particles == 0 {
        return Err(Error::InvalidDimension("n_particles must be positive".into()));
    }
    if dim == 0 {
        return Err(Error::InvalidDimension("parameter dimension must be positive".into()));
    }
    let mut params = ParamArray::zeros(n_particles, grid.n_nodes(), dim);
    match init {
        InitLaw::Constant { value } => params.as_mut_slice().fill(value),
        InitLaw::Gaussian { mean, std } => {
            if !(std >= 0.0) {
                return Err(Error::Precondition(format!("init std must be nonnegative, got {std}")));
            }
            let root = StreamKey::new(seed).child(domain::INIT);
            par::chunks_mut(params.as_mut_slice(), dim, |idx, out| {
                let (l, i) = (idx / n_particles, idx % n_particles);
                root.child(i as u64).child(l as u64).fill_normal(out);
                for v in out.iter_mut() {
                    *v = mean + std * *v;
                }
            });
        }
    }
    ParticleCloud::new(params, grid, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum W2Method {
    /// Exact for p = 1 via the sorted (quantile) coupling.
    Exact1d,
    /// Exact optimal assignment on squared distances; equal particle counts.
    Hungarian,
    /// Root-mean-square of 1-D distances over fixed random directions.
    /// A lower bound on W2, useful only as a diagnostic.
    Sliced { n_proj: usize },
    /// Exact1d for p = 1, Hungarian up to 512 particles, else 64 slices.
    Auto,
}

/// Integrated 2-Wasserstein distance between two clouds on the same grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CloudDistance {
    /// `sqrt(sum_{l<n} per_node[l]^2 dt)`.
    pub w2t: f64,
    pub per_node: Vec<f64>,
}

const PROJECTION_SEED: u64 = 0x5EED_F00D;

fn sorted_node(points: &[f64]) -> Vec<f64> {
    let mut v = points.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Squared W2 between two 1-D empirical measures (possibly of different
/// sizes), through their quantile functions.
pub fn w2_sq_1d(a: &[f64], b: &[f64]) -> f64 {
    let (a, b) = (sorted_node(a), sorted_node(b));
    w2_sq_sorted(&a, &b)
}

fn w2_sq_sorted(a: &[f64], b: &[f64]) -> f64 {
    if a.len() == b.len() {
        return a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let (mut u, mut acc) = (0.0f64, 0.0);
    while i < a.len() && j < b.len() {
        let next_a = (i + 1) as f64 / na;
        let next_b = (j + 1) as f64 / nb;
        let next = next_a.min(next_b);
        acc += (next - u) * (a[i] - b[j]).powi(2);
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    acc
}

fn w2_sq_hungarian(a: &[f64], b: &[f64], n: usize, p: usize) -> f64 {
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cost[i * n + j] = (0..p).map(|c| (a[i * p + c] - b[j * p + c]).powi(2)).sum();
        }
    }
    assignment::solve(&cost, n).1 / n as f64
}

fn w2_sq_sliced(a: &[f64], b: &[f64], p: usize, n_proj: usize) -> f64 {
    let root = StreamKey::new(PROJECTION_SEED).child(domain::PROJECTION);
    let mut dir = vec![0.0; p];
    let mut total = 0.0;
    for k in 0..n_proj {
        root.child(k as u64).fill_normal(&mut dir);
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        let proj = |pts: &[f64]| -> Vec<f64> {
            pts.chunks_exact(p)
                .map(|x| x.iter().zip(&dir).map(|(x, d)| x * d).sum())
                .collect()
        };
        total += w2_sq_1d(&proj(a), &proj(b));
    }
    total / n_proj as f64
}

pub fn w2_distance(a: &ParticleCloud, b: &ParticleCloud, method: W2Method) -> Result<CloudDistance> {
    if a.grid != b.grid {
        return Err(Error::DimensionMismatch("clouds live on different grids".into()));
    }
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!(
            "parameter dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let p = a.dim();
    let method = match method {
        W2Method::Auto if p == 1 => W2Method::Exact1d,
        W2Method::Auto if a.n_particles() == b.n_particles() && a.n_particles() <= 512 => W2Method::Hungarian,
        W2Method::Auto => W2Method::Sliced { n_proj: 64 },
        m => m,
    };
    match method {
        W2Method::Exact1d if p != 1 => {
            return Err(Error::Precondition("exact1d needs p = 1".into()));
        }
        W2Method::Hungarian if a.n_particles() != b.n_particles() => {
            return Err(Error::Precondition("hungarian needs equal particle counts".into()));
        }
        W2Method::Sliced { n_proj: 0 } => {
            return Err(Error::Precondition("sliced needs at least one projection".into()));
        }
        _ => {}
    }
    let per_node: Vec<f64> = par::map_indexed(a.n_nodes(), |l| {
        let sq = match method {
            W2Method::Exact1d => w2_sq_1d(a.node(l), b.node(l)),
            W2Method::Hungarian => w2_sq_hungarian(a.node(l), b.node(l), a.n_particles(), p),
            W2Method::Sliced { n_proj } => w2_sq_sliced(a.node(l), b.node(l), p, n_proj),
            W2Method::Auto => unreachable!(),
        };
        sq.max(0.0).sqrt()
    });
    let dt = a.grid.dt();
    let w2t = per_node[..a.grid.n_steps()]
        .iter()
        .map(|w| w * w * dt)
        .sum::<f64>()
        .sqrt();
    Ok(CloudDistance { w2t, per_node })
}

/// Distance under the identity coupling of particle indices,
/// `sqrt(sum_{l<n} (1/N) sum_i |a^i_l - b^i_l|^2 dt)`. An upper bound on W2^T.
pub fn paired_distance(a: &ParticleCloud, b: &ParticleCloud) -> Result<f64> {
    if !a.params.same_shape(&b.params) || a.grid != b.grid {
        return Err(Error::DimensionMismatch("paired distance needs equal shapes".into()));
    }
    let dt = a.grid.dt();
    let n = a.n_particles() as f64;
    let sq: f64 = (0..a.grid.n_steps())
        .map(|l| {
            a.node(l)
                .iter()
                .zip(b.node(l))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                / n
                * dt
        })
        .sum();
    Ok(sq.sqrt())
}

fn log_unit_ball_volume(p: usize) -> f64 {
    // V_0 = 1, V_1 = 2, V_p = V_{p-2} 2 pi / p
    let mut v = if p.is_multiple_of(2) { 1.0f64 } else { 2.0 };
    let mut k = if p.is_multiple_of(2) { 2 } else { 3 };
    while k <= p {
        v *= std::f64::consts::TAU / k as f64;
        k += 2;
    }
    v.ln()
}

/// Kozachenko-Leonenko (k = 1) estimate of the differential entropy of
/// `points` (`N x p`), or `None` when two points coincide.
pub fn kl_entropy(points: &[f64], p: usize) -> Option<f64> {
    let n = points.len() / p;
    let nn: Vec<f64> = if p == 1 {
        let s = sorted_node(points);
        let gaps: Vec<f64> = s.windows(2).map(|w| w[1] - w[0]).collect();
        (0..n)
            .map(|i| {
                let left = if i > 0 { gaps[i - 1] } else { f64::INFINITY };
                let right = if i + 1 < n { gaps[i] } else { f64::INFINITY };
                left.min(right)
            })
            .collect()
    } else {
        par::map_indexed(n, |i| {
            let xi = &points[i * p..(i + 1) * p];
            let mut best = f64::INFINITY;
            for j in 0..n {
                if j != i {
                    let d2: f64 = xi
                        .iter()
                        .zip(&points[j * p..(j + 1) * p])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    best = best.min(d2);
                }
            }
            best.sqrt()
        })
    };
    if nn.iter().any(|&r| r <= 0.0) {
        return None;
    }
    // psi(N) - psi(1) = H_{N-1}
    let harmonic: f64 = (1..n).map(|j| 1.0 / j as f64).sum();
    let mean_log = nn.iter().map(|r| r.ln()).sum::<f64>() / n as f64;
    Some(harmonic + log_unit_ball_volume(p) + p as f64 * mean_log)
}

/// Relative entropy of the node-`l` marginal with respect to the prior,
/// `E[log nu - log gamma] = -H(nu) + E_nu[U]`. Returns `+inf` when the
/// nearest-neighbour estimator is undefined (coincident particles).
pub fn entropy_estimate(cloud: &ParticleCloud, node: usize, prior: &GaussianPrior) -> Result<f64> {
    if cloud.n_particles() < 8 {
        return Err(Error::Precondition(format!(
            "entropy estimate needs at least 8 particles, got {}",
            cloud.n_particles()
        )));
    }
    if node >= cloud.n_nodes() {
        return Err(Error::Precondition(format!("node {node} out of range")));
    }
    let p = cloud.dim();
    let pts = cloud.node(node);
    let Some(h) = kl_entropy(pts, p) else {
        return Ok(f64::INFINITY);
    };
    let mean_u = pts.chunks_exact(p).map(|a| prior.potential(a)).sum::<f64>() / cloud.n_particles() as f64;
    Ok(mean_u - h)
}

pub const CSV_HEADER: &str = "particle,node,coord,value";

/// One row per coordinate, values with 17 significant digits.
pub fn write_cloud_csv(cloud: &ParticleCloud, mut w: impl Write) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for i in 0..cloud.n_particles() {
        for l in 0..cloud.n_nodes() {
            for (c, v) in cloud.get(i, l).iter().enumerate() {
                writeln!(w, "{i},{l},{c},{v:.16e}")?;
            }
        }
    }
    Ok(())
}

/// Reads a cloud written by [`write_cloud_csv`]. The grid is not stored in the
/// file and must be supplied; the seed is set to 0.
pub fn read_cloud_csv(r: impl BufRead, grid: TimeGrid) -> Result<ParticleCloud> {
    let mut lines = r.lines();
    let header = lines.next().transpose()?;
    if header.as_deref().map(str::trim) != Some(CSV_HEADER) {
        return Err(Error::Format(format!("expected header '{CSV_HEADER}'")));
    }
    let mut rows = Vec::new();
    let (mut np, mut nn, mut nd) = (0usize, 0usize, 0usize);
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(Error::Format(format!("line {}: expected 4 fields", lineno + 2)));
        }
        let parse_idx = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 2)))
        };
        let (i, l, c) = (parse_idx(f[0])?, parse_idx(f[1])?, parse_idx(f[2])?);
        let v: f64 = f[3]
            .trim()
            .parse()
            .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 2)))?;
        np = np.max(i + 1);
        nn = nn.max(l + 1);
        nd = nd.max(c + 1);
        rows.push((i, l, c, v));
    }
    if rows.len() != np * nn * nd {
        return Err(Error::Format(format!(
            "{} rows do not fill a {np}x{nn}x{nd} cloud",
            rows.len()
        )));
    }
    let mut params = ParamArray::zeros(np, nn, nd);
    let mut seen = vec![false; np * nn * nd];
    for (i, l, c, v) in rows {
        let idx = (l * np + i) * nd + c;
        if std::mem::replace(&mut seen[idx], true) {
            return Err(Error::Format(format!("duplicate entry ({i},{l},{c})")));
        }
        params.as_mut_slice()[idx] = v;
    }
    ParticleCloud::new(params, grid, 0)
}

const BIN_MAGIC: &[u8; 4] = b"MFLC";
const BIN_VERSION: u32 = 1;

/// Little-endian binary layout: magic, version, N, nodes, p, horizon, seed,
/// then the node-major values.
pub fn write_cloud_bin(cloud: &ParticleCloud, mut w: impl Write) -> Result<()> {
    w.write_all(BIN_MAGIC)?;
    w.write_all(&BIN_VERSION.to_le_bytes())?;
    for v in [cloud.n_particles(), cloud.n_nodes(), cloud.dim()] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    w.write_all(&cloud.grid.horizon().to_le_bytes())?;
    w.write_all(&cloud.seed.to_le_bytes())?;
    for v in cloud.params.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_cloud_bin(mut r: impl Read) -> Result<ParticleCloud> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != BIN_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    if u32::from_le_bytes(b4) != BIN_VERSION {
        return Err(Error::Format("unsupported version".into()));
    }
    let mut b8 = [0u8; 8];
    let mut next_u64 = |r: &mut dyn Read| -> Result<u64> {
        r.read_exact(&mut b8)?;
        Ok(u64::from_le_bytes(b8))
    };
    let np = next_u64(&mut r)? as usize;
    let nn = next_u64(&mut r)? as usize;
    let nd = next_u64(&mut r)? as usize;
    let horizon = f64::from_bits(next_u64(&mut r)?);
    let seed = next_u64(&mut r)?;
    if nn < 2 {
        return Err(Error::Format("cloud needs at least two nodes".into()));
    }
    let mut data = vec![0.0; np * nn * nd];
    for v in data.iter_mut() {
        *v = f64::from_bits(next_u64(&mut r)?);
    }
    let grid = TimeGrid::new(horizon, nn - 1)?;
    ParticleCloud::new(ParamArray::from_vec(np, nn, nd, data)?, grid, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(1.0, n).unwrap()
    }

    #[test]
    fn constant_init() {
        let c = cloud_init(5, grid(3), 2, InitLaw::Constant { value: 0.0 }, 1).unwrap();
        assert!(c.params.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gaussian_init_slice_means() {
        let n = 10_000;
        let c = cloud_init(n, grid(3), 1, InitLaw::Gaussian { mean: 0.0, std: 1.0 }, 17).unwrap();
        for l in 0..c.n_nodes() {
            let m = c.node(l).iter().sum::<f64>() / n as f64;
            assert!(m.abs() < 4.0 / (n as f64).sqrt(), "node {l}: mean {m}");
        }
    }

    #[test]
    fn init_is_deterministic_and_prefix_stable() {
        let law = InitLaw::Gaussian { mean: 1.0, std: 0.5 };
        let a = cloud_init(20, grid(4), 3, law, 99).unwrap();
        let b = cloud_init(20, grid(4), 3, law, 99).unwrap();
        assert_eq!(a, b);
        let big = cloud_init(50, grid(4), 3, law, 99).unwrap();
        assert_eq!(big.truncated(20).unwrap(), a);
        assert!(cloud_init(0, grid(4), 1, law, 1).is_err());
    }

    fn shifted(c: &ParticleCloud, by: f64) -> ParticleCloud {
        let mut out = c.clone();
        out.params.as_mut_slice().iter_mut().for_each(|v| *v += by);
        out
    }

    #[test]
    fn w2_translation() {
        let g = TimeGrid::new(2.0, 5).unwrap();
        let a = cloud_init(30, g, 1, InitLaw::Gaussian { mean: 0.0, std: 1.0 }, 2).unwrap();
        let b = shifted(&a, -1.5);
        for method in [W2Method::Exact1d, W2Method::Hungarian] {
            let d = w2_distance(&a, &b, method).unwrap();
            for w in &d.per_node {
                assert!((w - 1.5).abs() < 1e-12);
            }
            assert!((d.w2t - 1.5 * 2f64.sqrt()).abs() < 1e-12);
        }
        let d = w2_distance(&a, &a, W2Method::Auto).unwrap();
        assert_eq!(d.w2t, 0.0);
    }

    #[test]
    fn exact1d_agrees_with_hungarian() {
        for seed in 0..5 {
            let a = cloud_init(40, grid(3), 1, InitLaw::Gaussian { mean: 0.0, std: 1.0 }, seed).unwrap();
            let b = cloud_init(40, grid(3), 1, InitLaw::Gaussian { mean: 0.3, std: 2.0 }, seed + 100).unwrap();
            let e = w2_distance(&a, &b, W2Method::Exact1d).unwrap();
            let h = w2_distance(&a, &b, W2Method::Hungarian).unwrap();
            for (x, y) in e.per_node.iter().zip(&h.per_node) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unequal_sizes_1d() {
        // {0, 1} against {0, 0.5, 1, 1.5}: quantile pairs (0,0),(0,.5),(1,1),(1,1.5)
        let v = w2_sq_1d(&[1.0, 0.0], &[1.5, 0.0, 1.0, 0.5]);
        assert!((v - 0.125).abs() < 1e-15);
    }

    #[test]
    fn hungarian_matches_permutation_brute_force() {
        fn permutations(n: usize) -> Vec<Vec<usize>> {
            if n == 0 {
                return vec![vec![]];
            }
            let mut out = Vec::new();
            for p in permutations(n - 1) {
                for pos in 0..n {
                    let mut q = p.clone();
                    q.insert(pos, n - 1);
                    out.push(q);
                }
            }
            out
        }
        let perms = permutations(8);
        assert_eq!(perms.len(), 40320);
        for seed in 0..3 {
            let a = cloud_init(8, grid(1), 2, InitLaw::Gaussian { mean: 0.0, std: 1.0 }, seed).unwrap();
            let b = cloud_init(8, grid(1), 2, InitLaw::Gaussian { mean: 0.5, std: 1.0 }, seed + 7).unwrap();
            let (pa, pb) = (a.node(0), b.node(0));
            let brute = perms
                .iter()
                .map(|perm| {
                    (0..8)
                        .map(|i| {
                            (0..2)
                                .map(|c| (pa[i * 2 + c] - pb[perm[i] * 2 + c]).powi(2))
                                .sum::<f64>()
                        })
                        .sum::<f64>()
                        / 8.0
                })
                .fold(f64::INFINITY, f64::min);
            let d = w2_distance(&a, &b, W2Method::Hungarian).unwrap();
            assert!((d.per_node[0] - brute.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn sliced_is_lower_bound() {
        let a = cloud_init(30, grid(2), 3, InitLaw::Gaussian { mean: 0.0, std: 1.0 }, 1).unwrap();
        let b = cloud_init(30, grid(2), 3, InitLaw::Gaussian { mean: 1.0, std: 1.0 }, 2).unwrap();
        let h = w2_distance(&a, &b, W2Method::Hungarian).unwrap();
        let s = w2_distance(&a, &b, W2Method::Sliced { n_proj: 64 }).unwrap();
        for (x, y) in s.per_node.iter().zip(&h.per_node) {
            assert!(x <= &(y + 1e-12));
        }
    }

    #[test]
    fn method_shape_errors() {
        let a = cloud_init(4, grid(2), 2, InitLaw::Constant { value: 0.0 }, 0).unwrap();
        let b = cloud_init(5, grid(2), 2, InitLaw::Constant { value: 0.0 }, 0).unwrap();
        assert!(w2_distance(&a, &a, W2Method::Exact1d).is_err());
        assert!(w2_distance(&a, &b, W2Method::Hungarian).is_err());
        let c = cloud_init(4, grid(3), 2, InitLaw::Constant { value: 0.0 }, 0).unwrap();
        assert!(w2_distance(&a, &c, W2Method::Auto).is_err());
    }

    #[test]
    fn paired_distance_bounds_w2() {
        let a = cloud_init(12, grid(3), 2, InitLaw::Gaussian { mean: 0.0, std: 1.0 }, 5).unwrap();
        let b = cloud_init(12, grid(3), 2, InitLaw::Gaussian { mean: 0.0, std: 1.0 }, 6).unwrap();
        let w = w2_distance(&a, &b, W2Method::Hungarian).unwrap().w2t;
        assert!(paired_distance(&a, &b).unwrap() >= w);
        assert_eq!(paired_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn entropy_at_prior_is_zero() {
        let prior = GaussianPrior::new(1.0).unwrap();
        let c = cloud_init(10_000, grid(1), 1, InitLaw::Gaussian { mean: 0.0, std: 1.0 }, 8).unwrap();
        let e = entropy_estimate(&c, 0, &prior).unwrap();
        assert!(e.abs() < 0.05, "{e}");
    }

    #[test]
    fn entropy_shifted_gaussian() {
        let prior = GaussianPrior::new(1.0).unwrap();
        let c = cloud_init(10_000, grid(1), 1, InitLaw::Gaussian { mean: 1.0, std: 1.0 }, 9).unwrap();
        let e = entropy_estimate(&c, 0, &prior).unwrap();
        assert!((e - 0.5).abs() < 0.05, "{e}");
    }

    #[test]
    fn entropy_two_dimensional() {
        // N(0, I_2) against prior kappa = 2: KL = (2/2)(kappa - 1 - ln kappa) = 1 - ln 2
        let prior = GaussianPrior::new(2.0).unwrap();
        let c = cloud_init(4000, grid(1), 2, InitLaw::Gaussian { mean: 0.0, std: 1.0 }, 10).unwrap();
        let e = entropy_estimate(&c, 0, &prior).unwrap();
        assert!((e - (1.0 - 2f64.ln())).abs() < 0.08, "{e}");
    }

    #[test]
    fn entropy_degenerate() {
        let prior = GaussianPrior::new(1.0).unwrap();
        let mut c = cloud_init(10, grid(1), 1, InitLaw::Gaussian { mean: 0.0, std: 1.0 }, 3).unwrap();
        let v = c.get(0, 0)[0];
        c.params.get_mut(1, 0)[0] = v;
        assert_eq!(entropy_estimate(&c, 0, &prior).unwrap(), f64::INFINITY);
        let small = cloud_init(7, grid(1), 1, InitLaw::Gaussian { mean: 0.0, std: 1.0 }, 3).unwrap();
        assert!(entropy_estimate(&small, 0, &prior).is_err());
    }

    #[test]
    fn binary_roundtrip() {
        let a = cloud_init(6, grid(3), 2, InitLaw::Gaussian { mean: 0.0, std: 1.0 }, 4).unwrap();
        let mut buf = Vec::new();
        write_cloud_bin(&a, &mut buf).unwrap();
        assert_eq!(read_cloud_bin(&buf[..]).unwrap(), a);
        assert!(read_cloud_bin(&buf[1..]).is_err());
    }

    #[test]
    fn csv_rejects_bad_input() {
        let g = grid(1);
        assert!(read_cloud_csv("a,b,c,d\n".as_bytes(), g).is_err());
        assert!(read_cloud_csv("particle,node,coord,value\n0,0,0,1\n".as_bytes(), g).is_err());
        let ok = "particle,node,coord,value\n0,0,0,1\n0,1,0,2\n";
        let c = read_cloud_csv(ok.as_bytes(), g).unwrap();
        assert_eq!(c.params.as_slice(), &[1.0, 2.0]);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn csv_roundtrip_lossless(data in prop::collection::vec(
            prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO, 12)) {
            let g = TimeGrid::new(1.0, 2).unwrap();
            let c = ParticleCloud::new(ParamArray::from_vec(2, 3, 2, data).unwrap(), g, 0).unwrap();
            let mut buf = Vec::new();
            write_cloud_csv(&c, &mut buf).unwrap();
            let back = read_cloud_csv(&buf[..], g).unwrap();
            prop_assert_eq!(back.params, c.params);
        }

        #[test]
        fn w2_metric_axioms(s1 in 0u64..500, s2 in 0u64..500, s3 in 0u64..500, shift in -2.0f64..2.0) {
            let g = TimeGrid::new(1.0, 2).unwrap();
            let law = InitLaw::Gaussian { mean: 0.0, std: 1.0 };
            let a = cloud_init(9, g, 2, law, s1).unwrap();
            let b = cloud_init(9, g, 2, InitLaw::Gaussian { mean: shift, std: 1.0 }, s2).unwrap();
            let c = cloud_init(9, g, 2, law, s3).unwrap();
            let d = |x: &ParticleCloud, y: &ParticleCloud| w2_distance(x, y, W2Method::Hungarian).unwrap().w2t;
            // the assignment runs on the transposed cost, so only rounding may differ
            prop_assert!((d(&a, &b) - d(&b, &a)).abs() <= 1e-12 * d(&a, &b).max(1.0));
            prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-12);
            let a1 = cloud_init(9, g, 1, law, s1).unwrap();
            let b1 = cloud_init(9, g, 1, InitLaw::Gaussian { mean: shift, std: 1.0 }, s2).unwrap();
            let c1 = cloud_init(9, g, 1, law, s3).unwrap();
            let e = |x: &ParticleCloud, y: &ParticleCloud| w2_distance(x, y, W2Method::Exact1d).unwrap().w2t;
            prop_assert_eq!(e(&a1, &b1), e(&b1, &a1));
            prop_assert!(e(&a1, &c1) <= e(&a1, &b1) + e(&b1, &c1) + 1e-12);
        }
    }
}
