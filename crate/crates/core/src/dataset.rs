//! Training data `(xi, zeta)`: `xi` is the initial state, `zeta` either a
//! vector or a path sampled on the solver grid.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::ode::TimeGrid;
use crate::rng::{domain, StreamKey};

#[derive(Clone, Debug, PartialEq)]
pub enum DataValue {
    Vector(Vec<f64>),
    /// `(n+1) x width`, one row per grid node.
    Path {
        width: usize,
        values: Vec<f64>,
    },
}

impl DataValue {
    /// The slice seen by the layer at `node`.
    #[inline]
    pub fn slice(&self, node: usize) -> &[f64] {
        match self {
            DataValue::Vector(v) => v,
            DataValue::Path { width, values } => &values[node * width..(node + 1) * width],
        }
    }

    pub fn width(&self) -> usize {
        match self {
            DataValue::Vector(v) => v.len(),
            DataValue::Path { width, .. } => *width,
        }
    }

    fn values(&self) -> &[f64] {
        match self {
            DataValue::Vector(v) => v,
            DataValue::Path { values, .. } => values,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSample {
    pub xi: Vec<f64>,
    pub zeta: DataValue,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<DataSample>,
    pub tag: String,
    pub seed: u64,
}

impl Dataset {
    pub fn new(samples: Vec<DataSample>, tag: impl Into<String>, seed: u64) -> Result<Self> {
        let ds = Self {
            samples,
            tag: tag.into(),
            seed,
        };
        ds.check_uniform()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn check_uniform(&self) -> Result<()> {
        let Some(first) = self.samples.first() else {
            return Err(Error::Precondition("dataset must contain at least one sample".into()));
        };
        for (k, s) in self.samples.iter().enumerate() {
            if s.xi.len() != first.xi.len()
                || s.zeta.width() != first.zeta.width()
                || s.zeta.values().len() != first.zeta.values().len()
            {
                return Err(Error::DimensionMismatch(format!(
                    "sample {k} differs in shape from sample 0"
                )));
            }
        }
        Ok(())
    }

    /// Checks the samples against a model and grid.
    pub fn validate(&self, model: &dyn Model, grid: &TimeGrid) -> Result<()> {
        self.check_uniform()?;
        let s = &self.samples[0];
        if s.xi.len() != model.dim_state() {
            return Err(Error::DimensionMismatch(format!(
                "xi has length {}, model state dimension is {}",
                s.xi.len(),
                model.dim_state()
            )));
        }
        if s.zeta.width() != model.data_width() {
            return Err(Error::DimensionMismatch(format!(
                "data slice has width {}, model expects {}",
                s.zeta.width(),
                model.data_width()
            )));
        }
        if let DataValue::Path { width, values } = &s.zeta {
            if values.len() != width * grid.n_nodes() {
                return Err(Error::DimensionMismatch(format!(
                    "data path has {} rows, grid has {} nodes",
                    values.len() / width.max(&1),
                    grid.n_nodes()
                )));
            }
        }
        Ok(())
    }

    /// First `n` samples (datasets drawn from the same seed are nested).
    pub fn prefix(&self, n: usize) -> Result<Dataset> {
        if n == 0 || n > self.len() {
            return Err(Error::Precondition(format!(
                "cannot take {n} of {} samples",
                self.len()
            )));
        }
        Dataset::new(self.samples[..n].to_vec(), self.tag.clone(), self.seed)
    }

    /// SHA-256 over the bit patterns of every value, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.samples {
            for v in s.xi.iter().chain(s.zeta.values()) {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Target {
    Identity,
    /// `sin(pi z)` coordinate-wise.
    Sine,
    /// `scale * z + offset` coordinate-wise.
    Affine {
        scale: f64,
        offset: f64,
    },
    Cubic,
}

impl Target {
    fn apply(&self, z: f64) -> f64 {
        match *self {
            Target::Identity => z,
            Target::Sine => (std::f64::consts::PI * z).sin(),
            Target::Affine { scale, offset } => scale * z + offset,
            Target::Cubic => z * z * z,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetKind {
    /// `zeta ~ U[-1, 1]^d`, `xi = target(zeta)`.
    Regression { target: Target },
    /// Random sinusoids as true paths, observed at `observation_nodes` and
    /// held piecewise constant between observations.
    Timeseries {
        channels: usize,
        observation_nodes: Vec<usize>,
    },
}

/// Sample `k` depends only on `(seed, k)`, so a dataset of size `N` is the
/// prefix of any larger one drawn with the same seed.
pub fn generate_dataset(kind: &DatasetKind, n_samples: usize, d: usize, seed: u64, grid: &TimeGrid) -> Result<Dataset> {
    if n_samples == 0 {
        return Err(Error::Precondition("n_samples must be at least 1".into()));
    }
    if d == 0 {
        return Err(Error::InvalidDimension("state dimension must be positive".into()));
    }
    let root = StreamKey::new(seed).child(domain::DATA);
    let samples = match kind {
        DatasetKind::Regression { target } => (0..n_samples)
            .map(|k| {
                let key = root.child(k as u64);
                let zeta: Vec<f64> = (0..d).map(|c| 2.0 * key.uniform(c as u64) - 1.0).collect();
                let xi = zeta.iter().map(|&z| target.apply(z)).collect();
                DataSample {
                    xi,
                    zeta: DataValue::Vector(zeta),
                }
            })
            .collect(),
        DatasetKind::Timeseries {
            channels,
            observation_nodes,
        } => {
            let c = *channels;
            if c == 0 || c > d {
                return Err(Error::InvalidDimension(format!("channels must be in 1..={d}, got {c}")));
            }
            let mut obs = observation_nodes.clone();
            obs.sort_unstable();
            obs.dedup();
            if obs.is_empty() || *obs.last().unwrap() >= grid.n_nodes() {
                return Err(Error::Precondition(
                    "observation nodes must be nonempty and lie on the grid".into(),
                ));
            }
            (0..n_samples)
                .map(|k| timeseries_sample(root.child(k as u64), c, d, &obs, grid))
                .collect()
        }
    };
    let tag = match kind {
        DatasetKind::Regression { .. } => "regression",
        DatasetKind::Timeseries { .. } => "timeseries",
    };
    Dataset::new(samples, tag, seed)
}

fn timeseries_sample(key: StreamKey, c: usize, d: usize, obs: &[usize], grid: &TimeGrid) -> DataSample {
    let nodes = grid.n_nodes();
    let params: Vec<(f64, f64, f64)> = (0..c)
        .map(|ch| {
            let k = key.child(ch as u64);
            let amp = 0.5 + k.uniform(0);
            let freq = 1.0 + 2.0 * k.uniform(1);
            let phase = std::f64::consts::TAU * k.uniform(2);
            (amp, freq, phase)
        })
        .collect();
    let truth = |l: usize, ch: usize| {
        let (a, w, ph) = params[ch];
        a * (w * grid.node(l) + ph).sin()
    };
    // row l = [observed (held) values, true values]
    let mut values = vec![0.0; nodes * 2 * c];
    for l in 0..nodes {
        // most recent observation at or before t_l; before the first one, the first
        let src = obs.iter().rev().find(|&&o| o <= l).copied().unwrap_or(obs[0]);
        for ch in 0..c {
            values[l * 2 * c + ch] = truth(src, ch);
            values[l * 2 * c + c + ch] = truth(l, ch);
        }
    }
    let mut xi = vec![0.0; d];
    xi[..c].copy_from_slice(&values[..c]);
    DataSample {
        xi,
        zeta: DataValue::Path { width: 2 * c, values },
    }
}
