//! Stateless keyed random streams.
//!
//! Every draw is a pure function of a key path (seed, domain, indices...) and
//! a counter, so a particle's noise does not depend on how many other
//! particles exist, which thread computed it, or in what order. Two runs that
//! share keys see the same Brownian increments, which is what synchronous
//! coupling needs.
//!
//! The mixing function is the SplitMix64 finalizer; a stream's `counter`-th
//! output is the SplitMix64 sequence evaluated at that position.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Key domains, so that e.g. initialisation and Langevin noise never collide.
pub mod domain {
    pub const INIT: u64 = 1;
    pub const LANGEVIN: u64 = 2;
    pub const DATA: u64 = 3;
    pub const PROBE: u64 = 4;
    pub const PROJECTION: u64 = 5;
    pub const SELFCHECK: u64 = 6;
}

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey(u64);

impl StreamKey {
    pub fn new(seed: u64) -> Self {
        StreamKey(mix(seed ^ GOLDEN))
    }

    /// Derive an independent sub-stream. Order matters:
    /// `k.child(a).child(b) != k.child(b).child(a)`.
    #[inline]
    pub fn child(self, index: u64) -> Self {
        StreamKey(mix(self.0 ^ mix(index.wrapping_add(GOLDEN))))
    }

    #[inline]
    pub fn bits(self, counter: u64) -> u64 {
        mix(self.0.wrapping_add(counter.wrapping_add(1).wrapping_mul(GOLDEN)))
    }

    /// Uniform on the open interval (0, 1).
    #[inline]
    pub fn uniform(self, counter: u64) -> f64 {
        ((self.bits(counter) >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller. Counters `2j` and `2j+1` share a
    /// uniform pair, so `normal(c)` is the same whether it is drawn alone or
    /// through [`StreamKey::fill_normal`].
    #[inline]
    pub fn normal(self, counter: u64) -> f64 {
        let pair = counter / 2;
        let (c, s) = self.normal_pair(pair);
        if counter.is_multiple_of(2) {
            c
        } else {
            s
        }
    }

    #[inline]
    fn normal_pair(self, pair: u64) -> (f64, f64) {
        let u1 = self.uniform(2 * pair);
        let u2 = self.uniform(2 * pair + 1);
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        (r * c, r * s)
    }

    pub fn fill_normal(self, out: &mut [f64]) {
        let mut chunks = out.chunks_exact_mut(2);
        let mut pair = 0u64;
        for ch in &mut chunks {
            let (c, s) = self.normal_pair(pair);
            ch[0] = c;
            ch[1] = s;
            pair += 1;
        }
        if let [last] = chunks.into_remainder() {
            *last = self.normal_pair(pair).0;
        }
    }

    pub fn fill_uniform(self, out: &mut [f64]) {
        for (c, v) in out.iter_mut().enumerate() {
            *v = self.uniform(c as u64);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fill_matches_indexed_draws() {
        let k = StreamKey::new(7).child(3);
        let mut v = vec![0.0; 5];
        k.fill_normal(&mut v);
        for (c, x) in v.iter().enumerate() {
            assert_eq!(*x, k.normal(c as u64));
        }
    }

    #[test]
    fn child_order_matters() {
        let k = StreamKey::new(1);
        assert_ne!(k.child(1).child(2), k.child(2).child(1));
        assert_ne!(k.child(0), k);
    }

    #[test]
    fn normal_moments() {
        let k = StreamKey::new(42);
        let n = 200_000;
        let (mut s1, mut s2, mut s4) = (0.0, 0.0, 0.0);
        for c in 0..n {
            let x = k.normal(c);
            s1 += x;
            s2 += x * x;
            s4 += x * x * x * x;
        }
        let n = n as f64;
        assert!((s1 / n).abs() < 0.01);
        assert!((s2 / n - 1.0).abs() < 0.015);
        assert!((s4 / n - 3.0).abs() < 0.08);
    }

    #[test]
    fn uniform_in_open_interval() {
        let k = StreamKey::new(0);
        for c in 0..10_000 {
            let u = k.uniform(c);
            assert!(u > 0.0 && u < 1.0);
        }
    }

    #[test]
    fn sibling_streams_uncorrelated() {
        let root = StreamKey::new(9).child(domain::LANGEVIN);
        let n = 100_000u64;
        let mut cross = 0.0;
        let mut lag = 0.0;
        for i in 0..n {
            let a = root.child(i).child(0).normal(0);
            let b = root.child(i).child(1).normal(0);
            let c = root.child(i + 1).child(0).normal(0);
            cross += a * b;
            lag += a * c;
        }
        assert!((cross / n as f64).abs() < 0.01);
        assert!((lag / n as f64).abs() < 0.01);
    }
}
