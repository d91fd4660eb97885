//! Counter-based sampling of codeword columns and multiplicity patterns.
//!
//! Every draw is a pure function of (seed, stream, sample, column), so
//! parallel workers need no shared state and any subset of columns is
//! bit-identical no matter how many are requested.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::CMat;
use crate::model::{CodebookEnsemble, MSize};

/// Reproducibility coordinates for one Monte-Carlo draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngCoords {
    pub seed: u64,
    pub stream: u64,
    pub sample: u64,
}

impl RngCoords {
    pub fn new(seed: u64, stream: u64, sample: u64) -> Self {
        RngCoords { seed, stream, sample }
    }

    /// Independent child coordinates for a sub-draw.
    pub fn child(&self, lane: u64) -> RngCoords {
        RngCoords { seed: self.seed, stream: splitmix(self.stream ^ lane.rotate_left(17)), sample: self.sample }
    }

    fn rng(&self, counter: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        let mut x = splitmix(self.seed ^ 0x9e37_79b9_7f4a_7c15);
        x = splitmix(x ^ self.stream.wrapping_mul(0xbf58_476d_1ce4_e5b9));
        x = splitmix(x ^ self.sample.wrapping_mul(0x94d0_49bb_1331_11eb));
        x = splitmix(x ^ counter);
        let mut y = x;
        for chunk in key.chunks_exact_mut(8) {
            y = splitmix(y);
            chunk.copy_from_slice(&y.to_le_bytes());
        }
        ChaCha8Rng::from_seed(key)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Streams carved out of the counter space; keeps every consumer of
/// randomness on its own lane.
pub mod streams {
    pub const BOUND_COLUMNS: u64 = 1;
    pub const MULTIPLICITY: u64 = 2;
    pub const FANO: u64 = 3;
    pub const SIM_CODEBOOK: u64 = 10;
    pub const SIM_MESSAGES: u64 = 11;
    pub const SIM_FADING: u64 = 12;
    pub const SIM_NOISE: u64 = 13;
}

/// One sampled codeword column for `column_index`, deterministic per
/// coordinate tuple. Gaussian entries are CN(0, P'); spherical columns are
/// normalized to squared norm exactly n P'.
pub fn sample_column(
    ensemble: CodebookEnsemble,
    p_prime: f64,
    n: usize,
    coords: RngCoords,
    column_index: u64,
) -> Vec<Complex64> {
    let mut rng = coords.rng(column_index.wrapping_mul(2).wrapping_add(0x5bd1))
        ;
    let mut col = Vec::with_capacity(n);
    let half = (p_prime / 2.0).sqrt();
    for _ in 0..n {
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        col.push(Complex64::new(re * half, im * half));
    }
    if ensemble == CodebookEnsemble::Spherical {
        let norm2: f64 = col.iter().map(|z| z.norm_sqr()).sum();
        let scale = (n as f64 * p_prime / norm2).sqrt();
        for z in &mut col {
            *z *= scale;
        }
    }
    col
}

/// n x count matrix of sampled columns.
pub fn sample_columns(
    ensemble: CodebookEnsemble,
    p_prime: f64,
    n: usize,
    count: usize,
    coords: RngCoords,
) -> CMat {
    let mut m = DMatrix::zeros(n, count);
    for j in 0..count {
        let col = sample_column(ensemble, p_prime, n, coords, j as u64);
        for i in 0..n {
            m[(i, j)] = col[i];
        }
    }
    m
}

/// Multiplicity pattern of `ka` i.i.d. message draws from [M].
///
/// Entry i counts how many users picked the i-th distinct message, so the
/// pattern sums to `ka`. For M >= 2^30 the collision event is decided first
/// from the exact log-domain birthday probability; the no-collision branch
/// short-circuits to all-ones, and the (astronomically rare) collision
/// branch returns a single doubleton.
pub fn sample_multiplicities(ka: usize, m: &MSize, coords: RngCoords) -> Vec<u32> {
    if ka == 0 {
        return Vec::new();
    }
    let mut rng = coords.rng(0xc0de);
    if m.bits() < 30 {
        let msize = 1u64 << m.bits();
        let mut counts = std::collections::BTreeMap::new();
        for _ in 0..ka {
            let msg = rng.random_range(0..msize);
            *counts.entry(msg).or_insert(0u32) += 1;
        }
        return counts.into_values().collect();
    }
    // ln P[no collision] = sum ln(1 - i / M)
    let ln_m = m.ln();
    let ln_no_coll: f64 = (1..ka as u64)
        .map(|i| (-((i as f64).ln() - ln_m).exp()).ln_1p())
        .sum();
    let u: f64 = rng.random();
    if u.ln() < ln_no_coll {
        vec![1; ka]
    } else {
        let mut v = vec![1u32; ka - 1];
        v[0] = 2;
        v
    }
}

/// Exact birthday collision probability 1 - prod (1 - i/M) for small M.
pub fn collision_probability(ka: usize, m: &MSize) -> f64 {
    let ln_m = m.ln();
    let ln_no: f64 = (1..ka as u64)
        .map(|i| (-((i as f64).ln() - ln_m).exp()).ln_1p())
        .sum();
    -ln_no.exp_m1()
}

/// Per-sample cache of unit-power Gram matrices shared across every power
/// level of a sweep: scaling columns by sqrt(P') scales the Gram by P'.
pub struct GramCache {
    grams: Vec<CMat>,
    pub s_max: usize,
}

impl GramCache {
    /// Cap on cached Gram storage; larger requests fall back to on-demand
    /// sampling by the caller.
    pub const MEMORY_CAP_BYTES: usize = 2 << 30;

    pub fn build(
        ensemble: CodebookEnsemble,
        n: usize,
        s_max: usize,
        samples: usize,
        seed: u64,
    ) -> Self {
        use rayon::prelude::*;
        let grams: Vec<CMat> = (0..samples)
            .into_par_iter()
            .map(|i| {
                let coords = RngCoords::new(seed, streams::BOUND_COLUMNS, i as u64);
                let c = sample_columns(ensemble, 1.0, n, s_max, coords);
                let mut g = c.adjoint() * &c;
                crate::linalg::hermitize(&mut g);
                g
            })
            .collect();
        GramCache { grams, s_max }
    }

    pub fn samples(&self) -> usize {
        self.grams.len()
    }

    /// Leading s x s block of the unit-power Gram for one sample, scaled to
    /// P'.
    pub fn gram(&self, sample: usize, s: usize, p_prime: f64) -> CMat {
        let g = &self.grams[sample];
        assert!(s <= self.s_max);
        let mut out = g.view((0, 0), (s, s)).into_owned();
        if p_prime != 1.0 {
            let c = Complex64::from(p_prime);
            for v in out.iter_mut() {
                *v *= c;
            }
        }
        out
    }

    pub fn unit_gram(&self, sample: usize) -> &CMat {
        &self.grams[sample]
    }
}
