//! Scenario definition: every system parameter that enters a bound.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("spherical ensemble requires P' = P (p_prime_ratio = 1), got {0}")]
    SphericalPowerMismatch(f64),
    #[error("explicit pmf must sum to 1 within 1e-12, got {0}")]
    PmfNotNormalized(f64),
    #[error("unknown scenario key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {msg}")]
    BadValue { key: String, msg: String },
}

/// Codebook size M = 2^J, held in log form; J can far exceed 64.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MSize {
    log2: u32,
}

impl MSize {
    pub fn from_bits(j: u32) -> Self {
        MSize { log2: j }
    }

    pub fn bits(&self) -> u32 {
        self.log2
    }

    /// The codebook can be materialized for oracle tests when M <= 2^16.
    pub fn as_small(&self) -> Option<usize> {
        (self.log2 <= 16).then(|| 1usize << self.log2)
    }

    /// ln C(M, k).
    pub fn log_binomial(&self, k: u64) -> f64 {
        numerics::log_binomial_pow2(self.log2, 0, k)
    }

    /// ln C(M - subtract, k).
    pub fn log_binomial_less(&self, subtract: u64, k: u64) -> f64 {
        numerics::log_binomial_pow2(self.log2, subtract, k)
    }

    /// ln M.
    pub fn ln(&self) -> f64 {
        self.log2 as f64 * std::f64::consts::LN_2
    }
}

/// Distribution of the number of active users.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum KaDistribution {
    Fixed(usize),
    Binomial { k: usize, p: f64 },
    /// Explicit pmf over [0 : len-1].
    Pmf(Vec<f64>),
}

impl KaDistribution {
    pub fn validate(&self) -> Result<(), ConfigError> {
        match self {
            KaDistribution::Fixed(_) => Ok(()),
            KaDistribution::Binomial { p, .. } => {
                if !(0.0..=1.0).contains(p) {
                    return Err(ConfigError::Invalid(format!("binomial p = {p} out of [0,1]")));
                }
                Ok(())
            }
            KaDistribution::Pmf(v) => {
                if v.is_empty() || v.iter().any(|&x| !(x >= 0.0)) {
                    return Err(ConfigError::Invalid("pmf must be nonempty and nonnegative".into()));
                }
                let s: f64 = v.iter().sum();
                if (s - 1.0).abs() > 1e-12 {
                    return Err(ConfigError::PmfNotNormalized(s));
                }
                Ok(())
            }
        }
    }

    /// Largest k with positive mass (support upper end).
    pub fn support_max(&self) -> usize {
        match self {
            KaDistribution::Fixed(k) => *k,
            KaDistribution::Binomial { k, p } => {
                if *p == 0.0 {
                    0
                } else {
                    *k
                }
            }
            KaDistribution::Pmf(v) => v.iter().rposition(|&x| x > 0.0).unwrap_or(0),
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            KaDistribution::Fixed(k) => *k as f64,
            KaDistribution::Binomial { k, p } => *k as f64 * p,
            KaDistribution::Pmf(v) => v.iter().enumerate().map(|(i, &q)| i as f64 * q).sum(),
        }
    }

    /// P[Ka = k].
    pub fn pmf(&self, k: usize) -> f64 {
        self.ln_pmf(k).exp()
    }

    /// ln P[Ka = k]; -inf outside the support.
    pub fn ln_pmf(&self, k: usize) -> f64 {
        match self {
            KaDistribution::Fixed(k0) => {
                if k == *k0 {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            KaDistribution::Binomial { k: n, p } => {
                if k > *n {
                    return f64::NEG_INFINITY;
                }
                if *p == 0.0 {
                    return if k == 0 { 0.0 } else { f64::NEG_INFINITY };
                }
                if *p == 1.0 {
                    return if k == *n { 0.0 } else { f64::NEG_INFINITY };
                }
                numerics::log_binomial(*n as u64, k as u64)
                    + k as f64 * p.ln()
                    + (*n - k) as f64 * (-p).ln_1p()
            }
            KaDistribution::Pmf(v) => {
                let q = v.get(k).copied().unwrap_or(0.0);
                if q > 0.0 {
                    q.ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    /// Mode of the distribution (smallest index on ties).
    pub fn mode(&self) -> usize {
        match self {
            KaDistribution::Fixed(k) => *k,
            _ => {
                let mut best = (0usize, f64::NEG_INFINITY);
                for k in 0..=self.support_max() {
                    let q = self.pmf(k);
                    if q > best.1 {
                        best = (k, q);
                    }
                }
                best.0
            }
        }
    }
}

/// P[Ka = k]; 0 outside the support.
pub fn ka_pmf(d: &KaDistribution, k: usize) -> f64 {
    d.pmf(k)
}

/// Smallest central interval [K_l : K_u] holding at least 1 - tail_mass of
/// the pmf, grown outward from the mode (larger-mass side first).
pub fn truncation_interval(d: &KaDistribution, tail_mass: f64) -> (usize, usize) {
    assert!(tail_mass > 0.0 && tail_mass < 1.0);
    let hi = d.support_max();
    let mode = d.mode();
    let (mut lo, mut up) = (mode, mode);
    let mut mass = d.pmf(mode);
    let target = 1.0 - tail_mass;
    while mass < target && (lo > 0 || up < hi) {
        let left = if lo > 0 { d.pmf(lo - 1) } else { f64::NEG_INFINITY };
        let right = if up < hi { d.pmf(up + 1) } else { f64::NEG_INFINITY };
        if left >= right {
            lo -= 1;
            mass += left;
        } else {
            up += 1;
            mass += right;
        }
    }
    (lo, up)
}

/// E_b in dB: 10 log10(n P / J).
pub fn energy_per_bit_db(n: usize, p: f64, j: u32) -> f64 {
    10.0 * (n as f64 * p / j as f64).log10()
}

/// Inverse of [`energy_per_bit_db`]: the power giving this E_b.
pub fn power_from_eb_db(n: usize, eb_db: f64, j: u32) -> f64 {
    10f64.powf(eb_db / 10.0) * j as f64 / n as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CodebookEnsemble {
    /// i.i.d. circularly-symmetric complex Gaussian entries of variance P'.
    Gaussian,
    /// Columns drawn uniformly from the sphere of radius sqrt(n P').
    Spherical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorTargets {
    pub eps_md: f64,
    pub eps_fa: f64,
}

impl ErrorTargets {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [("eps_md", self.eps_md), ("eps_fa", self.eps_fa)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(ConfigError::Invalid(format!("{name} = {v} out of (0,1)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub samples: usize,
    pub seed: u64,
    /// Report mean + 2 SE instead of the mean.
    pub conservative: bool,
}

impl Default for McConfig {
    fn default() -> Self {
        // 2000 samples matches the reference experiments.
        McConfig { samples: 2000, seed: 0, conservative: false }
    }
}

/// Full system description; every bound takes one of these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    /// Blocklength (channel uses).
    pub n: usize,
    /// Receive antennas.
    pub l: usize,
    /// Payload bits; M = 2^J.
    pub j: u32,
    /// Potential users.
    pub k: usize,
    /// Max power per symbol (linear); absent when a solver sweeps P.
    pub power: Option<f64>,
    /// P'/P for the Gaussian ensemble; spherical requires 1.
    pub p_prime_ratio: Option<f64>,
    pub ensemble: CodebookEnsemble,
    pub ka_dist: KaDistribution,
    pub targets: ErrorTargets,
    pub mc: McConfig,
    pub k_l: Option<usize>,
    pub k_u: Option<usize>,
    /// Decoding radius r'.
    pub r_prime: usize,
    pub tail_mass: Option<f64>,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n < 1 || self.l < 1 || self.j < 1 || self.k < 1 {
            return Err(ConfigError::Invalid("n, L, J, K must all be >= 1".into()));
        }
        self.ka_dist.validate()?;
        self.targets.validate()?;
        if let Some(p) = self.power {
            if !(p > 0.0) {
                return Err(ConfigError::Invalid(format!("P = {p} must be positive")));
            }
        }
        if let Some(r) = self.p_prime_ratio {
            if !(r > 0.0 && r <= 1.0) {
                return Err(ConfigError::Invalid(format!("p_prime_ratio = {r} out of (0,1]")));
            }
            if self.ensemble == CodebookEnsemble::Spherical && r != 1.0 {
                return Err(ConfigError::SphericalPowerMismatch(r));
            }
        }
        if self.ka_dist.support_max() > self.k {
            return Err(ConfigError::Invalid("Ka support exceeds K".into()));
        }
        if let (Some(kl), Some(ku)) = (self.k_l, self.k_u) {
            if kl > ku || ku > self.k {
                return Err(ConfigError::Invalid(format!("bad truncation [{kl}:{ku}]")));
            }
        }
        if self.mc.samples < 1 {
            return Err(ConfigError::Invalid("mc_samples must be >= 1".into()));
        }
        Ok(())
    }

    pub fn m(&self) -> MSize {
        MSize::from_bits(self.j)
    }

    /// Tail mass excluded by the truncation interval; the excluded mass
    /// enters p0 additively, so it defaults to a tenth of the tighter
    /// error target.
    pub fn tail_mass(&self) -> f64 {
        self.tail_mass
            .unwrap_or_else(|| (self.targets.eps_md.min(self.targets.eps_fa) / 10.0).max(1e-300))
    }

    /// Resolved truncation interval [K_l : K_u].
    pub fn truncation(&self) -> (usize, usize) {
        match (self.k_l, self.k_u) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                let (a, b) = truncation_interval(&self.ka_dist, self.tail_mass());
                (self.k_l.unwrap_or(a), self.k_u.unwrap_or(b))
            }
        }
    }

    /// Candidate P' values for the outer minimization at power `p`.
    ///
    /// Spherical pins P' = P; Gaussian sweeps 8 log-spaced ratios capped at
    /// 0.99 P so the power-violation mass p0 stays controllable.
    pub fn p_prime_grid(&self, p: f64) -> Vec<f64> {
        if let Some(r) = self.p_prime_ratio {
            return vec![r * p];
        }
        match self.ensemble {
            CodebookEnsemble::Spherical => vec![p],
            CodebookEnsemble::Gaussian => {
                let n = 8;
                (0..n)
                    .map(|i| {
                        let t = i as f64 / (n - 1) as f64;
                        0.99 * p * 10f64.powf(-1.5 * (1.0 - t))
                    })
                    .collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pmf_basics() {
        let f = KaDistribution::Fixed(300);
        assert_eq!(ka_pmf(&f, 300), 1.0);
        assert_eq!(ka_pmf(&f, 299), 0.0);
        let b = KaDistribution::Binomial { k: 2, p: 0.5 };
        assert!((ka_pmf(&b, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn pmf_large_binomial_log_domain() {
        let b = KaDistribution::Binomial { k: 1200, p: 0.5 };
        // Frozen from an extended-precision log-gamma oracle.
        let expect = 0.023_028_145_268_602_68;
        let got = ka_pmf(&b, 600);
        assert!((got - expect).abs() <= 1e-10 * expect, "got {got}");
    }

    #[test]
    fn truncation_examples() {
        let f = KaDistribution::Fixed(300);
        assert_eq!(truncation_interval(&f, 0.3), (300, 300));

        let b = KaDistribution::Binomial { k: 4, p: 0.5 };
        assert_eq!(truncation_interval(&b, 0.2), (1, 3));

        let u = KaDistribution::Pmf(vec![0.2; 5]);
        let (lo, hi) = truncation_interval(&u, 0.5);
        let mass: f64 = (lo..=hi).map(|k| u.pmf(k)).sum();
        assert!(mass >= 0.5);
    }

    #[test]
    fn truncation_interval_grows_as_tail_shrinks() {
        let b = KaDistribution::Binomial { k: 40, p: 0.5 };
        let mut prev = (usize::MAX, 0usize);
        for tail in [0.5, 0.1, 0.01, 0.001] {
            let (lo, hi) = truncation_interval(&b, tail);
            let mass: f64 = (lo..=hi).map(|k| b.pmf(k)).sum();
            assert!(mass >= 1.0 - tail);
            assert!(lo <= prev.0 && hi >= prev.1);
            prev = (lo, hi);
        }
    }

    #[test]
    fn energy_axis_convention() {
        assert!((energy_per_bit_db(100, 1.0, 100) - 0.0).abs() < 1e-12);
        assert!((energy_per_bit_db(1000, 0.01, 100) + 10.0).abs() < 1e-12);
        let p = power_from_eb_db(1000, -10.0, 100);
        assert!((p - 0.01).abs() < 1e-15);
    }

    #[test]
    fn msize_paths() {
        let m = MSize::from_bits(8);
        assert_eq!(m.as_small(), Some(256));
        assert!((m.log_binomial(2) - numerics::log_binomial(256, 2)).abs() < 1e-12);
        assert_eq!(MSize::from_bits(100).as_small(), None);
    }

    #[test]
    fn scenario_validation() {
        let mut s = Scenario {
            n: 100,
            l: 8,
            j: 16,
            k: 20,
            power: Some(0.1),
            p_prime_ratio: None,
            ensemble: CodebookEnsemble::Spherical,
            ka_dist: KaDistribution::Binomial { k: 20, p: 0.5 },
            targets: ErrorTargets { eps_md: 0.01, eps_fa: 0.01 },
            mc: McConfig::default(),
            k_l: None,
            k_u: None,
            r_prime: 0,
            tail_mass: None,
        };
        assert!(s.validate().is_ok());
        s.p_prime_ratio = Some(0.5);
        assert!(matches!(s.validate(), Err(ConfigError::SphericalPowerMismatch(_))));
        s.p_prime_ratio = None;
        s.ensemble = CodebookEnsemble::Gaussian;
        assert!(s.validate().is_ok());
        assert_eq!(s.p_prime_grid(1.0).len(), 8);
        assert!(s.p_prime_grid(1.0).iter().all(|&x| x > 0.0 && x <= 0.99));

        let (kl, ku) = s.truncation();
        assert!(kl <= 10 && ku >= 10);
        let mass: f64 = (kl..=ku).map(|k| s.ka_dist.pmf(k)).sum();
        assert!(mass >= 1.0 - s.tail_mass());
    }
}
