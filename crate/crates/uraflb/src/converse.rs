//! Lower bounds on the minimum energy-per-bit: two single-user reductions
//! and a Fano-type bound, plus their envelope.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::codebook::GramCache;
use crate::model::{
    energy_per_bit_db, power_from_eb_db, CodebookEnsemble, ConfigError, ErrorTargets, McConfig,
    Scenario,
};
use crate::numerics::{binary_entropy, chi2_cdf, chi2_isf_ln, chi2_quantile, chi2_sf_ln};
use crate::report::{BoundReport, OptTrace};

/// List-size inflation sweep K_hat = K_a + c, c in [0 : C_MAX].
const C_MAX: usize = 8;

const EB_FLOOR_DB: f64 = -40.0;
const EB_CEIL_DB: f64 = 40.0;

/// Per-activity-level misdetection budgets and list sizes satisfying the
/// summed constraints; the feasibility searches sweep these implicitly.
#[derive(Debug, Clone)]
pub struct EpsAllocation {
    pub eps: Vec<(usize, f64)>,
    pub k_hat: Vec<(usize, usize)>,
}

/// Multiplier ladder for the budgeted allocation sweeps.
fn lambda_grid() -> Vec<f64> {
    let mut v = vec![0.0];
    for i in 0..=48 {
        v.push(10f64.powf(-8.0 + i as f64 / 3.0));
    }
    v.push(f64::INFINITY);
    v
}

/// Smallest power on the bisection lattice where `feasible` flips true;
/// None when even the +40 dB ceiling fails.
fn bisect_power(s: &Scenario, feasible: &mut dyn FnMut(f64) -> bool) -> Option<f64> {
    let p_floor = power_from_eb_db(s.n, EB_FLOOR_DB, s.j);
    let p_ceil = power_from_eb_db(s.n, EB_CEIL_DB, s.j);
    if feasible(p_floor) {
        return Some(p_floor);
    }
    let mut lo;
    let mut hi = p_floor;
    loop {
        lo = hi;
        hi *= 2.0;
        if hi > p_ceil {
            return None;
        }
        if feasible(hi) {
            break;
        }
    }
    while 10.0 * (hi / lo).log10() > 0.05 {
        let mid = (lo * hi).sqrt();
        if feasible(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}

fn db_report(s: &Scenario, p: f64, source: &str, mc: &McConfig) -> BoundReport {
    BoundReport {
        value: energy_per_bit_db(s.n, p, s.j),
        se: 0.025,
        samples: mc.samples,
        seed: mc.seed,
        feasible: true,
        trace: OptTrace { p_star: Some(p), source: Some(source.into()), ..OptTrace::default() },
    }
}

/// Active support of the activity distribution, excluding the empty level
/// (no user constraint applies when nobody transmits).
fn positive_support(s: &Scenario) -> Vec<usize> {
    (1..=s.ka_dist.support_max()).filter(|&k| s.ka_dist.pmf(k) > 0.0).collect()
}

/// Single-user reduction: a code must leave every activity level a
/// chi-square list-decoding margin; the allocation over levels is found by
/// a Lagrangian sweep on the false-alarm multiplier.
pub fn single_user_converse(s: &Scenario, targets: &ErrorTargets) -> BoundReport {
    let support = positive_support(s);
    if support.is_empty() {
        let p = power_from_eb_db(s.n, EB_FLOOR_DB, s.j);
        return db_report(s, p, "single_user", &s.mc);
    }
    let dof = 2 * s.l as u32;
    let ln2 = std::f64::consts::LN_2;

    let mut feasible = |p: f64| -> bool {
        // Minimal eps per (level, inflation) from inverting the decoding
        // constraint J - log2 K_hat <= -log2 P[chi2 >= (1+(n+1)P) r].
        let mut eps_min = vec![[0.0f64; C_MAX + 1]; support.len()];
        let mut fa_term = vec![[0.0f64; C_MAX + 1]; support.len()];
        for (i, &ka) in support.iter().enumerate() {
            for c in 0..=C_MAX {
                let k_hat = (ka + c).min(s.k).max(1);
                let ln_q = (k_hat as f64).ln() - s.j as f64 * ln2;
                let eps = if ln_q >= 0.0 {
                    0.0
                } else {
                    let x_q = chi2_isf_ln(dof, ln_q).expect("tail inversion");
                    let r_min = x_q / (1.0 + (s.n as f64 + 1.0) * p);
                    chi2_cdf(dof, r_min).expect("chi2 cdf")
                };
                eps_min[i][c] = eps;
                fa_term[i][c] = (k_hat - ka.min(k_hat)) as f64 / k_hat as f64;
            }
        }
        let mut best_md = f64::INFINITY;
        for lambda in lambda_grid() {
            let mut md_tot = 0.0;
            let mut fa_tot = 0.0;
            for (i, &ka) in support.iter().enumerate() {
                let q = s.ka_dist.pmf(ka);
                let mut c_star = 0;
                let mut best = f64::INFINITY;
                for c in 0..=C_MAX {
                    let score = if lambda.is_infinite() {
                        if fa_term[i][c] > 0.0 { f64::INFINITY } else { eps_min[i][c] }
                    } else {
                        eps_min[i][c] + lambda * fa_term[i][c]
                    };
                    if score < best {
                        best = score;
                        c_star = c;
                    }
                }
                md_tot += q * eps_min[i][c_star];
                fa_tot += q * fa_term[i][c_star];
            }
            if fa_tot <= targets.eps_fa {
                best_md = best_md.min(md_tot);
            }
        }
        best_md <= targets.eps_md
    };

    match bisect_power(s, &mut feasible) {
        Some(p) => db_report(s, p, "single_user", &s.mc),
        None => BoundReport::infeasible(s.mc.samples, s.mc.seed),
    }
}

/// Binomial-activity single-user converse; applicable only when K_a is
/// binomial.
pub fn single_user_converse_binom(
    s: &Scenario,
    targets: &ErrorTargets,
) -> Result<BoundReport, ConfigError> {
    let crate::model::KaDistribution::Binomial { k, p: pa } = s.ka_dist else {
        return Err(ConfigError::Invalid(
            "binomial single-user converse needs K_a ~ Binom".into(),
        ));
    };
    assert_eq!(k, s.k, "binomial potential-user count must match K");
    let dof = 2 * s.l as u32;
    let eps2 = (targets.eps_md / pa).min(1.0);
    if eps2 >= 1.0 {
        // r = +inf sentinel: the constraint is vacuous at any power.
        let p = power_from_eb_db(s.n, EB_FLOOR_DB, s.j);
        return Ok(db_report(s, p, "single_user_binom", &s.mc));
    }
    let r = chi2_quantile(dof, eps2).expect("chi2 quantile");
    let eps1 = if pa < 1.0 { (targets.eps_fa / (1.0 - pa)).min(1.0) } else { 1.0 };
    let ln_lhs = s.j as f64 * std::f64::consts::LN_2 - (s.k as f64).ln();
    let mut feasible = |p: f64| -> bool {
        let ln_tail = chi2_sf_ln(dof, (1.0 + (s.n as f64 + 1.0) * p) * r).expect("chi2 tail");
        ln_lhs <= eps1.ln() - ln_tail
    };
    Ok(match bisect_power(s, &mut feasible) {
        Some(p) => db_report(s, p, "single_user_binom", &s.mc),
        None => BoundReport::infeasible(s.mc.samples, s.mc.seed),
    })
}

/// Mutual-information side of the Fano bound, cached per activity level:
/// E[log2 |I + X X^H|] for X with i.i.d. CN(0, P) entries, via the
/// unit-power Gram eigenvalues so every power level shares the samples.
struct FanoCache {
    eigs: HashMap<usize, Vec<Vec<f64>>>,
}

impl FanoCache {
    fn new(s: &Scenario, levels: &[usize], mc: &McConfig) -> Self {
        let s_max = levels.iter().copied().max().unwrap_or(1);
        let cache = GramCache::build(CodebookEnsemble::Gaussian, s.n, s_max, mc.samples, mc.seed);
        let eigs = levels
            .iter()
            .map(|&ka| {
                let per_sample: Vec<Vec<f64>> = (0..mc.samples)
                    .into_par_iter()
                    .map(|i| crate::linalg::hermitian_eigenvalues(cache.gram(i, ka, 1.0)))
                    .collect();
                (ka, per_sample)
            })
            .collect();
        FanoCache { eigs }
    }

    /// E[log2 |I + X_{K_a} X_{K_a}^H|] at power p, with the Jensen ceiling
    /// n log2(1 + K_a p) asserted on every batch up to Monte-Carlo noise.
    fn e_log2_det(&self, s: &Scenario, ka: usize, p: f64) -> f64 {
        let per_sample = &self.eigs[&ka];
        let ln2 = std::f64::consts::LN_2;
        let vals: Vec<f64> = per_sample
            .iter()
            .map(|mu| mu.iter().map(|&m| (p * m).ln_1p()).sum::<f64>() / ln2)
            .collect();
        let (mean, se) = crate::numerics::mean_and_se(&vals);
        let ceiling = s.n as f64 * (1.0 + ka as f64 * p).log2();
        assert!(
            mean <= ceiling + 3.0 * se + 1e-9 * (1.0 + ceiling),
            "Jensen ceiling violated: {mean} > {ceiling} (se {se})"
        );
        mean
    }
}

/// Candidate subsets for the Fano sweep: all intervals over a quantile grid
/// of the positive support (at most 64) plus the full support.
fn fano_subsets(s: &Scenario, support: &[usize]) -> Vec<(usize, usize)> {
    let mut cuts: Vec<usize> = Vec::new();
    let total: f64 = support.iter().map(|&k| s.ka_dist.pmf(k)).sum();
    let mut acc = 0.0;
    let mut next_q = 0.0;
    for (i, &k) in support.iter().enumerate() {
        if acc >= next_q * total {
            cuts.push(i);
            next_q += 1.0 / 7.0;
        }
        acc += s.ka_dist.pmf(k);
    }
    if *cuts.last().unwrap_or(&0) != support.len() - 1 {
        cuts.push(support.len() - 1);
    }
    let mut out = Vec::new();
    for (ai, &a) in cuts.iter().enumerate() {
        for &b in &cuts[ai..] {
            out.push((a, b));
        }
    }
    out.push((0, support.len() - 1));
    out.truncate(64);
    out
}

/// Fano-type converse with a Gaussian codebook assumption.
pub fn fano_converse(s: &Scenario, targets: &ErrorTargets, mc: &McConfig) -> BoundReport {
    let support = positive_support(s);
    if support.is_empty() {
        let p = power_from_eb_db(s.n, EB_FLOOR_DB, s.j);
        return db_report(s, p, "fano", mc);
    }
    let cache = FanoCache::new(s, &support, mc);
    let subsets = fano_subsets(s, &support);
    let j = s.j as f64;
    let h2 = binary_entropy(targets.eps_md);
    let m = s.m();

    let mut feasible = |p: f64| -> bool {
        // Feasible means no candidate subset witnesses a violation of the
        // information balance for every allocation within the FA budget.
        for &(a, b) in &subsets {
            let levels = &support[a..=b];
            let p_s: f64 = levels.iter().map(|&k| s.ka_dist.pmf(k)).sum();
            let lhs_base = (p_s - targets.eps_md) * j - h2;
            let mut rhs = 0.0;
            for &ka in levels {
                let q = s.ka_dist.pmf(ka);
                let coll = if ka >= 2 {
                    (crate::numerics::log_binomial(ka as u64, 2) - m.ln()).exp().min(1.0)
                } else {
                    0.0
                };
                let e_det = cache.e_log2_det(s, ka, p);
                rhs += q
                    * (s.n as f64 * s.l as f64 * (1.0 + ka as f64 * p).log2()
                        - s.l as f64 * (1.0 - coll) * e_det)
                    / ka as f64;
            }
            // Code-favorable list sizes: maximize the subtracted log2 K_hat
            // mass subject to the false-alarm budget.
            let mut best_gain = f64::NEG_INFINITY;
            for lambda in lambda_grid() {
                let mut gain = 0.0;
                let mut fa_tot = 0.0;
                for &ka in levels {
                    let q = s.ka_dist.pmf(ka);
                    let mut c_best = (f64::NEG_INFINITY, 0usize);
                    for c in 0..=C_MAX {
                        let k_hat = (ka + c).min(s.k).max(1);
                        let fa = (k_hat - ka.min(k_hat)) as f64 / k_hat as f64;
                        let score = if lambda.is_infinite() {
                            if fa > 0.0 { f64::NEG_INFINITY } else { (k_hat as f64).log2() }
                        } else {
                            (k_hat as f64).log2() - lambda * fa
                        };
                        if score > c_best.0 {
                            c_best = (score, c);
                        }
                    }
                    let k_hat = (ka + c_best.1).min(s.k).max(1);
                    gain += q * (k_hat as f64).log2();
                    fa_tot += q * (k_hat - ka.min(k_hat)) as f64 / k_hat as f64;
                }
                if fa_tot <= targets.eps_fa {
                    best_gain = best_gain.max(gain);
                }
            }
            if lhs_base - best_gain > rhs {
                return false; // subset S witnesses a violation at this power
            }
        }
        true
    };

    match bisect_power(s, &mut feasible) {
        Some(p) => db_report(s, p, "fano", mc),
        None => BoundReport::infeasible(mc.samples, mc.seed),
    }
}

/// Max of the applicable converse bounds with attribution.
pub fn converse_envelope(s: &Scenario, targets: &ErrorTargets, mc: &McConfig) -> BoundReport {
    let mut best = single_user_converse(s, targets);
    if let Ok(b) = single_user_converse_binom(s, targets) {
        if b.value > best.value || !best.feasible {
            best = b;
        }
    }
    let f = fano_converse(s, targets, mc);
    if f.value > best.value || !best.feasible {
        best = f;
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{KaDistribution, McConfig};

    fn scenario(ka_dist: KaDistribution) -> Scenario {
        Scenario {
            n: 200,
            l: 16,
            j: 16,
            k: 40,
            power: None,
            p_prime_ratio: None,
            ensemble: CodebookEnsemble::Spherical,
            ka_dist,
            targets: ErrorTargets { eps_md: 0.01, eps_fa: 0.01 },
            mc: McConfig { samples: 100, seed: 11, conservative: false },
            k_l: None,
            k_u: None,
            r_prime: 0,
            tail_mass: None,
        }
    }

    #[test]
    fn vacuous_targets_collapse_toward_floor() {
        let s = scenario(KaDistribution::Binomial { k: 40, p: 0.5 });
        let t = ErrorTargets { eps_md: 0.999, eps_fa: 0.999 };
        let r = single_user_converse(&s, &t);
        assert!(r.feasible);
        let tight = single_user_converse(&s, &s.targets.clone());
        assert!(
            r.value <= -20.0 && r.value <= tight.value - 10.0,
            "weak {} vs tight {}",
            r.value,
            tight.value
        );
    }

    #[test]
    fn single_user_reduces_to_scalar_chain_for_one_user() {
        // fixed(1) with eps_fa -> 0 forces K_hat = 1, leaving the scalar
        // feasibility J <= -log2 P[chi2(2L) >= (1+(n+1)P) r(eps_md)].
        let mut s = scenario(KaDistribution::Fixed(1));
        s.k = 1;
        let t = ErrorTargets { eps_md: 0.01, eps_fa: 1e-12 };
        let got = single_user_converse(&s, &t);

        let dof = 2 * s.l as u32;
        let r = chi2_quantile(dof, t.eps_md).unwrap();
        let mut feasible = |p: f64| {
            let tail = chi2_sf_ln(dof, (1.0 + (s.n as f64 + 1.0) * p) * r).unwrap();
            s.j as f64 * std::f64::consts::LN_2 <= -tail
        };
        let p = bisect_power(&s, &mut feasible).unwrap();
        let expect = energy_per_bit_db(s.n, p, s.j);
        assert!((got.value - expect).abs() <= 0.051, "{} vs {}", got.value, expect);
    }

    #[test]
    fn binom_converse_cases() {
        let s = scenario(KaDistribution::Binomial { k: 40, p: 0.5 });
        let t = s.targets;
        let r = single_user_converse_binom(&s, &t).unwrap();
        assert!(r.feasible && r.value.is_finite());

        // Degenerate budget eps_md >= p_a: vacuous constraint, floor.
        let weak = ErrorTargets { eps_md: 0.6, eps_fa: 0.01 };
        let r = single_user_converse_binom(&s, &weak).unwrap();
        assert!(r.value <= -39.0);

        let fixed = scenario(KaDistribution::Fixed(20));
        assert!(single_user_converse_binom(&fixed, &t).is_err());
    }

    #[test]
    fn fano_scalar_cross_check_single_user() {
        // fixed(1), S = {1}: the balance reduces to a scalar inequality.
        let mut s = scenario(KaDistribution::Fixed(1));
        s.k = 1;
        s.mc.samples = 200;
        let t = ErrorTargets { eps_md: 0.01, eps_fa: 0.01 };
        let got = fano_converse(&s, &t, &s.mc.clone());

        let cache = FanoCache::new(&s, &[1], &s.mc);
        let j = s.j as f64;
        let h2 = binary_entropy(t.eps_md);
        let mut feasible = |p: f64| {
            let rhs = s.n as f64 * s.l as f64 * (1.0 + p).log2()
                - s.l as f64 * cache.e_log2_det(&s, 1, p);
            (1.0 - t.eps_md) * j - h2 - 0.0 <= rhs // log2 K_hat = log2 1 = 0
        };
        let p = bisect_power(&s, &mut feasible).unwrap();
        let expect = energy_per_bit_db(s.n, p, s.j);
        assert!((got.value - expect).abs() <= 0.051, "{} vs {}", got.value, expect);
    }

    #[test]
    fn fano_trivial_when_support_empty() {
        let s = scenario(KaDistribution::Fixed(0));
        let t = s.targets;
        let r = fano_converse(&s, &t, &s.mc.clone());
        assert!(r.value <= -39.0);
    }

    #[test]
    fn envelope_dominates_components() {
        let s = scenario(KaDistribution::Binomial { k: 40, p: 0.5 });
        let t = s.targets;
        let mc = s.mc;
        let env = converse_envelope(&s, &t, &mc);
        let a = single_user_converse(&s, &t);
        let b = single_user_converse_binom(&s, &t).unwrap();
        let f = fano_converse(&s, &t, &mc);
        assert!(env.value >= a.value - 1e-9);
        assert!(env.value >= b.value - 1e-9);
        assert!(env.value >= f.value - 1e-9);
        assert!(env.trace.source.is_some());
    }

    #[test]
    fn converse_monotone_in_md_budget() {
        let s = scenario(KaDistribution::Binomial { k: 40, p: 0.5 });
        let mut prev = f64::INFINITY;
        for eps in [0.001, 0.01, 0.1] {
            let t = ErrorTargets { eps_md: eps, eps_fa: 0.01 };
            let v = single_user_converse(&s, &t).value;
            assert!(v <= prev + 1e-9, "eps {eps}: {v} vs {prev}");
            prev = v;
        }
    }
}
