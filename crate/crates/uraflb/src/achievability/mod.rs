//! Achievability bound: misdetection / false-alarm guarantees for a given
//! power, and the induced minimum energy-per-bit via bracketed bisection.

mod qterms;

pub use qterms::{f_b, CellShape};

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use rayon::prelude::*;

use crate::codebook::GramCache;
use crate::ka_bounds::{p0_ka, p_new_from_eigs};
use crate::model::{energy_per_bit_db, power_from_eb_db, ErrorTargets, McConfig, Scenario};
use crate::report::{BoundReport, OptTrace};

/// Integer geometry of the error cells for one (K_a, K'_a) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexSets {
    pub ka: usize,
    pub ka_prime: usize,
    /// Decoded-list interval [K'_{a,l} : K'_{a,u}].
    pub kal: usize,
    pub kau: usize,
    /// Forced misdetections (K_a - K'_{a,u})^+ and false alarms
    /// (K'_{a,l} - K_a)^+.
    pub w11: usize,
    pub w21: usize,
    /// Upper end of the misdetection index range (inclusive); the range
    /// starts at zero.
    pub t_max: usize,
    m_cap: i64,
}

/// Exact integer evaluation of the cell index sets.
pub fn index_sets(
    ka: usize,
    ka_prime: usize,
    kl: usize,
    ku: usize,
    r_prime: usize,
    m: &crate::model::MSize,
) -> IndexSets {
    let kal = kl.max(ka_prime.saturating_sub(r_prime));
    let kau = ku.min(ka_prime + r_prime);
    let w11 = ka.saturating_sub(kau);
    let w21 = kal.saturating_sub(ka);
    let m_cap: i64 = if m.bits() >= 62 {
        i64::MAX / 4
    } else {
        (1i64 << m.bits()).min(i64::MAX / 4)
    };
    let t_hi = (ka as i64)
        .min(kau as i64)
        .min(m_cap - kal as i64 - w11 as i64)
        .max(-1);
    IndexSets {
        ka,
        ka_prime,
        kal,
        kau,
        w11,
        w21,
        t_max: t_hi.max(0) as usize,
        m_cap,
    }
}

impl IndexSets {
    pub fn t_range(&self) -> std::ops::RangeInclusive<usize> {
        0..=self.t_max
    }

    /// Inclusive false-alarm index range for misdetection index t; may be
    /// empty.
    pub fn tbar_range(&self, t: usize) -> Option<(usize, usize)> {
        let ka = self.ka as i64;
        let t = t as i64;
        let lo = (self.w11 as i64 - (ka - self.kal as i64).max(0) + t).max(0);
        let hi = ((self.kau as i64 - ka).max(0) - (self.kal as i64 - ka).max(0) + t)
            .min(self.m_cap - ka.max(self.kal as i64));
        (lo <= hi).then_some((lo as usize, hi as usize))
    }

    /// Detected-list size for a (t, t') cell.
    pub fn k_hat(&self, t: usize, tp: usize) -> usize {
        (self.ka as i64 - t as i64 - self.w11 as i64 + tp as i64 + self.w21 as i64).max(0) as usize
    }
}

/// Evaluation context with common random numbers: the unit-power Gram cache
/// shared by every (P, P') probe of a sweep, plus lazily computed leading
/// eigenvalue tables for the estimation-error terms.
pub struct EvalCtx {
    scenario: Scenario,
    mc: McConfig,
    cache: GramCache,
    lead_eigs: RwLock<HashMap<usize, Arc<Vec<Vec<f64>>>>>,
    pub kl: usize,
    pub ku: usize,
}

impl EvalCtx {
    pub fn new(s: &Scenario, mc: &McConfig) -> Self {
        let (kl, ku) = s.truncation();
        let m = s.m();
        let mut s_max = 1usize;
        for ka in kl..=ku {
            for kap in kl..=ku {
                let iset = index_sets(ka, kap, kl, ku, s.r_prime, &m);
                for t in iset.t_range() {
                    if let Some((_, hi)) = iset.tbar_range(t) {
                        s_max = s_max.max(ka + hi + iset.w21);
                    }
                }
            }
        }
        let cache = GramCache::build(s.ensemble, s.n, s_max, mc.samples, mc.seed);
        EvalCtx {
            scenario: s.clone(),
            mc: *mc,
            cache,
            lead_eigs: RwLock::new(HashMap::new()),
            kl,
            ku,
        }
    }

    /// Unit-power eigenvalues of the leading-`ka` Gram per sample.
    fn lead_eigs(&self, ka: usize) -> Arc<Vec<Vec<f64>>> {
        if let Some(v) = self.lead_eigs.read().unwrap().get(&ka) {
            return v.clone();
        }
        let eigs: Vec<Vec<f64>> = (0..self.mc.samples)
            .into_par_iter()
            .map(|i| {
                if ka == 0 {
                    return Vec::new();
                }
                let g = self.cache.gram(i, ka, 1.0);
                crate::linalg::hermitian_eigenvalues(g)
            })
            .collect();
        let arc = Arc::new(eigs);
        self.lead_eigs.write().unwrap().insert(ka, arc.clone());
        arc
    }
}

/// Both epsilon sums at one (P, P') with their error accounting.
#[derive(Debug, Clone, Copy)]
pub struct EpsBreakdown {
    pub md: f64,
    pub fa: f64,
    pub md_se: f64,
    pub fa_se: f64,
    pub p0: f64,
    /// Conservative mass contributed by capped (not fully evaluated) cells.
    pub capped_md: f64,
    pub capped_fa: f64,
}

/// The measure-change mass p0: collisions, power violations, and the
/// truncated activity tail.
pub fn p0_total(s: &Scenario, p: f64, p_prime: f64, kl: usize, ku: usize) -> f64 {
    let m = s.m();
    let mut p0 = 0.0;
    let mut inside = 0.0;
    for ka in 0..=s.k {
        let q = s.ka_dist.pmf(ka);
        if q == 0.0 {
            continue;
        }
        if (kl..=ku).contains(&ka) {
            inside += q;
        }
        let coll = if ka >= 2 {
            (crate::numerics::log_binomial(ka as u64, 2) - m.ln()).exp()
        } else {
            0.0
        };
        let pv = p0_ka(s, p, p_prime, ka).expect("ensemble/power combination validated upstream");
        p0 += q * (coll + pv);
    }
    p0 + (1.0 - inside).max(0.0)
}

/// Relative contribution floor: cells whose ceiling contribution falls
/// under 1e-3 of the target are carried at the ceiling instead of being
/// evaluated, which can only loosen the bound.
const CELL_SKIP_FRACTION: f64 = 1e-3;

/// Theorem-level evaluation of the misdetection and false-alarm bounds at
/// a fixed power and codebook power parameter.
pub fn eps_md_fa(s: &Scenario, p: f64, p_prime: f64, mc: &McConfig) -> EpsBreakdown {
    let ctx = EvalCtx::new(s, mc);
    eps_md_fa_with(&ctx, p, p_prime, None)
}

/// As [`eps_md_fa`] on a shared context; `early_exit` aborts once both
/// accumulated sums already exceed the given targets (any further work can
/// only raise them).
pub fn eps_md_fa_with(
    ctx: &EvalCtx,
    p: f64,
    p_prime: f64,
    early_exit: Option<ErrorTargets>,
) -> EpsBreakdown {
    let s = &ctx.scenario;
    let mc = &ctx.mc;
    let (kl, ku) = (ctx.kl, ctx.ku);
    let m = s.m();
    let dist = &s.ka_dist;
    let n = s.n;
    let l = s.l;
    let p0 = p0_total(s, p, p_prime, kl, ku);

    let tau_md = CELL_SKIP_FRACTION * s.targets.eps_md;
    let tau_fa = CELL_SKIP_FRACTION * s.targets.eps_fa;

    let mut md = p0;
    let mut fa = p0;
    let mut md_var = 0.0;
    let mut fa_var = 0.0;
    let mut capped_md = 0.0;
    let mut capped_fa = 0.0;

    // Estimation-error caps p' for every ordered pair, shared samples.
    let mut pprime_tab: HashMap<(usize, usize), (f64, f64)> = HashMap::new();
    for ka in kl..=ku {
        if dist.pmf(ka) == 0.0 || ka == 0 {
            continue;
        }
        let unit = ctx.lead_eigs(ka);
        let scaled: Vec<Vec<f64>> = unit
            .iter()
            .map(|mu| mu.iter().map(|x| x * p_prime).collect())
            .collect();
        for kap in kl..=ku {
            if kap == ka {
                continue;
            }
            let eval = p_new_from_eigs(n, l, p_prime, kap, (kl, ku), &scaled, (16, 24));
            pprime_tab.insert((ka, kap), (eval.ln_value.exp().min(1.0), eval.se));
        }
    }

    // Row-level state shared across every (K'_a, t') with one (K_a, |W1|).
    let mut rows: HashMap<(usize, usize), Arc<qterms::RowData>> = HashMap::new();
    let mut row_for = |ka: usize, w1: usize, rows: &mut HashMap<(usize, usize), Arc<qterms::RowData>>| {
        rows.entry((ka, w1))
            .or_insert_with(|| {
                let grams: Vec<_> =
                    (0..mc.samples).map(|i| ctx.cache.gram(i, ka, p_prime)).collect();
                Arc::new(qterms::build_row(ka, w1, dist, &m, n, l, &grams))
            })
            .clone()
    };

    // Pairs ordered by descending pmf so an early exit on infeasible
    // powers fires after the heaviest contributors.
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for ka in kl..=ku {
        if dist.pmf(ka) > 0.0 {
            for kap in kl..=ku {
                pairs.push((ka, kap));
            }
        }
    }
    pairs.sort_by(|a, b| {
        dist.pmf(b.0)
            .partial_cmp(&dist.pmf(a.0))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    });

    'outer: for (ka, kap) in pairs {
        let pmf = dist.pmf(ka);
        let iset = index_sets(ka, kap, kl, ku, s.r_prime, &m);
        let (pcap, pcap_se) = if kap == ka {
            (1.0, 0.0)
        } else {
            pprime_tab.get(&(ka, kap)).copied().unwrap_or((1.0, 0.0))
        };
        let mut warm: Option<qterms::WarmStart> = None;
        let mut row_hot = true;
        for t in iset.t_range() {
            let Some((tp_lo, tp_hi)) = iset.tbar_range(t) else { continue };
            let w1 = t + iset.w11;
            let wt_md = if ka >= 1 { pmf * w1 as f64 / ka as f64 } else { 0.0 };

            // Does any consumer of this row need real q values?
            let md_need = ka >= 1 && wt_md * pcap >= tau_md && wt_md > 0.0;
            let mut fa_need = false;
            for tp in tp_lo..=tp_hi {
                let k_hat = iset.k_hat(t, tp);
                let wfa_num = tp + iset.w21;
                if k_hat >= 1 && wfa_num > 0 {
                    let wt_fa = pmf * wfa_num as f64 / k_hat as f64;
                    if wt_fa * pcap >= tau_fa {
                        fa_need = true;
                    }
                }
            }

            if !(md_need || fa_need) {
                // Carry the whole row at its ceiling.
                if wt_md > 0.0 {
                    md += wt_md * pcap;
                    capped_md += wt_md * pcap;
                    md_var += (wt_md * pcap_se).powi(2);
                }
                for tp in tp_lo..=tp_hi {
                    let k_hat = iset.k_hat(t, tp);
                    let wfa_num = tp + iset.w21;
                    if k_hat >= 1 && wfa_num > 0 {
                        let wt_fa = pmf * wfa_num as f64 / k_hat as f64;
                        fa += wt_fa * pcap;
                        capped_fa += wt_fa * pcap;
                        fa_var += (wt_fa * pcap_se).powi(2);
                    }
                }
                continue;
            }

            let effort = if row_hot || t <= 1 {
                qterms::CellEffort::Full
            } else {
                qterms::CellEffort::WarmPoint
            };
            let row = row_for(ka, w1, &mut rows);

            let mut row_sum = 0.0;
            let mut row_var = 0.0;
            let mut row_contrib = 0.0f64;
            for tp in tp_lo..=tp_hi {
                let k_hat = iset.k_hat(t, tp);
                let shape = CellShape::new(ka, t, tp, iset.w11, iset.w21, k_hat, dist, &m, n);
                let sctx: Vec<qterms::SampleCtx> = (0..mc.samples)
                    .into_par_iter()
                    .map(|i| {
                        let g = ctx.cache.gram(i, shape.s, p_prime);
                        qterms::SampleCtx::build(&shape, &g, &row.samples[i], n, l)
                    })
                    .collect();
                let res = qterms::p_misdecode_cell(&shape, &sctx, &row, n, l, effort, warm);
                if effort == qterms::CellEffort::Full {
                    warm = Some(res.warm);
                }
                row_sum += res.p;
                row_var += res.se * res.se;
                let fa_cell = res.p.min(pcap).min(1.0);
                let wfa_num = tp + iset.w21;
                if k_hat >= 1 && wfa_num > 0 {
                    let wt_fa = pmf * wfa_num as f64 / k_hat as f64;
                    fa += wt_fa * fa_cell;
                    fa_var += (wt_fa * res.se.min(pcap_se.max(res.se))).powi(2);
                    row_contrib = row_contrib.max(wt_fa * fa_cell / tau_fa.max(1e-300));
                }
            }
            if wt_md > 0.0 {
                let md_cell = row_sum.min(pcap).min(1.0);
                md += wt_md * md_cell;
                md_var += (wt_md * row_var.sqrt()).powi(2);
                row_contrib = row_contrib.max(wt_md * md_cell / tau_md.max(1e-300));
            }
            // A row that stopped mattering demotes later rows to the warm
            // single-point tier; one that matters again re-arms.
            row_hot = row_contrib >= 10.0;

            if let Some(t) = early_exit {
                if md > t.eps_md || fa > t.eps_fa {
                    md = md.max(t.eps_md * (1.0 + 1e-9));
                    fa = fa.max(f64::MIN_POSITIVE);
                    break 'outer;
                }
            }
        }
    }

    EpsBreakdown {
        md: md.min(1.0),
        fa: fa.min(1.0),
        md_se: md_var.sqrt(),
        fa_se: fa_var.sqrt(),
        p0,
        capped_md,
        capped_fa,
    }
}

/// Smallest power (on a 0.05 dB lattice) whose misdetection and false-alarm
/// bounds meet the targets for some P' grid point and decoding radius in
/// `r_sweep`; common random numbers across every probe.
pub fn min_eb_achievability(s: &Scenario, targets: &ErrorTargets, mc: &McConfig) -> BoundReport {
    let r_sweep = [s.r_prime];
    min_eb_achievability_sweep(s, targets, mc, &r_sweep)
}

pub fn min_eb_achievability_sweep(
    s: &Scenario,
    targets: &ErrorTargets,
    mc: &McConfig,
    r_sweep: &[usize],
) -> BoundReport {
    let p_floor = power_from_eb_db(s.n, -40.0, s.j);
    let p_ceil = power_from_eb_db(s.n, 40.0, s.j);

    let mut scen = s.clone();
    scen.targets = *targets;
    let mut ctxs: Vec<(usize, EvalCtx)> = Vec::new();
    for &r in r_sweep {
        let mut sr = scen.clone();
        sr.r_prime = r;
        ctxs.push((r, EvalCtx::new(&sr, mc)));
    }

    let feasible = |p: f64| -> Option<(f64, usize)> {
        for (r, ctx) in &ctxs {
            // Largest P' first: it is usually the winner, and failures on
            // the rest exit early.
            let mut grid = ctx.scenario.p_prime_grid(p);
            grid.sort_by(|a, b| b.partial_cmp(a).unwrap());
            for pp in grid {
                let e = eps_md_fa_with(ctx, p, pp, Some(*targets));
                if e.md <= targets.eps_md && e.fa <= targets.eps_fa {
                    return Some((pp, *r));
                }
            }
        }
        None
    };

    if let Some((pp, r)) = feasible(p_floor) {
        return report_for(s, mc, p_floor, pp, r, &ctxs[0].1);
    }
    let mut lo = p_floor;
    let mut hi = p_floor;
    let mut hit = None;
    while hi < p_ceil {
        lo = hi;
        hi *= 2.0;
        if let Some(ok) = feasible(hi) {
            hit = Some(ok);
            break;
        }
    }
    let Some(_) = hit else {
        return BoundReport::infeasible(mc.samples, mc.seed);
    };
    // Bisect to 0.05 dB.
    while 10.0 * (hi / lo).log10() > 0.05 {
        let mid = (lo * hi).sqrt();
        if feasible(mid).is_some() {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let (pp, r) = feasible(hi).expect("upper bracket stays feasible");
    report_for(s, mc, hi, pp, r, &ctxs[0].1)
}

fn report_for(
    s: &Scenario,
    mc: &McConfig,
    p_star: f64,
    p_prime: f64,
    r_prime: usize,
    ctx: &EvalCtx,
) -> BoundReport {
    BoundReport {
        value: energy_per_bit_db(s.n, p_star, s.j),
        se: 0.025,
        samples: mc.samples,
        seed: mc.seed,
        feasible: true,
        trace: OptTrace {
            p_star: Some(p_star),
            p_prime_star: Some(p_prime),
            r_prime_star: Some(r_prime),
            k_l: Some(ctx.kl),
            k_u: Some(ctx.ku),
            ..OptTrace::default()
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::{sample_columns, streams, RngCoords};
    use crate::linalg::{logdet_shifted, quadratic_form_inv, WeightedGram};
    use crate::model::{CodebookEnsemble, KaDistribution, MSize};
    use nalgebra::DMatrix;
    use num_complex::Complex64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn index_sets_hand_cases() {
        let m = MSize::from_bits(3); // M = 8
        let i = index_sets(2, 2, 0, 4, 0, &m);
        assert_eq!((i.kal, i.kau), (2, 2));
        assert_eq!(i.t_max, 2);
        for t in 0..=2usize {
            assert_eq!(i.tbar_range(t), Some((t, t)));
            assert_eq!(i.k_hat(t, t), 2);
            // K-hat formula matches 2 - t + t' on the hand case.
            if let Some((lo, hi)) = i.tbar_range(t) {
                for tp in lo..=hi {
                    assert_eq!(i.k_hat(t, tp), 2 - t + tp);
                }
            }
        }

        // No transmitted messages: only t = 0 and pure false alarms.
        let z = index_sets(0, 2, 0, 4, 1, &m);
        assert_eq!(z.t_max, 0);
        let (lo, hi) = z.tbar_range(0).unwrap();
        assert!(lo <= hi);
        assert_eq!(z.k_hat(0, lo), lo + z.w21);

        // Forced misdetections when the list caps below K_a.
        let f = index_sets(5, 3, 0, 3, 0, &MSize::from_bits(16));
        assert_eq!(f.w11, 2);
        for t in f.t_range() {
            assert_eq!(t + f.w11, t + 2);
        }
    }

    #[test]
    fn f_b_examples() {
        let m = MSize::from_bits(3);
        let fixed = KaDistribution::Fixed(2);
        assert!((f_b(2, &fixed, &m) + m.log_binomial(2)).abs() < 1e-12);
        assert_eq!(f_b(1, &fixed, &m), f64::NEG_INFINITY);

        let b = KaDistribution::Binomial { k: 4, p: 0.5 };
        let expect = (6.0f64 / 16.0).ln() - 28.0f64.ln();
        assert!((f_b(2, &b, &m) - expect).abs() < 1e-12);
    }

    fn tiny_scenario() -> Scenario {
        Scenario {
            n: 6,
            l: 2,
            j: 3,
            k: 4,
            power: Some(2.0),
            p_prime_ratio: None,
            ensemble: CodebookEnsemble::Spherical,
            ka_dist: KaDistribution::Binomial { k: 4, p: 0.5 },
            targets: ErrorTargets { eps_md: 0.1, eps_fa: 0.1 },
            mc: McConfig { samples: 400, seed: 5, conservative: false },
            k_l: Some(0),
            k_u: Some(2),
            r_prime: 1,
            tail_mass: None,
        }
    }

    /// Event-level oracle: on a tiny instance, q1 and q2 each dominate a
    /// direct Monte-Carlo estimate of their defining events built from the
    /// MAP decoding metric.
    #[test]
    fn q_terms_dominate_event_simulation() {
        let s = tiny_scenario();
        let (n, l) = (s.n, s.l);
        let p_prime = s.power.unwrap();
        let m = s.m();
        let dist = &s.ka_dist;
        // Cell: K_a = 1, K'_a = 1, t = 1, t' = 1 under [K_l:K_u] = [0:2].
        let iset = index_sets(1, 1, 0, 2, 1, &m);
        assert_eq!((iset.w11, iset.w21), (0, 0));
        let shape = CellShape::new(1, 1, 1, 0, 0, iset.k_hat(1, 1), dist, &m, n);
        assert_eq!(shape.s, 2);

        let samples = s.mc.samples;
        let grams: Vec<_> = (0..samples)
            .map(|i| {
                let coords = RngCoords::new(s.mc.seed, streams::BOUND_COLUMNS, i as u64);
                let c = sample_columns(s.ensemble, p_prime, n, shape.s, coords);
                let mut g = c.adjoint() * &c;
                crate::linalg::hermitize(&mut g);
                g
            })
            .collect();
        let row = qterms::build_row(1, 1, dist, &m, n, l, &grams);
        let sctx: Vec<qterms::SampleCtx> = grams
            .iter()
            .enumerate()
            .map(|(i, g)| qterms::SampleCtx::build(&shape, g, &row.samples[i], n, l))
            .collect();

        let omega = 0.5;
        let nu = 0.1;
        let bases: Vec<_> = sctx.iter().map(|c| qterms::q1_grid_base(c, n, l, omega)).collect();
        let (q1l, q1_se) = qterms::q1_ln(&shape, &sctx, n, l, omega, nu, &bases);
        let q1_pair = (q1l - shape.ln_comb).exp(); // single-pair bound
        let (q2, q2_se, _) = qterms::q2_row_value(
            &row.samples,
            shape.ln_binom_w1,
            shape.m_rank,
            n,
            l,
            omega,
            nu,
            (12, 16),
        );

        // Direct simulation of the two defining events.
        let trials = 30_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let nl_nu = (n * l) as f64 * nu;
        let fb0 = f_b(0, dist, &m);
        let fb1 = f_b(1, dist, &m);
        let mut hits_q1 = 0usize;
        let mut hits_q2 = 0usize;
        for _ in 0..trials {
            let mut c = DMatrix::zeros(n, 2);
            for v in c.iter_mut() {
                *v = Complex64::new(
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                ) * Complex64::from((p_prime / 2.0).sqrt());
            }
            for j in 0..2 {
                let norm2: f64 = c.column(j).iter().map(|z| z.norm_sqr()).sum();
                let fix = (n as f64 * p_prime / norm2).sqrt();
                for i in 0..n {
                    c[(i, j)] *= fix;
                }
            }
            // Y = c_0 h + Z for one active user.
            let mut y = DMatrix::zeros(n, l);
            for v in y.iter_mut() {
                *v = Complex64::new(
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                ) * Complex64::from(0.5f64.sqrt());
            }
            for lc in 0..l {
                let h = Complex64::new(
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                ) * Complex64::from(0.5f64.sqrt());
                for i in 0..n {
                    y[(i, lc)] += c[(i, 0)] * h;
                }
            }
            let g_of = |cols: Vec<usize>, fbv: f64| -> f64 {
                let sel = c.select_columns(cols.iter());
                let wg = WeightedGram::unit(sel);
                l as f64 * logdet_shifted(&wg, 1.0, 1.0).unwrap()
                    + quadratic_form_inv(&wg, &y)
                    - fbv
            };
            let g_w = g_of(vec![0], fb1);
            let g_wrong = g_of(vec![1], fb1);
            let g_empty = g_of(vec![], fb0);
            if g_wrong <= g_w && g_w <= omega * g_empty + nl_nu {
                hits_q1 += 1;
            }
            if g_w > omega * g_empty + nl_nu {
                hits_q2 += 1;
            }
        }
        let f1 = hits_q1 as f64 / trials as f64;
        let f2 = hits_q2 as f64 / trials as f64;
        let se1 = (f1 * (1.0 - f1) / trials as f64).sqrt();
        let se2 = (f2 * (1.0 - f2) / trials as f64).sqrt();
        assert!(
            f1 <= q1_pair + 3.0 * (se1 + q1_se),
            "q1 dominance: empirical {f1} vs bound {q1_pair}"
        );
        assert!(
            f2 <= q2 + 3.0 * (se2 + q2_se),
            "q2 dominance: empirical {f2} vs bound {q2}"
        );
        // Sanity: the bounds are not vacuous at this operating point.
        assert!(q1_pair.min(q2) < 1.5, "q1 {q1_pair}, q2 {q2}");
        let _ = rng.random::<u64>();
    }

    #[test]
    fn cell_min_never_exceeds_probed_points() {
        let s = tiny_scenario();
        let m = s.m();
        let shape = CellShape::new(1, 1, 1, 0, 0, 1, &s.ka_dist, &m, s.n);
        let grams: Vec<_> = (0..60)
            .map(|i| {
                let coords = RngCoords::new(3, streams::BOUND_COLUMNS, i as u64);
                let c = sample_columns(s.ensemble, 2.0, s.n, shape.s, coords);
                let mut g = c.adjoint() * &c;
                crate::linalg::hermitize(&mut g);
                g
            })
            .collect();
        let row = qterms::build_row(1, 1, &s.ka_dist, &m, s.n, s.l, &grams);
        let sctx: Vec<qterms::SampleCtx> = grams
            .iter()
            .enumerate()
            .map(|(i, g)| qterms::SampleCtx::build(&shape, g, &row.samples[i], s.n, s.l))
            .collect();
        let res = qterms::p_misdecode_cell(
            &shape,
            &sctx,
            &row,
            s.n,
            s.l,
            qterms::CellEffort::Full,
            None,
        );
        for &(w, v) in &[(0.3, 0.05), (0.7, 1.0), (0.05, 0.001)] {
            let bases: Vec<_> =
                sctx.iter().map(|c| qterms::q1_grid_base(c, s.n, s.l, w)).collect();
            let (q1l, _) = qterms::q1_ln(&shape, &sctx, s.n, s.l, w, v, &bases);
            let (q2, _, _) = qterms::q2_row_value(
                &row.samples,
                shape.ln_binom_w1,
                shape.m_rank,
                s.n,
                s.l,
                w,
                v,
                (12, 16),
            );
            assert!(res.p <= (q1l.exp() + q2).min(1.0) + 1e-12);
        }
        assert!((0.0..=1.0).contains(&res.p));
        // The warm tier stays a valid (looser) bound at the same point.
        let warm_res = qterms::p_misdecode_cell(
            &shape,
            &sctx,
            &row,
            s.n,
            s.l,
            qterms::CellEffort::WarmPoint,
            Some(res.warm),
        );
        assert!(warm_res.p + 1e-12 >= res.p);
        assert!((0.0..=1.0).contains(&warm_res.p));
    }

    #[test]
    fn eps_values_are_probabilities() {
        let mut s = tiny_scenario();
        s.mc.samples = 60;
        let e = eps_md_fa(&s, 2.0, 2.0, &s.mc.clone());
        assert!((0.0..=1.0).contains(&e.md), "md {}", e.md);
        assert!((0.0..=1.0).contains(&e.fa), "fa {}", e.fa);
        assert!(e.p0 > 0.0); // collision mass with M = 8

        // Zero-power degeneracy: both bounds saturate near their ceilings.
        let e0 = eps_md_fa(&s, 1e-9, 1e-9, &s.mc.clone());
        assert!(e0.md > 0.5, "md at zero power: {}", e0.md);
    }

    #[test]
    fn vacuous_targets_return_bracket_floor() {
        let mut s = tiny_scenario();
        s.mc.samples = 40;
        let t = ErrorTargets { eps_md: 1.0, eps_fa: 1.0 };
        let r = min_eb_achievability(&s, &t, &s.mc.clone());
        assert!(r.feasible);
        assert!((r.value - -40.0).abs() < 0.2, "eb {}", r.value);
        assert!(r.trace.p_prime_star.is_some() && r.trace.r_prime_star == Some(1));
    }
}
