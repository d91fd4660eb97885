//! End-to-end Monte-Carlo simulation of the channel, the energy-based
//! activity estimator, and (at small M) the brute-force MAP list decoder.
//!
//! This is the empirical side of every bound-dominates-simulation check:
//! nothing here shares code with the analytical bound evaluations beyond
//! the basic linear algebra.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::codebook::{sample_columns, streams, RngCoords};
use crate::linalg::{logdet_shifted, quadratic_form_inv, CMat, WeightedGram};
use crate::model::{KaDistribution, MSize, Scenario};
use crate::numerics::mean_and_se;

/// One simulated transmission.
#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub true_ka: usize,
    pub est_ka: usize,
    pub decoded_set: Vec<usize>,
    pub md_count: usize,
    pub fa_count: usize,
}

/// Y = sum_k h_k x_{W_k}^T + Z for explicit fading and noise matrices.
///
/// `columns` holds one transmitted codeword per active user (n x K_a),
/// `h` the per-user fading rows (K_a x L), `z` the additive noise (n x L).
pub fn received_with(columns: &CMat, h: &CMat, z: &CMat) -> CMat {
    let mut y = z.clone();
    y += columns * h;
    y
}

/// Draw fading and noise and form the received signal for one trial.
pub fn simulate_received(columns: &CMat, l: usize, seed: u64, trial: u64) -> CMat {
    let n = columns.nrows();
    let users = columns.ncols();
    let mut h = DMatrix::zeros(users, l);
    let mut rng = rng_for(seed, streams::SIM_FADING, trial);
    for v in h.iter_mut() {
        *v = half_normal(&mut rng);
    }
    let mut z = DMatrix::zeros(n, l);
    let mut rng = rng_for(seed, streams::SIM_NOISE, trial);
    for v in z.iter_mut() {
        *v = half_normal(&mut rng);
    }
    received_with(columns, &h, &z)
}

fn rng_for(seed: u64, stream: u64, trial: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut x = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ trial.rotate_left(23);
    for chunk in key.chunks_exact_mut(8) {
        x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        chunk.copy_from_slice(&(z ^ (z >> 31)).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

fn half_normal(rng: &mut ChaCha8Rng) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re * std::f64::consts::FRAC_1_SQRT_2, im * std::f64::consts::FRAC_1_SQRT_2)
}

/// Energy-based activity estimate: the k in [0 : k_max] minimizing
/// |  ||Y||_F^2 - n L (1 + k P') |, ties toward the smaller k.
pub fn estimate_ka(y: &CMat, n: usize, l: usize, k_max: usize, p_prime: f64) -> usize {
    let energy: f64 = y.iter().map(|z| z.norm_sqr()).sum();
    let nl = (n * l) as f64;
    let metric = |k: usize| (energy - nl * (1.0 + k as f64 * p_prime)).abs();
    // The metric is V-shaped in k; check the two integers around the
    // unconstrained minimizer and the clamp boundaries.
    let raw = ((energy / nl - 1.0) / p_prime).floor();
    let lo = raw.clamp(0.0, k_max as f64) as usize;
    let hi = (lo + 1).min(k_max);
    if metric(lo) <= metric(hi) {
        lo
    } else {
        hi
    }
}

/// Transmitted codewords for one trial: each of `ka` users draws a message
/// i.i.d. uniform from [M]. Returns (per-user message ids, n x ka columns).
///
/// Messages index the deterministic codebook column stream, so colliding
/// users transmit the same column.
fn draw_transmissions(
    s: &Scenario,
    p_prime: f64,
    ka: usize,
    seed: u64,
    trial: u64,
) -> (Vec<u64>, CMat) {
    let mut rng = rng_for(seed, streams::SIM_MESSAGES, trial);
    let m = s.m();
    let mut msgs = Vec::with_capacity(ka);
    for _ in 0..ka {
        let msg = if let Some(small) = m.as_small() {
            rng.random_range(0..small as u64)
        } else {
            // Uniform over 2^J via rejection-free bit draws; collisions are
            // vanishingly rare and still handled by the shared column rule.
            rng.random::<u64>() >> (64 - m.bits().min(63))
        };
        msgs.push(msg);
    }
    let coords = RngCoords::new(seed, streams::SIM_CODEBOOK, 0);
    let n = s.n;
    let mut cols = DMatrix::zeros(n, ka);
    let p = s.power.expect("simulation needs a configured power");
    for (j, &msg) in msgs.iter().enumerate() {
        let col = crate::codebook::sample_column(s.ensemble, p_prime, n, coords, msg);
        // Encoder truncation: a codeword violating the max power is muted.
        let norm2: f64 = col.iter().map(|z| z.norm_sqr()).sum();
        if norm2 <= n as f64 * p * (1.0 + 1e-12) {
            for i in 0..n {
                cols[(i, j)] = col[i];
            }
        }
    }
    (msgs, cols)
}

/// Empirical distribution of the estimated activity count for a fixed true
/// K_a: frequency and binomial standard error per estimate in [0 : K].
pub fn empirical_ka_error(
    s: &Scenario,
    ka: usize,
    trials: usize,
    seed: u64,
) -> Vec<(f64, f64)> {
    let p = s.power.expect("simulation needs a configured power");
    let p_prime = s.p_prime_ratio.unwrap_or(1.0) * p;
    let counts: Vec<usize> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let (_msgs, cols) = draw_transmissions(s, p_prime, ka, seed, trial as u64);
            let y = simulate_received(&cols, s.l, seed, trial as u64);
            estimate_ka(&y, s.n, s.l, s.k, p_prime)
        })
        .collect();
    let mut hist = vec![0usize; s.k + 1];
    for c in counts {
        hist[c] += 1;
    }
    hist.into_iter()
        .map(|c| {
            let f = c as f64 / trials as f64;
            (f, (f * (1.0 - f) / trials as f64).sqrt())
        })
        .collect()
}

/// Brute-force MAP set decoder over an explicit codebook.
///
/// Minimizes `L ln|I + C G C^H| + tr(Y^H (I + C G C^H)^{-1} Y)
/// - ln(P_Ka(k) / C(M, k))` over all subsets with size in `list_range`;
/// ties break lexicographically (smaller size first, then lexicographic
/// subsets). Subset enumeration is guarded at 1e7 metric evaluations.
pub fn map_decode_bruteforce(
    y: &CMat,
    codebook: &CMat,
    l: usize,
    prior: &KaDistribution,
    m: &MSize,
    list_range: (usize, usize),
) -> Vec<usize> {
    let msize = codebook.ncols();
    let mut total: f64 = 0.0;
    for size in list_range.0..=list_range.1.min(msize) {
        total += crate::numerics::log_binomial(msize as u64, size as u64).exp();
    }
    assert!(total <= 1e7, "subset enumeration guard: {total:.3e} candidates");

    let mut best: Option<(f64, Vec<usize>)> = None;
    for size in list_range.0..=list_range.1.min(msize) {
        let prior_ln = prior.ln_pmf(size) - m.log_binomial(size as u64);
        if prior_ln == f64::NEG_INFINITY {
            continue;
        }
        let mut subset: Vec<usize> = (0..size).collect();
        loop {
            let cols = codebook.select_columns(subset.iter());
            let g = WeightedGram::unit(cols);
            let metric = l as f64 * logdet_shifted(&g, 1.0, 1.0).expect("PSD Gram")
                + quadratic_form_inv(&g, y)
                - prior_ln;
            if best.as_ref().is_none_or(|(b, _)| metric < *b) {
                best = Some((metric, subset.clone()));
            }
            if !next_combination(&mut subset, msize) {
                break;
            }
        }
    }
    best.map(|(_, s)| s).unwrap_or_default()
}

/// Advance to the next lexicographic k-combination of [0, m); false at end.
fn next_combination(subset: &mut [usize], m: usize) -> bool {
    let k = subset.len();
    if k == 0 {
        return false;
    }
    let mut i = k;
    while i > 0 {
        i -= 1;
        if subset[i] < m - (k - i) {
            subset[i] += 1;
            for j in (i + 1)..k {
                subset[j] = subset[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

fn sample_ka(dist: &KaDistribution, rng: &mut ChaCha8Rng) -> usize {
    match dist {
        KaDistribution::Fixed(k) => *k,
        KaDistribution::Binomial { k, p } => {
            (0..*k).filter(|_| rng.random::<f64>() < *p).count()
        }
        KaDistribution::Pmf(v) => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (k, &q) in v.iter().enumerate() {
                acc += q;
                if u < acc {
                    return k;
                }
            }
            v.len() - 1
        }
    }
}

/// Run one full trial: draw activity, transmit, estimate, decode, count.
pub fn run_trial(s: &Scenario, codebook: &CMat, seed: u64, trial: u64) -> TrialOutcome {
    let p = s.power.expect("simulation needs a configured power");
    let p_prime = s.p_prime_ratio.unwrap_or(1.0) * p;
    let mut rng = rng_for(seed, streams::SIM_MESSAGES, trial);
    let ka = sample_ka(&s.ka_dist, &mut rng);
    let m = s.m();
    let msize = codebook.ncols();
    let msgs: Vec<usize> = (0..ka).map(|_| rng.random_range(0..msize)).collect();
    let mut cols = DMatrix::zeros(s.n, ka);
    for (j, &msg) in msgs.iter().enumerate() {
        let norm2: f64 = codebook.column(msg).iter().map(|z| z.norm_sqr()).sum();
        if norm2 <= s.n as f64 * p * (1.0 + 1e-12) {
            cols.set_column(j, &codebook.column(msg));
        }
    }
    let y = simulate_received(&cols, s.l, seed, trial);
    let est = estimate_ka(&y, s.n, s.l, s.k, p_prime);
    let (kl, ku) = s.truncation();
    let list_lo = kl.max(est.saturating_sub(s.r_prime));
    let list_hi = ku.min(est + s.r_prime);
    let decoded = map_decode_bruteforce(&y, codebook, s.l, &s.ka_dist, &m, (list_lo, list_hi));
    let (md_count, fa_count) = count_md_fa(&msgs, &decoded);
    TrialOutcome { true_ka: ka, est_ka: est, decoded_set: decoded, md_count, fa_count }
}

/// Misdetections are counted per user, false alarms per decoded message.
pub fn count_md_fa(msgs: &[usize], decoded: &[usize]) -> (usize, usize) {
    let md = msgs.iter().filter(|w| !decoded.contains(w)).count();
    let fa = decoded.iter().filter(|d| !msgs.contains(d)).count();
    (md, fa)
}

/// Materialize the full codebook; small-M mode only.
pub fn materialize_codebook(s: &Scenario) -> CMat {
    let m = s.m().as_small().expect("codebook materialization needs M <= 2^16");
    let p = s.power.expect("simulation needs a configured power");
    let p_prime = s.p_prime_ratio.unwrap_or(1.0) * p;
    let coords = RngCoords::new(s.mc.seed, streams::SIM_CODEBOOK, 0);
    sample_columns(s.ensemble, p_prime, s.n, m, coords)
}

/// Monte-Carlo per-user misdetection and false-alarm fractions with
/// standard errors, exactly per their defining indicator forms.
pub fn empirical_md_fa(s: &Scenario, trials: usize, seed: u64) -> ((f64, f64), (f64, f64)) {
    let codebook = materialize_codebook(s);
    let fractions: Vec<(f64, f64)> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let out = run_trial(s, &codebook, seed, trial as u64);
            let md = if out.true_ka >= 1 {
                out.md_count as f64 / out.true_ka as f64
            } else {
                0.0
            };
            let fa = if !out.decoded_set.is_empty() {
                out.fa_count as f64 / out.decoded_set.len() as f64
            } else {
                0.0
            };
            (md, fa)
        })
        .collect();
    let md: Vec<f64> = fractions.iter().map(|f| f.0).collect();
    let fa: Vec<f64> = fractions.iter().map(|f| f.1).collect();
    (mean_and_se(&md), mean_and_se(&fa))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CodebookEnsemble, ErrorTargets, McConfig};

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
            mc: McConfig { samples: 100, seed: 3, conservative: false },
            k_l: Some(0),
            k_u: Some(4),
            r_prime: 1,
            tail_mass: None,
        }
    }

    #[test]
    fn no_users_gives_noise_energy() {
        let s = tiny_scenario();
        let cols = CMat::zeros(s.n, 0);
        let trials = 4000;
        let mean: f64 = (0..trials)
            .map(|t| {
                let y = simulate_received(&cols, s.l, 1, t);
                y.iter().map(|z| z.norm_sqr()).sum::<f64>()
            })
            .sum::<f64>()
            / trials as f64;
        let nl = (s.n * s.l) as f64;
        // E||Z||^2 = nL, sd of the mean ~ nl/sqrt(nl*trials)
        assert!((mean - nl).abs() < 4.0 * nl / (nl * trials as f64).sqrt());
    }

    #[test]
    fn deterministic_stub_reproduces_column() {
        let s = tiny_scenario();
        let coords = RngCoords::new(9, streams::SIM_CODEBOOK, 0);
        let cols = sample_columns(s.ensemble, 1.0, s.n, 1, coords);
        let h = CMat::from_element(1, s.l, Complex64::from(1.0));
        let z = CMat::zeros(s.n, s.l);
        let y = received_with(&cols, &h, &z);
        for lcol in 0..s.l {
            for i in 0..s.n {
                assert_eq!(y[(i, lcol)], cols[(i, 0)]);
            }
        }
    }

    #[test]
    fn mean_energy_identity() {
        // E ||Y||_F^2 / (nL) = 1 + K_a P' for the spherical ensemble.
        let mut s = tiny_scenario();
        s.n = 32;
        s.l = 4;
        s.power = Some(0.5);
        let p_prime = 0.5;
        let ka = 3;
        let trials = 10_000usize;
        let vals: Vec<f64> = (0..trials)
            .map(|t| {
                let (_m, cols) = draw_transmissions(&s, p_prime, ka, 11, t as u64);
                let y = simulate_received(&cols, s.l, 11, t as u64);
                y.iter().map(|z| z.norm_sqr()).sum::<f64>() / (s.n * s.l) as f64
            })
            .collect();
        let (mean, se) = mean_and_se(&vals);
        let expect = 1.0 + ka as f64 * p_prime;
        assert!((mean - expect).abs() <= 3.0 * se, "mean {mean} vs {expect} (se {se})");
    }

    #[test]
    fn estimator_basics() {
        let s = tiny_scenario();
        let y = CMat::zeros(s.n, s.l);
        assert_eq!(estimate_ka(&y, s.n, s.l, s.k, 1.0), 0);

        // Energy exactly nL(1 + 7 P') -> 7; halfway ties toward smaller.
        let nl = (s.n * s.l) as f64;
        let p = 0.9;
        let mk = |ka: f64| {
            let e = nl * (1.0 + ka * p);
            let v = (e / (s.n * s.l) as f64).sqrt();
            CMat::from_element(s.n, s.l, Complex64::from(v))
        };
        assert_eq!(estimate_ka(&mk(7.0), s.n, s.l, 20, p), 7);
        assert_eq!(estimate_ka(&mk(7.5), s.n, s.l, 20, p), 7);
    }

    #[test]
    fn estimator_concentrates_with_many_antennas() {
        // Quasi-static fading caps what raw power can do; concentration
        // comes from antennas averaging the per-antenna energy.
        let mut s = tiny_scenario();
        s.n = 24;
        s.l = 256;
        s.k = 20;
        s.power = Some(400.0);
        let freqs = empirical_ka_error(&s, 10, 400, 5);
        assert!(freqs[10].0 > 0.85, "freq at truth: {}", freqs[10].0);
        let total: f64 = freqs.iter().map(|f| f.0).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn combinations_enumerate_lexicographically() {
        let mut c = vec![0usize, 1];
        let mut seen = vec![c.clone()];
        while next_combination(&mut c, 4) {
            seen.push(c.clone());
        }
        assert_eq!(seen, vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]);
    }

    #[test]
    fn decoder_empty_range_returns_empty() {
        let s = tiny_scenario();
        let cb = materialize_codebook(&s);
        let y = CMat::zeros(s.n, s.l);
        let out = map_decode_bruteforce(&y, &cb, s.l, &s.ka_dist, &s.m(), (0, 0));
        assert!(out.is_empty());
    }

    #[test]
    fn decoder_recovers_single_user_at_high_snr() {
        let mut s = tiny_scenario();
        s.power = Some(1e4);
        s.ka_dist = KaDistribution::Fixed(1);
        let cb = materialize_codebook(&s);
        let mut hits = 0;
        let trials = 300;
        for t in 0..trials {
            let msg = (t % 8) as usize;
            let mut cols = CMat::zeros(s.n, 1);
            cols.set_column(0, &cb.column(msg));
            let y = simulate_received(&cols, s.l, 21, t);
            let out = map_decode_bruteforce(&y, &cb, s.l, &s.ka_dist, &s.m(), (1, 1));
            if out == vec![msg] {
                hits += 1;
            }
        }
        assert!(hits as f64 / trials as f64 >= 0.99, "hit rate {}", hits as f64 / trials as f64);
    }

    #[test]
    fn ground_truth_decoder_stub_gives_zero_errors() {
        // A decoder that returns exactly the transmitted set produces no
        // misdetections and no false alarms.
        let msgs = vec![3usize, 5, 3, 1];
        let decoded = vec![1usize, 3, 5];
        assert_eq!(count_md_fa(&msgs, &decoded), (0, 0));
        let partial = vec![3usize, 7];
        // Users of message 1 and 5 are missed; message 7 is a false alarm.
        assert_eq!(count_md_fa(&msgs, &partial), (2, 1));
    }

    #[test]
    fn outcome_invariants_hold() {
        let s = tiny_scenario();
        let codebook = materialize_codebook(&s);
        for trial in 0..50 {
            let out = run_trial(&s, &codebook, 13, trial);
            assert!(out.md_count <= out.true_ka);
            assert!(out.fa_count <= out.decoded_set.len());
        }
    }

    #[test]
    fn trials_deterministic_across_worker_counts() {
        let s = tiny_scenario();
        let a = empirical_md_fa(&s, 200, 7);
        let b = empirical_md_fa(&s, 200, 7);
        assert_eq!(a, b);
    }
}
