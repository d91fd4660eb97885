//! Per-cell Chernoff terms: the union-bound exponential q1 and the
//! good-region complements q2 / q2_t0, evaluated on Monte-Carlo codebook
//! samples through rank-reduced linear algebra.
//!
//! Everything n x n collapses: the four `I + Gram` forms share one column
//! set of size s = K_a + |W2|, and the (u, r) objective needs only a k x k
//! Hermitian factorization with k = |W1| + t + t', so a single scalar
//! optimization step costs O(k^3) regardless of n. Quantities that depend
//! on the cell only through (K_a, |W1|) - the q2 side and the F / F_1
//! solves - are built once per row and shared across cells.

use nalgebra::{Cholesky, DMatrix};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::model::{KaDistribution, MSize};
use crate::numerics::{
    golden_section, log_mean_exp, mean_and_se, minimize_scalar, reg_gamma_lower_fast,
    reg_gamma_upper, reg_gamma_upper_fast, SearchDomain,
};

type CMat = DMatrix<Complex64>;

/// ln P_Ka(k) - ln C(M, k); the prior weight of a list size.
pub fn f_b(k: usize, dist: &KaDistribution, m: &MSize) -> f64 {
    let lp = dist.ln_pmf(k);
    if lp == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    lp - m.log_binomial(k as u64)
}

/// Static description of one error cell (K_a, K'_a, t, t').
#[derive(Debug, Clone)]
pub struct CellShape {
    pub ka: usize,
    pub t: usize,
    pub tp: usize,
    /// |W1| = t + (K_a - K'_{a,u})^+ misdetected codewords.
    pub w1: usize,
    /// (K_a - K'_{a,u})^+ forced misdetections.
    pub w11: usize,
    /// |W2| = t' + (K'_{a,l} - K_a)^+ false alarms.
    pub w2: usize,
    /// (K'_{a,l} - K_a)^+ forced false alarms.
    pub w21: usize,
    pub k_hat: usize,
    /// Shared column count K_a + |W2|.
    pub s: usize,
    /// Rank of the whitened misdetection form, min(n, |W1|).
    pub m_rank: usize,
    // Prior constants of the four subset sizes.
    pub b: f64,
    pub b1: f64,
    pub b_hat: f64,
    pub b_pp: f64,
    /// ln C(K_a, |W1|) + ln C(M - K_a, |W2|).
    pub ln_comb: f64,
    /// ln C(K_a, |W1|).
    pub ln_binom_w1: f64,
}

impl CellShape {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ka: usize,
        t: usize,
        tp: usize,
        w11: usize,
        w21: usize,
        k_hat: usize,
        dist: &KaDistribution,
        m: &MSize,
        n: usize,
    ) -> Self {
        let w1 = t + w11;
        let w2 = tp + w21;
        let s = ka + w2;
        let s_pp = ka - w11 + w21;
        CellShape {
            ka,
            t,
            tp,
            w1,
            w11,
            w2,
            w21,
            k_hat,
            s,
            m_rank: w1.min(n).max(1),
            b: f_b(ka, dist, m),
            b1: f_b(ka - w1, dist, m),
            b_hat: f_b(k_hat, dist, m),
            b_pp: f_b(s_pp, dist, m),
            ln_comb: crate::numerics::log_binomial(ka as u64, w1 as u64)
                + m.log_binomial_less(ka as u64, w2 as u64),
            ln_binom_w1: crate::numerics::log_binomial(ka as u64, w1 as u64),
        }
    }
}

/// Cholesky of `I + G[idx, idx]` for a subset of a shared Gram.
struct SubsetChol {
    idx: Vec<usize>,
    factor: Cholesky<Complex64, nalgebra::Dyn>,
    logdet: f64,
}

fn chol_subset(gram: &CMat, idx: Vec<usize>) -> SubsetChol {
    let k = idx.len();
    let mut m = CMat::identity(k, k);
    for (a, &i) in idx.iter().enumerate() {
        for (b, &j) in idx.iter().enumerate() {
            m[(a, b)] += gram[(i, j)];
        }
    }
    crate::linalg::hermitize(&mut m);
    let factor = Cholesky::new(m).expect("I + Gram subset is positive definite");
    let logdet: f64 = (0..k).map(|i| factor.l_dirty()[(i, i)].re.ln() * 2.0).sum();
    SubsetChol { idx, factor, logdet }
}

impl SubsetChol {
    /// Coefficient-space Woodbury solve: `(I + C_idx C_idx^H)^{-1} C_cols`
    /// expressed as `C * coef` over `s` shared columns.
    fn solve_coef(&self, gram: &CMat, s: usize, cols: &[usize]) -> CMat {
        let w = cols.len();
        let mut coef = CMat::zeros(s, w);
        for (j, &c) in cols.iter().enumerate() {
            coef[(c, j)] = Complex64::from(1.0);
        }
        if self.idx.is_empty() {
            return coef;
        }
        let mut rhs = CMat::zeros(self.idx.len(), w);
        for (a, &i) in self.idx.iter().enumerate() {
            for (j, &c) in cols.iter().enumerate() {
                rhs[(a, j)] = gram[(i, c)];
            }
        }
        let sol = self.factor.solve(&rhs);
        for (a, &i) in self.idx.iter().enumerate() {
            for j in 0..w {
                coef[(i, j)] -= sol[(a, j)];
            }
        }
        coef
    }
}

// ---------------------------------------------------------------------------
// Row-level state, shared by every cell with the same (K_a, |W1|)
// ---------------------------------------------------------------------------

/// Per-sample quantities depending on the cell only through (K_a, |W1|).
pub struct RowSample {
    pub ln_f: f64,
    pub ln_f1: f64,
    /// L ln|F| - b and L ln|F_1| - b_1.
    pub e: f64,
    pub e1: f64,
    /// Geometric mean of the whitened misdetection eigenvalues.
    pub pl: f64,
    /// K_a x |W1| coefficients with F^{-1} - F_1^{-1} = -(C z1)(C z1)^H.
    z1: CMat,
}

/// One row: shared per-sample bases plus the q2 values over the whole
/// (omega, nu) grid, ascending in q2.
pub struct RowData {
    pub samples: Vec<RowSample>,
    pub q2_grid: Vec<(f64, f64, f64)>,
    pub ka: usize,
    pub w1: usize,
}

/// Prior constants and sizes a row needs (independent of t', K'_a).
fn row_consts(ka: usize, w1: usize, dist: &KaDistribution, m: &MSize) -> (f64, f64) {
    (f_b(ka, dist, m), f_b(ka - w1, dist, m))
}

pub fn build_row(
    ka: usize,
    w1: usize,
    dist: &KaDistribution,
    m: &MSize,
    n: usize,
    l: usize,
    grams: &[CMat],
) -> RowData {
    let (b, b1) = row_consts(ka, w1, dist, m);
    let l_f = l as f64;
    let m_rank = w1.min(n).max(1);
    let samples: Vec<RowSample> = grams
        .par_iter()
        .map(|gram| {
            let set_f: Vec<usize> = (0..ka).collect();
            let set_f1: Vec<usize> = (0..ka - w1).collect();
            let ch_f = chol_subset(gram, set_f);
            let ch_f1 = chol_subset(gram, set_f1);
            let w1_cols: Vec<usize> = (ka - w1..ka).collect();
            let (sll, z1) = if w1 > 0 {
                let x1 = ch_f1.solve_coef(gram, ka, &w1_cols);
                let mut q1m = CMat::zeros(w1, w1);
                for (a, &i) in w1_cols.iter().enumerate() {
                    for bq in 0..w1 {
                        let mut acc = Complex64::from(0.0);
                        for c in 0..ka {
                            acc += gram[(i, c)] * x1[(c, bq)];
                        }
                        q1m[(a, bq)] = acc;
                    }
                }
                crate::linalg::hermitize(&mut q1m);
                let sll: f64 = if w1 <= n {
                    let ch = gram_psd_chol(&q1m);
                    (0..w1).map(|i| ch[(i, i)].re.max(f64::MIN_POSITIVE).ln() * 2.0).sum()
                } else {
                    crate::linalg::hermitian_eigenvalues(q1m.clone())
                        .iter()
                        .take(m_rank)
                        .map(|e| e.max(f64::MIN_POSITIVE).ln())
                        .sum()
                };
                let mut iq = q1m;
                for i in 0..w1 {
                    iq[(i, i)] += Complex64::from(1.0);
                }
                crate::linalg::hermitize(&mut iq);
                let lch = Cholesky::new(iq).expect("I + Q1 is PD");
                let zh = lch
                    .l()
                    .solve_lower_triangular(&x1.adjoint())
                    .expect("triangular solve");
                (sll, zh.adjoint())
            } else {
                (0.0, CMat::zeros(ka, 0))
            };
            RowSample {
                ln_f: ch_f.logdet,
                ln_f1: ch_f1.logdet,
                e: sub_inf(l_f * ch_f.logdet, b),
                e1: sub_inf(l_f * ch_f1.logdet, b1),
                pl: if w1 > 0 { (sll / m_rank as f64).exp() } else { 1.0 },
                z1,
            }
        })
        .collect();

    // The cheap q2 pass over the whole (omega, nu) grid with a coarse
    // delta budget; cells read these to order and prune their q1 work.
    let ln_binom_w1 = crate::numerics::log_binomial(ka as u64, w1 as u64);
    let omegas = omega_grid(w1 > 0);
    let nus = nu_grid();
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(omegas.len() * nus.len());
    for &w in &omegas {
        for &v in &nus {
            pts.push((w, v));
        }
    }
    let mut q2_grid: Vec<(f64, f64, f64)> = pts
        .par_iter()
        .map(|&(w, v)| {
            let q2 = if w1 > 0 {
                q2_row_value(&samples, ln_binom_w1, m_rank, n, l, w, v, (8, 6)).0
            } else {
                q2_t0_row(&samples, n, l, w, v).0
            };
            (q2, w, v)
        })
        .collect();
    q2_grid.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
    RowData { samples, q2_grid, ka, w1 }
}

/// q2 for |W1| > 0 rows: binom(K_a, |W1|) times the delta-minimized sum of
/// the energy-ball complement and the whitened-sum lower tail. The value
/// can exceed one; the final min{1, .} absorbs it.
#[allow(clippy::too_many_arguments)]
pub fn q2_row_value(
    samples: &[RowSample],
    ln_binom_w1: f64,
    m_rank: usize,
    n: usize,
    l: usize,
    omega: f64,
    nu: f64,
    budget: (usize, usize),
) -> (f64, f64, f64) {
    let nl = (n * l) as f64;
    let lm = (l * m_rank) as f64;
    let eval = |delta: f64| -> f64 {
        let head = reg_gamma_upper_fast(nl, nl * (1.0 + delta));
        let mut acc = 0.0;
        for c in samples {
            acc += q2_gamma_term(c, nl, lm, delta, omega, nu);
        }
        head + acc / samples.len() as f64
    };
    let mut best = (eval(0.0), 0.0);
    let dom = SearchDomain::logarithmic(1e-4, 10.0).with_budget(budget.0, budget.1);
    if let Ok(m) = minimize_scalar(eval, &dom) {
        if m.value < best.0 {
            best = (m.value, m.argmin);
        }
    }
    let binom = ln_binom_w1.exp();
    let se = {
        let vals: Vec<f64> = samples
            .iter()
            .map(|c| q2_gamma_term(c, nl, lm, best.1, omega, nu))
            .collect();
        mean_and_se(&vals).1 * binom
    };
    (binom * best.0, se, best.1)
}

fn q2_gamma_term(c: &RowSample, nl: f64, lm: f64, delta: f64, omega: f64, nu: f64) -> f64 {
    let num = nl * (1.0 + delta) * (1.0 - omega) - mul_guard(omega, c.e1) + c.e - nl * nu;
    if !num.is_finite() {
        return if num == f64::NEG_INFINITY { 0.0 } else { 1.0 };
    }
    let arg = num / (omega * c.pl);
    if arg <= 0.0 {
        return 0.0;
    }
    reg_gamma_lower_fast(lm, arg)
}

/// q2 for the no-misdetection branch (|W1| = 0); the delta knob is absent.
pub fn q2_t0_row(samples: &[RowSample], n: usize, l: usize, omega: f64, nu: f64) -> (f64, f64) {
    let nl = (n * l) as f64;
    let vals: Vec<f64> = samples
        .iter()
        .map(|c| {
            let arg = if omega >= 1.0 { f64::INFINITY } else { nl * nu / (1.0 - omega) - c.e };
            if arg == f64::INFINITY {
                0.0
            } else if arg <= 0.0 {
                1.0
            } else {
                reg_gamma_upper_fast(nl, arg)
            }
        })
        .collect();
    mean_and_se(&vals)
}

// ---------------------------------------------------------------------------
// Cell-level q1 state
// ---------------------------------------------------------------------------

/// Per-sample reduced operators for one cell's (u, r) objective.
pub struct SampleCtx {
    /// k x k Hermitian pieces of the objective M(u,r,w) = alpha I - u A2
    /// - r w B1, flattened row-major.
    a2: Vec<Complex64>,
    b1m: Vec<Complex64>,
    k: usize,
    /// u-coefficient L(ln|F''| - ln|F'|) + (b' - b'').
    cu: f64,
    /// r-coefficient without the noise tilt: b - L ln|F|.
    cr: f64,
    /// (r w)-coefficient L ln|F_1| - b_1.
    cw: f64,
}

impl SampleCtx {
    /// Build from the scaled Gram of the cell's s columns plus the row
    /// base of its (K_a, |W1|) class.
    pub fn build(shape: &CellShape, gram: &CMat, row: &RowSample, n: usize, l: usize) -> SampleCtx {
        let s = shape.s;
        let ka = shape.ka;
        let l_f = l as f64;
        let mut set_fp: Vec<usize> = (0..ka - shape.w1).collect();
        set_fp.extend(ka..s);
        let mut set_fpp: Vec<usize> = (0..ka - shape.w11).collect();
        set_fpp.extend(ka..ka + shape.w21);
        let ch_fp = chol_subset(gram, set_fp);
        let ch_fpp = chol_subset(gram, set_fpp);

        // Z1 lifts from the row's K_a-dimensional coefficients.
        let mut z1 = CMat::zeros(s, shape.w1);
        z1.view_mut((0, 0), (ka, shape.w1)).copy_from(&row.z1);

        // Sign-split difference F''^{-1} - F'^{-1} through the joint update
        // with columns Delta- = W2 \ W2,1 (+1) and Delta+ = W1,2 (-1).
        let mut uc_cols: Vec<usize> = (ka + shape.w21..s).collect();
        let delta_minus = uc_cols.len();
        uc_cols.extend(ka - shape.w1..ka - shape.w11);
        let k2 = uc_cols.len();
        let (z2, lam2) = if k2 > 0 {
            let xc = ch_fpp.solve_coef(gram, s, &uc_cols);
            let mut mid = CMat::zeros(k2, k2);
            for (a, &i) in uc_cols.iter().enumerate() {
                for bq in 0..k2 {
                    let mut acc = Complex64::from(0.0);
                    for c in 0..s {
                        acc += gram[(i, c)] * xc[(c, bq)];
                    }
                    mid[(a, bq)] = acc;
                }
            }
            for j in 0..k2 {
                mid[(j, j)] += Complex64::from(if j < delta_minus { 1.0 } else { -1.0 });
            }
            crate::linalg::hermitize(&mut mid);
            let se = mid.symmetric_eigen();
            let lam2: Vec<f64> = se.eigenvalues.iter().map(|d| 1.0 / d).collect();
            (xc * se.eigenvectors, lam2)
        } else {
            (CMat::zeros(s, 0), Vec::new())
        };

        // N^H N = Z^H (G + G[:,W] G[W,:]) Z in coefficient space.
        let k = k2 + shape.w1;
        let (a2, b1m) = if k > 0 {
            let mut z = CMat::zeros(s, k);
            z.view_mut((0, 0), (s, k2)).copy_from(&z2);
            z.view_mut((0, k2), (s, shape.w1)).copy_from(&z1);
            let gz = gram * &z;
            let gw = gz.view((0, 0), (ka, k)).into_owned();
            let mut nn = z.adjoint() * &gz;
            nn += gw.adjoint() * &gw;
            crate::linalg::hermitize(&mut nn);
            let lch = gram_psd_chol(&nn);
            let mut a2 = vec![Complex64::from(0.0); k * k];
            let mut b1m = vec![Complex64::from(0.0); k * k];
            for j in 0..k {
                // r_j = j-th column of R_N = L^H => r_j[i] = conj(L[j, i]).
                let col: Vec<Complex64> = (0..k).map(|i| lch[(j, i)].conj()).collect();
                let target = if j < k2 { &mut a2 } else { &mut b1m };
                let scale = if j < k2 { lam2[j] } else { 1.0 };
                for a in 0..k {
                    for b in 0..k {
                        target[a * k + b] += Complex64::from(scale) * col[a] * col[b].conj();
                    }
                }
            }
            (a2, b1m)
        } else {
            (Vec::new(), Vec::new())
        };

        SampleCtx {
            a2,
            b1m,
            k,
            cu: add_inf(l_f * (ch_fpp.logdet - ch_fp.logdet), sub_inf(shape.b_hat, shape.b_pp)),
            cr: sub_inf(shape.b, l_f * row.ln_f),
            cw: sub_inf(l_f * row.ln_f1, shape.b1),
        }
    }

    /// The q1 Chernoff exponent at one (u, r) for fixed omega and noise
    /// tilt; `+inf` marks an infeasible B.
    pub fn q1_exponent(&self, n: usize, l: usize, u: f64, r: f64, omega: f64, tilt: f64) -> f64 {
        let alpha = 1.0 + r * (1.0 - omega);
        let tau = 1e-12 * (1.0 + r);
        if alpha <= tau {
            return f64::INFINITY;
        }
        let l_f = l as f64;
        // |B| = alpha^{n-k} |alpha I_k + R D R^H| holds for any k, n.
        let ln_b = match self.ln_b(u, r * omega, alpha, tau) {
            Some(v) => (n as f64 - self.k as f64) * alpha.ln() + v,
            None => return f64::INFINITY,
        };
        let mut acc = -l_f * ln_b;
        acc += mul_guard(u, self.cu);
        acc += mul_guard(r, tilt + self.cr);
        acc += mul_guard(r * omega, self.cw);
        acc
    }

    /// ln det of the k x k reduced block, or None when a pivot falls below
    /// the feasibility floor.
    fn ln_b(&self, u: f64, rw: f64, alpha: f64, tau: f64) -> Option<f64> {
        let k = self.k;
        if k == 0 {
            return Some(0.0);
        }
        let mut m = vec![Complex64::from(0.0); k * k];
        for a in 0..k {
            for b in 0..k {
                let mut v = -Complex64::from(u) * self.a2[a * k + b]
                    - Complex64::from(rw) * self.b1m[a * k + b];
                if a == b {
                    v += Complex64::from(alpha);
                }
                m[a * k + b] = v;
            }
        }
        let mut logdet = 0.0;
        for j in 0..k {
            let mut d = m[j * k + j].re;
            for p in 0..j {
                d -= m[j * k + p].norm_sqr();
            }
            if !(d > tau) {
                return None;
            }
            let ds = d.sqrt();
            logdet += d.ln();
            m[j * k + j] = Complex64::from(ds);
            for i in (j + 1)..k {
                let mut v = m[i * k + j];
                for p in 0..j {
                    v -= m[i * k + p] * m[j * k + p].conj();
                }
                m[i * k + j] = v / ds;
            }
        }
        Some(logdet)
    }
}

/// Cholesky of a PSD Gram that may be numerically rank-deficient: trailing
/// pivots clamp to zero.
fn gram_psd_chol(m: &CMat) -> CMat {
    let k = m.nrows();
    let mut l = m.clone();
    for j in 0..k {
        let mut d = l[(j, j)].re;
        for p in 0..j {
            d -= l[(j, p)].norm_sqr();
        }
        let ds = if d > 1e-300 { d.sqrt() } else { 0.0 };
        l[(j, j)] = Complex64::from(ds);
        for i in (j + 1)..k {
            let mut v = l[(i, j)];
            for p in 0..j {
                v -= l[(i, p)] * l[(j, p)].conj();
            }
            l[(i, j)] = if ds > 0.0 { v / ds } else { Complex64::from(0.0) };
        }
        for i in 0..j {
            l[(i, j)] = Complex64::from(0.0);
        }
    }
    l
}

fn mul_guard(x: f64, coef: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * coef
    }
}

fn sub_inf(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY && b == f64::NEG_INFINITY {
        f64::NAN // both prior masses vanish; callers skip such cells
    } else {
        a - b
    }
}

fn add_inf(a: f64, b: f64) -> f64 {
    if (a == f64::NEG_INFINITY && b == f64::INFINITY)
        || (a == f64::INFINITY && b == f64::NEG_INFINITY)
    {
        f64::NAN
    } else {
        a + b
    }
}

/// Inner 2-D (u, r) search schedule: 8 x 8 coarse grid on [0, 4]^2, then a
/// golden pass on each coordinate.
const UR_GRID: usize = 8;
const UR_MAX: f64 = 4.0;
const UR_GOLDEN_EVALS: usize = 12;

/// Per-sample minimum exponent over feasible (u, r) at one (omega, nu).
fn q1_sample_min(
    ctx: &SampleCtx,
    n: usize,
    l: usize,
    omega: f64,
    tilt: f64,
    grid_base: &[f64; UR_GRID * UR_GRID],
) -> f64 {
    let step = UR_MAX / (UR_GRID - 1) as f64;
    let mut best = f64::INFINITY;
    let mut best_ij = (0usize, 0usize);
    for i in 0..UR_GRID {
        for j in 0..UR_GRID {
            let r = j as f64 * step;
            let v = grid_base[i * UR_GRID + j] + mul_guard(r, tilt);
            if v < best {
                best = v;
                best_ij = (i, j);
            }
        }
    }
    let (bi, bj) = best_ij;
    let u0 = bi as f64 * step;
    let r0 = bj as f64 * step;
    let (u1, v1) = golden_section(
        |u| ctx.q1_exponent(n, l, u, r0, omega, tilt),
        (u0 - step).max(0.0),
        u0 + step,
        UR_GOLDEN_EVALS,
    );
    let u_ref = if v1 < best { u1 } else { u0 };
    best = best.min(v1);
    let (_, v2) = golden_section(
        |r| ctx.q1_exponent(n, l, u_ref, r, omega, tilt),
        (r0 - step).max(0.0),
        r0 + step,
        UR_GOLDEN_EVALS,
    );
    best = best.min(v2);
    // (0,0) is always feasible with exponent 0, so the per-sample term
    // never exceeds one.
    best.min(0.0)
}

/// Tilt-free (u, r) grid values for one (sample, omega).
pub fn q1_grid_base(ctx: &SampleCtx, n: usize, l: usize, omega: f64) -> [f64; UR_GRID * UR_GRID] {
    let step = UR_MAX / (UR_GRID - 1) as f64;
    let mut out = [f64::INFINITY; UR_GRID * UR_GRID];
    for i in 0..UR_GRID {
        for j in 0..UR_GRID {
            out[i * UR_GRID + j] =
                ctx.q1_exponent(n, l, i as f64 * step, j as f64 * step, omega, 0.0);
        }
    }
    out
}

/// ln q1(omega, nu) with per-sample (u, r) optimization, plus an SE and
/// the mean-argmin used to seed warm evaluations.
pub fn q1_ln(
    shape: &CellShape,
    samples: &[SampleCtx],
    n: usize,
    l: usize,
    omega: f64,
    nu: f64,
    grid_bases: &[[f64; UR_GRID * UR_GRID]],
) -> (f64, f64) {
    let tilt = l as f64 * n as f64 * nu;
    let vals: Vec<f64> = samples
        .par_iter()
        .zip(grid_bases.par_iter())
        .map(|(ctx, gb)| q1_sample_min(ctx, n, l, omega, tilt, gb))
        .collect();
    let ln_mean = log_mean_exp(&vals);
    let linear: Vec<f64> = vals.iter().map(|v| v.exp()).collect();
    let (_, se) = mean_and_se(&linear);
    (shape.ln_comb + ln_mean, se * shape.ln_comb.exp())
}

/// Mean-objective (u, r) argmin over the coarse grid at one (omega, nu);
/// seeds the warm single-point tier of later rows.
fn q1_mean_argmin(grid_bases: &[[f64; UR_GRID * UR_GRID]], tilt: f64) -> (f64, f64) {
    let step = UR_MAX / (UR_GRID - 1) as f64;
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in 0..UR_GRID {
        for j in 0..UR_GRID {
            let r = j as f64 * step;
            let vals: Vec<f64> = grid_bases
                .iter()
                .map(|gb| (gb[i * UR_GRID + j] + mul_guard(r, tilt)).min(0.0))
                .collect();
            let v = log_mean_exp(&vals);
            if v < best.0 {
                best = (v, i as f64 * step, r);
            }
        }
    }
    (best.1, best.2)
}

/// Warm-start parameters achieving a full cell optimum; later rows reuse
/// them for single-point (still valid, merely looser) evaluations.
#[derive(Debug, Clone, Copy)]
pub struct WarmStart {
    pub omega: f64,
    pub nu: f64,
    pub u: f64,
    pub r: f64,
    pub delta: f64,
}

impl Default for WarmStart {
    fn default() -> Self {
        WarmStart { omega: 0.5, nu: 0.1, u: 0.5, r: 0.5, delta: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellEffort {
    /// Full (omega, nu) grid plus one coordinate-descent pass.
    Full,
    /// Single warm-started point with fixed (u, r); valid but looser.
    WarmPoint,
}

#[derive(Debug, Clone, Copy)]
pub struct CellResult {
    pub p: f64,
    pub se: f64,
    pub warm: WarmStart,
}

/// q2 at one (omega, nu) with the full delta budget, through the row cache.
fn q2_at(row: &RowData, shape: &CellShape, n: usize, l: usize, omega: f64, nu: f64) -> (f64, f64, f64) {
    if shape.w1 > 0 {
        q2_row_value(&row.samples, shape.ln_binom_w1, shape.m_rank, n, l, omega, nu, (12, 16))
    } else {
        let (v, se) = q2_t0_row(&row.samples, n, l, omega, nu);
        (v, se, 0.0)
    }
}

/// min over the (omega, nu) schedule of the q2 branch plus q1: the cell's
/// misdecoding probability bound before the outer min{1, ., p'}.
pub fn p_misdecode_cell(
    shape: &CellShape,
    samples: &[SampleCtx],
    row: &RowData,
    n: usize,
    l: usize,
    effort: CellEffort,
    warm: Option<WarmStart>,
) -> CellResult {
    if effort == CellEffort::WarmPoint {
        let w = warm.unwrap_or_default();
        // A handful of deltas around the warm optimum; any subset of the
        // delta search upper-bounds the true q2 minimum.
        let (q2, q2_se) = if shape.w1 > 0 {
            let nl = (n * l) as f64;
            let lm = (l * shape.m_rank) as f64;
            let mut best = f64::INFINITY;
            for d in [0.0, w.delta, w.delta * 0.5, w.delta * 2.0] {
                let head = reg_gamma_upper_fast(nl, nl * (1.0 + d));
                let mean = row
                    .samples
                    .iter()
                    .map(|c| q2_gamma_term(c, nl, lm, d, w.omega, w.nu))
                    .sum::<f64>()
                    / row.samples.len() as f64;
                best = best.min(head + mean);
            }
            let se = {
                let vals: Vec<f64> = row
                    .samples
                    .iter()
                    .map(|c| q2_gamma_term(c, nl, lm, w.delta, w.omega, w.nu))
                    .collect();
                mean_and_se(&vals).1 * shape.ln_binom_w1.exp()
            };
            (shape.ln_binom_w1.exp() * best, se)
        } else {
            q2_t0_row(&row.samples, n, l, w.omega, w.nu)
        };
        let tilt = (n * l) as f64 * w.nu;
        let vals: Vec<f64> = samples
            .par_iter()
            .map(|c| c.q1_exponent(n, l, w.u, w.r, w.omega, tilt).min(0.0))
            .collect();
        let q1 = (shape.ln_comb + log_mean_exp(&vals)).exp();
        let se = {
            let linear: Vec<f64> = vals.iter().map(|v| v.exp()).collect();
            let (_, s) = mean_and_se(&linear);
            (q2_se * q2_se + (s * shape.ln_comb.exp()).powi(2)).sqrt()
        };
        return CellResult { p: (q2 + q1).min(1.0), se, warm: w };
    }

    type GridCache = Vec<(f64, Vec<[f64; UR_GRID * UR_GRID]>)>;
    fn ensure_base(
        cache: &mut GridCache,
        samples: &[SampleCtx],
        n: usize,
        l: usize,
        omega: f64,
    ) -> usize {
        match cache.iter().position(|(w, _)| *w == omega) {
            Some(i) => i,
            None => {
                let b: Vec<[f64; UR_GRID * UR_GRID]> =
                    samples.par_iter().map(|c| q1_grid_base(c, n, l, omega)).collect();
                cache.push((omega, b));
                cache.len() - 1
            }
        }
    }
    let mut grid_cache: GridCache = Vec::new();

    // q2-sorted sweep: a point whose q2 alone exceeds the best total can
    // not win, and neither can anything after it in the sorted grid.
    let mut best = (f64::INFINITY, 0.5, 0.1, 0.0f64);
    for &(q2_coarse, w, v) in &row.q2_grid {
        if q2_coarse >= best.0 {
            break;
        }
        let bi = ensure_base(&mut grid_cache, samples, n, l, w);
        let (q1l, q1se) = q1_ln(shape, samples, n, l, w, v, &grid_cache[bi].1);
        let (q2, q2se, _) = q2_at(row, shape, n, l, w, v);
        let tot = q2 + q1l.exp();
        if tot < best.0 {
            best = (tot, w, v, (q1se * q1se + q2se * q2se).sqrt());
        }
    }

    // One coordinate-descent pass around the grid optimum.
    let omegas = omega_grid(shape.w1 > 0);
    let nus = nu_grid();
    let mut total_at = |omega: f64, nu: f64, cache: &mut GridCache| -> (f64, f64) {
        let bi = ensure_base(cache, samples, n, l, omega);
        let (q1l, q1se) = q1_ln(shape, samples, n, l, omega, nu, &cache[bi].1);
        let (q2, q2se, _) = q2_at(row, shape, n, l, omega, nu);
        (q2 + q1l.exp(), (q1se * q1se + q2se * q2se).sqrt())
    };
    let wi = omegas.iter().position(|&x| x == best.1).unwrap_or(0);
    let wlo = if wi > 0 { omegas[wi - 1] } else { omegas[0] };
    let whi = if wi + 1 < omegas.len() { omegas[wi + 1] } else { *omegas.last().unwrap() };
    if whi > wlo {
        let nu = best.2;
        let (w_ref, val) = golden_section(|w| total_at(w, nu, &mut grid_cache).0, wlo, whi, 8);
        if val < best.0 {
            let se = total_at(w_ref, nu, &mut grid_cache).1;
            best = (val, w_ref, nu, se);
        }
    }
    let vi = nus.iter().position(|&x| x == best.2).unwrap_or(0);
    let vlo = if vi > 0 { nus[vi - 1] } else { nus[0] / 2.0 };
    let vhi = if vi + 1 < nus.len() { nus[vi + 1] } else { nus[nus.len() - 1] * 2.0 };
    if vhi > vlo {
        let omega = best.1;
        let (v_ref, val) = golden_section(|v| total_at(omega, v, &mut grid_cache).0, vlo, vhi, 8);
        if val < best.0 {
            let se = total_at(omega, v_ref, &mut grid_cache).1;
            best = (val, omega, v_ref, se);
        }
    }
    drop(total_at);

    // Seed the warm tier with this cell's achieving parameters.
    let (_, _, delta) = q2_at(row, shape, n, l, best.1, best.2);
    let bi = ensure_base(&mut grid_cache, samples, n, l, best.1);
    let tilt = (n * l) as f64 * best.2;
    let (u_star, r_star) = q1_mean_argmin(&grid_cache[bi].1, tilt);
    CellResult {
        p: best.0.min(1.0),
        se: best.3,
        warm: WarmStart { omega: best.1, nu: best.2, u: u_star, r: r_star, delta },
    }
}

/// The (omega, nu) outer grid. Omega 0 enters only the |W1| = 0 branch,
/// where nothing divides by it.
pub fn omega_grid(w1_positive: bool) -> Vec<f64> {
    let mut v = vec![0.01, 0.05];
    for i in 1..=10 {
        v.push(i as f64 / 10.0);
    }
    if !w1_positive {
        v.insert(0, 0.0);
    }
    v
}

pub fn nu_grid() -> Vec<f64> {
    (0..12).map(|i| 10f64.powf(-4.0 + 5.0 * i as f64 / 11.0)).collect()
}
