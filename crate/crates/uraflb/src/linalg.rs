//! Log-determinants, eigenvalues, and inverse-weighted quadratic forms for
//! matrices of the form identity + low-rank Gram.
//!
//! The n x n matrices the bounds manipulate are always `a*I + U diag(w) U^H`
//! with rank s << n at full scale, so everything is reduced to s x s
//! Hermitian problems through the Gram matrix and the Woodbury identity.
//! A dense reference path for every operation lives in [`dense`] and is used
//! by the validation suite.

use nalgebra::{Cholesky, DMatrix};
use num_complex::Complex64;
use thiserror::Error;

pub type CMat = DMatrix<Complex64>;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LinalgError {
    #[error("shifted matrix has a nonpositive eigenvalue; log-determinant infeasible")]
    NotPositive,
    #[error("B has a nonpositive minimum eigenvalue; Chernoff term infeasible")]
    BInfeasible,
}

/// Pivot floor relative to the identity coefficient; keeps log-determinants
/// away from denormal pivots.
pub const FEASIBILITY_EPS: f64 = 1e-12;

/// Implicit representation of `U diag(w) U^H` with `U` of size n x s.
///
/// The n x n product is never materialized; all spectral questions are
/// answered on the s x s weighted Gram `diag(sqrt w) U^H U diag(sqrt w)`.
#[derive(Debug, Clone)]
pub struct WeightedGram {
    columns: CMat,
    weights: Vec<f64>,
}

impl WeightedGram {
    pub fn new(columns: CMat, weights: Vec<f64>) -> Self {
        assert_eq!(columns.ncols(), weights.len());
        assert!(weights.iter().all(|&w| w >= 0.0), "weights must be nonnegative");
        WeightedGram { columns, weights }
    }

    /// All-ones weights (a plain Gram form).
    pub fn unit(columns: CMat) -> Self {
        let s = columns.ncols();
        WeightedGram::new(columns, vec![1.0; s])
    }

    pub fn ambient_dim(&self) -> usize {
        self.columns.nrows()
    }

    pub fn rank_bound(&self) -> usize {
        self.columns.ncols()
    }

    pub fn columns(&self) -> &CMat {
        &self.columns
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// s x s weighted Gram `diag(sqrt w) U^H U diag(sqrt w)`.
    pub fn weighted_gram(&self) -> CMat {
        let s = self.columns.ncols();
        let mut g = self.columns.adjoint() * &self.columns;
        for i in 0..s {
            for j in 0..s {
                g[(i, j)] *= Complex64::from((self.weights[i] * self.weights[j]).sqrt());
            }
        }
        hermitize(&mut g);
        g
    }

    /// Eigenvalues of the weighted Gram, descending; these are the nonzero
    /// eigenvalues of the n x n form.
    pub fn eigenvalues(&self) -> Vec<f64> {
        if self.columns.ncols() == 0 {
            return Vec::new();
        }
        hermitian_eigenvalues(self.weighted_gram())
    }
}

/// Force exact Hermitian symmetry before a decomposition.
pub(crate) fn hermitize(m: &mut CMat) {
    let n = m.nrows();
    for i in 0..n {
        m[(i, i)] = Complex64::new(m[(i, i)].re, 0.0);
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)].conj());
            m[(i, j)] = avg;
            m[(j, i)] = avg.conj();
        }
    }
}

/// Eigenvalues of a Hermitian matrix, descending.
pub(crate) fn hermitian_eigenvalues(mut m: CMat) -> Vec<f64> {
    hermitize(&mut m);
    let mut eigs: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().copied().collect();
    eigs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    eigs
}

/// ln | a I_n + b U diag(w) U^H |, evaluated as
/// `n ln a + sum_i ln(1 + (b/a) mu_i)` over the weighted-Gram eigenvalues.
pub fn logdet_shifted(g: &WeightedGram, a: f64, b: f64) -> Result<f64, LinalgError> {
    assert!(a > 0.0, "identity coefficient must be positive");
    let n = g.ambient_dim() as f64;
    if b == 0.0 || g.rank_bound() == 0 {
        return Ok(n * a.ln());
    }
    let ratio = b / a;
    let mut acc = n * a.ln();
    for mu in g.eigenvalues() {
        let t = 1.0 + ratio * mu;
        if t <= FEASIBILITY_EPS {
            return Err(LinalgError::NotPositive);
        }
        acc += t.ln();
    }
    Ok(acc)
}

/// Largest eigenvalue of `U diag(w) U^H` (0 for an empty form).
pub fn max_eig(g: &WeightedGram) -> f64 {
    g.eigenvalues().first().copied().unwrap_or(0.0).max(0.0)
}

/// Nonzero eigenvalues of `(I + A A^H)^{-1} B B^H`, descending, where
/// `A`/`B` are the weighted column forms of `f1`/`g1`.
///
/// Computed on the union column space: the nonzero eigenvalues equal those
/// of the k x k Hermitian `B^H B - B^H A (I + A^H A)^{-1} A^H B`.
pub fn whitened_eigs(f1: &WeightedGram, g1: &WeightedGram) -> Vec<f64> {
    let k = g1.rank_bound();
    if k == 0 {
        return Vec::new();
    }
    let b = weighted_columns(g1);
    let bhb = b.adjoint() * &b;
    let mut reduced = bhb;
    if f1.rank_bound() > 0 {
        let a = weighted_columns(f1);
        let mut inner = a.adjoint() * &a;
        for i in 0..inner.nrows() {
            inner[(i, i)] += Complex64::from(1.0);
        }
        hermitize(&mut inner);
        let chol = Cholesky::new(inner).expect("I + A^H A is positive definite");
        let ahb = a.adjoint() * &b;
        let solved = chol.solve(&ahb);
        reduced -= ahb.adjoint() * solved;
    }
    let mut eigs = hermitian_eigenvalues(reduced);
    let m = k.min(f1.ambient_dim());
    eigs.truncate(m);
    eigs
}

fn weighted_columns(g: &WeightedGram) -> CMat {
    let mut c = g.columns().clone();
    for (j, &w) in g.weights().iter().enumerate() {
        let sw = Complex64::from(w.sqrt());
        for i in 0..c.nrows() {
            c[(i, j)] *= sw;
        }
    }
    c
}

/// Result of a reduced B evaluation: log-determinant plus the minimum
/// eigenvalue actually checked.
#[derive(Debug, Clone, Copy)]
pub struct BLogDet {
    pub logdet: f64,
    pub min_eig: f64,
}

/// ln |B| with `B = (1+r) I - u (F'')^{-1} F + u (F')^{-1} F - r w F_1^{-1} F`,
/// where each argument is the Gram form of `I + C Gamma_S C^H` over a shared
/// column set. Infeasible when the minimum eigenvalue of B is not safely
/// positive.
///
/// Off the shared column space B acts as the scalar `1 + r - r w`; on the
/// space it reduces to an s x s problem solved through the Gram Cholesky
/// factors, so no n x n object is ever formed.
pub fn logdet_b(
    u: f64,
    r: f64,
    omega: f64,
    f: &WeightedGram,
    f1: &WeightedGram,
    fp: &WeightedGram,
    fpp: &WeightedGram,
) -> Result<BLogDet, LinalgError> {
    let n = f.ambient_dim();
    let alpha = 1.0 + r - r * omega;
    let sel = |g: &WeightedGram| -> Vec<bool> { g.weights().iter().map(|&w| w > 0.0).collect() };
    let s = f.rank_bound();
    assert!(
        f1.rank_bound() == s && fp.rank_bound() == s && fpp.rank_bound() == s,
        "the four Gram forms must share one column set"
    );

    // Orthonormal-basis representation: V = Q R with R^H R = V^H V.
    let mut gram = f.columns().adjoint() * f.columns();
    hermitize(&mut gram);
    let rt = gram_cholesky_factor(&gram);
    // Phi_S = I_s + R D_S R^H acts as F_S on the column space.
    let phi = |mask: &[bool]| -> CMat {
        let mut m = CMat::identity(s, s);
        for j in 0..s {
            if mask[j] {
                let col = rt.column(j);
                for a in 0..s {
                    for b in 0..s {
                        m[(a, b)] += col[a] * col[b].conj();
                    }
                }
            }
        }
        hermitize(&mut m);
        m
    };
    let phi_f = phi(&sel(f));
    let phi_f1 = phi(&sel(f1));
    let phi_fp = phi(&sel(fp));
    let phi_fpp = phi(&sel(fpp));

    let inv = |m: &CMat| -> CMat {
        Cholesky::new(m.clone()).expect("Phi is positive definite").inverse()
    };
    // A = u (F''^{-1} - F'^{-1}) - r F^{-1} + r w F_1^{-1} on the space.
    let mut a_s = (inv(&phi_fpp) - inv(&phi_fp)) * Complex64::from(u);
    a_s -= inv(&phi_f) * Complex64::from(r);
    a_s += inv(&phi_f1) * Complex64::from(r * omega);
    // B restricted to the space is similar to the Hermitian
    // I - Phi^{1/2} A Phi^{1/2}; build it through the eigen square root.
    let mut phi_sym = phi_f.clone();
    hermitize(&mut phi_sym);
    let se = phi_sym.symmetric_eigen();
    let mut sqrt_d = se.eigenvectors.clone();
    for j in 0..s {
        let sq = Complex64::from(se.eigenvalues[j].max(0.0).sqrt());
        for i in 0..s {
            sqrt_d[(i, j)] *= sq;
        }
    }
    let phi_half = &sqrt_d * se.eigenvectors.adjoint();
    let mut h = -(&phi_half * a_s * &phi_half);
    for i in 0..s {
        h[(i, i)] += Complex64::from(1.0);
    }
    let eigs = hermitian_eigenvalues(h);

    let mut min_eig = if n > s { alpha } else { f64::INFINITY };
    let mut logdet = (n.saturating_sub(s)) as f64 * alpha.max(f64::MIN_POSITIVE).ln();
    for &e in &eigs {
        min_eig = min_eig.min(e);
        if e > 0.0 {
            logdet += e.ln();
        }
    }
    if min_eig <= FEASIBILITY_EPS * (1.0 + r) {
        return Err(LinalgError::BInfeasible);
    }
    Ok(BLogDet { logdet, min_eig })
}

/// tr( Y^H (I + U diag(w) U^H)^{-1} Y ) via the Woodbury identity:
/// `||Y||_F^2 - tr( T^H D (I + G D)^{-1} T )` with `T = U^H Y`.
pub fn quadratic_form_inv(f: &WeightedGram, y: &CMat) -> f64 {
    let base: f64 = y.iter().map(|z| z.norm_sqr()).sum();
    let s = f.rank_bound();
    if s == 0 || y.ncols() == 0 {
        return base;
    }
    let u = weighted_columns(f);
    let mut inner = u.adjoint() * &u;
    for i in 0..s {
        inner[(i, i)] += Complex64::from(1.0);
    }
    hermitize(&mut inner);
    let chol = Cholesky::new(inner).expect("I + G is positive definite");
    let t = u.adjoint() * y;
    let solved = chol.solve(&t);
    let corr: f64 = t
        .iter()
        .zip(solved.iter())
        .map(|(a, b)| (a.conj() * b).re)
        .sum();
    base - corr
}

/// Upper-triangular R with R^H R = G for a PSD Gram G; tolerates exact rank
/// deficiency by zeroing trailing pivots (columns drawn in continuous
/// distributions make G full rank almost surely).
fn gram_cholesky_factor(g: &CMat) -> CMat {
    let s = g.nrows();
    let mut l = g.clone();
    // In-place lower Cholesky with pivot clamping.
    for j in 0..s {
        let mut d = l[(j, j)].re;
        for k in 0..j {
            d -= l[(j, k)].norm_sqr();
        }
        let d = if d > 0.0 { d.sqrt() } else { 0.0 };
        l[(j, j)] = Complex64::from(d);
        for i in (j + 1)..s {
            let mut v = l[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)].conj();
            }
            l[(i, j)] = if d > 0.0 { v / d } else { Complex64::from(0.0) };
        }
        for i in 0..j {
            l[(i, j)] = Complex64::from(0.0);
        }
    }
    l.adjoint()
}

// ---------------------------------------------------------------------------
// Dense reference path
// ---------------------------------------------------------------------------

/// Dense n x n reference implementations, kept for validation; do not use in
/// bound evaluations at scale.
pub mod dense {
    use super::*;

    /// Materialize `a I_n + b U diag(w) U^H`.
    pub fn shifted_matrix(g: &WeightedGram, a: f64, b: f64) -> CMat {
        let n = g.ambient_dim();
        let mut m = CMat::identity(n, n) * Complex64::from(a);
        let u = super::weighted_columns(g);
        m += (&u * u.adjoint()) * Complex64::from(b);
        hermitize(&mut m);
        m
    }

    pub fn logdet_shifted(g: &WeightedGram, a: f64, b: f64) -> Result<f64, LinalgError> {
        let m = shifted_matrix(g, a, b);
        let eigs = hermitian_eigenvalues(m);
        let mut acc = 0.0;
        for e in eigs {
            if e <= FEASIBILITY_EPS * a {
                return Err(LinalgError::NotPositive);
            }
            acc += e.ln();
        }
        Ok(acc)
    }

    pub fn max_eig(g: &WeightedGram) -> f64 {
        let m = shifted_matrix(g, 1.0, 1.0);
        hermitian_eigenvalues(m).first().map_or(0.0, |e| (e - 1.0).max(0.0))
    }

    /// Hermitian fractional power via eigendecomposition.
    fn herm_pow(m: &CMat, exponent: f64) -> CMat {
        let mut h = m.clone();
        hermitize(&mut h);
        let se = h.symmetric_eigen();
        let mut scaled = se.eigenvectors.clone();
        for j in 0..m.nrows() {
            let s = Complex64::from(se.eigenvalues[j].max(f64::MIN_POSITIVE).powf(exponent));
            for i in 0..m.nrows() {
                scaled[(i, j)] *= s;
            }
        }
        &scaled * se.eigenvectors.adjoint()
    }

    fn inv_sqrt(m: &CMat) -> CMat {
        herm_pow(m, -0.5)
    }

    pub fn whitened_eigs(f1: &WeightedGram, g1: &WeightedGram) -> Vec<f64> {
        let n = f1.ambient_dim();
        let m = g1.rank_bound().min(n);
        if m == 0 {
            return Vec::new();
        }
        let f1m = shifted_matrix(f1, 1.0, 1.0);
        let g1m = shifted_matrix(g1, 1.0, 1.0) - CMat::identity(n, n);
        // Same spectrum as F1^{-1} G through the Hermitian whitened form.
        let w = inv_sqrt(&f1m);
        let sym = &w * g1m * &w;
        let mut eigs = hermitian_eigenvalues(sym);
        eigs.truncate(m);
        eigs
    }

    pub fn logdet_b(
        u: f64,
        r: f64,
        omega: f64,
        f: &WeightedGram,
        f1: &WeightedGram,
        fp: &WeightedGram,
        fpp: &WeightedGram,
    ) -> Result<BLogDet, LinalgError> {
        let n = f.ambient_dim();
        let fm = shifted_matrix(f, 1.0, 1.0);
        let f1m = shifted_matrix(f1, 1.0, 1.0);
        let fpm = shifted_matrix(fp, 1.0, 1.0);
        let fppm = shifted_matrix(fpp, 1.0, 1.0);
        let inv = |m: &CMat| m.clone().try_inverse().expect("F form invertible");
        // A = u F''^{-1} - u F'^{-1} - r F^{-1} + r w F1^{-1}; B = I - A F is
        // similar to the Hermitian I - F^{1/2} A F^{1/2}.
        let mut a = inv(&fppm) * Complex64::from(u);
        a -= inv(&fpm) * Complex64::from(u);
        a -= inv(&fm) * Complex64::from(r);
        a += inv(&f1m) * Complex64::from(r * omega);
        let w = herm_pow(&fm, 0.5);
        let mut h = -(&w * a * &w);
        for i in 0..n {
            h[(i, i)] += Complex64::from(1.0);
        }
        let mut eigs = hermitian_eigenvalues(h);
        eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let min_eig = eigs.first().copied().unwrap_or(f64::INFINITY);
        if min_eig <= FEASIBILITY_EPS * (1.0 + r) {
            return Err(LinalgError::BInfeasible);
        }
        Ok(BLogDet { logdet: eigs.iter().map(|e| e.ln()).sum(), min_eig })
    }

    pub fn quadratic_form_inv(f: &WeightedGram, y: &CMat) -> f64 {
        let m = shifted_matrix(f, 1.0, 1.0);
        let inv = m.try_inverse().expect("F invertible");
        (y.adjoint() * inv * y).trace().re
    }
}
