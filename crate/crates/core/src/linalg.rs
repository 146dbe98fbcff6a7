//! Dense helpers over faer plus two hand-rolled band solvers.
//!
//! `BandedCholesky` exists because Green's functions of barrier regions are
//! needed entry by entry at magnitudes far below machine epsilon relative to
//! the diagonal. For a diagonally dominant M-matrix the Cholesky factor has a
//! positive diagonal and nonpositive off-diagonal entries, so solving against
//! a nonnegative right-hand side only ever adds nonnegative terms and every
//! entry of the solution keeps full relative precision. A general LU or an
//! eigendecomposition loses such entries below ~1e-16 of the largest one.

use faer::prelude::*;
use faer::{Mat, Side};

use crate::error::{Error, Result};

pub type Dense = Mat<f64>;

/// Ascending eigenvalues and orthonormal eigenvectors (columns).
pub fn eigh(a: &Dense) -> (Vec<f64>, Dense) {
    let n = a.nrows();
    if n == 0 {
        return (Vec::new(), Mat::zeros(0, 0));
    }
    let e = a.selfadjoint_eigendecomposition(Side::Lower);
    let s = e.s().column_vector();
    let vals: Vec<f64> = (0..n).map(|i| s.read(i)).collect();
    (vals, e.u().to_owned())
}

/// Ascending eigenvalues.
pub fn eigvals(a: &Dense) -> Vec<f64> {
    if a.nrows() == 0 {
        return Vec::new();
    }
    let mut v = a.selfadjoint_eigenvalues(Side::Lower);
    v.sort_by(|x, y| x.total_cmp(y));
    v
}

/// Spectral norm of a symmetric matrix.
pub fn sym_norm(a: &Dense) -> f64 {
    eigvals(a).iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Spectral norm of a general matrix.
pub fn op_norm(a: &Dense) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    a.singular_values().first().copied().unwrap_or(0.0)
}

pub fn max_abs(a: &Dense) -> f64 {
    let mut m = 0.0f64;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            m = m.max(a[(i, j)].abs());
        }
    }
    m
}

pub fn inverse(a: &Dense) -> Dense {
    a.partial_piv_lu().inverse()
}

pub fn symmetrize(a: &Dense) -> Dense {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| 0.5 * (a[(i, j)] + a[(j, i)]))
}

pub fn identity(n: usize) -> Dense {
    Mat::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
}

/// Principal submatrix on the given index lists.
pub fn select(a: &Dense, rows: &[usize], cols: &[usize]) -> Dense {
    Mat::from_fn(rows.len(), cols.len(), |i, j| a[(rows[i], cols[j])])
}

pub fn column(a: &Dense, j: usize) -> Vec<f64> {
    (0..a.nrows()).map(|i| a[(i, j)]).collect()
}

/// Cholesky factor of a symmetric positive definite band matrix.
#[derive(Clone, Debug)]
pub struct BandedCholesky {
    n: usize,
    bw: usize,
    /// Row i holds L[i][i-bw..=i]; entry (i, j) lives at i*(bw+1) + bw - (i-j).
    l: Vec<f64>,
}

impl BandedCholesky {
    /// `entry(i, j)` is queried for j in max(0,i-bw)..=i only.
    pub fn factor(n: usize, bw: usize, entry: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let w = bw + 1;
        let mut l = vec![0.0; n * w];
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            for j in lo..=i {
                let mut s = entry(i, j);
                let klo = lo.max(j.saturating_sub(bw));
                for k in klo..j {
                    s -= l[i * w + bw - (i - k)] * l[j * w + bw - (j - k)];
                }
                if i == j {
                    if !(s > 0.0) {
                        return Err(Error::NotPositiveDefinite { row: i, pivot: s });
                    }
                    l[i * w + bw] = s.sqrt();
                } else {
                    l[i * w + bw - (i - j)] = s / l[j * w + bw];
                }
            }
        }
        Ok(BandedCholesky { n, bw, l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.l[i * (self.bw + 1) + self.bw - (i - j)]
    }

    /// Overwrite `b` with A⁻¹b.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let (n, bw) = (self.n, self.bw);
        for i in 0..n {
            let mut s = b[i];
            for k in i.saturating_sub(bw)..i {
                s -= self.at(i, k) * b[k];
            }
            b[i] = s / self.at(i, i);
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..(i + bw + 1).min(n) {
                s -= self.at(k, i) * b[k];
            }
            b[i] = s / self.at(i, i);
        }
    }

    /// Column `j` of A⁻¹.
    pub fn inverse_column(&self, j: usize) -> Vec<f64> {
        let mut e = vec![0.0; self.n];
        e[j] = 1.0;
        self.solve_in_place(&mut e);
        e
    }
}

/// Number of eigenvalues strictly below `x` of the symmetric tridiagonal
/// matrix (diag, off) by the Sturm / LDLᵀ pivot count.
pub fn tridiag_count_below(diag: &[f64], off: &[f64], x: f64) -> usize {
    let scale = diag.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let tiny = f64::EPSILON * scale * 1e-3;
    let mut count = 0;
    let mut q = 1.0;
    for i in 0..diag.len() {
        let b2 = if i == 0 { 0.0 } else { off[i - 1] * off[i - 1] };
        q = diag[i] - x - if i == 0 { 0.0 } else { b2 / q };
        if q == 0.0 {
            q = -tiny;
        }
        if q < 0.0 {
            count += 1;
        }
    }
    count
}

/// k-th smallest eigenvalue (0-based) of a symmetric tridiagonal matrix by bisection.
pub fn tridiag_kth_eigenvalue(diag: &[f64], off: &[f64], k: usize) -> f64 {
    let n = diag.len();
    assert!(k < n);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        let r = if i > 0 { off[i - 1].abs() } else { 0.0 } + if i + 1 < n { off[i].abs() } else { 0.0 };
        lo = lo.min(diag[i] - r);
        hi = hi.max(diag[i] + r);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if tridiag_count_below(diag, off, mid) > k {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Double-double number: hi + lo with |lo| ≤ ulp(hi)/2.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Dd {
    hi: f64,
    lo: f64,
}

impl Dd {
    fn from(x: f64) -> Dd {
        Dd { hi: x, lo: 0.0 }
    }

    fn quick(a: f64, b: f64) -> Dd {
        let s = a + b;
        Dd { hi: s, lo: b - (s - a) }
    }

    fn two_sum(a: f64, b: f64) -> (f64, f64) {
        let s = a + b;
        let bb = s - a;
        (s, (a - (s - bb)) + (b - bb))
    }

    fn add(self, o: Dd) -> Dd {
        let (s, e) = Dd::two_sum(self.hi, o.hi);
        let (t, f) = Dd::two_sum(self.lo, o.lo);
        let r = Dd::quick(s, e + t);
        Dd::quick(r.hi, r.lo + f)
    }

    fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }

    fn sub(self, o: Dd) -> Dd {
        self.add(o.neg())
    }

    fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p) + (self.hi * o.lo + self.lo * o.hi);
        Dd::quick(p, e)
    }

    fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self.sub(o.mul(Dd::from(q1)));
        let q2 = r.hi / o.hi;
        let r = r.sub(o.mul(Dd::from(q2)));
        let q3 = r.hi / o.hi;
        Dd::quick(q1, q2).add(Dd::from(q3))
    }
}

/// λ − e for the eigenvalue λ of a symmetric tridiagonal matrix nearest e, by one
/// Newton step on det(T − x) carried out in double-double arithmetic. With exact
/// matrix entries the result keeps its relative accuracy even when |λ − e| is a
/// few ulps of e; the Newton error is of relative order |λ − e|/gap.
pub fn tridiag_newton_offset(diag: &[f64], off: &[f64], e: f64) -> f64 {
    let mut piv = Dd::from(0.0);
    let mut dpiv = Dd::from(0.0);
    let mut logder = Dd::from(0.0);
    for i in 0..diag.len() {
        let (s, t) = Dd::two_sum(diag[i], -e);
        let a = Dd::quick(s, t);
        if i == 0 {
            piv = a;
            dpiv = Dd::from(-1.0);
        } else {
            let b2 = Dd::from(off[i - 1]).mul(Dd::from(off[i - 1]));
            let ratio = b2.div(piv);
            let npiv = a.sub(ratio);
            dpiv = Dd::from(-1.0).add(ratio.mul(dpiv).div(piv));
            piv = npiv;
        }
        logder = logder.add(dpiv.div(piv));
    }
    // Newton: λ − e ≈ −det/det' = −1/(d/dx ln det).
    Dd::from(-1.0).div(logder).hi
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(n: usize, diag: f64) -> Dense {
        Mat::from_fn(n, n, |i, j| {
            if i == j {
                diag
            } else if i.abs_diff(j) == 1 {
                -1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn banded_cholesky_matches_dense_inverse() {
        let n = 9;
        let a = Mat::<f64>::from_fn(n, n, |i, j| {
            if i == j {
                6.0 + i as f64 * 0.1
            } else if i.abs_diff(j) == 1 || i.abs_diff(j) == 3 {
                -1.0
            } else {
                0.0
            }
        });
        let ch = BandedCholesky::factor(n, 3, |i, j| a[(i, j)]).unwrap();
        let inv = inverse(&a);
        for j in 0..n {
            let col = ch.inverse_column(j);
            for i in 0..n {
                assert!((col[i] - inv[(i, j)]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn banded_cholesky_keeps_tiny_entries_relative() {
        // Free chain with a high diagonal: exact Green's function is a geometric sequence.
        let n = 400;
        let h = 30.0;
        let ch = BandedCholesky::factor(n, 1, |i, j| if i == j { h } else { -1.0 }).unwrap();
        let col = ch.inverse_column(0);
        // Ratio G(i+1,0)/G(i,0) tends to the smaller root r of r^2 - h r + 1 = 0.
        let r = (h - (h * h - 4.0).sqrt()) / 2.0;
        for i in 1..150 {
            let ratio = col[i + 1] / col[i];
            assert!((ratio - r).abs() / r < 1e-12, "i={i} ratio={ratio}");
        }
        assert!(col[150] > 0.0 && col[150] < 1e-200);
    }

    #[test]
    fn rejects_indefinite() {
        assert!(BandedCholesky::factor(3, 1, |i, j| if i == j { 1.0 } else { -1.0 }).is_err());
    }

    #[test]
    fn sturm_counts_match_dense() {
        let a = chain(12, 2.0);
        let ev = eigvals(&a);
        let diag = vec![2.0; 12];
        let off = vec![-1.0; 11];
        for x in [-0.5, 0.1, 1.0, 2.0, 3.3, 4.5] {
            let want = ev.iter().filter(|&&v| v < x).count();
            assert_eq!(tridiag_count_below(&diag, &off, x), want);
        }
        for k in 0..12 {
            assert!((tridiag_kth_eigenvalue(&diag, &off, k) - ev[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn norms() {
        let a = chain(2, 2.0);
        assert!((sym_norm(&a) - 3.0).abs() < 1e-14);
        assert!((op_norm(&a) - 3.0).abs() < 1e-14);
        assert_eq!(eigvals(&a).len(), 2);
    }

    #[test]
    fn newton_offset_beats_rounding() {
        // Free chain of 3: eigenvalue 2 exactly.
        let (d, o) = ([2.0; 3], [-1.0; 2]);
        for k in [20, 45, 51] {
            let e = 2.0 + (2.0f64).powi(-k);
            let off = tridiag_newton_offset(&d, &o, e);
            let want = -(2.0f64).powi(-k);
            assert!(((off - want) / want).abs() < 1e-9, "{k} {off} {want}");
        }
        // Pair with eigenvalues a ± 1.
        let e = 4.0 - 3.0 * (2.0f64).powi(-50);
        let off = tridiag_newton_offset(&[3.0, 3.0], &[-1.0], e);
        assert!((off / (3.0 * (2.0f64).powi(-50)) - 1.0).abs() < 1e-9);
    }
}
