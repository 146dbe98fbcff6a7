//! Eigendecompositions and the matrix-analysis toolbox used by the proofs:
//! Weyl interlacing, spectral stability, spread, approximate orthogonality,
//! a rank-one level-crossing test and first-order eigenvalue variation.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{eigh, eigvals, Dense};
use crate::operator::BoxOperator;

#[derive(Clone, Debug)]
pub struct SpectralDecomposition {
    /// Ascending, with multiplicity.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors as columns.
    pub vectors: Dense,
    pub source_dim: usize,
}

impl SpectralDecomposition {
    pub fn vector(&self, r: usize) -> Vec<f64> {
        crate::linalg::column(&self.vectors, r)
    }

    /// Indices of eigenvalues in [a, b].
    pub fn window(&self, a: f64, b: f64) -> Vec<usize> {
        (0..self.values.len()).filter(|&r| a <= self.values[r] && self.values[r] <= b).collect()
    }

    /// Index of the eigenvalue nearest to `e`.
    pub fn nearest(&self, e: f64) -> Option<usize> {
        (0..self.values.len()).min_by(|&a, &b| {
            (self.values[a] - e).abs().total_cmp(&(self.values[b] - e).abs())
        })
    }
}

pub fn eig_dense(a: &Dense) -> SpectralDecomposition {
    let (values, vectors) = eigh(a);
    SpectralDecomposition { values, vectors, source_dim: a.nrows() }
}

pub fn eig(h: &BoxOperator) -> SpectralDecomposition {
    eig_dense(&h.to_dense())
}

/// #{j : a ≤ λ_j ≤ b}.
pub fn count_in_interval(values: &[f64], a: f64, b: f64) -> usize {
    values.iter().filter(|&&l| a <= l && l <= b).count()
}

pub fn spread(a: &Dense) -> f64 {
    let v = eigvals(a);
    match (v.first(), v.last()) {
        (Some(lo), Some(hi)) => hi - lo,
        _ => 0.0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountBoundReport {
    pub count: usize,
    pub bound: f64,
    pub ok: bool,
}

/// #Spec ∩ [−ι, 4d+β+ι] ≤ 2N^{k−k1}(16d_{k1}+1)^d.
pub fn eigenvalue_count_bound_check(
    h: &BoxOperator,
    n_wells: usize,
    k: usize,
    k1: usize,
    d_k1: u64,
) -> Result<CountBoundReport> {
    if k < k1 {
        return Err(Error::Precondition(format!("k = {k} < k1 = {k1}")));
    }
    let p = h.params;
    let (a, b) = p.low_window();
    let count = count_in_interval(&eigvals(&h.to_dense()), a, b);
    let bound = 2.0
        * (n_wells as f64).powi((k - k1) as i32)
        * (16.0 * d_k1 as f64 + 1.0).powi(p.d as i32);
    Ok(CountBoundReport { count, bound, ok: count as f64 <= bound })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToolboxReport {
    pub weyl_checked: usize,
    pub weyl_violations: usize,
    pub weyl_worst: f64,
    pub stability_violations: usize,
    pub stability_worst: f64,
    pub spread_margin: f64,
    pub spread_ok: bool,
}

impl ToolboxReport {
    pub fn all_ok(&self) -> bool {
        self.weyl_violations == 0 && self.stability_violations == 0 && self.spread_ok
    }
}

fn descending(a: &Dense) -> Vec<f64> {
    let mut v = eigvals(a);
    v.reverse();
    v
}

/// Weyl interlacing, spectral stability and the spread lower bound for A, B.
pub fn weyl_stability_spread_checks(a: &Dense, b: &Dense, slack: f64) -> ToolboxReport {
    let n = a.nrows();
    let sum = a + b;
    let la = descending(a);
    let lb = descending(b);
    let ls = descending(&sum);
    let mut checked = 0;
    let mut violations = 0;
    let mut worst = f64::NEG_INFINITY;
    // 1-based indices as in the usual statement, λ_1 the largest.
    for i in 1..=n {
        for j in 1..=n {
            let mid = la[i - 1] + lb[j - 1];
            if i + j - 1 <= n {
                let excess = ls[i + j - 2] - mid;
                checked += 1;
                worst = worst.max(excess);
                if excess > slack {
                    violations += 1;
                }
            }
            if i + j > n {
                let excess = mid - ls[i + j - n - 1];
                checked += 1;
                worst = worst.max(excess);
                if excess > slack {
                    violations += 1;
                }
            }
        }
    }
    let (bmin, bmax) = (lb[n - 1], lb[0]);
    let mut stab_viol = 0;
    let mut stab_worst = f64::NEG_INFINITY;
    for k in 0..n {
        let shift = ls[k] - la[k];
        let excess = (bmin - shift).max(shift - bmax);
        stab_worst = stab_worst.max(excess);
        if excess > slack {
            stab_viol += 1;
        }
    }
    let sp = |v: &[f64]| v[0] - v[n - 1];
    let spread_margin = sp(&ls) - (sp(&la) - sp(&lb)).abs();
    ToolboxReport {
        weyl_checked: checked,
        weyl_violations: violations,
        weyl_worst: worst,
        stability_violations: stab_viol,
        stability_worst: stab_worst,
        spread_margin,
        spread_ok: spread_margin >= -slack,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalityReport {
    pub independent: bool,
    pub min_gram_eigenvalue: f64,
    pub max_perturbation: f64,
    /// n·max|E_ij| < 1, the regime where invertibility is guaranteed.
    pub guaranteed: bool,
}

/// Columns of `vectors` with Gram = I + E; independent iff the Gram matrix is invertible.
pub fn approx_orthogonality_independent(vectors: &Dense, eps: f64) -> OrthogonalityReport {
    let n = vectors.ncols();
    let gram = vectors.transpose() * vectors;
    let mut pert = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let e = gram[(i, j)] - if i == j { 1.0 } else { 0.0 };
            pert = pert.max(e.abs());
        }
    }
    let min_eig = eigvals(&gram).first().copied().unwrap_or(1.0);
    OrthogonalityReport {
        independent: min_eig > 1e-12 * n.max(1) as f64,
        min_gram_eigenvalue: min_eig,
        max_perturbation: pert,
        guaranteed: (n as f64) * pert.max(eps) < 1.0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankOneRadii {
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    pub r4: f64,
    pub r5: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankOneReport {
    pub hypotheses: [bool; 5],
    pub failed: Vec<String>,
    pub trace_before: usize,
    pub trace_after: usize,
    /// `Some(strict increase)` when all hypotheses hold, else `None`.
    pub conclusion: Option<bool>,
}

/// Hypotheses (1)–(5) of the rank-one lemma and, when they hold, the strict
/// increase of trace 1_{[r1,∞)} under A ↦ A + β e_x⊗e_x.
pub fn rank_one_shift_check(a: &Dense, x: usize, beta: f64, r: RankOneRadii, c: f64) -> RankOneReport {
    let n = a.nrows();
    let (vals, vecs) = eigh(a);
    // Descending order with λ_1 the largest, as in the statement.
    let lam: Vec<f64> = vals.iter().rev().copied().collect();
    let vx2: Vec<f64> = (0..n).map(|s| vecs[(x, n - 1 - s)].powi(2)).collect();

    let h1 = 0.0 < r.r1 && r.r1 < r.r2 && r.r2 < r.r3 && r.r3 < r.r4 && r.r4 < 1.0 && r.r3 < r.r5 && r.r5 < 1.0;
    let h2 = r.r1 <= c * (r.r3 * r.r5).min(r.r2 * r.r3 / r.r4);
    // i: the largest eigenvalue below r1; it must be separated from r2 above.
    let i = lam.iter().position(|&l| l < r.r1);
    let h3_core = match i {
        Some(i) => (i == 0 || lam[i - 1] > r.r2) && r.r1 < r.r2,
        None => false,
    };
    let candidates: Vec<usize> = match i {
        Some(i) => (i..n).filter(|&j| lam[j] > 0.0).collect(),
        None => Vec::new(),
    };
    let h3 = h3_core && !candidates.is_empty();
    let h4 = candidates.iter().any(|&j| vx2[j] >= r.r3);
    let weight: f64 = (0..n).filter(|&s| r.r2 < lam[s] && lam[s] < r.r5).map(|s| vx2[s]).sum();
    let h5 = weight <= r.r4;

    let hyps = [h1, h2, h3, h4, h5];
    let failed: Vec<String> = hyps
        .iter()
        .enumerate()
        .filter(|(_, ok)| !**ok)
        .map(|(k, _)| format!("hypothesis {} failed", k + 1))
        .collect();
    let before = lam.iter().filter(|&&l| l >= r.r1).count();
    let mut shifted = a.clone();
    shifted[(x, x)] += beta;
    let after = eigvals(&shifted).iter().filter(|&&l| l >= r.r1).count();
    RankOneReport {
        hypotheses: hyps,
        conclusion: if failed.is_empty() { Some(before < after) } else { None },
        failed,
        trace_before: before,
        trace_after: after,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationEntry {
    pub index: usize,
    pub finite_difference: f64,
    pub predicted: f64,
    pub ok: bool,
}

/// Largest step in ζ; near-crossings use smaller ones (see `step_for`).
pub const VARIATION_STEP: f64 = 1e-5;
/// Below this gap a central difference cannot separate the eigenvalue from its
/// neighbour: the step it needs would drown in rounding.
pub const DEGENERACY_GAP: f64 = 1e-5;

/// Central difference of λ_j in ζ(x), with V(x) = V₀(x) + βζ, against β|ψ_j(x)|².
pub fn eigenvalue_variation_check(
    h: &BoxOperator,
    site: usize,
    beta: f64,
    index: usize,
) -> Result<VariationEntry> {
    let base = eig(h);
    let mut shifted = Shifted::new(h, site, beta);
    entry(&base, &mut shifted, index)
}

/// All simple eigenvalues at one site; degenerate ones come back as errors.
pub fn eigenvalue_variation_all(h: &BoxOperator, site: usize, beta: f64) -> Vec<Result<VariationEntry>> {
    let base = eig(h);
    let mut shifted = Shifted::new(h, site, beta);
    (0..h.n()).map(|j| entry(&base, &mut shifted, j)).collect()
}

/// Step a power of ten, at most VARIATION_STEP and at most 10⁻³·gap/β, so the
/// curvature of an avoided crossing stays below the tolerance.
fn step_for(gap: f64, beta: f64) -> f64 {
    let s = VARIATION_STEP.min(1e-3 * gap / beta);
    10f64.powf(s.log10().floor())
}

/// Spectra at V(x) ± βs, cached per step.
struct Shifted<'a> {
    h: &'a BoxOperator,
    site: usize,
    beta: f64,
    cache: Vec<(f64, Vec<f64>, Vec<f64>)>,
}

impl<'a> Shifted<'a> {
    fn new(h: &'a BoxOperator, site: usize, beta: f64) -> Self {
        Shifted { h, site, beta, cache: Vec::new() }
    }

    fn at(&mut self, step: f64) -> (&[f64], &[f64]) {
        let k = match self.cache.iter().position(|c| c.0 == step) {
            Some(k) => k,
            None => {
                let v0 = self.h.potential[self.site];
                let spec = |dv: f64| eigvals(&self.h.with_potential_at(self.site, v0 + dv).to_dense());
                let (p, m) = (spec(self.beta * step), spec(-self.beta * step));
                self.cache.push((step, p, m));
                self.cache.len() - 1
            }
        };
        (&self.cache[k].1, &self.cache[k].2)
    }
}

fn entry(base: &SpectralDecomposition, shifted: &mut Shifted, j: usize) -> Result<VariationEntry> {
    let v = &base.values;
    let gap = [j.checked_sub(1).map(|i| v[j] - v[i]), v.get(j + 1).map(|w| w - v[j])]
        .into_iter()
        .flatten()
        .fold(f64::INFINITY, f64::min);
    if gap <= DEGENERACY_GAP {
        return Err(Error::DegenerateEigenvalue { index: j, gap });
    }
    let (beta, site) = (shifted.beta, shifted.site);
    let step = step_for(gap, beta);
    let (plus, minus) = shifted.at(step);
    let fd = (plus[j] - minus[j]) / (2.0 * step);
    let predicted = beta * base.vectors[(site, j)].powi(2);
    Ok(VariationEntry {
        index: j,
        finite_difference: fd,
        predicted,
        ok: (fd - predicted).abs() <= 1e-6 + 1e-4 * predicted.abs(),
    })
}

/// Random symmetric matrix with entries uniform in [-1, 1].
pub fn random_symmetric(n: usize, rng: &mut impl rand::Rng) -> Dense {
    let mut m = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v: f64 = rng.gen_range(-1.0..1.0);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}
