//! Dirichlet restrictions H_Λ = R_Λ(2d − Δ + V)R_Λ and their Green's functions.

use faer::linalg::solvers::PartialPivLu;
use faer::prelude::SpSolver;
use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{Site, SiteSet, MAX_DIM};
use crate::linalg::{eigvals, BandedCholesky, Dense};

/// (d, h, β) and the constants derived from them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub d: usize,
    pub h: f64,
    pub beta: f64,
}

impl ModelParams {
    pub fn new(d: usize, h: f64, beta: f64) -> Result<ModelParams> {
        if d == 0 || d > MAX_DIM {
            return Err(Error::InvalidParams(format!("d must be in 1..={MAX_DIM}, got {d}")));
        }
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::InvalidParams(format!("beta must be in (0, 1], got {beta}")));
        }
        if !(h > 4.0 * d as f64 + 1.0) {
            return Err(Error::InvalidParams(format!("h must exceed 4d+1 = {}, got {h}", 4 * d + 1)));
        }
        Ok(ModelParams { d, h, beta })
    }

    pub fn dd(&self) -> f64 {
        2.0 * self.d as f64
    }

    pub fn iota(&self) -> f64 {
        (0.01f64).min((self.h - 4.0 * self.d as f64 - self.beta) / 2.0)
    }

    pub fn gamma(&self) -> f64 {
        1.0 / (4.0 * self.d as f64 + self.h + self.beta)
    }

    pub fn gamma0(&self) -> f64 {
        (1.0 + self.barrier_gap() / self.dd()).ln()
    }

    /// h − 4d − β − ι, the denominator of the non-resonant bounds.
    pub fn barrier_gap(&self) -> f64 {
        self.h - 4.0 * self.d as f64 - self.beta - self.iota()
    }

    /// [−ι, 4d+β+ι].
    pub fn low_window(&self) -> (f64, f64) {
        let i = self.iota();
        (-i, 4.0 * self.d as f64 + self.beta + i)
    }

    pub fn in_low_window(&self, e: f64) -> bool {
        let (a, b) = self.low_window();
        (a..=b).contains(&e)
    }
}

/// Sparse symmetric Dirichlet operator on an explicit site set.
#[derive(Clone, Debug)]
pub struct BoxOperator {
    pub params: ModelParams,
    pub sites: SiteSet,
    /// Total potential V(x) in site order.
    pub potential: Vec<f64>,
    offsets: Vec<usize>,
    nbrs: Vec<usize>,
}

pub fn assemble(domain: &SiteSet, v: &[f64], params: ModelParams) -> Result<BoxOperator> {
    if v.len() != domain.len() {
        return Err(Error::DomainMismatch(format!(
            "potential has {} values for {} sites",
            v.len(),
            domain.len()
        )));
    }
    if let Some(x) = domain.iter().find(|x| x.dim() != params.d) {
        return Err(Error::DomainMismatch(format!("site {x} is not {}-dimensional", params.d)));
    }
    let mut offsets = Vec::with_capacity(domain.len() + 1);
    let mut nbrs = Vec::with_capacity(domain.len() * 2 * params.d);
    offsets.push(0);
    for x in domain {
        for y in x.neighbors() {
            if let Some(j) = domain.index_of(&y) {
                nbrs.push(j);
            }
        }
        offsets.push(nbrs.len());
    }
    Ok(BoxOperator { params, sites: domain.clone(), potential: v.to_vec(), offsets, nbrs })
}

/// Assemble with V given pointwise.
pub fn assemble_with(
    domain: &SiteSet,
    params: ModelParams,
    v: impl Fn(&Site) -> f64,
) -> Result<BoxOperator> {
    let vals: Vec<f64> = domain.iter().map(&v).collect();
    assemble(domain, &vals, params)
}

impl BoxOperator {
    pub fn n(&self) -> usize {
        self.sites.len()
    }

    #[inline]
    pub fn diag(&self, i: usize) -> f64 {
        self.params.dd() + self.potential[i]
    }

    #[inline]
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.nbrs[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn index_of(&self, x: &Site) -> Option<usize> {
        self.sites.index_of(x)
    }

    pub fn to_dense(&self) -> Dense {
        let n = self.n();
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = self.diag(i);
            for &j in self.neighbors(i) {
                m[(i, j)] = -1.0;
            }
        }
        m
    }

    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        (0..self.n())
            .map(|i| self.diag(i) * u[i] - self.neighbors(i).iter().map(|&j| u[j]).sum::<f64>())
            .collect()
    }

    pub fn bandwidth(&self) -> usize {
        (0..self.n())
            .flat_map(|i| self.neighbors(i).iter().map(move |&j| i.abs_diff(j)))
            .max()
            .unwrap_or(0)
    }

    /// Dirichlet restriction to a subset of the sites.
    pub fn restrict(&self, subset: &SiteSet) -> Result<BoxOperator> {
        let mut v = Vec::with_capacity(subset.len());
        for x in subset {
            let i = self
                .index_of(x)
                .ok_or_else(|| Error::DomainMismatch(format!("site {x} outside the operator domain")))?;
            v.push(self.potential[i]);
        }
        assemble(subset, &v, self.params)
    }

    /// Copy with V(x) replaced at one site.
    pub fn with_potential_at(&self, i: usize, value: f64) -> BoxOperator {
        let mut op = self.clone();
        op.potential[i] = value;
        op
    }

    /// 2d + V(x) − E > deg(x) everywhere: H − E is a strictly dominant M-matrix.
    pub fn dominant_at(&self, e: f64) -> bool {
        (0..self.n()).all(|i| self.diag(i) - e > self.neighbors(i).len() as f64)
    }

    pub fn cholesky_shifted(&self, e: f64) -> Result<BandedCholesky> {
        let bw = self.bandwidth();
        BandedCholesky::factor(self.n(), bw, |i, j| {
            if i == j {
                self.diag(i) - e
            } else if self.neighbors(i).contains(&j) {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// (diag, off-diagonal) when the operator is a contiguous d=1 chain.
    pub fn tridiagonal(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        if self.params.d != 1 {
            return None;
        }
        let s = self.sites.as_slice();
        if s.windows(2).any(|w| w[1].get(0) != w[0].get(0) + 1) {
            return None;
        }
        Some(((0..self.n()).map(|i| self.diag(i)).collect(), vec![-1.0; self.n().saturating_sub(1)]))
    }

    /// Lower triangle in MatrixMarket coordinate format (1-based).
    pub fn to_triplets(&self) -> String {
        let mut entries = Vec::new();
        for i in 0..self.n() {
            entries.push((i, i, self.diag(i)));
            for &j in self.neighbors(i) {
                if j < i {
                    entries.push((i, j, -1.0));
                }
            }
        }
        let mut out = String::from("%%MatrixMarket matrix coordinate real symmetric\n");
        out.push_str(&format!("{} {} {}\n", self.n(), self.n(), entries.len()));
        for (i, j, v) in entries {
            out.push_str(&format!("{} {} {:.17e}\n", i + 1, j + 1, v));
        }
        out
    }
}

/// Factorisation of H − E reused across many right-hand sides.
pub enum GreenSolver {
    Cholesky(BandedCholesky),
    Lu(Box<PartialPivLu<f64>>, usize),
}

impl GreenSolver {
    pub fn new(h: &BoxOperator, e: f64) -> Result<GreenSolver> {
        if h.dominant_at(e) {
            return Ok(GreenSolver::Cholesky(h.cholesky_shifted(e)?));
        }
        let dist = eigvals(&h.to_dense()).iter().fold(f64::INFINITY, |m, l| m.min((l - e).abs()));
        if dist < 1e-12 {
            return Err(Error::NearSingular { energy: e, dist });
        }
        let mut a = h.to_dense();
        for i in 0..h.n() {
            a[(i, i)] -= e;
        }
        Ok(GreenSolver::Lu(Box::new(a.partial_piv_lu()), h.n()))
    }

    pub fn dim(&self) -> usize {
        match self {
            GreenSolver::Cholesky(c) => c.dim(),
            GreenSolver::Lu(_, n) => *n,
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        match self {
            GreenSolver::Cholesky(c) => {
                let mut x = b.to_vec();
                c.solve_in_place(&mut x);
                x
            }
            GreenSolver::Lu(lu, n) => {
                let rhs = Mat::from_fn(*n, 1, |i, _| b[i]);
                let x = lu.solve(&rhs);
                (0..*n).map(|i| x[(i, 0)]).collect()
            }
        }
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        let mut e = vec![0.0; self.dim()];
        e[j] = 1.0;
        self.solve(&e)
    }
}

/// Dense G_Λ(E) = (H_Λ − E)⁻¹.
pub fn green(h: &BoxOperator, e: f64) -> Result<Dense> {
    let solver = GreenSolver::new(h, e)?;
    let n = h.n();
    let mut g = Mat::zeros(n, n);
    for j in 0..n {
        let col = solver.column(j);
        for i in 0..n {
            g[(i, j)] = col[i];
        }
    }
    Ok(g)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonResonantReport {
    pub energy: f64,
    pub norm: f64,
    pub norm_bound: f64,
    pub norm_ok: bool,
    /// min over pairs of bound − |G(x,y)|.
    pub decay_margin: f64,
    /// max over pairs of |G(x,y)| / bound.
    pub decay_worst_ratio: f64,
    pub decay_ok: bool,
    pub pairs: usize,
}

/// Lemma-style bounds for an all-barrier domain:
/// ‖G‖ ≤ 1/(h−4d−β−ι) and |G(x,y)| ≤ e^{−γ₀|x−y|₁}/(h−4d−β−ι).
pub fn check_nonresonant_bounds(h: &BoxOperator, e: f64, slack: f64) -> Result<NonResonantReport> {
    let p = h.params;
    if let Some(i) = (0..h.n()).find(|&i| h.potential[i] < p.h) {
        return Err(Error::NotNonResonant { site: h.sites.as_slice()[i].to_string() });
    }
    if !p.in_low_window(e) {
        return Err(Error::Precondition(format!("energy {e} outside [-iota, 4d+beta+iota]")));
    }
    let g = green(h, e)?;
    let norm = crate::linalg::sym_norm(&crate::linalg::symmetrize(&g));
    let denom = p.barrier_gap();
    let norm_bound = 1.0 / denom;
    let g0 = p.gamma0();
    let sites = h.sites.as_slice();
    let mut margin = f64::INFINITY;
    let mut worst = 0.0f64;
    for (i, x) in sites.iter().enumerate() {
        for (j, y) in sites.iter().enumerate() {
            let bound = (-g0 * x.dist_l1(y) as f64).exp() / denom;
            let v = g[(i, j)].abs();
            margin = margin.min(bound - v);
            if bound > 0.0 {
                worst = worst.max(v / bound);
            }
        }
    }
    Ok(NonResonantReport {
        energy: e,
        norm,
        norm_bound,
        norm_ok: norm <= norm_bound + slack,
        decay_margin: margin,
        decay_worst_ratio: worst,
        decay_ok: margin >= -slack,
        pairs: sites.len() * sites.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::LatticeBox;

    fn p1() -> ModelParams {
        ModelParams::new(1, 10.0, 1.0).unwrap()
    }

    #[test]
    fn constants() {
        let p = p1();
        assert_eq!(p.iota(), 0.01);
        assert!((p.gamma() - 1.0 / 15.0).abs() < 1e-15);
        assert!((p.gamma0() - (1.0f64 + 4.99 / 2.0).ln()).abs() < 1e-15);
        assert!(ModelParams::new(1, 5.0, 1.0).is_err());
        assert!(ModelParams::new(1, 10.0, 0.0).is_err());
    }

    #[test]
    fn small_matrices() {
        let one = SiteSet::new(vec![Site::new(&[0])]);
        let h = assemble(&one, &[10.0], p1()).unwrap();
        assert_eq!(h.to_dense()[(0, 0)], 12.0);
        let g = green(&h, 0.0).unwrap();
        assert!((g[(0, 0)] - 1.0 / 12.0).abs() < 1e-16);

        let two = LatticeBox::new(Site::new(&[0]), 0).to_site_set().union(&SiteSet::new(vec![Site::new(&[1])]));
        let h = assemble(&two, &[0.0, 0.0], p1()).unwrap();
        let m = h.to_dense();
        assert_eq!((m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]), (2.0, -1.0, -1.0, 2.0));
        let ev = eigvals(&m);
        assert!((ev[0] - 1.0).abs() < 1e-14 && (ev[1] - 3.0).abs() < 1e-14);
        let g = green(&h, -1.0).unwrap();
        assert!((g[(0, 0)] - 3.0 / 8.0).abs() < 1e-15 && (g[(0, 1)] - 1.0 / 8.0).abs() < 1e-15);
        assert!(matches!(green(&h, 1.0), Err(Error::NearSingular { .. })));
    }

    #[test]
    fn free_square_spectrum_range() {
        let b = LatticeBox::centered(2, 1).to_site_set();
        let h = assemble(&b, &[0.0; 9], ModelParams::new(2, 10.0, 1.0).unwrap()).unwrap();
        let ev = eigvals(&h.to_dense());
        assert!(ev.iter().all(|&l| (0.0..=8.0).contains(&l)));
    }

    #[test]
    fn assemble_is_linear_in_v() {
        let b = LatticeBox::centered(2, 2).to_site_set();
        let p = ModelParams::new(2, 10.0, 1.0).unwrap();
        let v1: Vec<f64> = (0..b.len()).map(|i| (i % 3) as f64).collect();
        let v2: Vec<f64> = (0..b.len()).map(|i| (i % 5) as f64 * 0.5).collect();
        let sum: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| a + b).collect();
        let a = assemble(&b, &v1, p).unwrap().to_dense();
        let c = assemble(&b, &sum, p).unwrap().to_dense();
        for i in 0..b.len() {
            for j in 0..b.len() {
                let want = if i == j { v2[i] } else { 0.0 };
                assert_eq!(c[(i, j)] - a[(i, j)], want);
            }
        }
    }

    #[test]
    fn nonresonant_segment() {
        let seg = LatticeBox::centered(1, 10).to_site_set();
        let v: Vec<f64> = (0..21).map(|i| 10.0 + (i % 2) as f64).collect();
        let h = assemble(&seg, &v, p1()).unwrap();
        let r = check_nonresonant_bounds(&h, 0.0, 1e-10).unwrap();
        assert!(r.norm_ok && r.decay_ok, "{r:?}");

        let p = p1();
        let one = SiteSet::new(vec![Site::new(&[0])]);
        let h = assemble(&one, &[10.0], p).unwrap();
        let e = p.low_window().1;
        let r = check_nonresonant_bounds(&h, e, 0.0).unwrap();
        assert!((r.norm - 1.0 / (12.0 - e)).abs() < 1e-15 && r.norm_ok);

        let mut v = vec![10.0; 21];
        v[4] = 0.0;
        let h = assemble(&seg, &v, p).unwrap();
        assert!(matches!(check_nonresonant_bounds(&h, 0.0, 0.0), Err(Error::NotNonResonant { .. })));
    }

    #[test]
    fn triplets_header() {
        let b = LatticeBox::centered(1, 1).to_site_set();
        let h = assemble(&b, &[0.0, 1.0, 0.0], p1()).unwrap();
        let t = h.to_triplets();
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[1], "3 3 5");
        assert!(lines[2].starts_with("1 1 2."));
    }
}
