//! Schur-complement cascades over the a-adic blocks B ⊂ B̄_0 ⊂ B̄_1 ⊂ … ⊂ Λ̄_k.
//!
//! Every quantity the analysis shows to be tiny (differences between scales,
//! between energies, the effect of flipping one site) is assembled from
//! products of Green's function entries of barrier regions and never by
//! subtracting two O(1) matrices. Barrier Green's functions are M-matrix
//! inverses, so those entries carry full relative precision down to the
//! underflow threshold.

use std::collections::BTreeMap;
use std::fmt;

use faer::Mat;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::lattice::{a_adic_ladder, boundary, lambda_bar, lambda_prime, BoundarySide, LadderKind};
use crate::lattice::{LatticeBox, ScaleLadder, Site, SiteSet};
use crate::linalg::{eigvals, inverse, max_abs, sym_norm, tridiag_count_below, tridiag_kth_eigenvalue, tridiag_newton_offset, Dense};
use crate::operator::{assemble_with, BoxOperator, GreenSolver, ModelParams};
use crate::potential::{symmetric_hierarchical, HierarchicalPotential, HierarchyParams};
use crate::rng::SiteStream;
use crate::spectral::{eig_dense, spread};
use crate::stats::binomial_sigma;

pub const FIXED_POINT_TOL: f64 = 1e-13;
pub const FIXED_POINT_MAX_ITER: usize = 200;
/// Lower limit for the fixed-point candidate window: 3g_{j−1} is often far
/// below what a double-precision eigenvalue can resolve.
pub const CANDIDATE_FLOOR: f64 = 1e-12;
pub const EIGEN_RESIDUAL_TOL: f64 = 1e-8;
/// A window narrower than this many ulps of the spectral radius is flagged unresolved.
const RESOLUTION_ULPS: f64 = 64.0;
/// Largest non-tridiagonal block whose spectrum is computed densely.
const DENSE_LIMIT: usize = 4000;

// ---------------------------------------------------------------------------
// Generic block-matrix complements

fn split(k: &Dense, p: usize) -> (Dense, Dense, Dense) {
    let n = k.nrows();
    let a = Mat::from_fn(p, p, |i, j| k[(i, j)]);
    let b = Mat::from_fn(p, n - p, |i, j| k[(i, p + j)]);
    let d = Mat::from_fn(n - p, n - p, |i, j| k[(p + i, p + j)]);
    (a, b, d)
}

fn shifted_inverse(d: &Dense, e: f64) -> Result<Dense> {
    let dist = eigvals(d).iter().fold(f64::INFINITY, |m, v| m.min((v - e).abs()));
    if dist < 1e-12 {
        return Err(Error::NearSingular { energy: e, dist });
    }
    let mut m = d.clone();
    for i in 0..m.nrows() {
        m[(i, i)] -= e;
    }
    Ok(inverse(&m))
}

/// A − B(D−E)⁻¹Bᵀ for K = [[A, B], [Bᵀ, D]] split after row `p`.
pub fn schur_dense(k: &Dense, p: usize, e: f64) -> Result<Dense> {
    let (a, b, d) = split(k, p);
    if d.nrows() == 0 {
        return Ok(a);
    }
    let g = shifted_inverse(&d, e)?;
    Ok(&a - &b * &g * b.transpose())
}

/// S_{e1} − S_{e2} = −(e1−e2)·B G_{e1} G_{e2} Bᵀ.
pub fn energy_difference_dense(k: &Dense, p: usize, e1: f64, e2: f64) -> Result<Dense> {
    let (_, b, d) = split(k, p);
    if d.nrows() == 0 || e1 == e2 {
        return Ok(Mat::zeros(p, p));
    }
    let g1 = shifted_inverse(&d, e1)?;
    let g2 = shifted_inverse(&d, e2)?;
    Ok((&b * &g1 * &g2 * b.transpose()) * faer::scale(-(e1 - e2)))
}

/// H_S − Γᵀ(H_{rest} − E)⁻¹Γ for a site subset S of the operator domain.
pub fn schur_complement(h: &BoxOperator, subset: &SiteSet, e: f64) -> Result<Dense> {
    let hs = h.restrict(subset)?.to_dense();
    let rest = h.sites.difference(subset);
    if rest.is_empty() {
        return Ok(hs);
    }
    let rest_op = h.restrict(&rest)?;
    let solver = GreenSolver::new(&rest_op, e)?;
    let ports: SiteSet = subset.iter().flat_map(|b| b.neighbors()).filter(|w| rest.contains(w)).collect();
    let of_base: Vec<Vec<usize>> = subset
        .iter()
        .map(|b| b.neighbors().filter_map(|w| ports.index_of(&w)).collect())
        .collect();
    let np = ports.len();
    let mut gp = Mat::zeros(np, np);
    for (k, w) in ports.iter().enumerate() {
        let col = solver.column(rest.index_of(w).expect("port lies in the complement"));
        for (i, x) in ports.iter().enumerate() {
            gp[(i, k)] = col[rest.index_of(x).unwrap()];
        }
    }
    Ok(&hs - &fold(&of_base, &gp))
}

/// F(b,b') = Σ_{i∼b} Σ_{k∼b'} m(i,k): the sandwich Γᵀ m Γ with unit couplings.
fn fold(of_base: &[Vec<usize>], m: &Dense) -> Dense {
    let nb = of_base.len();
    Mat::from_fn(nb, nb, |b, b2| {
        let mut s = 0.0;
        for &i in &of_base[b] {
            for &k in &of_base[b2] {
                s += m[(i, k)];
            }
        }
        s
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceReport {
    /// dist(E, Spec D) = 1/‖(D−E)⁻¹‖.
    pub epsilon: f64,
    /// ‖B‖.
    pub delta: f64,
    pub in_window: usize,
    /// max over in-window λ of dist(λ, Spec S_λ).
    pub worst_fixed_point_residual: f64,
    /// min over in-window λ of 2(δ/ε)²|λ−E| + 1e-8 − dist(λ, Spec S_E).
    pub worst_approximation_margin: f64,
    pub fixed_point_ok: bool,
    pub approximation_ok: bool,
}

/// Eigenvalues of K in [E−ε/2, E+ε/2] against the spectra of S_λ and S_E.
pub fn correspondence_check(k: &Dense, p: usize, e: f64) -> Result<CorrespondenceReport> {
    let (_, b, d) = split(k, p);
    let epsilon = eigvals(&d).iter().fold(f64::INFINITY, |m, v| m.min((v - e).abs()));
    let delta = crate::linalg::op_norm(&b);
    let s_e = eigvals(&schur_dense(k, p, e)?);
    let mut rep = CorrespondenceReport {
        epsilon,
        delta,
        in_window: 0,
        worst_fixed_point_residual: 0.0,
        worst_approximation_margin: f64::INFINITY,
        fixed_point_ok: true,
        approximation_ok: true,
    };
    for lam in eigvals(k) {
        if (lam - e).abs() > epsilon / 2.0 {
            continue;
        }
        rep.in_window += 1;
        let s_l = eigvals(&schur_dense(k, p, lam)?);
        let r = nearest_distance(&s_l, lam);
        rep.worst_fixed_point_residual = rep.worst_fixed_point_residual.max(r);
        let bound = 2.0 * (delta / epsilon).powi(2) * (lam - e).abs() + EIGEN_RESIDUAL_TOL;
        let margin = bound - nearest_distance(&s_e, lam);
        rep.worst_approximation_margin = rep.worst_approximation_margin.min(margin);
    }
    rep.fixed_point_ok = rep.worst_fixed_point_residual <= EIGEN_RESIDUAL_TOL;
    rep.approximation_ok = rep.worst_approximation_margin >= 0.0;
    Ok(rep)
}

fn nearest_distance(values: &[f64], x: f64) -> f64 {
    values.iter().fold(f64::INFINITY, |m, v| m.min((v - x).abs()))
}

fn nearest_value(values: &[f64], x: f64) -> Option<f64> {
    values.iter().copied().min_by(|a, b| (a - x).abs().total_cmp(&(b - x).abs()))
}

/// λ_{s+1} = eigenvalue of S_{λ_s} nearest λ_s, starting from λ_0 = E.
/// Returns (λ, iterations).
pub fn fixed_point_iteration(
    mut spectrum_at: impl FnMut(f64) -> Result<Vec<f64>>,
    e: f64,
    window: f64,
) -> Result<(f64, usize)> {
    let first = nearest_value(&spectrum_at(e)?, e).ok_or(Error::NoCandidate { energy: e, window })?;
    if (first - e).abs() > window {
        return Err(Error::NoCandidate { energy: e, window });
    }
    let mut lam = e;
    let mut next = first;
    for it in 1..=FIXED_POINT_MAX_ITER {
        if (next - lam).abs() < FIXED_POINT_TOL {
            return Ok((next, it));
        }
        lam = next;
        next = nearest_value(&spectrum_at(lam)?, lam).expect("nonempty spectrum");
    }
    Err(Error::NonConvergence { iterations: FIXED_POINT_MAX_ITER })
}

pub fn fixed_point_dense(k: &Dense, p: usize, e: f64, window: f64) -> Result<(f64, usize)> {
    fixed_point_iteration(|l| Ok(eigvals(&schur_dense(k, p, l)?)), e, window)
}

// ---------------------------------------------------------------------------
// Smallness and gates

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmallnessExponents {
    pub eps: f64,
    pub t: f64,
    pub g: f64,
}

impl Default for SmallnessExponents {
    fn default() -> Self {
        SmallnessExponents { eps: 0.2, t: 0.1, g: 0.3 }
    }
}

/// ln ε_j, ln t_j, ln g_j. The values themselves underflow quickly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Smallness {
    pub ln_eps: f64,
    pub ln_t: f64,
    pub ln_g: f64,
}

impl Smallness {
    pub fn eps(&self) -> f64 {
        self.ln_eps.exp()
    }
    pub fn t(&self) -> f64 {
        self.ln_t.exp()
    }
    pub fn g(&self) -> f64 {
        self.ln_g.exp()
    }
}

/// The barrier-height requirements of the cascade estimates, with
/// ln(rhs) − ln(lhs) as margin (positive when met).
///
/// 1: scale difference, 2: energy difference, 3: second-order walks,
/// 4: fixed-point drift, 5/6: spread of the leading term, 7: higher-order
/// leading term with walk length 𝓛.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gates {
    pub met: [bool; 7],
    pub ln_margin: [f64; 7],
}

impl Gates {
    pub fn evaluate(params: &ModelParams, a: u64, order_l: usize) -> Gates {
        let d2 = params.dd();
        let h = params.h;
        let a = a as f64;
        let r = (d2 / (h - d2 - 2.0)).ln();
        let lg1 = (1.0 / (2.0 * d2 + h + 1.0)).ln();
        let lgamma = params.gamma().ln();
        let q = 1.0 / (h - d2 - params.beta - params.iota());
        let walk: f64 = (1..=order_l.max(1))
            .map(|s| ((s + 1) * (s + 1)) as f64 * d2.powi(s as i32) * q.powi(s as i32 + 2))
            .sum();
        let ln_margin = [
            (2.0 * a - 0.3) * lg1 - (2.0 * a - 0.2) * r,
            1.9 * lg1 - 2.0 * r,
            0.9 * lgamma - r,
            (2.0 * a - 0.1) * lg1 - 2.0 * a * r,
            (0.5f64).ln() - (2.0 * d2 / (h - d2 - 2.0)).ln(),
            (0.5f64).ln() - (4.0 * d2 / (h - d2 - 2.0)).ln(),
            (0.1 * params.gamma().powi(2)).ln() - walk.ln(),
        ];
        let mut met = [false; 7];
        for i in 0..7 {
            met[i] = if i == 3 || i == 4 || i == 5 { ln_margin[i] > 0.0 } else { ln_margin[i] >= 0.0 };
        }
        Gates { met, ln_margin }
    }

    pub fn scale_difference(&self) -> bool {
        self.met[0]
    }

    pub fn energy_difference(&self) -> bool {
        self.met[1]
    }

    pub fn key(&self, higher_order: bool) -> bool {
        self.met[0] && self.met[1] && self.met[3] && if higher_order { self.met[6] } else { self.met[2] }
    }

    pub fn flip(&self, higher_order: bool) -> bool {
        self.key(higher_order) && self.met[4]
    }

    pub fn spread(&self) -> bool {
        self.met[5]
    }
}

// ---------------------------------------------------------------------------
// Cascade state

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig {
    pub a: u64,
    /// None: L_0 = diam Λ'_k.
    pub l0: Option<u64>,
    /// None: the largest P with L_P ≤ d_k^{√α}.
    pub p: Option<usize>,
    pub exponents: SmallnessExponents,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig { a: 5, l0: None, p: None, exponents: SmallnessExponents::default() }
    }
}

/// Hierarchical background, site-keyed disorder and the block geometry of one cascade.
#[derive(Clone)]
pub struct SchurCascadeState {
    pub params: ModelParams,
    pub a: u64,
    /// L_0, …, L_P.
    pub ladder: ScaleLadder,
    pub p: usize,
    /// B = Λ'_k.
    pub base: LatticeBox,
    /// B̄_j, the aL_j-neighbourhood of B.
    pub blocks: Vec<LatticeBox>,
    /// Λ̄_k.
    pub outer: LatticeBox,
    pub exponents: SmallnessExponents,
    pub seed: u64,
    v_hi: HierarchicalPotential,
    stream: SiteStream,
    /// ω on B̄_P in box index order.
    omega: Vec<u8>,
    overrides: BTreeMap<Site, u8>,
}

impl fmt::Debug for SchurCascadeState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SchurCascadeState")
            .field("params", &self.params)
            .field("a", &self.a)
            .field("ladder", &self.ladder.values)
            .field("base", &self.base)
            .field("blocks", &self.blocks)
            .field("seed", &self.seed)
            .finish()
    }
}

/// Replay record of a cascade: geometry, seed and any pinned disorder values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeSnapshot {
    pub params: ModelParams,
    pub ladder: ScaleLadder,
    pub base: LatticeBox,
    pub outer: LatticeBox,
    pub exponents: SmallnessExponents,
    pub seed: u64,
    pub potential_json: String,
    pub pinned: Vec<(Site, u8)>,
}

impl SchurCascadeState {
    /// Cascade around Λ'_k(0) of the symmetric hierarchical potential.
    pub fn new(hp: &HierarchyParams, k: usize, cfg: &CascadeConfig, seed: u64) -> Result<Self> {
        let v_hi = symmetric_hierarchical(hp, k)?;
        let origin = Site::origin(hp.d);
        let base = lambda_prime(&origin, k, &v_hi.ladder)?;
        let outer = lambda_bar(&origin, k, &v_hi.ladder)?;
        let l0 = cfg.l0.unwrap_or(2 * base.radius);
        let p = match cfg.p {
            Some(p) => p,
            None => a_adic_ladder(l0, cfg.a, v_hi.ladder.get(k)?, hp.alpha)?.1,
        };
        let ladder = ScaleLadder::a_adic(l0, cfg.a, p + 1)?;
        Self::from_parts(hp.model()?, v_hi, base, outer, ladder, cfg.exponents, seed)
    }

    pub fn from_parts(
        params: ModelParams,
        v_hi: HierarchicalPotential,
        base: LatticeBox,
        outer: LatticeBox,
        ladder: ScaleLadder,
        exponents: SmallnessExponents,
        seed: u64,
    ) -> Result<Self> {
        let a = match ladder.kind {
            LadderKind::AAdic { a, .. } => a,
            _ => return Err(Error::InvalidLadder("cascade needs an a-adic ladder".into())),
        };
        let p = ladder.len() - 1;
        let blocks: Vec<LatticeBox> = ladder.values.iter().map(|&l| base.neighborhood(a * l)).collect();
        if blocks[p].radius > outer.radius || blocks[p].center != outer.center {
            return Err(Error::InvalidParams(format!(
                "block radius {} exceeds the enclosing box radius {}",
                blocks[p].radius, outer.radius
            )));
        }
        let stream = SiteStream::new(seed);
        let omega = blocks[p].sites().map(|x| stream.bit(&x)).collect();
        let state = SchurCascadeState {
            params,
            a,
            ladder,
            p,
            base,
            blocks,
            outer,
            exponents,
            seed,
            v_hi,
            stream,
            omega,
            overrides: BTreeMap::new(),
        };
        if !state.smallness_ordered() {
            return Err(Error::InvalidParams(
                "smallness exponents break the ordering eps_(j+1) < t_(j+1) < g_j < eps_j < t_j".into(),
            ));
        }
        Ok(state)
    }

    pub fn snapshot(&self) -> CascadeSnapshot {
        let mut pinned: Vec<(Site, u8)> = self.overrides.iter().map(|(x, v)| (*x, *v)).collect();
        for (i, x) in self.blocks[self.p].sites().enumerate() {
            if self.omega[i] != self.stream.bit(&x) {
                pinned.push((x, self.omega[i]));
            }
        }
        pinned.sort();
        CascadeSnapshot {
            params: self.params,
            ladder: self.ladder.clone(),
            base: self.base,
            outer: self.outer,
            exponents: self.exponents,
            seed: self.seed,
            potential_json: self.v_hi.to_json(),
            pinned,
        }
    }

    pub fn from_snapshot(s: &CascadeSnapshot) -> Result<Self> {
        let v_hi = HierarchicalPotential::from_json(&s.potential_json)?;
        let mut st = Self::from_parts(s.params, v_hi, s.base, s.outer, s.ladder.clone(), s.exponents, s.seed)?;
        for (x, v) in &s.pinned {
            st.set_omega(x, *v);
        }
        Ok(st)
    }

    pub fn smallness(&self, j: usize) -> Smallness {
        let lg = self.params.gamma().ln();
        let l = self.ladder.values[j] as f64;
        let a = self.a as f64;
        let e = &self.exponents;
        Smallness {
            ln_eps: (a + 1.0 + e.eps) * l * lg,
            ln_t: (a + 1.0 + e.t) * l * lg,
            ln_g: (2.0 * a - e.g) * l * lg,
        }
    }

    /// ε_{j+1} < t_{j+1} < g_j < ε_j < t_j for every step.
    pub fn smallness_ordered(&self) -> bool {
        (0..self.p).all(|j| {
            let (s, n) = (self.smallness(j), self.smallness(j + 1));
            n.ln_eps < n.ln_t && n.ln_t < s.ln_g && s.ln_g < s.ln_eps && s.ln_eps < s.ln_t
        }) && (0..=self.p).all(|j| {
            let s = self.smallness(j);
            s.ln_g < s.ln_eps && s.ln_eps < s.ln_t
        })
    }

    pub fn gates(&self, order_l: usize) -> Gates {
        Gates::evaluate(&self.params, self.a, order_l)
    }

    pub fn background(&self) -> &HierarchicalPotential {
        &self.v_hi
    }

    pub fn omega(&self, x: &Site) -> u8 {
        match self.blocks[self.p].index_of(x) {
            Some(i) => self.omega[i],
            None => self.overrides.get(x).copied().unwrap_or_else(|| self.stream.bit(x)),
        }
    }

    pub fn set_omega(&mut self, x: &Site, v: u8) {
        match self.blocks[self.p].index_of(x) {
            Some(i) => self.omega[i] = v,
            None => {
                self.overrides.insert(*x, v);
            }
        }
    }

    pub fn with_omega(&self, x: &Site, v: u8) -> Self {
        let mut s = self.clone();
        s.set_omega(x, v);
        s
    }

    pub fn potential(&self, x: &Site) -> f64 {
        self.v_hi.value(x) + self.params.beta * self.omega(x) as f64
    }

    pub fn operator(&self, sites: &SiteSet) -> Result<BoxOperator> {
        assemble_with(sites, self.params, |x| self.potential(x))
    }

    pub fn block_operator(&self, level: usize) -> Result<BoxOperator> {
        self.check_level(level)?;
        self.operator(&self.blocks[level].to_site_set())
    }

    pub fn base_operator(&self) -> Result<BoxOperator> {
        self.operator(&self.base.to_site_set())
    }

    fn check_level(&self, level: usize) -> Result<()> {
        if level > self.p {
            return Err(Error::LevelOutOfRange { level, len: self.p + 1 });
        }
        Ok(())
    }

    fn check_step(&self, j: usize) -> Result<()> {
        if j == 0 || j > self.p {
            return Err(Error::Precondition(format!("step j must be in 1..={}, got {j}", self.p)));
        }
        Ok(())
    }

    fn check_energy(&self, e: f64) -> Result<()> {
        if !self.params.in_low_window(e) {
            let (lo, hi) = self.params.low_window();
            return Err(Error::Precondition(format!("energy {e} outside [{lo}, {hi}]")));
        }
        Ok(())
    }

    fn annulus(&self, level: usize, e: f64) -> Result<Region> {
        let sites = SiteSet::new(self.blocks[level].sites().filter(|x| !self.base.contains(x)).collect());
        let op = self.operator(&sites)?;
        let solver = GreenSolver::new(&op, e)?;
        Ok(Region { op, solver })
    }

    fn ports(&self) -> Ports {
        let bset = self.base.to_site_set();
        let outer = boundary(&bset, BoundarySide::Outer);
        let of_base = bset.iter().map(|b| b.neighbors().filter_map(|w| outer.index_of(&w)).collect()).collect();
        Ports { sites: outer.iter().copied().collect(), of_base }
    }

    /// ∂⁺B̄_level in index order.
    pub fn outer_boundary(&self, level: usize) -> Vec<Site> {
        box_outer_boundary(&self.blocks[level])
    }

    /// S̃^(level)_E = H_B − Γᵀ G_{B̄_level∖B}(E) Γ.
    pub fn schur(&self, level: usize, e: f64) -> Result<Dense> {
        self.check_level(level)?;
        let region = self.annulus(level, e)?;
        let ports = self.ports();
        let np = ports.sites.len();
        let mut gp = Mat::zeros(np, np);
        for (k, w) in ports.sites.iter().enumerate() {
            let col = region.column(w);
            for (i, x) in ports.sites.iter().enumerate() {
                gp[(i, k)] = region.at(&col, x);
            }
        }
        let hb = self.base_operator()?.to_dense();
        Ok(&hb - &fold(&ports.of_base, &gp))
    }

    /// c(y,b) = Σ_{x∼y, x∈B̄_level} Σ_{w∼b, w∉B} G_{B̄_level∖B}(x,w;E) for y ∈ ∂⁺B̄_level.
    pub fn boundary_coupling(&self, level: usize, e: f64) -> Result<(Vec<Site>, Dense)> {
        self.check_level(level)?;
        let region = self.annulus(level, e)?;
        let ys = self.outer_boundary(level);
        let ports = self.ports();
        let block = self.blocks[level];
        let nb = ports.of_base.len();
        let mut bases_of_port = vec![Vec::new(); ports.sites.len()];
        for (b, list) in ports.of_base.iter().enumerate() {
            for &k in list {
                bases_of_port[k].push(b);
            }
        }
        let mut c = Mat::zeros(ys.len(), nb);
        for (k, w) in ports.sites.iter().enumerate() {
            let col = region.column(w);
            for (yi, y) in ys.iter().enumerate() {
                let s: f64 = y.neighbors().filter(|x| block.contains(x)).map(|x| region.at(&col, &x)).sum();
                for &b in &bases_of_port[k] {
                    c[(yi, b)] += s;
                }
            }
        }
        Ok((ys, c))
    }

    /// ΔS^(j)_E = S̃^(j)_E − S̃^(j−1)_E = −cᵀKc with K = G_{B̄_j∖B}(E) on ∂⁺B̄_{j−1}.
    pub fn scale_difference(&self, j: usize, e: f64) -> Result<ScaleDifference> {
        self.check_step(j)?;
        let (ys, c) = self.boundary_coupling(j - 1, e)?;
        let region = self.annulus(j, e)?;
        let k = region.gram(&ys);
        let sandwich = (c.transpose() * &k * &c) * faer::scale(-1.0);
        Ok(ScaleDifference { ys, c, k, sandwich })
    }

    pub fn scale_difference_check(&self, j: usize, e: f64) -> Result<ScaleDifferenceReport> {
        self.check_energy(e)?;
        let sd = self.scale_difference(j, e)?;
        let direct = &self.schur(j, e)? - &self.schur(j - 1, e)?;
        let norm = sym_norm(&sd.sandwich);
        let ln_bound = self.smallness(j - 1).ln_g;
        let gate = self.gates(1).scale_difference();
        let holds = norm.ln() <= ln_bound;
        Ok(ScaleDifferenceReport {
            j,
            energy: e,
            norm,
            norm_direct: sym_norm(&direct),
            ln_norm: norm.ln(),
            ln_bound,
            ln_margin: ln_bound - norm.ln(),
            underflow: norm == 0.0,
            gate,
            holds,
            ok: gate.then_some(holds),
        })
    }

    /// S̃^(level)_{e1} − S̃^(level)_{e2} = −(e1−e2) Γᵀ G_{e1} G_{e2} Γ.
    pub fn energy_difference(&self, level: usize, e1: f64, e2: f64) -> Result<Dense> {
        self.check_level(level)?;
        let ports = self.ports();
        let np = ports.sites.len();
        if e1 == e2 {
            let nb = ports.of_base.len();
            return Ok(Mat::zeros(nb, nb));
        }
        let r1 = self.annulus(level, e1)?;
        let r2 = self.annulus(level, e2)?;
        let c1: Vec<Vec<f64>> = ports.sites.iter().map(|w| r1.column(w)).collect();
        let c2: Vec<Vec<f64>> = ports.sites.iter().map(|w| r2.column(w)).collect();
        let m = Mat::from_fn(np, np, |i, k| c1[i].iter().zip(&c2[k]).map(|(x, y)| x * y).sum::<f64>());
        Ok(fold(&ports.of_base, &m) * faer::scale(-(e1 - e2)))
    }

    pub fn energy_difference_check(&self, level: usize, e1: f64, e2: f64) -> Result<EnergyDifferenceReport> {
        self.check_energy(e1)?;
        self.check_energy(e2)?;
        let diff = self.energy_difference(level, e1, e2)?;
        let direct = if e1 == e2 { diff.clone() } else { &self.schur(level, e1)? - &self.schur(level, e2)? };
        let norm = sym_norm(&diff);
        let bound = self.params.gamma().powf(1.9) * (e1 - e2).abs();
        let gate = self.gates(1).energy_difference();
        let holds = norm <= bound;
        Ok(EnergyDifferenceReport {
            level,
            e1,
            e2,
            norm,
            norm_direct: sym_norm(&direct),
            bound,
            gate,
            holds,
            ok: gate.then_some(holds),
        })
    }

    /// Solution λ of λ ∈ Spec S̃^(j−1)_λ nearest E, verified against H_{B̄_{j−1}}.
    pub fn fixed_point_eigenvalue(&self, j: usize, e: f64) -> Result<FixedPoint> {
        self.check_step(j)?;
        let g = self.smallness(j - 1).g();
        let window = (3.0 * g).max(CANDIDATE_FLOOR);
        let (lambda, iterations) = fixed_point_iteration(|l| Ok(eigvals(&self.schur(j - 1, l)?)), e, window)?;
        let dec = eig_dense(&self.schur(j - 1, lambda)?);
        let r = dec.nearest(lambda).expect("nonempty base block");
        let phi = dec.vector(r);
        let (op, psi) = self.reconstruct(j - 1, lambda, &phi)?;
        let residual = relative_residual(&op, lambda, &psi);
        Ok(FixedPoint {
            j,
            energy: e,
            lambda,
            iterations,
            distance: (lambda - e).abs(),
            ln_bound: (3.0f64).ln() + self.smallness(j - 1).ln_g,
            window,
            self_consistency: (dec.values[r] - lambda).abs(),
            residual,
            in_block_spectrum: residual <= EIGEN_RESIDUAL_TOL,
        })
    }

    /// ψ = (φ, −G_{B̄∖B}(λ)Γφ) on B̄_level, with its operator.
    pub fn reconstruct(&self, level: usize, lambda: f64, phi: &[f64]) -> Result<(BoxOperator, Vec<f64>)> {
        self.check_level(level)?;
        let region = self.annulus(level, lambda)?;
        let bset = self.base.to_site_set();
        let mut rhs = vec![0.0; region.op.n()];
        for (b, x) in bset.iter().enumerate() {
            for w in x.neighbors() {
                if let Some(i) = region.op.index_of(&w) {
                    rhs[i] += phi[b];
                }
            }
        }
        let outside = region.solver.solve(&rhs);
        let op = self.block_operator(level)?;
        let mut psi = vec![0.0; op.n()];
        for (b, x) in bset.iter().enumerate() {
            psi[op.index_of(x).unwrap()] = phi[b];
        }
        for (i, x) in region.op.sites.iter().enumerate() {
            psi[op.index_of(x).unwrap()] = outside[i];
        }
        Ok((op, psi))
    }

    /// a_m(y) for the eigenvectors of S̃^(j−1)_λ in the ε_{j−1}/2 window around E.
    pub fn boundary_vectors(&self, j: usize, e: f64, lambda: f64) -> Result<BoundaryVectors> {
        self.check_step(j)?;
        let sm = self.smallness(j - 1);
        let half = sm.eps() / 2.0;
        let dec = eig_dense(&self.schur(j - 1, lambda)?);
        let n = dec.values.len();
        let mut window: Vec<usize> = (0..n).filter(|&r| (dec.values[r] - e).abs() <= half).collect();
        if window.is_empty() {
            return Err(Error::EmptyWindow);
        }
        window.sort_by(|&x, &y| (dec.values[x] - lambda).abs().total_cmp(&(dec.values[y] - lambda).abs()));
        let mut order = window.clone();
        order.extend((0..n).filter(|r| !window.contains(r)));
        let values: Vec<f64> = order.iter().map(|&r| dec.values[r]).collect();
        let basis = Mat::from_fn(n, n, |i, c| dec.vectors[(i, order[c])]);
        let nhat = window.len();

        let (ys, c) = self.boundary_coupling(j - 1, lambda)?;
        let a_all = &c * &basis;
        let a: Vec<Vec<f64>> = (0..ys.len()).map(|y| (0..nhat).map(|m| a_all[(y, m)]).collect()).collect();
        let norms: Vec<f64> = a.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        let mut best = 0usize;
        for i in 1..ys.len() {
            if norms[i] > norms[best] || (norms[i] == norms[best] && ys[i] < ys[best]) {
                best = i;
            }
        }
        let fallback = norms[best] == 0.0;
        if fallback {
            best = (0..ys.len()).min_by_key(|&i| ys[i]).unwrap();
        }
        let l = self.ladder.values[j - 1] as f64;
        let lg = self.params.gamma().ln();
        let ln_decay_bound = (self.a as f64 - 0.1) * l * lg;
        let d2 = self.params.dd();
        let np = self.ports().sites.len() as f64;
        let ln_decay_lhs = np.ln() + (d2 * d2).ln() - self.params.barrier_gap().ln()
            + (self.a as f64 * l - 1.0) * (d2 / (self.params.h - d2 - self.params.beta - self.params.iota())).ln();
        let max_abs_all = max_abs(&a_all);
        Ok(BoundaryVectors {
            j,
            energy: e,
            lambda,
            ybar: ys[best],
            ys,
            a,
            nhat,
            values,
            basis,
            ybar_index: best,
            norm_ybar: norms[best],
            fallback,
            ln_t: sm.ln_t,
            transversal: norms[best] > 0.0 && norms[best].ln() >= sm.ln_t,
            max_abs_all,
            ln_decay_bound,
            decay_gate: ln_decay_lhs < ln_decay_bound,
            decay_holds: max_abs_all == 0.0 || max_abs_all.ln() < ln_decay_bound,
        })
    }

    /// s^(j)_E at both values of ω(ȳ), its leading term, the deterministic part
    /// and the flip response of the remainder.
    pub fn key_decomposition(
        &self,
        j: usize,
        e: f64,
        bv: &BoundaryVectors,
        order_l: Option<usize>,
    ) -> Result<KeyDecomposition> {
        self.check_step(j)?;
        if bv.j != j {
            return Err(Error::Precondition(format!("boundary vectors belong to step {}, not {j}", bv.j)));
        }
        let lambda = bv.lambda;
        let nhat = bv.nhat;
        let n = bv.values.len();
        let ybar = bv.ybar;
        let st0 = self.with_omega(&ybar, 0);

        // Eigenbasis picture of S̃^(j)_E(ω(ȳ)=0) = diag(𝓔) + Φᵀ(δ_E + ΔS_E)Φ.
        let delta_e = st0.energy_difference(j - 1, e, lambda)?;
        let sd = st0.scale_difference(j, e)?;
        let phi = &bv.basis;
        let mut m0 = phi.transpose() * (&delta_e + &sd.sandwich) * phi;
        for i in 0..n {
            m0[(i, i)] += bv.values[i];
        }
        let (mqq, mqt, mtt) = (
            Mat::from_fn(nhat, nhat, |i, k| m0[(i, k)]),
            Mat::from_fn(nhat, n - nhat, |i, k| m0[(i, nhat + k)]),
            Mat::from_fn(n - nhat, n - nhat, |i, k| m0[(nhat + i, nhat + k)]),
        );
        let tinv = if n > nhat { shifted_inverse(&mtt, e)? } else { Mat::zeros(0, 0) };
        let s0 = &mqq - &mqt * &tinv * mqt.transpose();

        // Flipping ω(ȳ) adds κ v vᵀ to ΔS (Sherman–Morrison on K).
        let yi = sd.ys.iter().position(|y| *y == ybar).ok_or_else(|| {
            Error::Precondition(format!("site {ybar} is not on the boundary of block {}", j - 1))
        })?;
        let beta = self.params.beta;
        let kappa = beta / (1.0 + beta * sd.k[(yi, yi)]);
        let g = Mat::from_fn(sd.ys.len(), 1, |i, _| sd.k[(i, yi)]);
        let v = sd.c.transpose() * &g;
        let u = phi.transpose() * &v;
        let uq = Mat::from_fn(nhat, 1, |i, _| u[(i, 0)]);
        let ut = Mat::from_fn(n - nhat, 1, |i, _| u[(nhat + i, 0)]);
        let w = &uq - &mqt * &tinv * &ut;
        let tau = (ut.transpose() * &tinv * &ut).read(0, 0);
        let kappa2 = kappa / (1.0 + kappa * tau);
        let ds = (&w * w.transpose()) * faer::scale(kappa2);
        let s1 = &s0 + &ds;

        // Leading term, from a(·) at λ.
        let a_of = |i: usize| Mat::from_fn(nhat, 1, |m, _| bv.a[i][m]);
        let ay = a_of(bv.ybar_index);
        let a_norm_sq: f64 = bv.a[bv.ybar_index].iter().map(|x| x * x).sum();
        let d2 = self.params.dd();
        let vhi = self.v_hi.value(&ybar);
        let (leading0, leading1, mcal) = match order_l {
            None => {
                let mut mcal = &ay * ay.transpose();
                for (zi, z) in bv.ys.iter().enumerate() {
                    if z.is_adjacent(&ybar) {
                        let az = a_of(zi);
                        let dz = self.potential(z) + d2 - lambda;
                        mcal = &mcal + (&ay * az.transpose() + &az * ay.transpose()) * faer::scale(1.0 / dz);
                    }
                }
                let l0 = &mcal * faer::scale(-1.0 / (vhi + d2 - lambda));
                let l1 = &mcal * faer::scale(-1.0 / (vhi + beta + d2 - lambda));
                (l0, l1, mcal)
            }
            Some(ll) => {
                let mut out = Vec::new();
                for w_om in [0u8, 1] {
                    let wts = self.with_omega(&ybar, w_om).walk_weights(j, &ybar, lambda, ll, &bv.ys)?;
                    let mut lead = Mat::zeros(nhat, nhat);
                    for (x0, xs, wt) in wts {
                        lead = &lead + (&a_of(x0) * a_of(xs).transpose()) * faer::scale(-wt);
                    }
                    out.push(lead);
                }
                let l1 = out.pop().unwrap();
                let l0 = out.pop().unwrap();
                let mcal = &l0 * faer::scale(-(vhi + d2 - lambda));
                (l0, l1, mcal)
            }
        };
        let r_diff = &ds - &(&leading1 - &leading0);
        let d = &s0 - &leading0;
        let d_other = &(&s1 - &leading1) - &r_diff;
        let gates = self.gates(order_l.unwrap_or(1));
        let ho = order_l.is_some();
        let gamma = self.params.gamma();
        let l_prev = self.ladder.values[j - 1] as f64;
        let r_bound = match order_l {
            None => (gamma.powf(2.5) + gamma.powf(0.5 * l_prev)) * a_norm_sq,
            Some(ll) => 2.0 * gamma.powf(0.85 * (ll as f64 + 1.0)) * a_norm_sq,
        };
        let flip_tail = match order_l {
            None => 2.0 * gamma.powf(2.5),
            Some(ll) => 2.0 * gamma.powf(0.85 * (ll as f64 + 2.0)),
        };
        let flip_bound = (0.5 * gamma * gamma * beta - flip_tail) * a_norm_sq;
        let r_diff_norm = sym_norm(&r_diff);
        let flip_norm = sym_norm(&ds);
        let r_holds = r_diff_norm <= r_bound;
        let flip_holds = (nhat == 1).then_some(flip_norm >= flip_bound);
        let spread_m = (nhat >= 2).then(|| spread(&mcal));
        let spread_holds = spread_m.map(|s| s >= 0.5 * a_norm_sq);
        let gate_key = gates.key(ho);
        let gate_flip = gates.flip(ho);
        let gate_spread = gates.spread();
        let mut asserted = Vec::new();
        if gate_key {
            asserted.push(r_holds);
        }
        if gate_flip {
            asserted.extend(flip_holds);
        }
        if gate_spread {
            asserted.extend(spread_holds);
        }
        let report = KeyDecompositionReport {
            j,
            energy: e,
            lambda,
            nhat,
            ybar,
            order_l,
            a_norm_sq,
            r_diff_norm,
            r_bound,
            r_holds,
            flip_norm,
            flip_bound,
            flip_holds,
            spread_m,
            spread_bound: 0.5 * a_norm_sq,
            spread_holds,
            d_invariance: max_abs(&(&d_other - &d)),
            gate_key,
            gate_flip,
            gate_spread,
            ok: (!asserted.is_empty()).then(|| asserted.iter().all(|&b| b)),
        };
        Ok(KeyDecomposition { s0, s1, ds, leading0, leading1, d, r_diff, report })
    }

    /// Neumann-series weights Σ_g ∏_{x∈g} 1/(V(x)+2d−λ) over walks in B̄_j∖B of
    /// length ≤ `order_l` that start and end on `ys` and visit ȳ.
    fn walk_weights(
        &self,
        j: usize,
        ybar: &Site,
        lambda: f64,
        order_l: usize,
        ys: &[Site],
    ) -> Result<Vec<(usize, usize, f64)>> {
        let block = self.blocks[j];
        let inside = |x: &Site| block.contains(x) && !self.base.contains(x);
        // Sites reachable from ȳ within order_l steps.
        let mut region = vec![*ybar];
        let mut frontier = vec![*ybar];
        let mut seen: std::collections::HashSet<Site> = [*ybar].into_iter().collect();
        for _ in 0..order_l {
            let mut next = Vec::new();
            for x in &frontier {
                for y in x.neighbors() {
                    if inside(&y) && seen.insert(y) {
                        next.push(y);
                        region.push(y);
                    }
                }
            }
            frontier = next;
        }
        let idx: std::collections::HashMap<Site, usize> = region.iter().enumerate().map(|(i, x)| (*x, i)).collect();
        let inv_d: Vec<f64> = region.iter().map(|x| 1.0 / (self.potential(x) + self.params.dd() - lambda)).collect();
        let yb = idx[ybar];
        let ends: Vec<(usize, usize)> =
            ys.iter().enumerate().filter_map(|(yi, y)| idx.get(y).map(|&r| (yi, r))).collect();
        let mut out = Vec::new();
        for &(y0, r0) in &ends {
            let nr = region.len();
            let mut f = [vec![0.0; nr], vec![0.0; nr]];
            f[(r0 == yb) as usize][r0] = inv_d[r0];
            let mut acc = vec![0.0; nr];
            for s in 0..=order_l {
                for (i, a) in acc.iter_mut().enumerate() {
                    *a += f[1][i];
                }
                if s == order_l {
                    break;
                }
                let mut g = [vec![0.0; nr], vec![0.0; nr]];
                for flag in 0..2 {
                    for (i, x) in region.iter().enumerate() {
                        let val = f[flag][i];
                        if val == 0.0 {
                            continue;
                        }
                        for y in x.neighbors() {
                            if let Some(&k) = idx.get(&y) {
                                let nf = if k == yb { 1 } else { flag };
                                g[nf][k] += val * inv_d[k];
                            }
                        }
                    }
                }
                f = g;
            }
            for &(ys_i, r) in &ends {
                if acc[r] != 0.0 {
                    out.push((y0, ys_i, acc[r]));
                }
            }
        }
        Ok(out)
    }

    /// n̂_level = #Spec S̃^(level)_E ∩ [E−ε_level, E+ε_level], with a resolution flag.
    ///
    /// Below double resolution a single eigenvalue near E is placed by
    /// `accurate_distance`; the rounded count is kept in `raw_count`.
    pub fn window_count(&self, level: usize, e: f64) -> Result<WindowCount> {
        let vals = eigvals(&self.schur(level, e)?);
        let sm = self.smallness(level);
        let mut wc = WindowCount::new(&vals, e, sm.eps());
        if wc.method != CountMethod::Undetermined || wc.near != 1 {
            return Ok(wc);
        }
        if let Some((dist, err)) = self.accurate_distance(level, e)? {
            wc.accurate = Some((dist, err));
            let far = dist > err && (dist - err).ln() > sm.ln_eps;
            let inside = (dist + err).ln() < sm.ln_eps;
            if far || inside {
                wc.count = inside as usize;
                wc.method = CountMethod::Accurate;
            }
        }
        Ok(wc)
    }

    /// |μ − E| for the eigenvalue μ of S̃^(level)_E nearest E, to relative accuracy,
    /// with an error bound. μ − E = (λ* − E)(1 + ‖GΓφ‖²) + Σ_i φᵀΔS^(i)φ, where λ* is
    /// the eigenvalue of H_{B̄_0} behind μ, φ its Schur eigenvector at level 0 and
    /// ΔS^(i) = −cᵀKc the positive-product scale differences. Only chains qualify:
    /// λ* − E comes from a double-double Newton step.
    pub fn accurate_distance(&self, level: usize, e: f64) -> Result<Option<(f64, f64)>> {
        self.check_level(level)?;
        let Some((diag, off)) = self.block_operator(0)?.tridiagonal() else {
            return Ok(None);
        };
        let offset = tridiag_newton_offset(&diag, &off, e);
        if !(offset.abs() <= 1e-8) {
            return Ok(None);
        }
        let (vals, vecs) = crate::linalg::eigh(&self.schur(0, e)?);
        let k = (0..vals.len()).min_by(|&a, &b| (vals[a] - e).abs().total_cmp(&(vals[b] - e).abs())).unwrap();
        let gap = (0..vals.len()).filter(|&i| i != k).map(|i| (vals[i] - vals[k]).abs()).fold(f64::INFINITY, f64::min);
        let phi: Vec<f64> = (0..vals.len()).map(|b| vecs[(b, k)]).collect();

        let region = self.annulus(0, e)?;
        let ports = self.ports();
        let mut rhs = vec![0.0; region.op.n()];
        for (b, list) in ports.of_base.iter().enumerate() {
            for &w in list {
                rhs[region.op.index_of(&ports.sites[w]).expect("port in annulus")] += phi[b];
            }
        }
        let w: f64 = region.solver.solve(&rhs).iter().map(|x| x * x).sum();
        let r0 = offset * (1.0 + w);

        let (mut shift, mut shift_abs, mut dnorm) = (0.0f64, 0.0f64, 0.0f64);
        for i in 1..=level {
            let sd = self.scale_difference(i, e)?;
            let v: Vec<f64> = (0..sd.c.nrows()).map(|y| (0..phi.len()).map(|b| sd.c[(y, b)] * phi[b]).sum()).collect();
            let mut q = 0.0;
            for a in 0..v.len() {
                for b in 0..v.len() {
                    q += v[a] * sd.k[(a, b)] * v[b];
                }
            }
            shift -= q;
            shift_abs += q.abs();
            dnorm += sym_norm(&sd.sandwich);
        }
        let dist = (r0 + shift).abs();
        let rel = 1e-9 + 4.0 * (offset.abs() + dnorm) / gap;
        let err = rel * (r0.abs() + shift_abs) + dnorm * dnorm / gap;
        Ok(Some((dist, err)))
    }

    /// Lemma-style monotonicity step: selects ȳ from the disorder in B̄_{j−1},
    /// then evaluates n̂_j at both values of ω(ȳ).
    pub fn monotonicity_trial(&self, j: usize, e: f64) -> Result<MonotonicityTrial> {
        self.check_step(j)?;
        self.check_energy(e)?;
        let prev = self.window_count(j - 1, e)?;
        let (ybar, selection) = self.select_ybar(j, e, prev.count)?;
        let mut branches = [0usize; 2];
        let mut raw = [0usize; 2];
        let mut methods = [CountMethod::Resolved; 2];
        let mut resolved_next = true;
        for w in [0u8, 1] {
            let c = self.with_omega(&ybar, w).window_count(j, e)?;
            branches[w as usize] = c.count;
            raw[w as usize] = c.raw_count;
            methods[w as usize] = c.method;
            resolved_next = c.resolved;
        }
        let omega_ybar = self.omega(&ybar);
        let ev = |n: usize| n < prev.count || (n == 0 && prev.count == 0);
        Ok(MonotonicityTrial {
            j,
            energy: e,
            nhat_prev: prev.count,
            nhat_branches: branches,
            omega_ybar,
            nhat_next: branches[omega_ybar as usize],
            event: ev(branches[omega_ybar as usize]),
            event_branches: [ev(branches[0]), ev(branches[1])],
            ybar,
            selection,
            deterministic_ok: branches.iter().all(|&n| n <= prev.count),
            windows_resolved: [prev.resolved, resolved_next],
            raw_branches: raw,
            methods,
            prev_method: prev.method,
        })
    }

    fn select_ybar(&self, j: usize, e: f64, nhat_prev: usize) -> Result<(Site, YbarSelection)> {
        let fallback = || self.outer_boundary(j - 1).into_iter().min().expect("nonempty boundary");
        if nhat_prev == 0 {
            return Ok((fallback(), YbarSelection::NoEigenvalues));
        }
        let fp = match self.fixed_point_eigenvalue(j, e) {
            Ok(fp) => fp,
            Err(Error::NoCandidate { .. }) => return Ok((fallback(), YbarSelection::NoCandidate)),
            Err(err) => return Err(err),
        };
        match self.boundary_vectors(j, e, fp.lambda) {
            Ok(bv) if bv.fallback => Ok((bv.ybar, YbarSelection::Underflow)),
            Ok(bv) => Ok((bv.ybar, YbarSelection::MaxBoundaryVector)),
            Err(Error::EmptyWindow) => Ok((fallback(), YbarSelection::EmptyWindow)),
            Err(err) => Err(err),
        }
    }

    /// One run of the site-mixed filtration F_0 ⊂ Q_0 ⊂ F_1 ⊂ … ⊂ F_P.
    pub fn wegner_martingale_run(&self, e: f64) -> Result<MartingaleTrace> {
        self.check_energy(e)?;
        if self.p < 1 {
            return Err(Error::Precondition("the martingale needs P >= 1".into()));
        }
        let nhat0 = self.window_count(0, e)?.count;
        let mut steps = Vec::with_capacity(self.p);
        let mut sum = 0usize;
        let mut monotone = true;
        let mut last = nhat0;
        for j in 1..=self.p {
            let t = self.monotonicity_trial(j, e)?;
            monotone &= t.nhat_prev == last && t.nhat_next <= t.nhat_prev;
            last = t.nhat_next;
            sum += t.event as usize;
            steps.push(MartingaleStep {
                j,
                ybar: t.ybar,
                selection: t.selection,
                omega_ybar: t.omega_ybar,
                nhat_prev: t.nhat_prev,
                nhat: t.nhat_next,
                z: t.event as u8,
                z_branches: t.event_branches,
                partial_sum: sum,
                window_resolved: t.windows_resolved[1],
                window_method: t.methods[t.omega_ybar as usize],
                raw_nhat: t.raw_branches[t.omega_ybar as usize],
            });
        }
        let bootstrap = self.bootstrap(e, last)?;
        Ok(MartingaleTrace { seed: self.seed, energy: e, p: self.p, nhat0, steps, x_p: sum, monotone, bootstrap })
    }

    fn bootstrap(&self, e: f64, nhat_p: usize) -> Result<Bootstrap> {
        let sm = self.smallness(self.p);
        let half = sm.eps() / 2.0;
        let block = self.block_operator(self.p)?;
        let (dist_block, count_block_window) = match spectrum_probe(&block, e, half) {
            Some((d, c)) => (Some(d), Some(c)),
            None => (None, None),
        };
        let dist_outer = if self.params.d == 1 {
            spectrum_probe(&self.operator(&self.outer.to_site_set())?, e, half).map(|p| p.0)
        } else {
            None
        };
        let implication_ok = !(nhat_p == 0 && count_block_window.unwrap_or(0) > 0);
        Ok(Bootstrap { ln_eps_p: sm.ln_eps, dist_block, count_block_window, implication_ok, dist_outer })
    }

    /// Eigenvalue of H_{B̄_level} nearest `target` (an F_level-measurable energy).
    pub fn anchor_energy(&self, level: usize, target: f64) -> Result<f64> {
        let op = self.block_operator(level)?;
        nearest_eigenvalue(&op, target)
            .ok_or_else(|| Error::Precondition(format!("block with {} sites is too large for a dense spectrum", op.n())))
    }
}

fn relative_residual(op: &BoxOperator, lambda: f64, psi: &[f64]) -> f64 {
    let hp = op.apply(psi);
    let num: f64 = hp.iter().zip(psi).map(|(a, b)| (a - lambda * b).powi(2)).sum::<f64>().sqrt();
    let den: f64 = psi.iter().map(|x| x * x).sum::<f64>().sqrt();
    num / den
}

/// ∂⁺ of a box, in index order.
pub fn box_outer_boundary(b: &LatticeBox) -> Vec<Site> {
    let r = b.radius as i64;
    b.neighborhood(1)
        .sites()
        .filter(|x| {
            let out = (0..x.dim()).filter(|&k| (x.get(k) - b.center.get(k)).abs() > r).count();
            out == 1
        })
        .collect()
}

/// Eigenvalue nearest x: Sturm bisection for chains, dense otherwise.
pub fn nearest_eigenvalue(op: &BoxOperator, x: f64) -> Option<f64> {
    if let Some((diag, off)) = op.tridiagonal() {
        let n = diag.len();
        let k = tridiag_count_below(&diag, &off, x);
        let mut cands = Vec::new();
        if k > 0 {
            cands.push(tridiag_kth_eigenvalue(&diag, &off, k - 1));
        }
        if k < n {
            cands.push(tridiag_kth_eigenvalue(&diag, &off, k));
        }
        return nearest_value(&cands, x);
    }
    if op.n() > DENSE_LIMIT {
        return None;
    }
    nearest_value(&eigvals(&op.to_dense()), x)
}

/// (dist(Spec, e), #Spec ∩ [e−half, e+half)).
fn spectrum_probe(op: &BoxOperator, e: f64, half: f64) -> Option<(f64, usize)> {
    if let Some((diag, off)) = op.tridiagonal() {
        let dist = (nearest_eigenvalue(op, e)? - e).abs();
        let c = tridiag_count_below(&diag, &off, e + half) - tridiag_count_below(&diag, &off, e - half);
        return Some((dist, c));
    }
    if op.n() > DENSE_LIMIT {
        return None;
    }
    let v = eigvals(&op.to_dense());
    Some((nearest_distance(&v, e), v.iter().filter(|&&l| e - half <= l && l < e + half).count()))
}

struct Ports {
    sites: Vec<Site>,
    of_base: Vec<Vec<usize>>,
}

struct Region {
    op: BoxOperator,
    solver: GreenSolver,
}

impl Region {
    fn column(&self, x: &Site) -> Vec<f64> {
        self.solver.column(self.op.index_of(x).expect("site inside the region"))
    }

    fn at(&self, col: &[f64], x: &Site) -> f64 {
        self.op.index_of(x).map_or(0.0, |i| col[i])
    }

    fn gram(&self, ys: &[Site]) -> Dense {
        let mut k = Mat::zeros(ys.len(), ys.len());
        for (b, y) in ys.iter().enumerate() {
            let col = self.column(y);
            for (a, x) in ys.iter().enumerate() {
                k[(a, b)] = self.at(&col, x);
            }
        }
        k
    }
}

// ---------------------------------------------------------------------------
// Results

#[derive(Clone, Debug)]
pub struct ScaleDifference {
    /// ∂⁺B̄_{j−1}.
    pub ys: Vec<Site>,
    pub c: Dense,
    pub k: Dense,
    pub sandwich: Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleDifferenceReport {
    pub j: usize,
    pub energy: f64,
    pub norm: f64,
    /// ‖S̃^(j) − S̃^(j−1)‖ by plain subtraction, for comparison.
    pub norm_direct: f64,
    pub ln_norm: f64,
    pub ln_bound: f64,
    pub ln_margin: f64,
    pub underflow: bool,
    pub gate: bool,
    pub holds: bool,
    /// Asserted outcome, present only when the gate holds.
    pub ok: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyDifferenceReport {
    pub level: usize,
    pub e1: f64,
    pub e2: f64,
    pub norm: f64,
    pub norm_direct: f64,
    pub bound: f64,
    pub gate: bool,
    pub holds: bool,
    pub ok: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    pub j: usize,
    pub energy: f64,
    pub lambda: f64,
    pub iterations: usize,
    pub distance: f64,
    /// ln(3g_{j−1}).
    pub ln_bound: f64,
    /// Candidate window actually used: max(3g_{j−1}, floor).
    pub window: f64,
    /// dist(λ, Spec S̃^(j−1)_λ).
    pub self_consistency: f64,
    /// ‖(H_{B̄_{j−1}} − λ)ψ‖/‖ψ‖ for the reconstructed eigenvector.
    pub residual: f64,
    pub in_block_spectrum: bool,
}

#[derive(Clone, Debug)]
pub struct BoundaryVectors {
    pub j: usize,
    pub energy: f64,
    pub lambda: f64,
    /// ∂⁺B̄_{j−1}.
    pub ys: Vec<Site>,
    /// a[y][m], m < n̂.
    pub a: Vec<Vec<f64>>,
    pub nhat: usize,
    /// Eigenvalues of S̃^(j−1)_λ: window first (nearest λ first), then the rest.
    pub values: Vec<f64>,
    /// Matching orthonormal eigenvectors.
    pub basis: Dense,
    pub ybar: Site,
    pub ybar_index: usize,
    pub norm_ybar: f64,
    /// |a| vanished in floating point; ȳ is the lexicographically smallest site.
    pub fallback: bool,
    pub ln_t: f64,
    pub transversal: bool,
    /// max over y and over all eigenvectors of |a_m(y)|.
    pub max_abs_all: f64,
    pub ln_decay_bound: f64,
    pub decay_gate: bool,
    pub decay_holds: bool,
}

#[derive(Clone, Debug)]
pub struct KeyDecomposition {
    pub s0: Dense,
    pub s1: Dense,
    pub ds: Dense,
    pub leading0: Dense,
    pub leading1: Dense,
    pub d: Dense,
    pub r_diff: Dense,
    pub report: KeyDecompositionReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyDecompositionReport {
    pub j: usize,
    pub energy: f64,
    pub lambda: f64,
    pub nhat: usize,
    pub ybar: Site,
    pub order_l: Option<usize>,
    pub a_norm_sq: f64,
    /// ‖R(1) − R(0)‖.
    pub r_diff_norm: f64,
    pub r_bound: f64,
    pub r_holds: bool,
    /// ‖s(1) − s(0)‖.
    pub flip_norm: f64,
    pub flip_bound: f64,
    pub flip_holds: Option<bool>,
    pub spread_m: Option<f64>,
    pub spread_bound: f64,
    pub spread_holds: Option<bool>,
    pub d_invariance: f64,
    pub gate_key: bool,
    pub gate_flip: bool,
    pub gate_spread: bool,
    pub ok: Option<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CountMethod {
    /// ε exceeds double resolution; the rounded eigenvalues decide.
    Resolved,
    /// Every rounded eigenvalue is farther from E than its rounding error.
    Separated,
    /// The single eigenvalue near E was placed by the accurate offset channel.
    Accurate,
    /// Neither applies; `count` is the rounded count.
    Undetermined,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowCount {
    pub count: usize,
    pub eps: f64,
    /// ε exceeds the floating-point resolution of the eigenvalues.
    pub resolved: bool,
    /// Count from the rounded eigenvalues alone.
    pub raw_count: usize,
    pub method: CountMethod,
    /// Eigenvalues within rounding distance of E.
    pub near: usize,
    /// Accurate |μ − E| for the eigenvalue near E, with its error bound.
    pub accurate: Option<(f64, f64)>,
}

impl WindowCount {
    pub fn new(vals: &[f64], e: f64, eps: f64) -> WindowCount {
        let scale = vals.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let tol = RESOLUTION_ULPS * f64::EPSILON * scale;
        let raw = vals.iter().filter(|&&v| (v - e).abs() <= eps).count();
        let resolved = eps > tol;
        let near = vals.iter().filter(|&&v| (v - e).abs() <= tol).count();
        let method = match (resolved, near) {
            (true, _) => CountMethod::Resolved,
            (false, 0) => CountMethod::Separated,
            _ => CountMethod::Undetermined,
        };
        WindowCount { count: raw, eps, resolved, raw_count: raw, method, near, accurate: None }
    }

    /// Whether the count is certain rather than decided by rounding.
    pub fn certain(&self) -> bool {
        self.method != CountMethod::Undetermined
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum YbarSelection {
    /// argmax |a(y)|.
    MaxBoundaryVector,
    /// |a| underflowed; lexicographically smallest boundary site.
    Underflow,
    /// No fixed-point candidate near E; lexicographically smallest site.
    NoCandidate,
    /// Empty ε/2 window; lexicographically smallest site.
    EmptyWindow,
    /// n̂_{j−1} = 0, the event holds for either value; lexicographically smallest site.
    NoEigenvalues,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityTrial {
    pub j: usize,
    pub energy: f64,
    pub nhat_prev: usize,
    pub nhat_branches: [usize; 2],
    pub omega_ybar: u8,
    pub nhat_next: usize,
    pub event: bool,
    pub event_branches: [bool; 2],
    pub ybar: Site,
    pub selection: YbarSelection,
    pub deterministic_ok: bool,
    pub windows_resolved: [bool; 2],
    /// Rounded counts at both values of ω(ȳ).
    pub raw_branches: [usize; 2],
    pub methods: [CountMethod; 2],
    pub prev_method: CountMethod,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MartingaleStep {
    pub j: usize,
    pub ybar: Site,
    pub selection: YbarSelection,
    pub omega_ybar: u8,
    pub nhat_prev: usize,
    pub nhat: usize,
    pub z: u8,
    pub z_branches: [bool; 2],
    pub partial_sum: usize,
    pub window_resolved: bool,
    pub window_method: CountMethod,
    pub raw_nhat: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bootstrap {
    pub ln_eps_p: f64,
    pub dist_block: Option<f64>,
    pub count_block_window: Option<usize>,
    /// n̂_P = 0 ⇒ no eigenvalue of H_{B̄_P} within ε_P/2 of E.
    pub implication_ok: bool,
    pub dist_outer: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MartingaleTrace {
    pub seed: u64,
    pub energy: f64,
    pub p: usize,
    pub nhat0: usize,
    pub steps: Vec<MartingaleStep>,
    pub x_p: usize,
    pub monotone: bool,
    pub bootstrap: Bootstrap,
}

impl MartingaleTrace {
    pub fn ybar_sequence(&self) -> Vec<Site> {
        self.steps.iter().map(|s| s.ybar).collect()
    }

    /// One line per step, then a summary line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            let mut v = serde_json::to_value(s).expect("step serializes");
            v["seed"] = json!(self.seed);
            out.push_str(&v.to_string());
            out.push('\n');
        }
        let summary = json!({
            "seed": self.seed,
            "energy": self.energy,
            "p": self.p,
            "nhat0": self.nhat0,
            "x_p": self.x_p,
            "monotone": self.monotone,
            "bootstrap": self.bootstrap,
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AzumaReport {
    pub p: usize,
    pub runs: usize,
    /// Runs with X_P ≤ P/10.
    pub hits: usize,
    pub frequency: f64,
    pub bound: f64,
    pub sigma: f64,
    pub ok: bool,
    pub all_monotone: bool,
    /// Fraction of steps where the event held for at least one value of ω(ȳ).
    pub some_branch_frequency: f64,
    /// Fraction of steps where the event held for both values.
    pub both_branches_frequency: f64,
    /// Fraction of steps whose ε_j window was above floating-point resolution.
    pub resolved_fraction: f64,
    /// Fraction of steps whose count was certain (resolved, separated or accurate).
    pub certain_fraction: f64,
}

/// Empirical P(X_P ≤ P/10) against exp(−P) + 3σ, σ the binomial deviation at exp(−P).
pub fn azuma_check(traces: &[MartingaleTrace]) -> AzumaReport {
    let p = traces.first().map_or(0, |t| t.p);
    let runs = traces.len();
    let hits = traces.iter().filter(|t| (t.x_p as f64) <= p as f64 / 10.0).count();
    let bound = (-(p as f64)).exp();
    let sigma = binomial_sigma(bound, runs as u64);
    let frequency = if runs == 0 { 0.0 } else { hits as f64 / runs as f64 };
    let steps: Vec<&MartingaleStep> = traces.iter().flat_map(|t| &t.steps).collect();
    let frac = |f: &dyn Fn(&MartingaleStep) -> bool| {
        if steps.is_empty() {
            0.0
        } else {
            steps.iter().filter(|s| f(s)).count() as f64 / steps.len() as f64
        }
    };
    AzumaReport {
        p,
        runs,
        hits,
        frequency,
        bound,
        sigma,
        ok: frequency <= bound + 3.0 * sigma,
        all_monotone: traces.iter().all(|t| t.monotone),
        some_branch_frequency: frac(&|s| s.z_branches[0] || s.z_branches[1]),
        both_branches_frequency: frac(&|s| s.z_branches[0] && s.z_branches[1]),
        resolved_fraction: frac(&|s| s.window_resolved),
        certain_fraction: frac(&|s| s.window_method != CountMethod::Undetermined),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Site;
    use crate::spectral::random_symmetric;
    use crate::transversality::influence;

    fn scalar_block(a: f64, b: f64, t: f64) -> Dense {
        Mat::from_fn(2, 2, |i, j| match (i, j) {
            (0, 0) => a,
            (1, 1) => t,
            _ => b,
        })
    }

    /// d=1 cascade whose base block is entirely well, so boundary amplitudes are O(1).
    fn open_well_state(h: f64, a: u64, levels: usize, seed: u64) -> SchurCascadeState {
        let params = ModelParams::new(1, h, 1.0).unwrap();
        let base = LatticeBox::centered(1, 6);
        let outer = LatticeBox::centered(1, 6 + a * a.pow(levels as u32) + 5);
        let ladder = ScaleLadder::explicit(vec![1, 2]).unwrap();
        let v_hi = HierarchicalPotential::from_parts(h, ladder, outer, &base.to_site_set(), vec![]);
        let lad = ScaleLadder::a_adic(1, a, levels + 1).unwrap();
        SchurCascadeState::from_parts(params, v_hi, base, outer, lad, SmallnessExponents::default(), seed).unwrap()
    }

    #[test]
    fn scalar_schur_complement() {
        let k = scalar_block(1.5, 0.3, 9.0);
        let s = schur_dense(&k, 1, 0.7).unwrap();
        assert!((s[(0, 0)] - (1.5 - 0.09 / (9.0 - 0.7))).abs() < 1e-15);
        // Nothing to eliminate.
        let s = schur_dense(&k, 2, 0.7).unwrap();
        assert_eq!(s[(1, 0)], 0.3);
    }

    #[test]
    fn whole_domain_complement_is_the_operator() {
        let params = ModelParams::new(1, 10.0, 1.0).unwrap();
        let dom = LatticeBox::centered(1, 3).to_site_set();
        let h = assemble_with(&dom, params, |x| if x.get(0) == 0 { 0.0 } else { 10.0 }).unwrap();
        let s = schur_complement(&h, &dom, 0.5).unwrap();
        assert_eq!(max_abs(&(&s - &h.to_dense())), 0.0);
    }

    #[test]
    fn site_complement_matches_dense_split() {
        let params = ModelParams::new(1, 10.0, 1.0).unwrap();
        let dom = LatticeBox::centered(1, 4).to_site_set();
        let h = assemble_with(&dom, params, |x| if x.get(0).abs() <= 1 { 0.0 } else { 10.0 }).unwrap();
        let inner = LatticeBox::centered(1, 1).to_site_set();
        let s = schur_complement(&h, &inner, 0.3).unwrap();
        // Reorder the dense matrix so the inner sites come first.
        let order: Vec<usize> = inner.iter().chain(dom.difference(&inner).iter()).map(|x| dom.index_of(x).unwrap()).collect();
        let hd = h.to_dense();
        let k = Mat::from_fn(9, 9, |i, j| hd[(order[i], order[j])]);
        let s2 = schur_dense(&k, 3, 0.3).unwrap();
        assert!(max_abs(&(&s - &s2)) < 1e-13);
    }

    #[test]
    fn correspondence_on_random_splits() {
        let mut rng = crate::rng::trial_rng(5, 0);
        for _ in 0..20 {
            let k = random_symmetric(9, &mut rng);
            let rep = correspondence_check(&k, 4, 0.1).unwrap();
            assert!(rep.fixed_point_ok, "{rep:?}");
            assert!(rep.approximation_ok, "{rep:?}");
        }
    }

    #[test]
    fn scalar_fixed_point_matches_quadratic() {
        let (a, b, t) = (1.0, 0.4, 6.0);
        let k = scalar_block(a, b, t);
        let (lam, _) = fixed_point_dense(&k, 1, 1.0, 1.0).unwrap();
        // λ² − (a+t)λ + at − b² = 0, smaller root.
        let disc = ((a + t) * (a + t) - 4.0 * (a * t - b * b)).sqrt();
        let root = ((a + t) - disc) / 2.0;
        assert!((lam - root).abs() < 1e-12, "{lam} vs {root}");
        assert!(matches!(fixed_point_dense(&k, 1, 3.0, 0.1), Err(Error::NoCandidate { .. })));
    }

    #[test]
    fn energy_difference_closed_form() {
        let (a, b, t) = (1.0, 0.4, 6.0);
        let k = scalar_block(a, b, t);
        let (e1, e2) = (0.2, 0.9);
        let d = energy_difference_dense(&k, 1, e1, e2).unwrap();
        let want = b * b / (t - e2) - b * b / (t - e1);
        assert!((d[(0, 0)] - want).abs() < 1e-15);
        let direct = &schur_dense(&k, 1, e1).unwrap() - &schur_dense(&k, 1, e2).unwrap();
        assert!((direct[(0, 0)] - want).abs() < 1e-15);
    }

    #[test]
    fn desk_cascade_geometry_and_smallness() {
        let hp = HierarchyParams::new(1, 2, 2.0, 20.0, 1.0).with_ladder(vec![2, 781410]);
        let cfg = CascadeConfig { l0: Some(1), p: Some(6), ..Default::default() };
        let st = SchurCascadeState::new(&hp, 0, &cfg, 1).unwrap();
        assert_eq!(st.base.radius, 16);
        assert_eq!(st.blocks[6].radius, 16 + 5 * 15625);
        assert!(st.blocks[6].radius <= st.outer.radius);
        assert!(st.smallness_ordered());
        let bad = CascadeConfig { l0: Some(1), p: Some(7), ..Default::default() };
        assert!(SchurCascadeState::new(&hp, 0, &bad, 1).is_err());
        let flipped = CascadeConfig {
            l0: Some(1),
            p: Some(2),
            exponents: SmallnessExponents { eps: 0.05, t: 0.1, g: 0.3 },
            ..Default::default()
        };
        assert!(SchurCascadeState::new(&hp, 0, &flipped, 1).is_err());
    }

    #[test]
    fn sandwich_matches_direct_difference() {
        let st = open_well_state(6.0, 2, 2, 3);
        for j in 1..=2 {
            let sd = st.scale_difference(j, 0.4).unwrap();
            let direct = &st.schur(j, 0.4).unwrap() - &st.schur(j - 1, 0.4).unwrap();
            let n = sym_norm(&sd.sandwich);
            assert!(n > 1e-8);
            assert!(max_abs(&(&sd.sandwich - &direct)) < 1e-12 * n.max(1e-3) + 1e-15, "j={j}");
        }
    }

    #[test]
    fn two_dimensional_sandwich() {
        let params = ModelParams::new(2, 12.0, 1.0).unwrap();
        let base = LatticeBox::centered(2, 2);
        let outer = LatticeBox::centered(2, 12);
        let ladder = ScaleLadder::explicit(vec![1, 2]).unwrap();
        let v_hi = HierarchicalPotential::from_parts(12.0, ladder, outer, &base.to_site_set(), vec![]);
        let lad = ScaleLadder::a_adic(1, 2, 2).unwrap();
        let st = SchurCascadeState::from_parts(params, v_hi, base, outer, lad, SmallnessExponents::default(), 9).unwrap();
        let sd = st.scale_difference(1, 0.5).unwrap();
        let direct = &st.schur(1, 0.5).unwrap() - &st.schur(0, 0.5).unwrap();
        assert!(max_abs(&(&sd.sandwich - &direct)) < 1e-13);
        let ed = st.energy_difference(1, 0.5, 0.8).unwrap();
        let direct = &st.schur(1, 0.5).unwrap() - &st.schur(1, 0.8).unwrap();
        assert!(max_abs(&(&ed - &direct)) < 1e-13);
    }

    #[test]
    fn energy_difference_zero_and_sign() {
        let st = open_well_state(6.0, 2, 1, 4);
        let z = st.energy_difference(0, 0.3, 0.3).unwrap();
        assert_eq!(max_abs(&z), 0.0);
        let d = st.energy_difference(0, 0.3, 0.6).unwrap();
        let direct = &st.schur(0, 0.3).unwrap() - &st.schur(0, 0.6).unwrap();
        assert!(max_abs(&(&d - &direct)) < 1e-14);
        // Raising E lowers S: S_E − S_{E'} ≥ 0 for E < E'.
        assert!(eigvals(&d)[0] > -1e-15);
        let rep = st.energy_difference_check(0, 0.3, 0.6).unwrap();
        assert!(rep.holds || !rep.gate);
    }

    #[test]
    fn fixed_point_reproduces_block_eigenvalue() {
        let st = open_well_state(6.0, 2, 2, 7);
        let e = st.anchor_energy(0, 0.5).unwrap();
        let fp = st.fixed_point_eigenvalue(1, e).unwrap();
        assert_eq!(fp.iterations, 1);
        assert!((fp.lambda - e).abs() < 1e-12);
        assert!(fp.in_block_spectrum, "{fp:?}");
        // Anchored one scale up the solution moves, but stays a block eigenvalue.
        let e1 = st.anchor_energy(1, 0.5).unwrap();
        match st.fixed_point_eigenvalue(1, e1) {
            Ok(fp) => assert!(fp.in_block_spectrum),
            Err(Error::NoCandidate { .. }) => {}
            Err(err) => panic!("{err}"),
        }
    }

    #[test]
    fn accurate_distance_matches_rounded_eigenvalues() {
        let st = open_well_state(6.0, 2, 2, 7);
        let lam = st.anchor_energy(0, 0.5).unwrap();
        for shift in [3e-9, -7e-10] {
            let e = lam + shift;
            for j in 0..=2 {
                let vals = eigvals(&st.schur(j, e).unwrap());
                let mu = vals.iter().copied().min_by(|a, b| (a - e).abs().total_cmp(&(b - e).abs())).unwrap();
                let (dist, err) = st.accurate_distance(j, e).unwrap().expect("chain near an eigenvalue");
                assert!(err < 0.1 * dist, "j={j} err {err} dist {dist}");
                assert!((dist - (mu - e).abs()).abs() < err + 1e-14, "j={j} {dist} vs {}", (mu - e).abs());
            }
        }
        assert!(st.accurate_distance(0, lam + 1e-3).unwrap().is_none());
    }

    #[test]
    fn window_methods() {
        let far = WindowCount::new(&[0.0, 1.0], 0.5, 1e-20);
        assert_eq!((far.count, far.method), (0, CountMethod::Separated));
        let wide = WindowCount::new(&[0.0, 1.0], 0.99, 0.1);
        assert_eq!((wide.count, wide.method), (1, CountMethod::Resolved));
        let tight = WindowCount::new(&[0.0, 1.0], 1.0, 1e-20);
        assert_eq!((tight.raw_count, tight.method), (1, CountMethod::Undetermined));
        // Bitwise equal to E, yet the accurate channel places it outside a tiny window.
        let st = open_well_state(6.0, 2, 2, 7);
        let e = st.anchor_energy(0, 0.5).unwrap();
        let wc = st.window_count(0, e).unwrap();
        assert!(wc.certain(), "{wc:?}");
    }

    #[test]
    fn boundary_vector_is_influence() {
        let st = open_well_state(6.0, 2, 2, 11);
        let e = st.anchor_energy(0, 0.5).unwrap();
        let fp = st.fixed_point_eigenvalue(1, e).unwrap();
        let bv = st.boundary_vectors(1, e, fp.lambda).unwrap();
        assert_eq!(bv.nhat, 1);
        let phi = crate::linalg::column(&bv.basis, 0);
        let (op, psi) = st.reconstruct(0, fp.lambda, &phi).unwrap();
        for (i, y) in bv.ys.iter().enumerate() {
            let infl = influence(&op, &psi, y);
            assert!((bv.a[i][0].abs() - infl).abs() <= 1e-12 * infl.max(1e-300), "{y}");
        }
        assert_eq!(bv.norm_ybar, bv.a.iter().map(|v| v[0].abs()).fold(0.0, f64::max));
    }

    #[test]
    fn empty_window_is_reported() {
        let st = open_well_state(6.0, 2, 2, 11);
        // Far from every eigenvalue of the complement.
        assert!(matches!(st.boundary_vectors(1, 0.5, 0.5), Err(Error::EmptyWindow)) || {
            let v = eigvals(&st.schur(0, 0.5).unwrap());
            nearest_distance(&v, 0.5) <= st.smallness(0).eps() / 2.0
        });
    }

    #[test]
    fn flip_update_matches_recomputation() {
        let st = open_well_state(6.0, 2, 2, 13);
        let e = st.anchor_energy(0, 0.5).unwrap();
        let fp = st.fixed_point_eigenvalue(1, e).unwrap();
        let bv = st.boundary_vectors(1, e, fp.lambda).unwrap();
        let kd = st.key_decomposition(1, e, &bv, None).unwrap();
        // Naive s(1) from the flipped configuration.
        let st1 = st.with_omega(&bv.ybar, 1);
        let sd1 = st1.scale_difference(1, e).unwrap();
        let delta = st1.energy_difference(0, e, fp.lambda).unwrap();
        let mut m1 = bv.basis.transpose() * (&delta + &sd1.sandwich) * &bv.basis;
        for i in 0..m1.nrows() {
            m1[(i, i)] += bv.values[i];
        }
        let s1 = schur_dense(&m1, bv.nhat, e).unwrap();
        let err = max_abs(&(&s1 - &kd.s1));
        assert!(err < 1e-9 * max_abs(&kd.ds).max(1e-12) + 1e-15, "err {err} ds {}", max_abs(&kd.ds));
        assert!(kd.report.d_invariance < 1e-10);
        // n̂ = 1 in d=1: no nearest-neighbour boundary pairs, leading term is scalar.
        let den = st.background().value(&bv.ybar) + 2.0 - fp.lambda;
        let want = -bv.norm_ybar * bv.norm_ybar / den;
        assert!((kd.leading0[(0, 0)] - want).abs() < 1e-15 * want.abs().max(1e-300));
    }

    #[test]
    fn first_order_walks_equal_the_leading_term() {
        let st = open_well_state(6.0, 2, 2, 13);
        let e = st.anchor_energy(0, 0.5).unwrap();
        let bv = st.boundary_vectors(1, e, e).unwrap();
        let base = st.key_decomposition(1, e, &bv, None).unwrap();
        let walk = st.key_decomposition(1, e, &bv, Some(1)).unwrap();
        assert!(max_abs(&(&base.leading0 - &walk.leading0)) < 1e-15);
        assert!(max_abs(&(&base.leading1 - &walk.leading1)) < 1e-15);
        // Longer walks only add same-sign corrections in d=1 at this scale.
        let walk5 = st.key_decomposition(1, e, &bv, Some(5)).unwrap();
        assert!(walk5.report.r_diff_norm <= base.report.r_diff_norm * 1.0001 + 1e-300);
    }

    #[test]
    fn all_barrier_trial_is_vacuous() {
        let params = ModelParams::new(1, 20.0, 1.0).unwrap();
        let base = LatticeBox::centered(1, 4);
        let outer = LatticeBox::centered(1, 40);
        let ladder = ScaleLadder::explicit(vec![1, 2]).unwrap();
        let v_hi = HierarchicalPotential::from_parts(20.0, ladder, outer, &SiteSet::empty(), vec![]);
        let lad = ScaleLadder::a_adic(1, 5, 2).unwrap();
        let st = SchurCascadeState::from_parts(params, v_hi, base, outer, lad, SmallnessExponents::default(), 2).unwrap();
        let t = st.monotonicity_trial(1, 2.0).unwrap();
        assert_eq!((t.nhat_prev, t.nhat_next), (0, 0));
        assert!(t.event && t.deterministic_ok);
        assert_eq!(t.selection, YbarSelection::NoEigenvalues);
    }

    #[test]
    fn martingale_is_reproducible_and_monotone() {
        let hp = HierarchyParams::new(1, 2, 2.0, 20.0, 1.0).with_ladder(vec![2, 781410]);
        let cfg = CascadeConfig { l0: Some(1), p: Some(3), ..Default::default() };
        let st = SchurCascadeState::new(&hp, 0, &cfg, 21).unwrap();
        let e = st.anchor_energy(0, 0.5).unwrap();
        let t1 = st.wegner_martingale_run(e).unwrap();
        let t2 = SchurCascadeState::new(&hp, 0, &cfg, 21).unwrap().wegner_martingale_run(e).unwrap();
        assert_eq!(t1, t2);
        assert!(t1.monotone);
        assert!(t1.nhat0 >= 1);
        assert_eq!(t1.to_jsonl().lines().count(), 4);
        let rep = azuma_check(&[t1]);
        assert_eq!(rep.runs, 1);
    }

    #[test]
    fn snapshot_round_trip() {
        let mut st = open_well_state(6.0, 2, 1, 5);
        let y = Site::new(&[7]);
        let flipped = 1 - st.omega(&y);
        st.set_omega(&y, flipped);
        let back = SchurCascadeState::from_snapshot(&st.snapshot()).unwrap();
        assert_eq!(back.omega(&y), flipped);
        assert_eq!(max_abs(&(&back.schur(1, 0.3).unwrap() - &st.schur(1, 0.3).unwrap())), 0.0);
    }

    #[test]
    fn gates_at_desk_and_huge_heights() {
        let desk = Gates::evaluate(&ModelParams::new(1, 20.0, 1.0).unwrap(), 5, 1);
        assert!(!desk.scale_difference());
        assert!(desk.met[4]);
        // 8d/(h−2d−2) sits exactly at ½ here.
        assert!(!desk.spread());
        let huge = Gates::evaluate(&ModelParams::new(1, 1e8, 1.0).unwrap(), 5, 1);
        assert!(huge.energy_difference());
        assert!(huge.met[2]);
    }

    #[test]
    fn outer_boundary_of_box() {
        let b = LatticeBox::centered(2, 1);
        let ob = box_outer_boundary(&b);
        assert_eq!(ob.len(), 12);
        assert_eq!(SiteSet::new(ob.clone()), b.boundary(BoundarySide::Outer));
    }
}
