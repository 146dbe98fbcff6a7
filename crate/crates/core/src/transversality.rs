//! Lower bounds on solutions of (H−λ)u = 0: greedy cone chains, boundary
//! influence, transversal sets and the unique-continuation martingale on the
//! elementary propagating region.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{cone, BoundarySide, LatticeBox, Site, SiteSet};
use crate::operator::{BoxOperator, ModelParams};
use crate::rng::SiteStream;
use crate::stats::{wilson, Interval};

/// max |(H−λ)u| relative to the stencil scale (‖W‖∞ + 2d)·‖u‖∞.
pub fn equation_residual(h: &BoxOperator, lambda: f64, u: &[f64]) -> f64 {
    let hu = h.apply(u);
    let unorm = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if unorm == 0.0 {
        return 0.0;
    }
    let res = hu.iter().zip(u).fold(0.0f64, |m, (a, b)| m.max((a - lambda * b).abs()));
    res / ((w_norm(h, lambda) + 2.0 * h.params.dd()) * unorm)
}

/// ‖W‖∞ with W = 2d + V − λ over the box.
pub fn w_norm(h: &BoxOperator, lambda: f64) -> f64 {
    (0..h.n()).fold(0.0f64, |m, i| m.max((h.diag(i) - lambda).abs()))
}

fn value_at(h: &BoxOperator, u: &[f64], x: &Site) -> f64 {
    h.index_of(x).map_or(0.0, |i| u[i])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainTrace {
    pub sites: Vec<Site>,
    pub axis: usize,
    pub sigma: i64,
    /// |u(n_j)| along the chain.
    pub amplitudes: Vec<f64>,
    /// 1/(‖W‖∞ + 2d − 1).
    pub step_bound: f64,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainCheck {
    pub increments_ok: bool,
    pub steps_ok: bool,
    pub gamma_ok: bool,
    pub worst_step_margin: f64,
}

impl ChainTrace {
    pub fn ratios(&self) -> Vec<f64> {
        let a0 = self.amplitudes[0];
        self.amplitudes.iter().map(|a| if a0 == 0.0 { 0.0 } else { a / a0 }).collect()
    }

    pub fn check(&self, slack: f64) -> ChainCheck {
        let mut increments_ok = true;
        let mut steps_ok = true;
        let mut gamma_ok = true;
        let mut worst = f64::INFINITY;
        for j in 1..self.sites.len() {
            let step = (self.sites[j] - self.sites[j - 1]).get(self.axis) * self.sigma;
            increments_ok &= (1..=2).contains(&step);
            let m = self.amplitudes[j] - self.step_bound * self.amplitudes[j - 1];
            worst = worst.min(m);
            steps_ok &= m >= -slack;
            gamma_ok &= self.amplitudes[j] >= self.gamma.powi(j as i32) * self.amplitudes[0] - slack;
        }
        ChainCheck { increments_ok, steps_ok, gamma_ok, worst_step_margin: worst }
    }
}

/// Greedy chain from `x0`: each step moves to the cone site of largest |u|
/// (lexicographically smallest among ties) until the apex leaves the box.
pub fn cone_chain(
    h: &BoxOperator,
    lambda: f64,
    u: &[f64],
    x0: &Site,
    axis: usize,
    sigma: i64,
) -> Result<ChainTrace> {
    let res = equation_residual(h, lambda, u);
    if res > 1e-8 {
        return Err(Error::EquationResidualTooLarge { residual: res });
    }
    if !h.sites.contains(x0) {
        return Err(Error::DomainMismatch(format!("start {x0} outside the box")));
    }
    let d = h.params.d;
    let step_bound = 1.0 / (w_norm(h, lambda) + 2.0 * d as f64 - 1.0);
    let mut sites = vec![*x0];
    let mut amps = vec![value_at(h, u, x0).abs()];
    let mut cur = *x0;
    while h.sites.contains(&cur.shifted(axis, sigma)) && sites.len() <= h.n() {
        let mut cands: Vec<Site> = cone(&cur, axis, sigma).iter().filter(|y| h.sites.contains(y)).copied().collect();
        cands.sort();
        let mut best = cands[0];
        let mut best_v = value_at(h, u, &best).abs();
        for y in &cands[1..] {
            let v = value_at(h, u, y).abs();
            if v > best_v {
                best = *y;
                best_v = v;
            }
        }
        sites.push(best);
        amps.push(best_v);
        cur = best;
    }
    Ok(ChainTrace { sites, axis, sigma, amplitudes: amps, step_bound, gamma: h.params.gamma() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConeReport {
    pub checked: usize,
    pub violations: usize,
    pub worst_margin: f64,
}

/// Cone inequality max_cone|u| ≥ |u(x0)|/(‖W‖∞+2d−1) at every site and
/// direction whose apex lies in the box; u vanishes outside.
pub fn cone_property_check(h: &BoxOperator, lambda: f64, u: &[f64], slack: f64) -> ConeReport {
    let d = h.params.d;
    let bound = 1.0 / (w_norm(h, lambda) + 2.0 * d as f64 - 1.0);
    let mut rep = ConeReport { checked: 0, violations: 0, worst_margin: f64::INFINITY };
    for (i, x0) in h.sites.iter().enumerate() {
        for axis in 0..d {
            for sigma in [-1, 1] {
                if !h.sites.contains(&x0.shifted(axis, sigma)) {
                    continue;
                }
                let m = cone(x0, axis, sigma).iter().map(|y| value_at(h, u, y).abs()).fold(0.0, f64::max);
                let margin = m - bound * u[i].abs();
                rep.checked += 1;
                rep.worst_margin = rep.worst_margin.min(margin);
                if margin < -slack {
                    rep.violations += 1;
                }
            }
        }
    }
    rep
}

/// |Σ_{x∼y, x∈domain} u(x)|.
pub fn influence(h: &BoxOperator, u: &[f64], y: &Site) -> f64 {
    y.neighbors().map(|x| value_at(h, u, &x)).sum::<f64>().abs()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceReport {
    pub ybar: Site,
    pub influence: f64,
    pub max_inner: f64,
    pub bound: f64,
    pub margin: f64,
}

/// Exhaustive scan of ∂⁺B2 for the largest influence, against γ^{L+ℓ}·max_{B1}|u|
/// where L+ℓ is the radius of B2.
pub fn influence_max(h: &BoxOperator, u: &[f64], b1: &LatticeBox, b2: &LatticeBox) -> Result<InfluenceReport> {
    if h.sites != b2.to_site_set() {
        return Err(Error::DomainMismatch("operator domain differs from the outer box".into()));
    }
    let mut outer: Vec<Site> = b2.boundary(BoundarySide::Outer).iter().copied().collect();
    outer.sort();
    let mut ybar = outer[0];
    let mut best = influence(h, u, &ybar);
    for y in &outer[1..] {
        let v = influence(h, u, y);
        if v > best {
            best = v;
            ybar = *y;
        }
    }
    let max_inner = b1.sites().map(|x| value_at(h, u, &x).abs()).fold(0.0, f64::max);
    let bound = h.params.gamma().powi(b2.radius as i32) * max_inner;
    Ok(InfluenceReport { ybar, influence: best, max_inner, bound, margin: best - bound })
}

/// {n ∈ sites : |u(n)| ≥ threshold·|u(ref)|}.
pub fn transversal_set(u: &[f64], sites: &SiteSet, ref_index: usize, threshold: f64) -> SiteSet {
    let r = u[ref_index].abs() * threshold;
    sites.iter().zip(u).filter(|(_, v)| v.abs() >= r).map(|(x, _)| *x).collect()
}

/// 𝓘_L = {n : n_d ≥ 0, Σ_{i<d}|n_i| + n_d ≤ L+1}.
#[derive(Clone, Debug, PartialEq)]
pub struct PropagatingRegion {
    pub d: usize,
    pub l: i64,
    pub sites: SiteSet,
}

/// ⟨n, v∓⟩ with v∓ = e_d ∓ Σ_{i<d} e_i.
pub fn tilt_minus(n: &Site) -> i64 {
    let d = n.dim();
    n.get(d - 1) - n.coords()[..d - 1].iter().sum::<i64>()
}

pub fn tilt_plus(n: &Site) -> i64 {
    let d = n.dim();
    n.get(d - 1) + n.coords()[..d - 1].iter().sum::<i64>()
}

impl PropagatingRegion {
    pub fn new(d: usize, l: i64) -> Result<PropagatingRegion> {
        if !(1..=4).contains(&d) || l < 0 {
            return Err(Error::InvalidParams(format!("propagating region d={d} L={l}")));
        }
        let r = (l + 1) as u64;
        let sites = LatticeBox::centered(d, r)
            .sites()
            .filter(|n| Self::member(d, l, n))
            .collect();
        Ok(PropagatingRegion { d, l, sites })
    }

    fn member(d: usize, l: i64, n: &Site) -> bool {
        let nd = n.get(d - 1);
        nd >= 0 && n.coords()[..d - 1].iter().map(|c| c.abs()).sum::<i64>() + nd <= l + 1
    }

    pub fn contains(&self, n: &Site) -> bool {
        n.dim() == self.d && Self::member(self.d, self.l, n)
    }

    pub fn is_side(&self, n: &Site) -> bool {
        if !self.contains(n) {
            return false;
        }
        let (m, p) = (tilt_minus(n), tilt_plus(n));
        let l = self.l;
        m == l || m == l + 1 || p == l || p == l + 1
    }

    pub fn side_boundary(&self) -> SiteSet {
        self.sites.filter(|n| self.is_side(n))
    }
}

/// Solution on 𝓘_L, aligned with `region.sites`.
#[derive(Clone, Debug)]
pub struct Propagated {
    pub region: PropagatingRegion,
    pub values: Vec<f64>,
}

impl Propagated {
    pub fn get(&self, n: &Site) -> Option<f64> {
        self.region.sites.index_of(n).map(|i| self.values[i])
    }

    /// Largest relative residual of (2d+V−λ)u(m) − Σ_{y∼m}u(y) over m with m+e_d ∈ 𝓘_L, m_d ≥ 1.
    pub fn residual(&self, lambda: f64, v: &dyn Fn(&Site) -> f64) -> f64 {
        let d = self.region.d;
        let mut worst = 0.0f64;
        for m in self.region.sites.iter() {
            if m.get(d - 1) < 1 || !self.region.contains(&m.shifted(d - 1, 1)) {
                continue;
            }
            let w = 2.0 * d as f64 + v(m) - lambda;
            let um = self.get(m).unwrap();
            let mut s = 0.0;
            let mut scale = (w * um).abs();
            for y in m.neighbors() {
                let uy = self.get(&y).unwrap();
                s += uy;
                scale += uy.abs();
            }
            if scale > 0.0 {
                worst = worst.max((w * um - s).abs() / scale);
            }
        }
        worst
    }
}

/// Layer-by-layer extension of data on n_d ∈ {0, 1} through
/// u(m+e_d) = W(m)u(m) − Σ_{i<d}[u(m+e_i)+u(m−e_i)] − u(m−e_d).
pub fn propagate_solution(
    region: &PropagatingRegion,
    u0: &dyn Fn(&Site) -> f64,
    lambda: f64,
    v: &dyn Fn(&Site) -> f64,
) -> Propagated {
    let d = region.d;
    let top = d - 1;
    let sites = region.sites.as_slice();
    let mut values = vec![0.0; sites.len()];
    // Colex order lists sites by increasing n_d, so both lower layers are ready.
    for (idx, n) in sites.iter().enumerate() {
        if n.get(top) <= 1 {
            values[idx] = u0(n);
            continue;
        }
        let m = n.shifted(top, -1);
        let at = |x: &Site| values[region.sites.index_of(x).unwrap()];
        let mut s = (2.0 * d as f64 + v(&m) - lambda) * at(&m);
        for i in 0..top {
            s -= at(&m.shifted(i, 1)) + at(&m.shifted(i, -1));
        }
        s -= at(&m.shifted(top, -1));
        values[idx] = s;
    }
    Propagated { region: region.clone(), values }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tilt {
    /// 𝒯_k = {⟨n, v₋⟩ = k}
    Minus,
    /// 𝒯'_k = {⟨n, v₊⟩ = k}
    Plus,
}

/// Sites n of (𝔏+e_d) whose expansion down to 𝔏 involves W(x), with the
/// signed multinomial coefficient of W(x)u(x) in u(n).
pub fn edge_candidates(x: &Site, tilt: Tilt, region: &PropagatingRegion) -> Vec<(Site, f64)> {
    let d = x.dim();
    let top = d - 1;
    let sign = match tilt {
        Tilt::Minus => 1,
        Tilt::Plus => -1,
    };
    let mut out = Vec::new();
    let max_s = (region.l + 1 - x.get(top)).max(0);
    for s in 0..max_s {
        let mut k = vec![0i64; top];
        compositions(s, 0, &mut k, &mut |k| {
            let mut n = x.shifted(top, s + 1);
            for (i, &ki) in k.iter().enumerate() {
                n = n.shifted(i, sign * ki);
            }
            if region.is_side(&n) {
                let c = multinomial(s, k) * if s % 2 == 0 { 1.0 } else { -1.0 };
                out.push((n, c));
            }
        });
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

fn compositions(rem: i64, i: usize, k: &mut Vec<i64>, f: &mut dyn FnMut(&[i64])) {
    if k.is_empty() {
        if rem == 0 {
            f(k);
        }
        return;
    }
    if i + 1 == k.len() {
        k[i] = rem;
        f(k);
        return;
    }
    for a in 0..=rem {
        k[i] = a;
        compositions(rem - a, i + 1, k, f);
    }
}

fn multinomial(s: i64, k: &[i64]) -> f64 {
    let lf = |n: i64| (1..=n).map(|v| (v as f64).ln()).sum::<f64>();
    (lf(s) - k.iter().map(|&v| lf(v)).sum::<f64>()).exp().round()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UcStep {
    pub j: usize,
    pub x: Site,
    pub u_x: f64,
    pub tilt: Tilt,
    pub offset: i64,
    pub edge: Vec<Site>,
    pub good: usize,
    pub z: u8,
    pub next: Site,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UcMartingaleTrace {
    pub d: usize,
    pub l: i64,
    pub seed: u64,
    pub steps: Vec<UcStep>,
    pub partial_sums: Vec<u32>,
    pub edges_disjoint: bool,
    pub increments_ok: bool,
    pub transversality_ok: bool,
}

impl UcMartingaleTrace {
    pub fn to_jsonl(&self) -> String {
        self.steps.iter().map(|s| serde_json::to_string(s).unwrap() + "\n").collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UcSetup {
    pub params: ModelParams,
    pub l: i64,
    pub lambda: f64,
    /// Constant deterministic background V_hi on the region.
    pub background: f64,
}

impl UcSetup {
    /// Martingale length: L/10 for d = 2, L/(200d) for d ≥ 3, at least one step.
    pub fn steps(&self) -> usize {
        let d = self.params.d as i64;
        let t = if d <= 2 { self.l / 10 } else { self.l / (200 * d) };
        t.max(1) as usize
    }

    pub fn potential(&self, seed: u64) -> impl Fn(&Site) -> f64 {
        let s = SiteStream::new(seed);
        let (bg, beta) = (self.background, self.params.beta);
        move |x: &Site| bg + beta * s.bit(x) as f64
    }
}

/// The site-mixed martingale on 𝓘_L driven by the cone property.
pub fn uc_martingale_run(setup: &UcSetup, u0: &dyn Fn(&Site) -> f64, seed: u64) -> Result<UcMartingaleTrace> {
    let d = setup.params.d;
    if d < 2 {
        return Err(Error::InvalidParams("the martingale needs d ≥ 2".into()));
    }
    let origin = Site::origin(d);
    if u0(&origin) == 0.0 {
        return Err(Error::ZeroInitialData);
    }
    let region = PropagatingRegion::new(d, setup.l)?;
    let v = setup.potential(seed);
    let sol = propagate_solution(&region, u0, setup.lambda, &v);
    let u = |x: &Site| sol.get(x).unwrap_or(0.0);
    let gamma = setup.params.gamma();
    let beta = setup.params.beta;
    let top = d - 1;
    let ed = Site::unit(d, top);

    // Step 1: layer-one cone sites first, lexicographic; otherwise 2e_d.
    let mut first: Vec<Site> = (0..top).flat_map(|i| [ed.shifted(i, -1), ed.shifted(i, 1)]).collect();
    first.push(ed);
    first.sort();
    let u_origin = u(&origin).abs();
    let mut x = first
        .into_iter()
        .find(|y| u(y).abs() >= gamma * u_origin)
        .unwrap_or(ed.scaled(2));
    let mut transversality_ok = u(&x).abs() >= gamma * u_origin;
    let mut increments_ok = true;

    let mut steps = Vec::new();
    let mut sums = Vec::new();
    let mut seen: HashSet<Site> = HashSet::new();
    let mut disjoint = true;
    let mut total = 0u32;
    for j in 1..=setup.steps() {
        let ux = u(&x).abs();
        let c = x.shifted(top, 1);
        let mut side: Vec<(Site, bool)> =
            (0..top).flat_map(|i| [(c.shifted(i, -1), false), (c.shifted(i, 1), true)]).collect();
        side.sort();
        let (next, plus) = match side.iter().find(|(y, _)| u(y).abs() >= gamma * ux) {
            Some(&(y, is_b)) => (y, is_b),
            None if u(&c).abs() >= gamma * ux => (c, false),
            None => (x.shifted(top, 2), false),
        };
        let (tilt, offset) = if plus { (Tilt::Plus, tilt_plus(&x)) } else { (Tilt::Minus, tilt_minus(&x)) };
        let edge: Vec<Site> = edge_candidates(&x, tilt, &region).into_iter().map(|(n, _)| n).collect();
        for e in &edge {
            disjoint &= seen.insert(*e);
        }
        let good = edge.iter().filter(|e| u(e).abs() >= 0.5 * beta * ux).count();
        let z = if edge.is_empty() {
            0
        } else if d == 2 {
            (good == edge.len()) as u8
        } else {
            (2 * good >= edge.len()) as u8
        };
        total += z as u32;
        sums.push(total);
        let ratio = if ux == 0.0 { 0.0 } else { u(&next).abs() / ux };
        transversality_ok &= ratio >= gamma;
        let dz = next.get(top) - x.get(top);
        increments_ok &= dz == 1 || dz == 2;
        steps.push(UcStep { j, x, u_x: ux, tilt, offset, edge, good, z, next, ratio });
        x = next;
    }
    Ok(UcMartingaleTrace {
        d,
        l: setup.l,
        seed,
        steps,
        partial_sums: sums,
        edges_disjoint: disjoint,
        increments_ok,
        transversality_ok,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UcExperimentReport {
    pub trials: usize,
    pub eps_test: f64,
    pub c_test: f64,
    pub successes: u64,
    pub frequency: f64,
    pub ci: Interval,
    pub min_fraction: f64,
    pub fractions: Vec<f64>,
}

/// Frequency over seeds of |{n ∈ 𝓘_L ∩ Q_L(0) : |u(n)| ≥ e^{−c_test·L}|u(0)|}| ≥ eps_test·L^d.
pub fn uc_experiment(
    setup: &UcSetup,
    u0: &dyn Fn(&Site) -> f64,
    trials: usize,
    seed: u64,
    eps_test: f64,
    c_test: f64,
) -> Result<UcExperimentReport> {
    let d = setup.params.d;
    let origin = Site::origin(d);
    if u0(&origin) == 0.0 {
        return Err(Error::ZeroInitialData);
    }
    let region = PropagatingRegion::new(d, setup.l)?;
    let threshold = (-c_test * setup.l as f64).exp();
    let volume = (setup.l as f64).powi(d as i32);
    let mut fractions = Vec::with_capacity(trials);
    let mut successes = 0;
    for t in 0..trials {
        let s = crate::rng::split_seed(seed, t as u64);
        let sol = propagate_solution(&region, u0, setup.lambda, &setup.potential(s));
        let u00 = sol.get(&origin).unwrap().abs();
        let count = region
            .sites
            .iter()
            .zip(&sol.values)
            .filter(|(n, v)| n.linf() <= setup.l && v.abs() >= threshold * u00)
            .count();
        let f = count as f64 / volume;
        if f >= eps_test {
            successes += 1;
        }
        fractions.push(f);
    }
    Ok(UcExperimentReport {
        trials,
        eps_test,
        c_test,
        successes,
        frequency: successes as f64 / trials.max(1) as f64,
        ci: wilson(successes, trials as u64, 3.0),
        min_fraction: fractions.iter().copied().fold(f64::INFINITY, f64::min),
        fractions,
    })
}

/// u0 = δ at the origin on the two initial hyperplanes.
pub fn bump(x: &Site) -> f64 {
    if x.l1() == 0 {
        1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::{assemble, assemble_with};
    use crate::spectral::eig;

    fn p(d: usize) -> ModelParams {
        ModelParams::new(d, 20.0, 1.0).unwrap()
    }

    #[test]
    fn linear_chain_in_one_dimension() {
        // u(x) = x on 1..9 with W = 2 everywhere except the last site, which
        // absorbs the missing neighbour so that (H−0)u = 0 holds exactly.
        let dom: SiteSet = (1..=9).map(|i| Site::new(&[i])).collect();
        let mut v = vec![0.0; 9];
        v[8] = 8.0 / 9.0 - 2.0;
        let h = assemble(&dom, &v, p(1)).unwrap();
        let u: Vec<f64> = (1..=9).map(|i| i as f64).collect();
        let tr = cone_chain(&h, 0.0, &u, &Site::new(&[1]), 0, 1).unwrap();
        let xs: Vec<i64> = tr.sites.iter().map(|s| s.get(0)).collect();
        assert_eq!(xs, vec![1, 3, 5, 7, 9]);
        assert!((tr.step_bound - 1.0 / 3.0).abs() < 1e-15);
        assert!(tr.check(0.0).steps_ok);
        assert_eq!(cone_property_check(&h, 0.0, &u, 1e-12).violations, 0);
    }

    #[test]
    fn chains_on_eigenpairs() {
        let b = LatticeBox::centered(2, 4);
        let h = assemble_with(&b.to_site_set(), p(2), |x| if x.linf() <= 1 { 0.0 } else { 20.0 }).unwrap();
        let s = eig(&h);
        for r in 0..4 {
            let u = s.vector(r);
            let lam = s.values[r];
            let i0 = (0..u.len()).max_by(|&a, &b| u[a].abs().total_cmp(&u[b].abs())).unwrap();
            let x0 = h.sites.as_slice()[i0];
            let tr = cone_chain(&h, lam, &u, &x0, 1, 1).unwrap();
            let c = tr.check(1e-10);
            assert!(c.increments_ok && c.steps_ok && c.gamma_ok, "{c:?}");
            assert_eq!(tr.sites.last().unwrap().get(1), 4);
            assert_eq!(cone_property_check(&h, lam, &u, 1e-10).violations, 0);
        }
        let zero = vec![0.0; h.n()];
        let tr = cone_chain(&h, 1.0, &zero, &Site::origin(2), 0, -1).unwrap();
        assert!(tr.check(0.0).steps_ok);
    }

    #[test]
    fn influence_in_one_dimension() {
        let b = LatticeBox::centered(1, 3);
        let h = assemble(&b.to_site_set(), &[0.0; 7], p(1)).unwrap();
        let s = eig(&h);
        let u = s.vector(0);
        let rep = influence_max(&h, &u, &LatticeBox::centered(1, 1), &b).unwrap();
        assert!((rep.influence - u[0].abs()).abs() < 1e-15);
        assert!(rep.ybar == Site::new(&[-4]) || rep.ybar == Site::new(&[4]));
        assert!(rep.margin >= 0.0);
    }

    #[test]
    fn transversal_thresholds() {
        let sites: SiteSet = (0..4).map(|i| Site::new(&[i])).collect();
        let u = [1.0, -0.5, 0.01, 0.0];
        assert_eq!(transversal_set(&u, &sites, 0, 0.0).len(), 4);
        assert_eq!(transversal_set(&u, &sites, 0, 0.4).len(), 2);
        assert!(transversal_set(&u, &sites, 0, 2.0).is_empty());
    }

    #[test]
    fn region_matches_comprehension() {
        let r = PropagatingRegion::new(2, 3).unwrap();
        let mut want = Vec::new();
        for a in -5i64..=5 {
            for b in -5i64..=5 {
                if b >= 0 && a.abs() + b <= 4 {
                    want.push(Site::new(&[a, b]));
                }
            }
        }
        assert_eq!(r.sites, SiteSet::new(want));
        let side = r.side_boundary();
        assert!(side.contains(&Site::new(&[4, 0])) && side.contains(&Site::new(&[0, 4])));
        assert!(!side.contains(&Site::new(&[0, 0])));
    }

    #[test]
    fn propagation_is_linear_and_solves_the_equation() {
        let r = PropagatingRegion::new(2, 6).unwrap();
        let v = |_: &Site| 20.0;
        let f = |x: &Site| ((x.get(0) * 7 + x.get(1) * 3) % 5) as f64 - 2.0;
        let g = |x: &Site| (x.get(0) as f64).sin();
        let a = propagate_solution(&r, &f, 1.0, &v);
        let b = propagate_solution(&r, &g, 1.0, &v);
        let ab = propagate_solution(&r, &|x: &Site| f(x) + g(x), 1.0, &v);
        for i in 0..a.values.len() {
            assert!((ab.values[i] - a.values[i] - b.values[i]).abs() <= 1e-10 * ab.values[i].abs().max(1.0));
        }
        assert!(a.residual(1.0, &v) < 1e-12);
        let z = propagate_solution(&r, &|_: &Site| 0.0, 1.0, &v);
        assert!(z.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn propagation_matches_direct_solve() {
        use faer::prelude::*;
        use faer::Mat;
        let r = PropagatingRegion::new(2, 5).unwrap();
        let v = |x: &Site| 3.0 + 0.5 * ((x.get(0) + 2 * x.get(1)).rem_euclid(3) as f64);
        let u0 = |x: &Site| 1.0 + 0.1 * x.get(0) as f64;
        let lam = 0.7;
        let prop = propagate_solution(&r, &u0, lam, &v);
        let unknown: Vec<Site> = r.sites.iter().filter(|n| n.get(1) >= 2).copied().collect();
        let idx = |n: &Site| unknown.iter().position(|m| m == n);
        let n = unknown.len();
        let mut a = Mat::<f64>::zeros(n, n);
        let mut rhs = Mat::<f64>::zeros(n, 1);
        for (row, top) in unknown.iter().enumerate() {
            let m = top.shifted(1, -1);
            let mut put = |y: &Site, c: f64| match idx(y) {
                Some(k) => a[(row, k)] += c,
                None => rhs[(row, 0)] -= c * u0(y),
            };
            put(&m, 4.0 + v(&m) - lam);
            for y in m.neighbors() {
                put(&y, -1.0);
            }
        }
        let sol = a.partial_piv_lu().solve(&rhs);
        for (k, s) in unknown.iter().enumerate() {
            let p = prop.get(s).unwrap();
            assert!((sol[(k, 0)] - p).abs() <= 1e-8 * p.abs().max(1.0), "{s}");
        }
    }

    #[test]
    fn edge_coefficients_match_flip_derivative() {
        for d in [2usize, 3] {
            let setup = UcSetup { params: p(d), l: 12, lambda: 0.5, background: 0.0 };
            let region = PropagatingRegion::new(d, setup.l).unwrap();
            let u0 = |x: &Site| 1.0 + 0.25 * x.coords().iter().sum::<i64>() as f64;
            let x = Site::unit(d, d - 1).shifted(0, 1).shifted(d - 1, 1);
            for tilt in [Tilt::Minus, Tilt::Plus] {
                let base = |y: &Site| if *y == x { 5.0 } else { 2.0 };
                let bumped = |y: &Site| if *y == x { 6.0 } else { 2.0 };
                let a = propagate_solution(&region, &u0, setup.lambda, &base);
                let b = propagate_solution(&region, &u0, setup.lambda, &bumped);
                let ux = a.get(&x).unwrap();
                let cands = edge_candidates(&x, tilt, &region);
                assert!(!cands.is_empty());
                for (n, c) in cands {
                    let diff = b.get(&n).unwrap() - a.get(&n).unwrap();
                    assert!((diff - c * ux).abs() <= 1e-9 * diff.abs().max(1.0), "d={d} {n}: {diff} vs {}", c * ux);
                }
            }
        }
    }

    #[test]
    fn martingale_structure() {
        let setup = UcSetup { params: p(2), l: 60, lambda: 1.0, background: 0.0 };
        let a = uc_martingale_run(&setup, &bump, 11).unwrap();
        let b = uc_martingale_run(&setup, &bump, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.steps.len(), 6);
        assert!(a.edges_disjoint && a.increments_ok && a.transversality_ok);
        assert!(a.steps.iter().all(|s| s.edge.len() == 1));
        assert_eq!(a.to_jsonl().lines().count(), 6);
        assert_eq!(uc_martingale_run(&setup, &|_: &Site| 0.0, 1), Err(Error::ZeroInitialData));
    }

    #[test]
    fn degenerate_disorder_still_transversal() {
        let mut setup = UcSetup { params: p(2), l: 20, lambda: 1.0, background: 20.0 };
        setup.params.beta = 1.0;
        let r = uc_experiment(&setup, &bump, 3, 1, 0.01, 1.0).unwrap();
        assert_eq!(r.successes, 3);
    }
}
