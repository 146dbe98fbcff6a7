//! Deterministic hierarchical potentials and Bernoulli disorder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{lambda_k, BoundarySide, LatticeBox, ScaleLadder, Site, SiteSet};
use crate::operator::ModelParams;
use crate::rng::SiteStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchyParams {
    pub d: usize,
    pub d0: u64,
    pub alpha: f64,
    pub n_wells: usize,
    pub h: f64,
    pub beta: f64,
    /// Desk-scale replacement for the Newtonian values d_0, d_1, ….
    pub ladder_override: Option<Vec<u64>>,
}

impl HierarchyParams {
    pub fn new(d: usize, d0: u64, alpha: f64, h: f64, beta: f64) -> HierarchyParams {
        HierarchyParams { d, d0, alpha, n_wells: 2 * d + 1, h, beta, ladder_override: None }
    }

    pub fn with_ladder(mut self, values: Vec<u64>) -> HierarchyParams {
        self.d0 = values[0];
        self.ladder_override = Some(values);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model()?;
        if !(self.alpha > 1.0) {
            return Err(Error::InvalidParams(format!("alpha must exceed 1, got {}", self.alpha)));
        }
        if self.n_wells == 0 {
            return Err(Error::InvalidParams("N must be at least 1".into()));
        }
        if self.ladder_override.is_none() && self.d0 < 2 {
            return Err(Error::InvalidParams(format!("d0 must exceed 1, got {}", self.d0)));
        }
        Ok(())
    }

    pub fn model(&self) -> Result<ModelParams> {
        ModelParams::new(self.d, self.h, self.beta)
    }

    /// Whether the high-dimensional Wegner regime α > N applies.
    pub fn alpha_exceeds_n(&self) -> bool {
        self.alpha > self.n_wells as f64
    }

    /// d_0..d_{len-1}; an override shorter than `len` is returned as is.
    pub fn ladder(&self, len: usize) -> Result<ScaleLadder> {
        match &self.ladder_override {
            Some(v) => ScaleLadder::explicit(v.iter().copied().take(len).collect()),
            None => ScaleLadder::newtonian(self.d0, self.alpha, len),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub level: usize,
    pub center: Site,
    pub sites: SiteSet,
}

/// V_hi on Λ_k(0), extended by the barrier value h outside.
#[derive(Clone, Debug, PartialEq)]
pub struct HierarchicalPotential {
    pub d: usize,
    pub level: usize,
    pub h: f64,
    pub ladder: ScaleLadder,
    pub domain: LatticeBox,
    well_mask: Vec<bool>,
    /// `components[l]` lists C_l^s inside the central Λ_{l+1}(0).
    pub components: Vec<Vec<Component>>,
}

impl HierarchicalPotential {
    /// Build from an explicit well set and component tree (custom potentials).
    pub fn from_parts(
        h: f64,
        ladder: ScaleLadder,
        domain: LatticeBox,
        wells: &SiteSet,
        components: Vec<Vec<Component>>,
    ) -> HierarchicalPotential {
        let mut well_mask = vec![false; domain.len()];
        for x in wells {
            if let Some(i) = domain.index_of(x) {
                well_mask[i] = true;
            }
        }
        HierarchicalPotential {
            d: domain.dim(),
            level: components.len(),
            h,
            ladder,
            domain,
            well_mask,
            components,
        }
    }

    pub fn is_well(&self, x: &Site) -> bool {
        self.domain.index_of(x).is_some_and(|i| self.well_mask[i])
    }

    pub fn value(&self, x: &Site) -> f64 {
        if self.is_well(x) {
            0.0
        } else {
            self.h
        }
    }

    pub fn wells(&self) -> SiteSet {
        SiteSet::new(
            (0..self.domain.len())
                .filter(|&i| self.well_mask[i])
                .map(|i| self.domain.site(i))
                .collect(),
        )
    }

    pub fn wells_in(&self, region: &LatticeBox) -> SiteSet {
        self.wells().filter(|x| region.contains(x))
    }

    /// Centres of the level-l blocks Λ_l(j_s) inside Λ_k(0) (all copies).
    pub fn block_centers(&self, l: usize) -> Vec<Site> {
        let mut centers = vec![Site::origin(self.d)];
        for m in (l + 1..=self.level).rev() {
            let t = translation(&self.ladder, m);
            let mut next = Vec::new();
            for c in &centers {
                next.push(*c);
                for axis in 0..self.d {
                    next.push(c.shifted(axis, t));
                    next.push(c.shifted(axis, -t));
                }
            }
            centers = next;
        }
        centers
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&PotentialDocument::from(self)).expect("potential serializes")
    }

    pub fn from_json(s: &str) -> Result<HierarchicalPotential> {
        let doc: PotentialDocument =
            serde_json::from_str(s).map_err(|e| Error::InvalidParams(e.to_string()))?;
        doc.into_potential()
    }
}

fn translation(ladder: &ScaleLadder, level: usize) -> i64 {
    let dk = ladder.values[level] as i64;
    let dprev = ladder.values[level - 1] as i64;
    2 * (3 * dk - 3 * dprev)
}

/// Gap between neighbouring translated wells at level k: 2⌊3d_k⌋ − 6⌊3d_{k−1}⌋.
pub fn well_gap(ladder: &ScaleLadder, level: usize) -> i64 {
    let dk = ladder.values[level] as i64;
    let dprev = ladder.values[level - 1] as i64;
    2 * 3 * dk - 6 * 3 * dprev
}

/// The symmetric example: C_0^1 = Λ_0 and 2d translated satellites per level.
pub fn symmetric_hierarchical(params: &HierarchyParams, k: usize) -> Result<HierarchicalPotential> {
    params.validate()?;
    let d = params.d;
    let ladder = match params.ladder(k + 2) {
        Ok(l) if l.len() > k => l,
        Ok(l) => {
            return Err(Error::LevelOutOfRange { level: k, len: l.len() });
        }
        Err(_) => params.ladder(k + 1)?,
    };
    if 2 * d + 1 > params.n_wells && k > 0 {
        return Err(Error::InvalidParams(format!(
            "symmetric example needs N >= {} (got {})",
            2 * d + 1,
            params.n_wells
        )));
    }
    for l in 1..=k {
        let gap = well_gap(&ladder, l);
        let need = 2 * ladder.values[l] as i64;
        if gap < need {
            return Err(Error::InfeasibleGeometry {
                level: l,
                detail: format!("gap 2*floor(3d_l) - 6*floor(3d_(l-1)) = {gap} < 2d_l = {need}"),
            });
        }
    }
    let origin = Site::origin(d);
    let mut wells = lambda_k(&origin, 0, &ladder)?.to_site_set();
    let mut components = Vec::with_capacity(k);
    for l in 1..=k {
        let t = translation(&ladder, l);
        let mut comps = vec![Component { level: l - 1, center: origin, sites: wells.clone() }];
        for axis in 0..d {
            for s in [1, -1] {
                let c = origin.shifted(axis, s * t);
                comps.push(Component { level: l - 1, center: c, sites: wells.translate(c) });
            }
        }
        let mut all = Vec::new();
        for c in &comps {
            all.extend_from_slice(c.sites.as_slice());
        }
        wells = SiteSet::new(all);
        components.push(comps);
    }
    let domain = lambda_k(&origin, k, &ladder)?;
    if let Some(x) = wells.iter().find(|x| !domain.contains(x)) {
        return Err(Error::InfeasibleGeometry {
            level: k,
            detail: format!("well site {x} overflows Lambda_k"),
        });
    }
    Ok(HierarchicalPotential::from_parts(params.h, ladder, domain, &wells, components))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Clause {
    pub level: usize,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchyReport {
    pub clauses: Vec<Clause>,
}

impl HierarchyReport {
    pub fn all_passed(&self) -> bool {
        self.clauses.iter().all(|c| c.passed)
    }

    pub fn failed(&self) -> Vec<&Clause> {
        self.clauses.iter().filter(|c| !c.passed).collect()
    }
}

fn set_distance(a: &SiteSet, b: &SiteSet) -> i64 {
    let ba = crate::lattice::boundary(a, BoundarySide::Inner);
    let bb = crate::lattice::boundary(b, BoundarySide::Inner);
    ba.dist_linf(&bb).unwrap_or(i64::MAX)
}

/// Check the stored component tree against the value map, level by level.
pub fn validate_hierarchy(
    v: &HierarchicalPotential,
    params: &HierarchyParams,
    k: usize,
) -> HierarchyReport {
    let mut clauses = Vec::new();
    let mut push = |level: usize, name: &str, passed: bool, detail: String| {
        clauses.push(Clause { level, name: name.to_string(), passed, detail });
    };
    if k > v.components.len() {
        push(k, "levels", false, format!("only {} levels stored", v.components.len()));
        return HierarchyReport { clauses };
    }
    let origin = Site::origin(v.d);
    for l in 1..=k {
        let comps = &v.components[l - 1];
        let dl = v.ladder.values[l] as i64;
        push(
            l,
            "count",
            comps.len() <= params.n_wells,
            format!("N_{l} = {} vs N = {}", comps.len(), params.n_wells),
        );
        let block = match lambda_k(&origin, l, &v.ladder) {
            Ok(b) => b,
            Err(e) => {
                push(l, "block", false, e.to_string());
                continue;
            }
        };
        let prev = lambda_k(&origin, l - 1, &v.ladder).expect("lower level exists");
        let central_ok = comps
            .first()
            .is_some_and(|c| c.sites.iter().all(|x| prev.contains(x)));
        push(l, "containment", central_ok, format!("C_{}^1 inside Lambda_{}(0)", l - 1, l - 1));
        let sub_ok = comps.iter().all(|c| {
            let sub = LatticeBox::new(c.center, prev.radius);
            c.sites.iter().all(|x| sub.contains(x) && block.contains(x))
        });
        push(l, "sub-blocks", sub_ok, "each C_{l-1}^s inside its Lambda_{l-1}(j_s)".into());
        if l == 1 {
            let bound = 4 * 3 * v.ladder.values[0] as i64;
            let worst = comps.iter().map(|c| c.sites.diameter_linf()).max().unwrap_or(0);
            push(l, "diameter", worst <= bound, format!("max diam {worst} vs {bound}"));
        }
        let mut min_dist = i64::MAX;
        for (i, a) in comps.iter().enumerate() {
            for b in &comps[i + 1..] {
                min_dist = min_dist.min(set_distance(&a.sites, &b.sites));
            }
        }
        push(
            l,
            "distance",
            min_dist >= 2 * dl,
            format!("min pairwise distance {min_dist} vs 2d_{l} = {}", 2 * dl),
        );
        let mut union = Vec::new();
        for c in comps {
            union.extend_from_slice(c.sites.as_slice());
        }
        let union = SiteSet::new(union);
        let wells = v.wells_in(&block);
        push(
            l,
            "union",
            union == wells,
            format!("{} component sites vs {} well sites", union.len(), wells.len()),
        );
    }
    HierarchyReport { clauses }
}

/// Realised Bernoulli variables on a site set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisorderConfig {
    pub domain: SiteSet,
    pub omega: Vec<u8>,
    pub seed: u64,
}

impl DisorderConfig {
    pub fn constant(domain: SiteSet, value: u8) -> DisorderConfig {
        let omega = vec![value; domain.len()];
        DisorderConfig { domain, omega, seed: 0 }
    }

    pub fn get(&self, x: &Site) -> Option<u8> {
        self.domain.index_of(x).map(|i| self.omega[i])
    }

    pub fn set(&mut self, x: &Site, value: u8) -> Result<()> {
        let i = self
            .domain
            .index_of(x)
            .ok_or_else(|| Error::DomainMismatch(format!("site {x} outside the disorder domain")))?;
        self.omega[i] = value;
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.omega.iter().map(|&w| w as f64).sum::<f64>() / self.omega.len().max(1) as f64
    }
}

pub fn sample_bernoulli(domain: &SiteSet, seed: u64) -> DisorderConfig {
    let stream = SiteStream::new(seed);
    let omega = domain.iter().map(|x| stream.bit(x)).collect();
    DisorderConfig { domain: domain.clone(), omega, seed }
}

/// V_hi + βω on the disorder domain, in its order.
pub fn total_potential(
    v_hi: &HierarchicalPotential,
    omega: &DisorderConfig,
    beta: f64,
) -> Result<Vec<f64>> {
    if let Some(x) = omega.domain.iter().find(|x| x.dim() != v_hi.d) {
        return Err(Error::DomainMismatch(format!("site {x} has dimension {}, potential {}", x.dim(), v_hi.d)));
    }
    Ok(omega
        .domain
        .iter()
        .zip(&omega.omega)
        .map(|(x, &w)| v_hi.value(x) + beta * w as f64)
        .collect())
}

#[derive(Serialize, Deserialize)]
struct PotentialDocument {
    d: usize,
    level: usize,
    h: f64,
    ladder: ScaleLadder,
    domain: LatticeBox,
    /// Runs of (is_well, length) over the domain in index order.
    values_rle: Vec<(bool, usize)>,
    components: Vec<Vec<Component>>,
}

impl From<&HierarchicalPotential> for PotentialDocument {
    fn from(v: &HierarchicalPotential) -> Self {
        let mut runs: Vec<(bool, usize)> = Vec::new();
        for &w in &v.well_mask {
            match runs.last_mut() {
                Some((flag, n)) if *flag == w => *n += 1,
                _ => runs.push((w, 1)),
            }
        }
        PotentialDocument {
            d: v.d,
            level: v.level,
            h: v.h,
            ladder: v.ladder.clone(),
            domain: v.domain,
            values_rle: runs,
            components: v.components.clone(),
        }
    }
}

impl PotentialDocument {
    fn into_potential(self) -> Result<HierarchicalPotential> {
        let mut mask = Vec::with_capacity(self.domain.len());
        for (flag, n) in &self.values_rle {
            mask.extend(std::iter::repeat(*flag).take(*n));
        }
        if mask.len() != self.domain.len() {
            return Err(Error::DomainMismatch(format!(
                "value map covers {} sites, domain has {}",
                mask.len(),
                self.domain.len()
            )));
        }
        Ok(HierarchicalPotential {
            d: self.d,
            level: self.level,
            h: self.h,
            ladder: self.ladder,
            domain: self.domain,
            well_mask: mask,
            components: self.components,
        })
    }
}
