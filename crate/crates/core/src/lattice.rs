//! Sites, boxes and scale ladders on Z^d.
//!
//! Boxes index their sites with the first coordinate varying fastest and the
//! last slowest. `SiteSet` keeps the same order, so the site list of a box and
//! its index map agree. Tie-breaks that the model resolves by "smallest first
//! coordinate" use the derived `Ord` on `Site`, which is plain lexicographic
//! order with the first coordinate most significant.

use std::cmp::Ordering;
use std::fmt;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_DIM: usize = 4;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "Vec<i64>", try_from = "Vec<i64>")]
pub struct Site {
    c: [i64; MAX_DIM],
    d: u8,
}

impl Site {
    pub fn new(coords: &[i64]) -> Site {
        assert!(
            !coords.is_empty() && coords.len() <= MAX_DIM,
            "dimension must be in 1..={MAX_DIM}"
        );
        let mut c = [0; MAX_DIM];
        c[..coords.len()].copy_from_slice(coords);
        Site { c, d: coords.len() as u8 }
    }

    pub fn origin(d: usize) -> Site {
        Site::new(&vec![0; d])
    }

    /// Unit vector along `axis` (0-based).
    pub fn unit(d: usize, axis: usize) -> Site {
        Site::origin(d).shifted(axis, 1)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.d as usize
    }

    #[inline]
    pub fn coords(&self) -> &[i64] {
        &self.c[..self.d as usize]
    }

    #[inline]
    pub fn get(&self, axis: usize) -> i64 {
        self.c[axis]
    }

    #[inline]
    pub fn shifted(mut self, axis: usize, delta: i64) -> Site {
        debug_assert!(axis < self.dim());
        self.c[axis] += delta;
        self
    }

    pub fn scaled(mut self, k: i64) -> Site {
        for v in self.c.iter_mut() {
            *v *= k;
        }
        self
    }

    pub fn l1(&self) -> i64 {
        self.coords().iter().map(|v| v.abs()).sum()
    }

    pub fn linf(&self) -> i64 {
        self.coords().iter().map(|v| v.abs()).max().unwrap_or(0)
    }

    pub fn dot(&self, other: &Site) -> i64 {
        self.coords().iter().zip(other.coords()).map(|(a, b)| a * b).sum()
    }

    pub fn dist_l1(&self, other: &Site) -> i64 {
        (*self - *other).l1()
    }

    pub fn dist_linf(&self, other: &Site) -> i64 {
        (*self - *other).linf()
    }

    pub fn is_adjacent(&self, other: &Site) -> bool {
        self.dist_l1(other) == 1
    }

    /// The 2d lattice neighbours, ordered axis by axis, minus before plus.
    pub fn neighbors(&self) -> impl Iterator<Item = Site> + '_ {
        (0..self.dim()).flat_map(move |k| [self.shifted(k, -1), self.shifted(k, 1)])
    }

    /// Index order: last coordinate most significant.
    pub fn colex_cmp(&self, other: &Site) -> Ordering {
        for k in (0..self.dim()).rev() {
            match self.c[k].cmp(&other.c[k]) {
                Ordering::Equal => continue,
                o => return o,
            }
        }
        Ordering::Equal
    }
}

impl Add for Site {
    type Output = Site;
    fn add(mut self, rhs: Site) -> Site {
        debug_assert_eq!(self.d, rhs.d);
        for k in 0..MAX_DIM {
            self.c[k] += rhs.c[k];
        }
        self
    }
}

impl Sub for Site {
    type Output = Site;
    fn sub(mut self, rhs: Site) -> Site {
        debug_assert_eq!(self.d, rhs.d);
        for k in 0..MAX_DIM {
            self.c[k] -= rhs.c[k];
        }
        self
    }
}

impl fmt::Debug for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, v) in self.coords().iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{v}")?;
        }
        write!(f, ")")
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl From<Site> for Vec<i64> {
    fn from(s: Site) -> Vec<i64> {
        s.coords().to_vec()
    }
}

impl TryFrom<Vec<i64>> for Site {
    type Error = String;
    fn try_from(v: Vec<i64>) -> std::result::Result<Site, String> {
        if v.is_empty() || v.len() > MAX_DIM {
            return Err(format!("site dimension {} not in 1..={MAX_DIM}", v.len()));
        }
        Ok(Site::new(&v))
    }
}

/// Sorted (index order), duplicate-free list of sites.
#[derive(Clone, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
pub struct SiteSet {
    sites: Vec<Site>,
}

impl SiteSet {
    pub fn new(mut sites: Vec<Site>) -> SiteSet {
        sites.sort_by(|a, b| a.colex_cmp(b));
        sites.dedup();
        SiteSet { sites }
    }

    pub fn empty() -> SiteSet {
        SiteSet { sites: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn as_slice(&self) -> &[Site] {
        &self.sites
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Site> {
        self.sites.iter()
    }

    pub fn index_of(&self, x: &Site) -> Option<usize> {
        self.sites.binary_search_by(|s| s.colex_cmp(x)).ok()
    }

    pub fn contains(&self, x: &Site) -> bool {
        self.index_of(x).is_some()
    }

    pub fn union(&self, other: &SiteSet) -> SiteSet {
        let mut v = self.sites.clone();
        v.extend_from_slice(&other.sites);
        SiteSet::new(v)
    }

    pub fn difference(&self, other: &SiteSet) -> SiteSet {
        SiteSet {
            sites: self.sites.iter().filter(|x| !other.contains(x)).copied().collect(),
        }
    }

    pub fn intersection(&self, other: &SiteSet) -> SiteSet {
        SiteSet {
            sites: self.sites.iter().filter(|x| other.contains(x)).copied().collect(),
        }
    }

    pub fn filter(&self, mut keep: impl FnMut(&Site) -> bool) -> SiteSet {
        SiteSet {
            sites: self.sites.iter().filter(|x| keep(x)).copied().collect(),
        }
    }

    pub fn is_disjoint(&self, other: &SiteSet) -> bool {
        self.sites.iter().all(|x| !other.contains(x))
    }

    /// Lexicographically smallest site (first coordinate most significant).
    pub fn lex_min(&self) -> Option<Site> {
        self.sites.iter().min().copied()
    }

    /// Minimal ℓ∞ distance between the two sets.
    pub fn dist_linf(&self, other: &SiteSet) -> Option<i64> {
        self.sites
            .iter()
            .flat_map(|a| other.sites.iter().map(move |b| a.dist_linf(b)))
            .min()
    }

    /// Largest ℓ∞ distance between two members.
    pub fn diameter_linf(&self) -> i64 {
        let mut best = 0;
        for (i, a) in self.sites.iter().enumerate() {
            for b in &self.sites[i + 1..] {
                best = best.max(a.dist_linf(b));
            }
        }
        best
    }

    pub fn translate(&self, by: Site) -> SiteSet {
        SiteSet::new(self.sites.iter().map(|x| *x + by).collect())
    }
}

impl FromIterator<Site> for SiteSet {
    fn from_iter<I: IntoIterator<Item = Site>>(iter: I) -> SiteSet {
        SiteSet::new(iter.into_iter().collect())
    }
}

impl<'a> IntoIterator for &'a SiteSet {
    type Item = &'a Site;
    type IntoIter = std::slice::Iter<'a, Site>;
    fn into_iter(self) -> Self::IntoIter {
        self.sites.iter()
    }
}

/// ℓ∞ ball Q_r(center).
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct LatticeBox {
    pub center: Site,
    pub radius: u64,
}

impl LatticeBox {
    pub fn new(center: Site, radius: u64) -> LatticeBox {
        LatticeBox { center, radius }
    }

    pub fn centered(d: usize, radius: u64) -> LatticeBox {
        LatticeBox::new(Site::origin(d), radius)
    }

    pub fn dim(&self) -> usize {
        self.center.dim()
    }

    pub fn side(&self) -> usize {
        2 * self.radius as usize + 1
    }

    pub fn len(&self) -> usize {
        self.side().pow(self.dim() as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, x: &Site) -> bool {
        x.dist_linf(&self.center) <= self.radius as i64
    }

    pub fn index_of(&self, x: &Site) -> Option<usize> {
        if !self.contains(x) {
            return None;
        }
        let side = self.side();
        let r = self.radius as i64;
        let mut idx = 0usize;
        for k in (0..self.dim()).rev() {
            idx = idx * side + (x.get(k) - self.center.get(k) + r) as usize;
        }
        Some(idx)
    }

    pub fn site(&self, mut idx: usize) -> Site {
        let side = self.side();
        let r = self.radius as i64;
        let mut c = [0i64; MAX_DIM];
        for (k, slot) in c.iter_mut().enumerate().take(self.dim()) {
            *slot = (idx % side) as i64 - r + self.center.get(k);
            idx /= side;
        }
        Site::new(&c[..self.dim()])
    }

    pub fn sites(&self) -> impl Iterator<Item = Site> + '_ {
        (0..self.len()).map(move |i| self.site(i))
    }

    pub fn to_site_set(&self) -> SiteSet {
        SiteSet { sites: self.sites().collect() }
    }

    pub fn neighborhood(&self, margin: u64) -> LatticeBox {
        LatticeBox::new(self.center, self.radius + margin)
    }

    pub fn boundary(&self, side: BoundarySide) -> SiteSet {
        boundary(&self.to_site_set(), side)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BoundarySide {
    /// Sites of the set with a neighbour outside.
    Inner,
    /// Sites outside the set with a neighbour inside.
    Outer,
}

pub fn boundary(set: &SiteSet, side: BoundarySide) -> SiteSet {
    match side {
        BoundarySide::Inner => set.filter(|x| x.neighbors().any(|y| !set.contains(&y))),
        BoundarySide::Outer => set
            .iter()
            .flat_map(|x| x.neighbors())
            .filter(|y| !set.contains(y))
            .collect(),
    }
}

/// Neighbours of the apex x0+σe_k other than x0, plus the apex itself.
pub fn cone(x0: &Site, axis: usize, sigma: i64) -> SiteSet {
    assert!(axis < x0.dim() && (sigma == 1 || sigma == -1));
    let apex = x0.shifted(axis, sigma);
    let mut v: Vec<Site> = apex.neighbors().filter(|y| y != x0).collect();
    v.push(apex);
    SiteSet::new(v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LadderKind {
    Newtonian { d0: u64, alpha: f64 },
    AAdic { l0: u64, a: u64 },
    /// User-supplied desk-scale values.
    Explicit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleLadder {
    pub kind: LadderKind,
    pub values: Vec<u64>,
}

impl ScaleLadder {
    /// d_0, …, d_{len-1} with d_{k+1} = ⌊d_k^α⌋.
    pub fn newtonian(d0: u64, alpha: f64, len: usize) -> Result<ScaleLadder> {
        if d0 < 2 || !(alpha > 1.0) || len == 0 {
            return Err(Error::InvalidLadder(format!(
                "need d0 > 1, alpha > 1, len > 0 (got {d0}, {alpha}, {len})"
            )));
        }
        let mut values = vec![d0];
        while values.len() < len {
            let prev = *values.last().unwrap() as f64;
            let x = prev.powf(alpha);
            // powf of an exact integer power can land one ulp low; nudge before flooring.
            let next = (x * (1.0 + 1e-12)).floor();
            if !next.is_finite() || next >= u64::MAX as f64 / 8.0 {
                return Err(Error::InvalidLadder(format!(
                    "scale overflow at level {}",
                    values.len()
                )));
            }
            values.push(next as u64);
        }
        Ok(ScaleLadder { kind: LadderKind::Newtonian { d0, alpha }, values })
    }

    pub fn explicit(values: Vec<u64>) -> Result<ScaleLadder> {
        if values.is_empty() || values[0] < 1 || values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidLadder(format!(
                "explicit ladder must be positive and strictly increasing: {values:?}"
            )));
        }
        Ok(ScaleLadder { kind: LadderKind::Explicit, values })
    }

    pub fn a_adic(l0: u64, a: u64, len: usize) -> Result<ScaleLadder> {
        if l0 < 1 || a < 2 || len == 0 {
            return Err(Error::InvalidLadder(format!(
                "need L0 >= 1, a >= 2, len > 0 (got {l0}, {a}, {len})"
            )));
        }
        let mut values = vec![l0];
        for _ in 1..len {
            let next = values.last().unwrap().checked_mul(a).ok_or_else(|| {
                Error::InvalidLadder("a-adic scale overflow".into())
            })?;
            values.push(next);
        }
        Ok(ScaleLadder { kind: LadderKind::AAdic { l0, a }, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, k: usize) -> Result<u64> {
        self.values
            .get(k)
            .copied()
            .ok_or(Error::LevelOutOfRange { level: k, len: self.values.len() })
    }
}

fn require_hierarchy_ladder(ladder: &ScaleLadder) -> Result<()> {
    if matches!(ladder.kind, LadderKind::AAdic { .. }) {
        return Err(Error::Precondition("block radii need a Newtonian (or explicit) ladder".into()));
    }
    Ok(())
}

/// Λ_k(j) = Q_{2⌊3d_k⌋}(j).
pub fn lambda_k(j: &Site, k: usize, ladder: &ScaleLadder) -> Result<LatticeBox> {
    require_hierarchy_ladder(ladder)?;
    let dk = ladder.get(k)?;
    Ok(LatticeBox::new(*j, 2 * (3 * dk)))
}

/// Λ̄_k(j): the ⌊d_{k+1}/10⌋-neighbourhood of Λ_k(j).
pub fn lambda_bar(j: &Site, k: usize, ladder: &ScaleLadder) -> Result<LatticeBox> {
    let next = ladder.get(k + 1)?;
    Ok(lambda_k(j, k, ladder)?.neighborhood(next / 10))
}

/// Λ'_k(j): the 2d_k-neighbourhood of Λ_k(j).
pub fn lambda_prime(j: &Site, k: usize, ladder: &ScaleLadder) -> Result<LatticeBox> {
    let dk = ladder.get(k)?;
    Ok(lambda_k(j, k, ladder)?.neighborhood(2 * dk))
}

/// a-adic ladder L_j = a^j L_0 and the index P with L_P ≤ bound < L_{P+1}.
pub fn a_adic_ladder_to_bound(l0: u64, a: u64, bound: f64) -> Result<(ScaleLadder, usize)> {
    if l0 < 1 || a < 2 {
        return Err(Error::InvalidLadder(format!("need L0 >= 1 and a >= 2 (got {l0}, {a})")));
    }
    if (l0 as f64) > bound {
        return Err(Error::InvalidLadder(format!("L0 = {l0} exceeds the bound {bound}")));
    }
    let mut len = 1;
    let mut cur = l0;
    loop {
        match cur.checked_mul(a) {
            Some(next) if (next as f64) <= bound => {
                cur = next;
                len += 1;
            }
            _ => break,
        }
    }
    Ok((ScaleLadder::a_adic(l0, a, len)?, len - 1))
}

/// The cascade ladder between Newtonian scales: the bound is d_k^{√α}.
pub fn a_adic_ladder(l0: u64, a: u64, d_k: u64, alpha: f64) -> Result<(ScaleLadder, usize)> {
    a_adic_ladder_to_bound(l0, a, (d_k as f64).powf(alpha.sqrt()))
}
