//! Admissible lattice approximations of planar domains.
//!
//! For a domain `D` and scale `N` the lattice is
//! `{ x in Z^2 : dist_inf(x/N, D^c) > 1/N }`. Distances are evaluated in the
//! scaled frame `N*D` so that the unit square reduces to integer arithmetic.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub type Site = (i64, i64);

/// Nearest-neighbor offsets in a fixed order.
pub const NEIGHBOR_OFFSETS: [Site; 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "kebab-case")]
pub enum DomainSpec {
    UnitSquare,
    Disc { center: (f64, f64), radius: f64 },
    Annulus { center: (f64, f64), r_in: f64, r_out: f64 },
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DomainSpec::UnitSquare => Ok(()),
            DomainSpec::Disc { radius, center } => {
                if !(radius > 0.0) || !radius.is_finite() {
                    return Err(invalid(format!("disc radius must be > 0, got {radius}")));
                }
                check_center(center)
            }
            DomainSpec::Annulus { center, r_in, r_out } => {
                if !(r_in > 0.0 && r_out > r_in && r_out.is_finite()) {
                    return Err(invalid(format!("annulus needs 0 < r_in < r_out, got r_in={r_in}, r_out={r_out}")));
                }
                check_center(center)
            }
        }
    }

    pub fn keyword(&self) -> &'static str {
        match self {
            DomainSpec::UnitSquare => "unit-square",
            DomainSpec::Disc { .. } => "disc",
            DomainSpec::Annulus { .. } => "annulus",
        }
    }

    pub fn area(&self) -> f64 {
        match *self {
            DomainSpec::UnitSquare => 1.0,
            DomainSpec::Disc { radius, .. } => std::f64::consts::PI * radius * radius,
            DomainSpec::Annulus { r_in, r_out, .. } => std::f64::consts::PI * (r_out * r_out - r_in * r_in),
        }
    }

    /// Integer bounding box of `N*D`, padded by one.
    fn scaled_bounds(&self, n: f64) -> (i64, i64, i64, i64) {
        let (cx, cy, r) = match *self {
            DomainSpec::UnitSquare => (0.5, 0.5, 0.5),
            DomainSpec::Disc { center, radius } => (center.0, center.1, radius),
            DomainSpec::Annulus { center, r_out, .. } => (center.0, center.1, r_out),
        };
        (
            ((cx - r) * n).floor() as i64 - 1,
            ((cx + r) * n).ceil() as i64 + 1,
            ((cy - r) * n).floor() as i64 - 1,
            ((cy + r) * n).ceil() as i64 + 1,
        )
    }

    /// `dist_inf(p, (N*D)^c)` for a point `p` in scaled coordinates.
    pub fn scaled_inf_distance_to_complement(&self, p: (f64, f64), n: f64) -> f64 {
        match *self {
            DomainSpec::UnitSquare => {
                let m = p.0.min(n - p.0).min(p.1).min(n - p.1);
                m.max(0.0)
            }
            DomainSpec::Disc { center, radius } => {
                let a = (p.0 - center.0 * n).abs();
                let b = (p.1 - center.1 * n).abs();
                inf_distance_to_disc_exterior(a, b, radius * n)
            }
            DomainSpec::Annulus { center, r_in, r_out } => {
                let a = (p.0 - center.0 * n).abs();
                let b = (p.1 - center.1 * n).abs();
                let outer = inf_distance_to_disc_exterior(a, b, r_out * n);
                let inner = inf_distance_to_closed_disc(a, b, r_in * n);
                outer.min(inner)
            }
        }
    }
}

fn check_center(c: (f64, f64)) -> Result<()> {
    if c.0.is_finite() && c.1.is_finite() {
        Ok(())
    } else {
        Err(invalid("domain center must be finite"))
    }
}

/// Smallest `t` such that the square `p ± t` leaves the open disc of radius
/// `rho` centered at the origin; `(a, b)` are `|p|` componentwise.
fn inf_distance_to_disc_exterior(a: f64, b: f64, rho: f64) -> f64 {
    if a * a + b * b >= rho * rho {
        return 0.0;
    }
    // (a + t)^2 + (b + t)^2 = rho^2
    let s = a + b;
    let disc = s * s - 2.0 * (a * a + b * b - rho * rho);
    ((-s + disc.sqrt()) / 2.0).max(0.0)
}

/// Smallest `t` such that the square `p ± t` meets the closed disc of radius
/// `rho` centered at the origin.
fn inf_distance_to_closed_disc(a: f64, b: f64, rho: f64) -> f64 {
    if a * a + b * b <= rho * rho {
        return 0.0;
    }
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    let t = hi - rho;
    if t >= lo {
        return t;
    }
    // (lo - t)^2 + (hi - t)^2 = rho^2, smaller root
    let s = lo + hi;
    let disc = s * s - 2.0 * (lo * lo + hi * hi - rho * rho);
    ((s - disc.max(0.0).sqrt()) / 2.0).max(0.0)
}

/// Finite subset of `Z^2` with its nearest-neighbor structure.
#[derive(Clone)]
pub struct Lattice {
    domain: DomainSpec,
    scale: u32,
    sites: Vec<Site>,
    index_of: HashMap<Site, usize>,
    neighbors: Vec<Vec<usize>>,
    degree_out: Vec<u8>,
}

impl fmt::Debug for Lattice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Lattice")
            .field("domain", &self.domain)
            .field("scale", &self.scale)
            .field("sites", &self.sites.len())
            .finish()
    }
}

/// Builds `D_N`. Sites are ordered lexicographically by `(x, y)`.
pub fn build_lattice(spec: DomainSpec, n: u32) -> Result<Lattice> {
    if n == 0 {
        return Err(invalid("lattice scale N must be >= 1"));
    }
    spec.validate()?;
    let nf = f64::from(n);
    let (x0, x1, y0, y1) = spec.scaled_bounds(nf);
    let mut sites = Vec::new();
    for x in x0..=x1 {
        for y in y0..=y1 {
            if spec.scaled_inf_distance_to_complement((x as f64, y as f64), nf) > 1.0 {
                sites.push((x, y));
            }
        }
    }
    Ok(Lattice::from_sites(spec, n, sites))
}

impl Lattice {
    /// Lattice on an explicit site set (sorted and deduplicated here).
    pub fn from_sites(domain: DomainSpec, scale: u32, mut sites: Vec<Site>) -> Lattice {
        sites.sort_unstable();
        sites.dedup();
        let index_of: HashMap<Site, usize> = sites.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        let mut neighbors = Vec::with_capacity(sites.len());
        let mut degree_out = Vec::with_capacity(sites.len());
        for &(x, y) in &sites {
            let inside: Vec<usize> =
                NEIGHBOR_OFFSETS.iter().filter_map(|&(dx, dy)| index_of.get(&(x + dx, y + dy)).copied()).collect();
            degree_out.push((4 - inside.len()) as u8);
            neighbors.push(inside);
        }
        Lattice { domain, scale, sites, index_of, neighbors, degree_out }
    }

    pub fn domain(&self) -> DomainSpec {
        self.domain
    }

    pub fn scale(&self) -> u32 {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    /// A zero-site lattice is a valid value; callers that need sites check this.
    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn site(&self, i: usize) -> Site {
        self.sites[i]
    }

    pub fn index_of(&self, s: Site) -> Option<usize> {
        self.index_of.get(&s).copied()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree_out(&self, i: usize) -> u8 {
        self.degree_out[i]
    }

    /// Short identifier used in provenance records.
    pub fn id(&self) -> String {
        match self.domain {
            DomainSpec::UnitSquare => format!("unit-square/N={}", self.scale),
            DomainSpec::Disc { center, radius } => {
                format!("disc({},{};{})/N={}", center.0, center.1, radius, self.scale)
            }
            DomainSpec::Annulus { center, r_in, r_out } => {
                format!("annulus({},{};{},{})/N={}", center.0, center.1, r_in, r_out, self.scale)
            }
        }
    }

    /// Largest index distance between neighbors (half-bandwidth of `I - P`).
    pub fn bandwidth(&self) -> usize {
        self.neighbors.iter().enumerate().flat_map(|(i, nb)| nb.iter().map(move |&j| i.abs_diff(j))).max().unwrap_or(0)
    }

    /// Largest Euclidean distance between two sites.
    pub fn diameter(&self) -> f64 {
        if self.sites.is_empty() {
            return 0.0;
        }
        let (mut x0, mut x1, mut y0, mut y1) = (i64::MAX, i64::MIN, i64::MAX, i64::MIN);
        for &(x, y) in &self.sites {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        (((x1 - x0).pow(2) + (y1 - y0).pow(2)) as f64).sqrt()
    }

    /// Integer points outside the lattice adjacent to some site.
    pub fn outer_boundary(&self) -> Vec<Site> {
        let mut out: Vec<Site> = self
            .sites
            .iter()
            .flat_map(|&(x, y)| NEIGHBOR_OFFSETS.iter().map(move |&(dx, dy)| (x + dx, y + dy)))
            .filter(|s| !self.index_of.contains_key(s))
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Euclidean distance from each site to `Z^2 \ D_N`.
    ///
    /// The nearest outside point always has a neighbor in the lattice, so only
    /// the outer vertex boundary has to be scanned.
    pub fn distance_to_complement(&self) -> Vec<f64> {
        let boundary = self.outer_boundary();
        self.sites
            .iter()
            .map(|&(x, y)| {
                boundary
                    .iter()
                    .map(|&(bx, by)| ((bx - x).pow(2) + (by - y).pow(2)) as f64)
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# schema=1")?;
        writeln!(w, "index,x,y,degree_out")?;
        for (i, &(x, y)) in self.sites.iter().enumerate() {
            writeln!(w, "{i},{x},{y},{}", self.degree_out[i])?;
        }
        Ok(())
    }
}

/// Which sets a [`SubsetMask`] was derived from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum MaskOrigin {
    /// Interior set with its `delta` and the resulting distance threshold.
    Interior { delta: f64, threshold: f64 },
    /// One cell of a box partition.
    Box { side: u32, cell: (i64, i64) },
}

/// Bitset over lattice indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetMask {
    len: usize,
    words: Vec<u64>,
    pub origin: MaskOrigin,
}

impl SubsetMask {
    pub fn empty(len: usize, origin: MaskOrigin) -> Self {
        Self { len, words: vec![0; len.div_ceil(64)], origin }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn insert(&mut self, i: usize) {
        assert!(i < self.len, "mask index {i} out of range {}", self.len);
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn contains(&self, i: usize) -> bool {
        i < self.len && self.words[i / 64] & (1 << (i % 64)) != 0
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn intersects(&self, other: &SubsetMask) -> bool {
        self.words.iter().zip(&other.words).any(|(a, b)| a & b != 0)
    }

    pub fn is_subset_of(&self, other: &SubsetMask) -> bool {
        self.words.iter().zip(&other.words).all(|(a, b)| a & !b == 0)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(move |&i| self.contains(i))
    }
}

/// Sites whose Euclidean distance to the lattice complement exceeds `N^(1-delta)`.
pub fn interior_mask(lat: &Lattice, delta: f64) -> Result<SubsetMask> {
    if lat.is_empty() {
        return Err(invalid("interior mask of an empty lattice"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid(format!("delta must lie in (0,1), got {delta}")));
    }
    let threshold = f64::from(lat.scale()).powf(1.0 - delta);
    let mut mask = SubsetMask::empty(lat.len(), MaskOrigin::Interior { delta, threshold });
    for (i, d) in lat.distance_to_complement().into_iter().enumerate() {
        if d > threshold {
            mask.insert(i);
        }
    }
    Ok(mask)
}

/// Intersections of the lattice with a grid of `side x side` cells anchored at
/// the origin. Only non-empty cells are returned, ordered by cell coordinates.
pub fn box_partition(lat: &Lattice, side: u32) -> Result<Vec<SubsetMask>> {
    if side == 0 {
        return Err(invalid("box side must be >= 1"));
    }
    let s = i64::from(side);
    let mut cells: BTreeMap<(i64, i64), SubsetMask> = BTreeMap::new();
    for (i, &(x, y)) in lat.sites().iter().enumerate() {
        let cell = (x.div_euclid(s), y.div_euclid(s));
        cells.entry(cell).or_insert_with(|| SubsetMask::empty(lat.len(), MaskOrigin::Box { side, cell })).insert(i);
    }
    Ok(cells.into_values().collect())
}
