//! Green function of the simple random walk killed on exiting the lattice,
//! the planar potential kernel, and the covariance factor used for sampling.

use std::io::Write;
use std::sync::{Arc, OnceLock};

use rand::Rng;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::lattice::{Lattice, Site, NEIGHBOR_OFFSETS};
use crate::linalg::{self, BandMatrix};
use crate::rng::SeedSource;
use crate::{EULER_GAMMA, G};

/// Default limit on the number of sites for dense matrices (~200 MB).
pub const DEFAULT_DENSE_CAP: usize = 5000;

/// Half-width of the square window on which the potential kernel is tabulated.
pub const KERNEL_WINDOW: i64 = 32;

/// Safety cap on the length of a single killed walk.
pub const WALK_STEP_CAP: u64 = 10_000_000;

/// Constant term of the potential kernel asymptotics, `(2 gamma + log 8) / pi`.
pub fn kernel_constant() -> f64 {
    (2.0 * EULER_GAMMA + 8f64.ln()) / std::f64::consts::PI
}

/// Large-distance expansion `(2/pi) log|x| + (2 gamma + log 8)/pi`.
pub fn potential_kernel_asymptotic(x: Site) -> f64 {
    let r = ((x.0 * x.0 + x.1 * x.1) as f64).sqrt();
    G * r.ln() + kernel_constant()
}

/// Potential kernel values on `|x|_inf <= radius`.
#[derive(Debug, Clone)]
pub struct PotentialKernelTable {
    radius: i64,
    values: Vec<f64>,
}

impl PotentialKernelTable {
    /// Tabulates the kernel from its one-dimensional Fourier representation
    ///
    /// `a(x1, x2) = (2/pi) \int_0^pi (1 - cos(x1 t) e^{-|x2| s(t)}) / sinh s(t) dt`,
    /// `cosh s(t) = 2 - cos t`, with composite Gauss-Legendre quadrature.
    /// Only one octant is integrated; the rest follows from the lattice symmetries.
    pub fn build(radius: i64) -> Self {
        let side = (2 * radius + 1) as usize;
        let rule = GaussLegendre::new(40);
        let octant: Vec<(i64, i64)> = (0..=radius).flat_map(|i| (0..=i).map(move |j| (j, i))).collect();
        let vals: Vec<f64> = octant.par_iter().map(|&(lo, hi)| kernel_integral(lo, hi, &rule)).collect();
        let mut values = vec![0.0; side * side];
        for (&(lo, hi), &v) in octant.iter().zip(&vals) {
            for (a, b) in [(lo, hi), (hi, lo)] {
                for (sa, sb) in [(1, 1), (1, -1), (-1, 1), (-1, -1)] {
                    let (x, y) = (sa * a, sb * b);
                    values[((x + radius) as usize) * side + (y + radius) as usize] = v;
                }
            }
        }
        Self { radius, values }
    }

    pub fn radius(&self) -> i64 {
        self.radius
    }

    pub fn get(&self, x: Site) -> Option<f64> {
        let r = self.radius;
        if x.0.abs() > r || x.1.abs() > r {
            return None;
        }
        let side = (2 * r + 1) as usize;
        Some(self.values[((x.0 + r) as usize) * side + (x.1 + r) as usize])
    }

    /// Tabulated value inside the window, asymptotic expansion outside.
    pub fn value(&self, x: Site) -> f64 {
        self.get(x).unwrap_or_else(|| potential_kernel_asymptotic(x))
    }
}

fn kernel_integral(lo: i64, hi: i64, rule: &GaussLegendre) -> f64 {
    if lo == 0 && hi == 0 {
        return 0.0;
    }
    let (x1, x2) = (lo as f64, hi as f64);
    let panels = 64;
    let pi = std::f64::consts::PI;
    let mut total = 0.0;
    for p in 0..panels {
        let a = pi * p as f64 / panels as f64;
        let b = pi * (p + 1) as f64 / panels as f64;
        total += rule.integrate(a, b, |t| {
            let sh = std::f64::consts::SQRT_2 * (t / 2.0).sin() * (3.0 - t.cos()).sqrt();
            let s = sh.asinh();
            // 1 - cos(x1 t) e^{-x2 s}, written without cancellation near t = 0
            let num = 2.0 * (t * x1 / 2.0).sin().powi(2) - (t * x1).cos() * (-x2 * s).exp_m1();
            num / sh
        });
    }
    2.0 / pi * total
}

/// Shared table on the default window.
pub fn kernel_table() -> &'static PotentialKernelTable {
    static TABLE: OnceLock<PotentialKernelTable> = OnceLock::new();
    TABLE.get_or_init(|| PotentialKernelTable::build(KERNEL_WINDOW))
}

/// Potential kernel of planar simple random walk.
pub fn potential_kernel(x: Site) -> f64 {
    kernel_table().value(x)
}

/// Gauss-Legendre rule on `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(order: usize) -> Self {
        let mut nodes = vec![0.0; order];
        let mut weights = vec![0.0; order];
        let n = order as f64;
        for i in 0..order.div_ceil(2) {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=order {
                    let k = k as f64;
                    let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-15 {
                    break;
                }
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[order - 1 - i] = x;
            weights[i] = w;
            weights[order - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    pub fn integrate(&self, a: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
        let (h, m) = ((b - a) / 2.0, (a + b) / 2.0);
        h * self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(m + h * x)).sum::<f64>()
    }
}

/// Dense Green matrix `G_N(x, y)` over lattice indices.
#[derive(Debug, Clone)]
pub struct GreenMatrix {
    lattice: Arc<Lattice>,
    n: usize,
    data: Vec<f64>,
    max_diag: f64,
}

impl GreenMatrix {
    /// Wraps precomputed values; `data` is row-major `n x n`.
    pub fn from_dense(lattice: Arc<Lattice>, data: Vec<f64>) -> Result<Self> {
        let n = lattice.len();
        if data.len() != n * n {
            return Err(invalid("Green data does not match lattice size"));
        }
        let max_diag = (0..n).map(|i| data[i * n + i]).fold(0.0, f64::max);
        Ok(Self { lattice, n, data, max_diag })
    }

    pub fn lattice(&self) -> &Arc<Lattice> {
        &self.lattice
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[x * self.n + y]
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.data[x * self.n..(x + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn max_diag(&self) -> f64 {
        self.max_diag
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// Largest relative violation of `G(x,y) = 1{x=y} + 1/4 sum_{z~x} G(z,y)`.
    pub fn harmonicity_residual(&self) -> f64 {
        let lat = &self.lattice;
        (0..self.n)
            .into_par_iter()
            .map(|x| {
                let mut worst = 0.0f64;
                for y in 0..self.n {
                    let s: f64 = lat.neighbors(x).iter().map(|&z| self.get(z, y)).sum();
                    let rhs = if x == y { 1.0 } else { 0.0 } + 0.25 * s;
                    worst = worst.max((self.get(x, y) - rhs).abs());
                }
                worst
            })
            .reduce(|| 0.0, f64::max)
            / self.max_diag
    }

    /// Upper triangle as `(i, j, value)` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# schema=1")?;
        writeln!(w, "i,j,value")?;
        for i in 0..self.n {
            for j in i..self.n {
                writeln!(w, "{i},{j},{}", self.get(i, j))?;
            }
        }
        Ok(())
    }
}

fn check_cap(lat: &Lattice, cap: usize) -> Result<()> {
    if lat.is_empty() {
        return Err(Error::DegenerateLattice("Green function of an empty lattice".into()));
    }
    if lat.len() > cap {
        let s = lat.len() as u128;
        return Err(Error::ResourceCap { sites: lat.len(), cap, bytes: 8 * s * s });
    }
    Ok(())
}

/// `I - P_D` as a band matrix, `P_D` the killed one-step transition matrix.
pub fn killed_generator(lat: &Lattice) -> BandMatrix {
    let mut a = BandMatrix::zeros(lat.len(), lat.bandwidth());
    for i in 0..lat.len() {
        a.set(i, i, 1.0);
        for &j in lat.neighbors(i) {
            if j < i {
                a.set(i, j, -0.25);
            }
        }
    }
    a
}

/// `G = (I - P_D)^{-1}` by banded Cholesky and one solve per column.
pub fn green_exact(lat: &Arc<Lattice>, dense_cap: usize) -> Result<GreenMatrix> {
    check_cap(lat, dense_cap)?;
    let mut a = killed_generator(lat);
    a.cholesky_in_place()?;
    GreenMatrix::from_dense(lat.clone(), linalg::band_inverse(&a))
}

/// Lower factor `L` with `L L^T = G`.
#[derive(Debug, Clone)]
pub struct CholFactor {
    lattice: Arc<Lattice>,
    n: usize,
    lower: Vec<f64>,
    jitter: f64,
}

impl CholFactor {
    pub fn lattice(&self) -> &Arc<Lattice> {
        &self.lattice
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    /// Row `i` of `L` up to and including the diagonal.
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.lower[i * self.n..i * self.n + i + 1]
    }

    pub fn reconstruction_error(&self, g: &GreenMatrix) -> f64 {
        linalg::reconstruction_error(&self.lower, g.as_slice(), self.n)
    }
}

/// Dense Cholesky of a Green matrix, with one diagonal jitter of
/// `1e-10 * max_diag` if a pivot underflows.
pub fn cholesky(g: &GreenMatrix) -> Result<CholFactor> {
    let f = linalg::dense_cholesky(g.as_slice(), g.len(), 1e-10 * g.max_diag())?;
    Ok(CholFactor { lattice: g.lattice().clone(), n: g.len(), lower: f.lower, jitter: f.jitter })
}

/// Green matrix and its Cholesky factor from the band structure of `I - P_D`.
///
/// Produces the same factor as [`cholesky`] (the Cholesky factor is unique)
/// in `O(n^2 b)` instead of `O(n^3)` work, `b` the lattice bandwidth.
pub fn green_and_factor(lat: &Arc<Lattice>, dense_cap: usize) -> Result<(GreenMatrix, CholFactor)> {
    check_cap(lat, dense_cap)?;
    let a = killed_generator(lat);
    let mut fwd = a.clone();
    fwd.cholesky_in_place()?;
    let g = GreenMatrix::from_dense(lat.clone(), linalg::band_inverse(&fwd))?;
    let mut rev = a.reversed();
    rev.cholesky_in_place()?;
    let lower = linalg::inverse_cholesky_from_reversed(&rev);
    Ok((g, CholFactor { lattice: lat.clone(), n: lat.len(), lower, jitter: 0.0 }))
}

/// `q_N(x, y) = G_N(x, y) / max_z G_N(z, z)`.
#[inline]
pub fn overlap(g: &GreenMatrix, x: usize, y: usize) -> f64 {
    g.get(x, y) / g.max_diag()
}

/// Monte Carlo estimate of one row `G_N(x, .)`.
#[derive(Debug, Clone)]
pub struct GreenMcEstimate {
    pub start: usize,
    pub walks: u64,
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
}

/// Per-site sums of visit counts and squared visit counts.
#[derive(Debug, Clone)]
struct VisitTally {
    walks: u64,
    sum: Vec<f64>,
    sumsq: Vec<f64>,
}

impl VisitTally {
    fn new(n: usize) -> Self {
        Self { walks: 0, sum: vec![0.0; n], sumsq: vec![0.0; n] }
    }

    fn merge(&mut self, other: &VisitTally) {
        self.walks += other.walks;
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.sumsq.iter_mut().zip(&other.sumsq) {
            *a += b;
        }
    }

    fn finish(self, start: usize) -> GreenMcEstimate {
        let w = self.walks as f64;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / w).collect();
        let se = self
            .sumsq
            .iter()
            .zip(&mean)
            .map(|(&sq, &m)| {
                if self.walks < 2 {
                    return 0.0;
                }
                let var = ((sq - w * m * m) / (w - 1.0)).max(0.0);
                (var / w).sqrt()
            })
            .collect();
        GreenMcEstimate { start, walks: self.walks, mean, se }
    }
}

fn step_table(lat: &Lattice) -> Vec<[usize; 4]> {
    (0..lat.len())
        .map(|i| {
            let (x, y) = lat.site(i);
            NEIGHBOR_OFFSETS.map(|(dx, dy)| lat.index_of((x + dx, y + dy)).unwrap_or(usize::MAX))
        })
        .collect()
}

fn run_walks<R: Rng + ?Sized>(table: &[[usize; 4]], start: usize, walks: u64, rng: &mut R) -> Result<VisitTally> {
    let n = table.len();
    let mut tally = VisitTally::new(n);
    let mut counts = vec![0u64; n];
    let mut touched = Vec::new();
    for _ in 0..walks {
        let mut pos = start;
        let mut steps = 0u64;
        loop {
            if counts[pos] == 0 {
                touched.push(pos);
            }
            counts[pos] += 1;
            steps += 1;
            if steps > WALK_STEP_CAP {
                return Err(Error::WalkStepCap { cap: WALK_STEP_CAP });
            }
            let next = table[pos][rng.random_range(0..4)];
            if next == usize::MAX {
                break;
            }
            pos = next;
        }
        for &s in &touched {
            let c = counts[s] as f64;
            tally.sum[s] += c;
            tally.sumsq[s] += c * c;
            counts[s] = 0;
        }
        touched.clear();
    }
    tally.walks = walks;
    Ok(tally)
}

/// Simulates `walks` killed walks from site `x` and averages visit counts.
pub fn green_mc<R: Rng + ?Sized>(lat: &Lattice, x: usize, walks: u64, rng: &mut R) -> Result<GreenMcEstimate> {
    if walks == 0 {
        return Err(invalid("green_mc needs at least one walk"));
    }
    if x >= lat.len() {
        return Err(invalid(format!("start site {x} outside lattice of {} sites", lat.len())));
    }
    Ok(run_walks(&step_table(lat), x, walks, rng)?.finish(x))
}

/// Parallel variant: walks are split into `batches` streams and merged in
/// stream order, so the result does not depend on scheduling.
pub fn green_mc_batched(
    lat: &Lattice,
    x: usize,
    walks: u64,
    batches: u64,
    seeds: &SeedSource,
) -> Result<GreenMcEstimate> {
    if walks == 0 || batches == 0 {
        return Err(invalid("green_mc needs at least one walk and one batch"));
    }
    if x >= lat.len() {
        return Err(invalid(format!("start site {x} outside lattice of {} sites", lat.len())));
    }
    let table = step_table(lat);
    let parts: Vec<Result<VisitTally>> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let share = walks / batches + u64::from(b < walks % batches);
            let mut rng = seeds.stream("green-mc", b);
            run_walks(&table, x, share, &mut rng)
        })
        .collect();
    let mut total = VisitTally::new(lat.len());
    for p in parts {
        total.merge(&p?);
    }
    Ok(total.finish(x))
}
