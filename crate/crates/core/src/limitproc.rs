//! The limiting objects: truncated Poisson point process, Poisson-Dirichlet
//! weights, decorations and their log-partition functionals, the overlap
//! limits `Q` and `Q^REM`, and the verifiers built on them.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fields::SiteSampler;
use crate::greens::potential_kernel;
use crate::lattice::{Site, NEIGHBOR_OFFSETS};
use crate::rng::SeedSource;
use crate::stats::{
    self, fisher_z_test, ks_two_sample_shift_band, log_sum_exp, pearson, KsResult, PositiveNormal, Summary,
};
use crate::BETA_C;

/// Default bound on the neglected mass below the truncation level.
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Attempts at deepening the level when a configuration comes out empty.
pub const MAX_DEEPENINGS: u32 = 5;

/// Default outcome budget for exact enumeration.
pub const ENUMERATION_BUDGET: u128 = 1_000_000;

/// Mass of `e^{beta h} e^{-beta_c h} dh` below `-level`.
pub fn tail_bound(beta: f64, level: f64) -> f64 {
    let d = beta - BETA_C;
    (-d * level).exp() / d
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailBound {
    pub beta: f64,
    pub bound: f64,
}

/// Smallest level with `tail_bound(beta, level) <= epsilon` for every beta.
pub fn truncation_level(betas: &[f64], epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(invalid("epsilon must be positive"));
    }
    let mut level = 0.0f64;
    for &b in betas {
        if !(b > BETA_C) {
            return Err(invalid(format!("beta={b} must exceed beta_c={BETA_C:.6}")));
        }
        let d = b - BETA_C;
        let mut l = ((1.0 / (epsilon * d)).ln() / d).max(0.0);
        // guard against rounding right at the bound
        while tail_bound(b, l) > epsilon {
            l += 1e-12 * l.max(1.0);
        }
        level = level.max(l);
    }
    Ok(level)
}

/// Records the tail bound of each beta and refuses levels that are too shallow.
pub fn check_truncation(betas: &[f64], level: f64, epsilon: f64) -> Result<Vec<TailBound>> {
    betas
        .iter()
        .map(|&beta| {
            if !(beta > BETA_C) {
                return Err(invalid(format!("beta={beta} must exceed beta_c={BETA_C:.6}")));
            }
            let bound = tail_bound(beta, level);
            if bound > epsilon {
                return Err(Error::TruncationBound { beta, bound, epsilon });
            }
            Ok(TailBound { beta, bound })
        })
        .collect()
}

/// Atoms of a Poisson process with intensity `e^{-beta_c h} dh` on `[-level, inf)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointConfiguration {
    pub level: f64,
    pub atoms: Vec<f64>,
}

impl PointConfiguration {
    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn max(&self) -> Option<f64> {
        self.atoms.iter().cloned().reduce(f64::max)
    }

    pub fn sorted_desc(&self) -> Vec<f64> {
        let mut v = self.atoms.clone();
        v.sort_by(|a, b| b.total_cmp(a));
        v
    }

    pub fn shifted(&self, s: f64) -> PointConfiguration {
        PointConfiguration { level: self.level - s, atoms: self.atoms.iter().map(|a| a + s).collect() }
    }
}

pub fn expected_atom_count(level: f64) -> f64 {
    (BETA_C * level).exp() / BETA_C
}

pub fn sample_ppp<R: Rng + ?Sized>(level: f64, rng: &mut R) -> Result<PointConfiguration> {
    if !(level >= 0.0 && level.is_finite()) {
        return Err(invalid(format!("truncation level must be finite and >= 0, got {level}")));
    }
    let mean = expected_atom_count(level);
    let count = Poisson::new(mean).map_err(|e| invalid(e.to_string()))?.sample(rng) as usize;
    let atoms = (0..count)
        .map(|_| {
            let u: f64 = rng.random();
            // inverse CDF of the exponential tail; 1 - u avoids log(0)
            -level - (1.0 - u).ln() / BETA_C
        })
        .collect();
    Ok(PointConfiguration { level, atoms })
}

/// Resamples with a deeper level (by 1) while the configuration is empty.
fn sample_nonempty<R: Rng + ?Sized>(level: f64, rng: &mut R) -> Result<(PointConfiguration, u32)> {
    let mut l = level;
    for attempt in 0..=MAX_DEEPENINGS {
        let c = sample_ppp(l, rng)?;
        if !c.is_empty() {
            return Ok((c, attempt));
        }
        l += 1.0;
    }
    Err(Error::EmptyConfiguration)
}

/// Normalised Gibbs weights `e^{beta xi_k} / sum_j e^{beta xi_j}`, sorted descending.
pub fn pd_weights(config: &PointConfiguration, beta: f64) -> Result<Vec<f64>> {
    if !(beta > BETA_C) {
        return Err(invalid(format!("beta={beta} must exceed beta_c")));
    }
    let top = config.max().ok_or(Error::EmptyConfiguration)?;
    let mut w: Vec<f64> = config.sorted_desc().iter().map(|a| (beta * (a - top)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    Ok(w)
}

/// A decoration on a finite window; the origin comes first and is 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecorationField {
    pub sites: Vec<Site>,
    pub values: Vec<f64>,
}

impl DecorationField {
    pub fn origin_only() -> Self {
        Self { sites: vec![(0, 0)], values: vec![0.0] }
    }
}

/// `(1/beta) log sum_x e^{-beta phi_x}`; sites outside the window contribute nothing.
pub fn x_beta(field: &DecorationField, beta: f64) -> f64 {
    x_beta_values(&field.values, beta)
}

pub fn x_beta_values(values: &[f64], beta: f64) -> f64 {
    log_sum_exp(values.iter().map(|v| -beta * v)) / beta
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BallParams {
    /// Radius of the ball on which the field is conditioned to be nonnegative.
    pub r: u32,
    /// Radius of the simulation window; outside it the field equals its drift.
    pub big_r: u32,
    pub burn_in: u32,
    /// Sweeps between successive pool entries of one chain.
    pub thin: u32,
}

impl Default for BallParams {
    fn default() -> Self {
        Self { r: 2, big_r: 8, burn_in: 200, thin: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DecorationModel {
    /// `0` at the origin, `c` on the rest of the Euclidean ball of the given radius.
    Constant { c: f64, radius: u32 },
    /// Origin and one neighbour, with gap drawn uniformly from the list.
    TwoSite { gaps: Vec<f64> },
    /// Pinned field with logarithmic drift, conditioned nonnegative near the origin.
    DgffBall(BallParams),
}

impl DecorationModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            DecorationModel::Constant { c, .. } if !(*c >= 0.0 && c.is_finite()) => {
                Err(invalid(format!("constant decoration needs c >= 0, got {c}")))
            }
            DecorationModel::TwoSite { gaps }
                if gaps.is_empty() || gaps.iter().any(|c| !(*c >= 0.0 && c.is_finite())) =>
            {
                Err(invalid("two-site decoration needs a non-empty list of gaps >= 0"))
            }
            DecorationModel::DgffBall(p) if p.r > p.big_r => {
                Err(invalid(format!("ball radius r={} exceeds window radius R={}", p.r, p.big_r)))
            }
            DecorationModel::DgffBall(p) if p.big_r == 0 || p.thin == 0 => {
                Err(invalid("dgff-ball needs R >= 1 and thin >= 1"))
            }
            _ => Ok(()),
        }
    }

    /// Whether the decoration law is a fixed field.
    pub fn is_deterministic(&self) -> bool {
        match self {
            DecorationModel::Constant { .. } => true,
            DecorationModel::TwoSite { gaps } => gaps.iter().all(|&g| g == gaps[0]),
            DecorationModel::DgffBall(_) => false,
        }
    }

    /// Finite table whose uniform law is the decoration law (exact for the
    /// synthetic models, a pool of chain states for the ball sampler).
    pub fn table(&self, pool: usize, seeds: &SeedSource) -> Result<DecorationTable> {
        self.validate()?;
        let fields = match self {
            DecorationModel::Constant { c, radius } => vec![constant_field(*c, *radius)],
            DecorationModel::TwoSite { gaps } => gaps.iter().map(|&g| two_site_field(g)).collect(),
            DecorationModel::DgffBall(p) => {
                if pool == 0 {
                    return Err(invalid("decoration pool must be non-empty"));
                }
                BallSampler::new(*p)?.pool(pool, seeds)
            }
        };
        Ok(DecorationTable { fields })
    }
}

fn ball_sites(radius: u32) -> Vec<Site> {
    let r = i64::from(radius);
    let mut sites: Vec<Site> =
        (-r..=r).flat_map(|x| (-r..=r).map(move |y| (x, y))).filter(|&(x, y)| x * x + y * y <= r * r).collect();
    // by norm, so every smaller ball is a prefix and the origin comes first
    sites.sort_by_key(|&(x, y)| (x * x + y * y, x, y));
    sites
}

fn constant_field(c: f64, radius: u32) -> DecorationField {
    let sites = ball_sites(radius);
    let values = (0..sites.len()).map(|i| if i == 0 { 0.0 } else { c }).collect();
    DecorationField { sites, values }
}

fn two_site_field(c: f64) -> DecorationField {
    DecorationField { sites: vec![(0, 0), (1, 0)], values: vec![0.0, c] }
}

pub fn draw_decoration<R: Rng + ?Sized>(model: &DecorationModel, rng: &mut R) -> Result<DecorationField> {
    model.validate()?;
    Ok(match model {
        DecorationModel::Constant { c, radius } => constant_field(*c, *radius),
        DecorationModel::TwoSite { gaps } => two_site_field(gaps[rng.random_range(0..gaps.len())]),
        DecorationModel::DgffBall(p) => {
            let s = BallSampler::new(*p)?;
            let mut state = s.initial_state();
            for _ in 0..p.burn_in {
                s.sweep(&mut state, rng);
            }
            s.restrict(&state)
        }
    })
}

/// Finite set of decorations, drawn uniformly.
#[derive(Debug, Clone, PartialEq)]
pub struct DecorationTable {
    pub fields: Vec<DecorationField>,
}

impl DecorationTable {
    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn xs(&self, beta: f64) -> Vec<f64> {
        self.fields.iter().map(|f| x_beta(f, beta)).collect()
    }

    pub fn pick<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        if self.fields.len() == 1 {
            0
        } else {
            rng.random_range(0..self.fields.len())
        }
    }
}

/// Heat-bath sampler on the window `|x| <= R`: the origin is pinned at 0,
/// sites outside the window sit at the drift `beta_c a(x)`, and sites with
/// `0 < |x| <= r` are conditioned to stay nonnegative.
#[derive(Debug, Clone)]
pub struct BallSampler {
    params: BallParams,
    sites: Vec<Site>,
    /// Per site: in-window neighbour indices and the summed fixed boundary values.
    neighbors: Vec<Vec<usize>>,
    boundary_sum: Vec<f64>,
    truncated: Vec<bool>,
    inner: usize,
}

impl BallSampler {
    pub fn new(params: BallParams) -> Result<Self> {
        DecorationModel::DgffBall(params).validate()?;
        let sites = ball_sites(params.big_r);
        let index: std::collections::HashMap<Site, usize> = sites.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        let mut neighbors = Vec::with_capacity(sites.len());
        let mut boundary_sum = Vec::with_capacity(sites.len());
        for &(x, y) in &sites {
            let mut nb = Vec::new();
            let mut fixed = 0.0;
            for (dx, dy) in NEIGHBOR_OFFSETS {
                let z = (x + dx, y + dy);
                match index.get(&z) {
                    Some(&j) => nb.push(j),
                    None => fixed += BETA_C * potential_kernel(z),
                }
            }
            neighbors.push(nb);
            boundary_sum.push(fixed);
        }
        let r2 = i64::from(params.r).pow(2);
        let truncated = sites.iter().map(|&(x, y)| x * x + y * y <= r2).collect();
        let inner = ball_sites(params.r).len();
        Ok(Self { params, sites, neighbors, boundary_sum, truncated, inner })
    }

    pub fn params(&self) -> BallParams {
        self.params
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn is_truncated(&self, i: usize) -> bool {
        i != 0 && self.truncated[i]
    }

    /// Drift `beta_c a(x)` as the starting point; it is nonnegative everywhere.
    pub fn initial_state(&self) -> Vec<f64> {
        self.sites.iter().map(|&s| BETA_C * potential_kernel(s)).collect()
    }

    /// Mean of the site conditional: average of the four neighbours.
    pub fn conditional_mean(&self, state: &[f64], i: usize) -> f64 {
        0.25 * (self.boundary_sum[i] + self.neighbors[i].iter().map(|&j| state[j]).sum::<f64>())
    }

    /// CDF of the site conditional at `v`.
    pub fn conditional_cdf(&self, state: &[f64], i: usize, v: f64) -> f64 {
        let mu = self.conditional_mean(state, i);
        if self.is_truncated(i) {
            PositiveNormal::new(mu).cdf(v)
        } else {
            stats::normal_cdf(v - mu)
        }
    }

    /// Redraws site `i` from its conditional given the rest of `state`.
    pub fn update_site<R: Rng + ?Sized>(&self, state: &mut [f64], i: usize, rng: &mut R) {
        let mu = self.conditional_mean(state, i);
        state[i] = if self.is_truncated(i) {
            PositiveNormal::new(mu).sample(rng)
        } else {
            mu + rng.sample::<f64, _>(StandardNormal)
        };
    }

    pub fn sweep<R: Rng + ?Sized>(&self, state: &mut [f64], rng: &mut R) {
        for i in 1..self.sites.len() {
            self.update_site(state, i, rng);
        }
    }

    /// Sweep that also records, for every conditioned site, the conditional
    /// CDF at the freshly drawn value. Under a correct update these are
    /// independent uniforms.
    pub fn sweep_recording<R: Rng + ?Sized>(&self, state: &mut [f64], rng: &mut R, pit: &mut [f64]) {
        for i in 1..self.sites.len() {
            self.update_site(state, i, rng);
            if self.is_truncated(i) {
                let u = self.conditional_cdf(state, i, state[i]);
                pit[i - 1] = u;
            }
        }
    }

    /// The decoration carried by a state: its values on the conditioned ball.
    pub fn restrict(&self, state: &[f64]) -> DecorationField {
        // ball_sites lists the inner ball first, so it is a prefix
        DecorationField { sites: self.sites[..self.inner].to_vec(), values: state[..self.inner].to_vec() }
    }

    /// Runs one chain for `burn_in` sweeps and returns its final state.
    pub fn run_chain<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut state = self.initial_state();
        for _ in 0..self.params.burn_in {
            self.sweep(&mut state, rng);
        }
        state
    }

    /// `size` decorations from chains of 32 entries each, `thin` sweeps apart.
    pub fn pool(&self, size: usize, seeds: &SeedSource) -> Vec<DecorationField> {
        const PER_CHAIN: usize = 32;
        let chains = size.div_ceil(PER_CHAIN);
        let parts: Vec<Vec<DecorationField>> = (0..chains as u64)
            .into_par_iter()
            .map(|c| {
                let mut rng = seeds.stream("ball-chain", c);
                let mut state = self.run_chain(&mut rng);
                let take = PER_CHAIN.min(size - c as usize * PER_CHAIN);
                (0..take)
                    .map(|_| {
                        for _ in 0..self.params.thin {
                            self.sweep(&mut state, &mut rng);
                        }
                        self.restrict(&state)
                    })
                    .collect()
            })
            .collect();
        parts.into_iter().flatten().collect()
    }
}

/// Monte Carlo estimates of `Q` (decorated) paired with `Q^REM` on the same atoms.
#[derive(Debug, Clone, Serialize)]
pub struct QEstimate {
    pub beta: f64,
    pub beta_prime: f64,
    pub level: f64,
    pub tail_bounds: Vec<TailBound>,
    pub values: Vec<f64>,
    pub mean: f64,
    pub se: f64,
    pub partner: Vec<f64>,
    pub partner_mean: f64,
    pub partner_se: f64,
    pub diff_mean: f64,
    pub diff_se: f64,
    /// Replicates whose level had to be deepened because no atom was drawn.
    pub deepened: usize,
}

impl QEstimate {
    fn from_pairs(
        beta: f64,
        beta_prime: f64,
        level: f64,
        tail_bounds: Vec<TailBound>,
        rows: Vec<(f64, f64, u32)>,
    ) -> Self {
        let values: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let partner: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let diffs: Vec<f64> = rows.iter().map(|r| r.0 - r.1).collect();
        let (a, b, d) = (Summary::of(&values), Summary::of(&partner), Summary::of(&diffs));
        QEstimate {
            beta,
            beta_prime,
            level,
            tail_bounds,
            deepened: rows.iter().filter(|r| r.2 > 0).count(),
            values,
            mean: a.mean,
            se: a.se,
            partner,
            partner_mean: b.mean,
            partner_se: b.se,
            diff_mean: d.mean,
            diff_se: d.se,
        }
    }
}

/// Atoms with their two decoration functionals, in a canonical order so the
/// result is a symmetric function of the atom set.
fn canonical(mut rows: Vec<(f64, f64, f64)>) -> Vec<(f64, f64, f64)> {
    rows.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)).then(b.2.total_cmp(&a.2)));
    rows
}

/// `Q` for atoms `xi_k` carrying `(X_beta, X_beta')`, relative to the top atom.
pub fn q_value(atoms: &[(f64, f64, f64)], beta: f64, beta_prime: f64) -> f64 {
    let rows = canonical(atoms.to_vec());
    let (t, xt, xpt) = rows[0];
    let a: Vec<f64> = rows.iter().map(|&(xi, x, _)| beta * ((xi - t) + (x - xt))).collect();
    let b: Vec<f64> = rows.iter().map(|&(xi, _, xp)| beta_prime * ((xi - t) + (xp - xpt))).collect();
    let num = log_sum_exp(a.iter().zip(&b).map(|(x, y)| x + y));
    let v = (num - log_sum_exp(a.iter().copied()) - log_sum_exp(b.iter().copied())).exp();
    v.min(1.0)
}

/// `Q(beta, inf)`: Gibbs mass of the largest atom under the decorated weights.
pub fn q_infinity_value(atoms: &[(f64, f64, f64)], beta: f64) -> f64 {
    let rows = canonical(atoms.to_vec());
    let (t, xt, _) = rows[0];
    let a: Vec<f64> = rows.iter().map(|&(xi, x, _)| beta * ((xi - t) + (x - xt))).collect();
    (a[0] - log_sum_exp(a.iter().copied())).exp().min(1.0)
}

/// Parameters shared by the limit-process pipelines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimitParams {
    pub level: f64,
    pub epsilon: f64,
    pub replicates: usize,
}

fn decorated_atoms<R: Rng + ?Sized>(
    config: &PointConfiguration,
    table: &DecorationTable,
    xb: &[f64],
    xbp: &[f64],
    rng: &mut R,
) -> Vec<(f64, f64, f64)> {
    config
        .atoms
        .iter()
        .map(|&xi| {
            let k = table.pick(rng);
            (xi, xb[k], xbp[k])
        })
        .collect()
}

fn paired_run(
    betas: &[f64],
    params: LimitParams,
    table: &DecorationTable,
    seeds: &SeedSource,
    tag: &str,
    eval: impl Fn(&[(f64, f64, f64)], &[(f64, f64, f64)]) -> (f64, f64) + Sync,
) -> Result<(Vec<TailBound>, Vec<(f64, f64, u32)>)> {
    if params.replicates == 0 {
        return Err(invalid("need at least one replicate"));
    }
    if table.is_empty() {
        return Err(invalid("empty decoration table"));
    }
    let bounds = check_truncation(betas, params.level, params.epsilon)?;
    let xb = table.xs(betas[0]);
    let xbp = table.xs(*betas.last().unwrap());
    let rows: Vec<Result<(f64, f64, u32)>> = (0..params.replicates as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeds.stream(tag, i);
            let (config, deepened) = sample_nonempty(params.level, &mut rng)?;
            let dec = decorated_atoms(&config, table, &xb, &xbp, &mut rng);
            let bare: Vec<(f64, f64, f64)> = config.atoms.iter().map(|&xi| (xi, 0.0, 0.0)).collect();
            let (q, r) = eval(&dec, &bare);
            Ok((q, r, deepened))
        })
        .collect();
    Ok((bounds, rows.into_iter().collect::<Result<_>>()?))
}

/// `Q(beta, beta')` with i.i.d. decorations, paired with `Q^REM` on the same atoms.
pub fn sample_q(
    beta: f64,
    beta_prime: f64,
    table: &DecorationTable,
    params: LimitParams,
    seeds: &SeedSource,
) -> Result<QEstimate> {
    let (bounds, rows) = paired_run(&[beta, beta_prime], params, table, seeds, "limit-q", |dec, bare| {
        (q_value(dec, beta, beta_prime), q_value(bare, beta, beta_prime))
    })?;
    Ok(QEstimate::from_pairs(beta, beta_prime, params.level, bounds, rows))
}

/// `Q^REM(beta, beta')` alone (the decorated side uses the origin-only field).
pub fn sample_q_rem(beta: f64, beta_prime: f64, params: LimitParams, seeds: &SeedSource) -> Result<QEstimate> {
    let table = DecorationTable { fields: vec![DecorationField::origin_only()] };
    let mut est = sample_q(beta, beta_prime, &table, params, seeds)?;
    est.values = est.partner.clone();
    est.mean = est.partner_mean;
    est.se = est.partner_se;
    Ok(est)
}

/// `Q(beta, inf)` and `Q^REM(beta, inf)` on common atoms.
pub fn q_at_infinity(beta: f64, table: &DecorationTable, params: LimitParams, seeds: &SeedSource) -> Result<QEstimate> {
    let (bounds, rows) = paired_run(&[beta], params, table, seeds, "q-infinity", |dec, bare| {
        (q_infinity_value(dec, beta), q_infinity_value(bare, beta))
    })?;
    Ok(QEstimate::from_pairs(beta, f64::INFINITY, params.level, bounds, rows))
}

/// Empirical CDF on a grid, with binomial standard errors.
pub fn empirical_cdf(values: &[f64], grid: &[f64]) -> Vec<(f64, f64, f64)> {
    let n = values.len() as f64;
    grid.iter()
        .map(|&t| {
            let p = values.iter().filter(|&&v| v <= t).count() as f64 / n;
            (t, p, (p * (1.0 - p) / n).sqrt())
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct GapReport {
    pub beta: f64,
    pub beta_prime: f64,
    pub mean_q: f64,
    pub mean_q_rem: f64,
    pub diff: f64,
    pub diff_se: f64,
    pub z: f64,
    /// One-sided p-value for `E[Q] < E[Q^REM]`.
    pub p_value: f64,
    pub estimate: QEstimate,
}

/// Smallest standard error used in the gap test; differences below it are rounding noise.
const GAP_SE_FLOOR: f64 = 1e-12;

pub fn theorem2_gap(
    beta: f64,
    beta_prime: f64,
    table: &DecorationTable,
    params: LimitParams,
    seeds: &SeedSource,
) -> Result<GapReport> {
    let est = sample_q(beta, beta_prime, table, params, seeds)?;
    let se = est.diff_se.max(GAP_SE_FLOOR);
    let z = est.diff_mean / se;
    Ok(GapReport {
        beta,
        beta_prime,
        mean_q: est.mean,
        mean_q_rem: est.partner_mean,
        diff: est.diff_mean,
        diff_se: est.diff_se,
        z,
        p_value: stats::p_lower(z),
        estimate: est,
    })
}

/// Draws of `Y` from the `e^{beta_c X_beta}`-tilted decoration law.
#[derive(Debug, Clone, Serialize)]
pub struct YSample {
    pub draws: Vec<f64>,
    pub pool: usize,
    pub ess: f64,
    pub warning: Option<String>,
}

/// Tilted pool for `Y = X_beta' - X_beta` by self-normalised importance weighting.
#[derive(Debug, Clone)]
pub struct TiltedPool {
    values: Vec<f64>,
    sampler: SiteSampler,
    pub ess: f64,
}

impl TiltedPool {
    pub fn new<R: Rng + ?Sized>(
        table: &DecorationTable,
        beta: f64,
        beta_prime: f64,
        pool: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if pool == 0 || table.is_empty() {
            return Err(invalid("tilted pool needs at least one decoration"));
        }
        let (xb, xbp) = (table.xs(beta), table.xs(beta_prime));
        let picks: Vec<usize> = (0..pool).map(|_| table.pick(rng)).collect();
        let logw: Vec<f64> = picks.iter().map(|&k| BETA_C * xb[k]).collect();
        let m = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logw.iter().map(|l| (l - m).exp()).collect();
        let (s1, s2) = (w.iter().sum::<f64>(), w.iter().map(|x| x * x).sum::<f64>());
        Ok(Self {
            values: picks.iter().map(|&k| xbp[k] - xb[k]).collect(),
            sampler: SiteSampler::new(&w),
            ess: s1 * s1 / s2,
        })
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.values[self.sampler.sample(rng)]
    }
}

pub fn sample_y<R: Rng + ?Sized>(
    table: &DecorationTable,
    beta: f64,
    beta_prime: f64,
    n: usize,
    pool: usize,
    rng: &mut R,
) -> Result<YSample> {
    if !(beta > BETA_C && beta_prime > BETA_C) || n == 0 {
        return Err(invalid("Y needs beta, beta' > beta_c and n >= 1"));
    }
    let tp = TiltedPool::new(table, beta, beta_prime, pool, rng)?;
    let draws = (0..n).map(|_| tp.draw(rng)).collect();
    let warning =
        (tp.ess < n as f64).then(|| format!("effective sample size {:.1} is below the {n} requested draws", tp.ess));
    Ok(YSample { draws, pool, ess: tp.ess, warning })
}

/// Closed-form law of `Y` for a finite uniform table: `(value, probability)` pairs.
pub fn y_law(table: &DecorationTable, beta: f64, beta_prime: f64) -> Vec<(f64, f64)> {
    let (xb, xbp) = (table.xs(beta), table.xs(beta_prime));
    let w: Vec<f64> = xb.iter().map(|x| (BETA_C * x).exp()).collect();
    let s: f64 = w.iter().sum();
    xb.iter().zip(&xbp).zip(&w).map(|((a, b), w)| (b - a, w / s)).collect()
}

/// `c_beta = beta_c^{-1} log E[e^{beta_c X_beta}]` by Monte Carlo, with its
/// delta-method standard error.
pub fn estimate_c_beta<R: Rng + ?Sized>(table: &DecorationTable, beta: f64, draws: usize, rng: &mut R) -> (f64, f64) {
    let xb = table.xs(beta);
    let w: Vec<f64> = (0..draws).map(|_| (BETA_C * xb[table.pick(rng)]).exp()).collect();
    let s = Summary::of(&w);
    (s.mean.ln() / BETA_C, s.se / s.mean / BETA_C)
}

#[derive(Debug, Clone, Serialize)]
pub struct ShiftReport {
    pub beta: f64,
    pub n: usize,
    pub c_beta: f64,
    pub c_beta_se: f64,
    pub offset: f64,
    pub ks: KsResult,
    /// Shift of the reference sample at which the statistic was smallest.
    pub best_shift: f64,
    pub alpha: f64,
    pub rejected: bool,
}

/// `log sum_k e^{beta (xi_k + X_k)}` per replicate.
fn decorated_lse(
    beta: f64,
    table: Option<&DecorationTable>,
    params: LimitParams,
    seeds: &SeedSource,
    tag: &str,
) -> Result<Vec<f64>> {
    let xb = table.map(|t| t.xs(beta));
    (0..params.replicates as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeds.stream(tag, i);
            let (c, _) = sample_nonempty(params.level, &mut rng)?;
            Ok(match (table, &xb) {
                (Some(t), Some(xb)) => {
                    let a: Vec<f64> = c.atoms.iter().map(|&xi| beta * (xi + xb[t.pick(&mut rng)])).collect();
                    log_sum_exp(a)
                }
                _ => log_sum_exp(c.atoms.iter().map(|&xi| beta * xi)),
            })
        })
        .collect()
}

/// Two-sample KS test of the decorated log-partition function against the
/// shifted undecorated one. The uncertainty of `c_beta` is folded in by
/// minimising the statistic over shifts within two standard errors.
pub fn verify_shift(
    beta: f64,
    table: &DecorationTable,
    params: LimitParams,
    c_draws: usize,
    offset: f64,
    seeds: &SeedSource,
) -> Result<ShiftReport> {
    check_truncation(&[beta], params.level, params.epsilon)?;
    if params.replicates < 2 || c_draws < 2 {
        return Err(invalid("shift test needs at least two replicates and two c_beta draws"));
    }
    let (c, c_se) = estimate_c_beta(table, beta, c_draws, &mut seeds.stream("shift-c", 0));
    let left = decorated_lse(beta, Some(table), params, seeds, "shift-left")?;
    let right = decorated_lse(beta, None, params, seeds, "shift-right")?;
    let centre = beta * (c + offset);
    let half = 2.0 * beta * c_se;
    let (ks, best_shift) = ks_two_sample_shift_band(&left, &right, centre - half, centre + half, 40);
    let alpha = 0.05;
    Ok(ShiftReport {
        beta,
        n: params.replicates,
        c_beta: c,
        c_beta_se: c_se,
        offset,
        rejected: ks.rejects(alpha),
        ks,
        best_shift,
        alpha,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct JointShiftReport {
    pub beta: f64,
    pub beta_prime: f64,
    pub c_beta: f64,
    pub c_beta_se: f64,
    pub ks_beta: KsResult,
    pub ks_beta_prime: KsResult,
    pub corr_left: f64,
    pub corr_right: f64,
    pub corr_p_value: f64,
    pub y_ess: f64,
    /// Family level; each of the three tests runs at a third of it.
    pub alpha: f64,
    pub rejected: bool,
}

/// Joint version: the pair `(S_beta, S_beta')` of decorated log-partition
/// functions against `(xi_k + c_beta, xi_k + c_beta + Y_k)`.
pub fn verify_shift_joint(
    beta: f64,
    beta_prime: f64,
    table: &DecorationTable,
    params: LimitParams,
    pool: usize,
    seeds: &SeedSource,
) -> Result<JointShiftReport> {
    check_truncation(&[beta, beta_prime], params.level, params.epsilon)?;
    if params.replicates < 4 {
        return Err(invalid("joint shift test needs at least four replicates"));
    }
    let (c, c_se) = estimate_c_beta(table, beta, pool, &mut seeds.stream("shift-c", 0));
    let tilted = TiltedPool::new(table, beta, beta_prime, pool, &mut seeds.stream("shift-y", 0))?;
    let (xb, xbp) = (table.xs(beta), table.xs(beta_prime));
    let left: Vec<Result<(f64, f64)>> = (0..params.replicates as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeds.stream("joint-left", i);
            let (cfg, _) = sample_nonempty(params.level, &mut rng)?;
            let ks: Vec<usize> = cfg.atoms.iter().map(|_| table.pick(&mut rng)).collect();
            let a = log_sum_exp(cfg.atoms.iter().zip(&ks).map(|(&xi, &k)| beta * (xi + xb[k])));
            let b = log_sum_exp(cfg.atoms.iter().zip(&ks).map(|(&xi, &k)| beta_prime * (xi + xbp[k])));
            Ok((a, b))
        })
        .collect();
    let right: Vec<Result<(f64, f64)>> = (0..params.replicates as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeds.stream("joint-right", i);
            let (cfg, _) = sample_nonempty(params.level, &mut rng)?;
            let a = log_sum_exp(cfg.atoms.iter().map(|&xi| beta * xi));
            let b: Vec<f64> = cfg.atoms.iter().map(|&xi| beta_prime * (xi + tilted.draw(&mut rng))).collect();
            let b = log_sum_exp(b);
            Ok((a, b))
        })
        .collect();
    let left: Vec<(f64, f64)> = left.into_iter().collect::<Result<_>>()?;
    let right: Vec<(f64, f64)> = right.into_iter().collect::<Result<_>>()?;
    let (la, lb): (Vec<f64>, Vec<f64>) = left.into_iter().unzip();
    let (ra, rb): (Vec<f64>, Vec<f64>) = right.into_iter().unzip();
    let band = |b: f64| (b * (c - 2.0 * c_se), b * (c + 2.0 * c_se));
    let (lo, hi) = band(beta);
    let (ks_beta, _) = ks_two_sample_shift_band(&la, &ra, lo, hi, 40);
    let (lo, hi) = band(beta_prime);
    let (ks_beta_prime, _) = ks_two_sample_shift_band(&lb, &rb, lo, hi, 40);
    let (corr_left, corr_right) = (pearson(&la, &lb), pearson(&ra, &rb));
    let corr_p_value = fisher_z_test(corr_left, la.len(), corr_right, ra.len());
    let alpha = 0.05;
    let each = alpha / 3.0;
    Ok(JointShiftReport {
        beta,
        beta_prime,
        c_beta: c,
        c_beta_se: c_se,
        rejected: ks_beta.rejects(each) || ks_beta_prime.rejects(each) || corr_p_value < each,
        ks_beta,
        ks_beta_prime,
        corr_left,
        corr_right,
        corr_p_value,
        y_ess: tilted.ess,
        alpha,
    })
}

/// Self-consistency of the heat-bath update on the conditioned ball.
#[derive(Debug, Clone, Serialize)]
pub struct DecorationCheck {
    pub params: BallParams,
    pub sweeps: usize,
    /// One KS test of the recorded conditional CDF values per conditioned site.
    pub per_site: Vec<(Site, KsResult)>,
    pub pooled: KsResult,
    /// Per-site level after the Bonferroni split of `alpha`.
    pub site_alpha: f64,
    /// Mean of the update at a site whose neighbours sum to zero.
    pub zero_mean: f64,
    pub zero_mean_se: f64,
    pub zero_mean_target: f64,
    pub alpha: f64,
}

impl DecorationCheck {
    pub fn sites_pass(&self) -> bool {
        self.per_site.iter().all(|(_, ks)| !ks.rejects(self.site_alpha)) && !self.pooled.rejects(self.alpha)
    }

    pub fn zero_mean_pass(&self, k: f64) -> bool {
        (self.zero_mean - self.zero_mean_target).abs() <= k * self.zero_mean_se
    }
}

/// Runs one chain for `sweeps` recorded sweeps after burn-in and tests every
/// conditioned site; then redraws a site with all neighbours at zero `draws` times.
pub fn decoration_self_check(
    params: BallParams,
    sweeps: usize,
    draws: usize,
    seeds: &SeedSource,
) -> Result<DecorationCheck> {
    if sweeps < 2 || draws < 2 {
        return Err(invalid("decoration check needs at least two sweeps and two draws"));
    }
    let s = BallSampler::new(params)?;
    if params.r == 0 {
        return Err(invalid("decoration check needs a conditioned ball, r >= 1"));
    }
    let mut rng = seeds.stream("decoration-check", 0);
    let mut state = s.run_chain(&mut rng);
    let k = s.inner - 1;
    let mut pit = vec![0.0; k];
    let mut cols = vec![Vec::with_capacity(sweeps); k];
    for _ in 0..sweeps {
        s.sweep_recording(&mut state, &mut rng, &mut pit);
        for (c, &u) in cols.iter_mut().zip(&pit) {
            c.push(u);
        }
    }
    let uniform = |u: f64| u.clamp(0.0, 1.0);
    let per_site: Vec<(Site, KsResult)> =
        cols.iter().enumerate().map(|(j, c)| (s.sites[j + 1], stats::ks_one_sample(c, uniform))).collect();
    // thin the pooled sample to one site per sweep, cycling, so draws stay independent
    let pooled: Vec<f64> = (0..sweeps).map(|t| cols[t % k][t]).collect();
    let pooled = stats::ks_one_sample(&pooled, uniform);

    // a conditioned site whose in-window neighbours are all zero; with R > r + 1 it has no fixed boundary
    let site = s.sites.iter().position(|&p| p == (1, 0)).expect("unit site lies in the ball");
    let mut zero = vec![0.0; s.sites.len()];
    let mut zrng = seeds.stream("decoration-zero", 0);
    let mut vals = Vec::with_capacity(draws);
    for _ in 0..draws {
        s.update_site(&mut zero, site, &mut zrng);
        vals.push(zero[site]);
        zero[site] = 0.0;
    }
    let z = Summary::of(&vals);
    let mu = s.conditional_mean(&zero, site);
    let alpha = 0.05;
    Ok(DecorationCheck {
        params,
        sweeps,
        site_alpha: alpha / k as f64,
        per_site,
        pooled,
        zero_mean: z.mean,
        zero_mean_se: z.se,
        zero_mean_target: PositiveNormal::new(mu).mean(),
        alpha,
    })
}

/// Finite discrete law of the multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteLaw<T> {
    pub values: Vec<T>,
    pub probs: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerProductReport<T> {
    /// `E[sum p~_n q_n]` over all outcomes.
    pub expectation: T,
    /// `sum p_n q_n`.
    pub baseline: T,
    pub outcomes: u128,
    pub strict: bool,
}

fn check_shapes<T: PartialOrd>(p: &[T], q: &[T], a: &DiscreteLaw<T>, zero: &T, budget: u128) -> Result<u128> {
    if p.is_empty() || p.len() != q.len() {
        return Err(invalid("p and q must be non-empty and of equal length"));
    }
    if a.values.is_empty() || a.values.len() != a.probs.len() {
        return Err(invalid("multiplier law needs matching non-empty values and probabilities"));
    }
    if p.windows(2).any(|w| w[0] < w[1]) || q.windows(2).any(|w| w[0] < w[1]) {
        return Err(invalid("p and q must be nonincreasing"));
    }
    if p.iter().chain(q).any(|x| x < zero) {
        return Err(invalid("p and q must be nonnegative"));
    }
    if a.values.iter().any(|v| v <= zero) || a.probs.iter().any(|v| v < zero) {
        return Err(invalid("multipliers must be positive with nonnegative probabilities"));
    }
    let outcomes = (a.values.len() as u128).checked_pow(p.len() as u32).unwrap_or(u128::MAX);
    if outcomes > budget {
        return Err(Error::EnumerationBudget { outcomes, budget });
    }
    Ok(outcomes)
}

/// Iterates over all index tuples in `0..k` of length `n`.
fn for_each_outcome(n: usize, k: usize, mut f: impl FnMut(&[usize])) {
    let mut idx = vec![0usize; n];
    loop {
        f(&idx);
        let mut pos = 0;
        loop {
            if pos == n {
                return;
            }
            idx[pos] += 1;
            if idx[pos] < k {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }
}

/// Exact expectation of the perturbed inner product, in floating point.
pub fn perturbed_inner_product(
    p: &[f64],
    q: &[f64],
    a: &DiscreteLaw<f64>,
    budget: u128,
) -> Result<InnerProductReport<f64>> {
    let outcomes = check_shapes(p, q, a, &0.0, budget)?;
    if (p.iter().sum::<f64>() - 1.0).abs() > 1e-12 || (a.probs.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
        return Err(invalid("p and the multiplier probabilities must each sum to 1"));
    }
    let mut expectation = 0.0;
    for_each_outcome(p.len(), a.values.len(), |idx| {
        let prob: f64 = idx.iter().map(|&i| a.probs[i]).product();
        if prob == 0.0 {
            return;
        }
        let den: f64 = idx.iter().zip(p).map(|(&i, pn)| a.values[i] * pn).sum();
        let num: f64 = idx.iter().zip(p).zip(q).map(|((&i, pn), qn)| a.values[i] * pn * qn).sum();
        expectation += prob * num / den;
    });
    let baseline: f64 = p.iter().zip(q).map(|(x, y)| x * y).sum();
    let strict = baseline - expectation > 1e-10;
    Ok(InnerProductReport { expectation, baseline, outcomes, strict })
}

/// Exact expectation in rational arithmetic.
pub fn perturbed_inner_product_exact(
    p: &[BigRational],
    q: &[BigRational],
    a: &DiscreteLaw<BigRational>,
    budget: u128,
) -> Result<InnerProductReport<BigRational>> {
    let zero = BigRational::zero();
    let outcomes = check_shapes(p, q, a, &zero, budget)?;
    let one = BigRational::one();
    if p.iter().sum::<BigRational>() != one || a.probs.iter().sum::<BigRational>() != one {
        return Err(invalid("p and the multiplier probabilities must each sum to 1"));
    }
    let mut expectation = BigRational::zero();
    for_each_outcome(p.len(), a.values.len(), |idx| {
        let prob: BigRational = idx.iter().map(|&i| a.probs[i].clone()).product();
        if prob.is_zero() {
            return;
        }
        let den: BigRational = idx.iter().zip(p).map(|(&i, pn)| &a.values[i] * pn).sum();
        let num: BigRational = idx.iter().zip(p).zip(q).map(|((&i, pn), qn)| &a.values[i] * pn * qn).sum();
        expectation += prob * num / den;
    });
    let baseline: BigRational = p.iter().zip(q).map(|(x, y)| x * y).sum();
    let strict = (&baseline - &expectation).is_positive();
    Ok(InnerProductReport { expectation, baseline, outcomes, strict })
}

pub fn rational(num: i64, den: i64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InnerProductMc {
    pub mean: f64,
    pub se: f64,
    pub baseline: f64,
    pub samples: usize,
}

/// Monte Carlo fallback when enumeration is out of budget.
pub fn perturbed_inner_product_mc<R: Rng + ?Sized>(
    p: &[f64],
    q: &[f64],
    a: &DiscreteLaw<f64>,
    samples: usize,
    rng: &mut R,
) -> Result<InnerProductMc> {
    check_shapes(p, q, a, &0.0, u128::MAX)?;
    if samples < 2 {
        return Err(invalid("need at least two samples"));
    }
    let pick = SiteSampler::new(&a.probs);
    let vals: Vec<f64> = (0..samples)
        .map(|_| {
            let m: Vec<f64> = p.iter().map(|_| a.values[pick.sample(rng)]).collect();
            let den: f64 = m.iter().zip(p).map(|(x, y)| x * y).sum();
            m.iter().zip(p).zip(q).map(|((x, y), z)| x * y * z).sum::<f64>() / den
        })
        .collect();
    let s = Summary::of(&vals);
    Ok(InnerProductMc { mean: s.mean, se: s.se, baseline: p.iter().zip(q).map(|(x, y)| x * y).sum(), samples })
}

fn distinct_count(xs: impl Iterator<Item = f64>) -> usize {
    let mut v: Vec<f64> = xs.collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.len()
}

/// Hypotheses of the strict inequality as stated for infinite sequences:
/// non-constant multiplier, non-constant `q`, all `p_n > 0`.
pub fn lemma_hypotheses(p: &[f64], q: &[f64], a: &DiscreteLaw<f64>) -> bool {
    let support = a.values.iter().zip(&a.probs).filter(|(_, &w)| w > 0.0).map(|(v, _)| *v);
    distinct_count(support) > 1 && distinct_count(q.iter().copied()) > 1 && p.iter().all(|&x| x > 0.0)
}

/// Exact condition for strictness with finite sequences: on the positive part
/// of `p`, both `p` and `q` must be non-constant, and the multiplier too.
/// A flat stretch of `p` makes the perturbation exchangeable there.
pub fn strictness_expected(p: &[f64], q: &[f64], a: &DiscreteLaw<f64>) -> bool {
    let support = a.values.iter().zip(&a.probs).filter(|(_, &w)| w > 0.0).map(|(v, _)| *v);
    let pos: Vec<usize> = (0..p.len()).filter(|&i| p[i] > 0.0).collect();
    distinct_count(support) > 1
        && distinct_count(pos.iter().map(|&i| p[i])) > 1
        && distinct_count(pos.iter().map(|&i| q[i])) > 1
}

/// Outcome of the randomized exact suite for the perturbed inner product.
#[derive(Debug, Clone, Serialize)]
pub struct LemmaSuiteReport {
    pub instances: usize,
    /// Instances with `E[sum p~ q] > sum p q`.
    pub violations: usize,
    /// Instances whose strictness disagrees with [`strictness_expected`].
    pub strictness_mismatches: usize,
    pub strict: usize,
    /// Equalities where [`lemma_hypotheses`] holds but `p` is flat on its support.
    pub flat_equalities: usize,
    pub first_mismatch: Option<String>,
}

fn random_weights<R: Rng + ?Sized>(n: usize, max: i64, rng: &mut R) -> Vec<i64> {
    loop {
        let w: Vec<i64> = (0..n).map(|_| rng.random_range(0..=max)).collect();
        if w.iter().any(|&x| x > 0) {
            return w;
        }
    }
}

fn to_f64(x: &BigRational) -> f64 {
    use num_traits::ToPrimitive;
    x.to_f64().unwrap_or(f64::NAN)
}

/// `instances` random small instances (length up to 5, up to 3 multiplier
/// values, ties and zeros included), each enumerated in exact arithmetic.
pub fn lemma_suite(instances: usize, seeds: &SeedSource) -> Result<LemmaSuiteReport> {
    let rows: Vec<Result<(bool, bool, bool, bool, String)>> = (0..instances as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeds.stream("lemma-suite", i);
            let n = rng.random_range(1..=5usize);
            let mut w = random_weights(n, 4, &mut rng);
            w.sort_unstable_by(|a, b| b.cmp(a));
            let total: i64 = w.iter().sum();
            let p: Vec<BigRational> = w.iter().map(|&x| rational(x, total)).collect();
            let mut qi: Vec<i64> = (0..n).map(|_| rng.random_range(0..=3)).collect();
            qi.sort_unstable_by(|a, b| b.cmp(a));
            let q: Vec<BigRational> = qi.iter().map(|&x| rational(x, 1)).collect();
            let k = rng.random_range(1..=3usize);
            let vals: Vec<i64> = (0..k).map(|_| rng.random_range(1..=4)).collect();
            let pw = random_weights(k, 3, &mut rng);
            let ptotal: i64 = pw.iter().sum();
            let a = DiscreteLaw {
                values: vals.iter().map(|&v| rational(v, 1)).collect(),
                probs: pw.iter().map(|&x| rational(x, ptotal)).collect(),
            };
            let r = perturbed_inner_product_exact(&p, &q, &a, ENUMERATION_BUDGET)?;
            let pf: Vec<f64> = p.iter().map(to_f64).collect();
            let qf: Vec<f64> = q.iter().map(to_f64).collect();
            let af = DiscreteLaw {
                values: a.values.iter().map(to_f64).collect(),
                probs: a.probs.iter().map(to_f64).collect(),
            };
            let violation = r.expectation > r.baseline;
            let expected = strictness_expected(&pf, &qf, &af);
            let flat = !r.strict && lemma_hypotheses(&pf, &qf, &af);
            let desc = format!("p={w:?}/{total} q={qi:?} values={vals:?} probs={pw:?}/{ptotal}");
            Ok((violation, r.strict != expected, r.strict, flat, desc))
        })
        .collect();
    let rows: Vec<_> = rows.into_iter().collect::<Result<_>>()?;
    Ok(LemmaSuiteReport {
        instances,
        violations: rows.iter().filter(|r| r.0).count(),
        strictness_mismatches: rows.iter().filter(|r| r.1).count(),
        strict: rows.iter().filter(|r| r.2).count(),
        flat_equalities: rows.iter().filter(|r| r.3).count(),
        first_mismatch: rows.iter().find(|r| r.0 || r.1).map(|r| r.4.clone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_site_random() -> DecorationModel {
        DecorationModel::TwoSite { gaps: vec![0.5, 1.5] }
    }

    #[test]
    fn ppp_mean_count_and_support() {
        assert!((expected_atom_count(0.0) - 0.398_942_280_4).abs() < 1e-9);
        let seeds = SeedSource::new(1);
        let mut counts = Vec::new();
        let mut below = Vec::new();
        for i in 0..40_000 {
            let c = sample_ppp(0.0, &mut seeds.stream("ppp", i)).unwrap();
            assert!(c.atoms.iter().all(|&a| a >= 0.0));
            counts.push(c.len() as f64);
            below.push(f64::from(u8::from(c.max().is_none_or(|m| m <= 0.0))));
        }
        let s = Summary::of(&counts);
        assert!((s.mean - 1.0 / BETA_C).abs() < 4.0 * s.se);
        let deeper: Vec<f64> = (0..40_000)
            .map(|i| {
                let c = sample_ppp(2.0, &mut seeds.stream("ppp2", i)).unwrap();
                assert!(c.atoms.iter().all(|&a| a >= -2.0));
                f64::from(u8::from(c.max().is_none_or(|m| m <= 0.0)))
            })
            .collect();
        let s = Summary::of(&deeper);
        let want = (-1.0 / BETA_C).exp();
        assert!((want - 0.6711).abs() < 1e-4);
        assert!((s.mean - want).abs() < 4.0 * s.se);
        let s0 = Summary::of(&below);
        assert!((s0.mean - want).abs() < 4.0 * s0.se);
    }

    #[test]
    fn truncation_ledger() {
        let b = 2.0 * BETA_C;
        let l = truncation_level(&[b], 1e-4).unwrap();
        assert!((tail_bound(b, l) - 1e-4).abs() < 1e-12);
        assert!(check_truncation(&[b], l, 1e-4).is_ok());
        assert!(matches!(check_truncation(&[b], l - 0.1, 1e-4), Err(Error::TruncationBound { .. })));
        assert!(truncation_level(&[1.0], 1e-4).is_err());
    }

    #[test]
    fn pd_weight_basics() {
        let one = PointConfiguration { level: 1.0, atoms: vec![0.3] };
        assert_eq!(pd_weights(&one, 2.0 * BETA_C).unwrap(), vec![1.0]);
        let empty = PointConfiguration { level: 1.0, atoms: vec![] };
        assert!(matches!(pd_weights(&empty, 2.0 * BETA_C), Err(Error::EmptyConfiguration)));
        let c = sample_ppp(3.0, &mut SeedSource::new(2).stream("pd", 0)).unwrap();
        let w = pd_weights(&c, 2.0 * BETA_C).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.windows(2).all(|p| p[0] >= p[1]));
    }

    #[test]
    fn decoration_examples() {
        let mut rng = SeedSource::new(3).stream("dec", 0);
        for m in [
            DecorationModel::Constant { c: 0.7, radius: 1 },
            two_site_random(),
            DecorationModel::DgffBall(BallParams { r: 2, big_r: 5, burn_in: 20, thin: 1 }),
        ] {
            let f = draw_decoration(&m, &mut rng).unwrap();
            assert_eq!(f.sites[0], (0, 0));
            assert_eq!(f.values[0], 0.0);
            assert!(f.values.iter().all(|&v| v >= 0.0));
        }
        let f = draw_decoration(&DecorationModel::TwoSite { gaps: vec![1.0] }, &mut rng).unwrap();
        assert_eq!(f.values, vec![0.0, 1.0]);
        let bad = DecorationModel::DgffBall(BallParams { r: 9, big_r: 8, burn_in: 1, thin: 1 });
        assert!(draw_decoration(&bad, &mut rng).is_err());
    }

    #[test]
    fn x_beta_examples() {
        assert_eq!(x_beta(&DecorationField::origin_only(), 3.0), 0.0);
        let f = two_site_field(2f64.ln());
        assert!((x_beta(&f, 1.0) - 1.5f64.ln()).abs() < 1e-15);
        let ball = BallSampler::new(BallParams { r: 2, big_r: 6, burn_in: 30, thin: 1 }).unwrap();
        let state = ball.run_chain(&mut SeedSource::new(4).stream("b", 0));
        let d = ball.restrict(&state);
        let mut last = f64::INFINITY;
        for beta in [0.5, 1.0, 2.0, 4.0, 8.0] {
            let x = x_beta(&d, beta);
            assert!(x >= 0.0 && x <= last + 1e-15);
            last = x;
        }
    }

    #[test]
    fn single_atom_q_is_one() {
        let atoms = [(0.4, 0.3, 0.1)];
        assert_eq!(q_value(&atoms, 3.0, 5.0), 1.0);
        assert_eq!(q_infinity_value(&atoms, 3.0), 1.0);
        assert_eq!(q_value(&[(0.4, 0.0, 0.0)], 3.0, 5.0), 1.0);
    }

    #[test]
    fn constant_decoration_cancels_at_infinity() {
        let table = DecorationModel::Constant { c: 0.8, radius: 1 }.table(1, &SeedSource::new(0)).unwrap();
        let params = LimitParams { level: 2.5, epsilon: 1.0, replicates: 200 };
        let est = q_at_infinity(2.0 * BETA_C, &table, params, &SeedSource::new(5)).unwrap();
        assert_eq!(est.values, est.partner);
    }

    proptest! {
        #[test]
        fn q_is_symmetric_in_atom_order(seed in 0u64..1000, perm in 0u64..1000) {
            use rand::seq::SliceRandom;
            let mut rng = SeedSource::new(seed).stream("perm", 0);
            let c = sample_ppp(1.5, &mut rng).unwrap();
            prop_assume!(!c.is_empty());
            let table = two_site_random().table(0, &SeedSource::new(0)).unwrap();
            let (xb, xbp) = (table.xs(6.0), table.xs(8.0));
            let atoms = decorated_atoms(&c, &table, &xb, &xbp, &mut rng);
            let mut shuffled = atoms.clone();
            shuffled.shuffle(&mut SeedSource::new(perm).stream("shuffle", 0));
            prop_assert_eq!(q_value(&atoms, 6.0, 8.0).to_bits(), q_value(&shuffled, 6.0, 8.0).to_bits());
            prop_assert_eq!(q_infinity_value(&atoms, 6.0).to_bits(), q_infinity_value(&shuffled, 6.0).to_bits());
            let v = q_value(&atoms, 6.0, 8.0);
            prop_assert!(v > 0.0 && v <= 1.0);
        }

        #[test]
        fn common_shift_leaves_ratios_unchanged(seed in 0u64..1000, shift in -5i32..5) {
            let mut rng = SeedSource::new(seed).stream("shift", 0);
            let c = sample_ppp(1.5, &mut rng).unwrap();
            prop_assume!(!c.is_empty());
            // dyadic atoms make the shift exact in floating point
            let grid = (1u64 << 30) as f64;
            let c = PointConfiguration { level: c.level, atoms: c.atoms.iter().map(|a| (a * grid).round() / grid).collect() };
            let s = c.shifted(f64::from(shift));
            let bare = |c: &PointConfiguration| c.atoms.iter().map(|&a| (a, 0.0, 0.0)).collect::<Vec<_>>();
            prop_assert_eq!(q_value(&bare(&c), 6.0, 9.0).to_bits(), q_value(&bare(&s), 6.0, 9.0).to_bits());
            prop_assert_eq!(pd_weights(&c, 6.0).unwrap(), pd_weights(&s, 6.0).unwrap());
        }
    }

    #[test]
    fn rem_mean_at_equal_temperatures() {
        let b = 2.0 * BETA_C;
        let level = truncation_level(&[b], 1e-4).unwrap();
        let params = LimitParams { level, epsilon: 1e-4, replicates: 4000 };
        let est = sample_q_rem(b, b, params, &SeedSource::new(6)).unwrap();
        assert!((est.mean - 0.5).abs() < 4.0 * est.se, "{} ± {}", est.mean, est.se);
        assert!(est.values.iter().all(|&v| v > 0.0 && v <= 1.0));
        assert_eq!(est.tail_bounds.len(), 2);
    }

    #[test]
    fn constant_decoration_matches_rem() {
        let (b, bp) = (1.5 * BETA_C, 3.0 * BETA_C);
        let table = DecorationModel::Constant { c: 0.5, radius: 1 }.table(1, &SeedSource::new(0)).unwrap();
        let params = LimitParams { level: 3.0, epsilon: 0.1, replicates: 500 };
        let est = sample_q(b, bp, &table, params, &SeedSource::new(7)).unwrap();
        assert!(est.diff_mean.abs() <= 4.0 * est.diff_se.max(1e-12));
        assert!(est.mean > 0.0 && est.mean < 1.0);
        let gap = theorem2_gap(b, bp, &table, params, &SeedSource::new(7)).unwrap();
        assert!(gap.p_value > 0.01);
    }

    #[test]
    fn shallow_level_is_refused() {
        let table = two_site_random().table(0, &SeedSource::new(0)).unwrap();
        let params = LimitParams { level: 0.5, epsilon: 1e-5, replicates: 10 };
        assert!(matches!(
            sample_q(2.0 * BETA_C, 3.0 * BETA_C, &table, params, &SeedSource::new(8)),
            Err(Error::TruncationBound { .. })
        ));
    }

    #[test]
    fn y_two_point_law() {
        let table = two_site_random().table(0, &SeedSource::new(0)).unwrap();
        let (b, bp) = (1.5 * BETA_C, 3.0 * BETA_C);
        let law = y_law(&table, b, bp);
        let mean: f64 = law.iter().map(|(v, p)| v * p).sum();
        let mut rng = SeedSource::new(9).stream("y", 0);
        let ys = sample_y(&table, b, bp, 20_000, 200_000, &mut rng).unwrap();
        let s = Summary::of(&ys.draws);
        assert!((s.mean - mean).abs() < 4.0 * s.se);
        assert!(s.sd > 0.0);
        let values: Vec<f64> = law.iter().map(|l| l.0).collect();
        assert!(ys.draws.iter().all(|y| values.contains(y)));
        let constant = DecorationModel::Constant { c: 1.0, radius: 1 }.table(1, &SeedSource::new(0)).unwrap();
        let yc = sample_y(&constant, b, bp, 100, 1000, &mut rng).unwrap();
        assert!(yc.draws.iter().all(|&y| y == yc.draws[0]));
    }

    #[test]
    fn lemma_fixture_exact() {
        let p = [rational(2, 3), rational(1, 3)];
        let q = [rational(1, 1), rational(0, 1)];
        let a =
            DiscreteLaw { values: vec![rational(1, 1), rational(2, 1)], probs: vec![rational(1, 2), rational(1, 2)] };
        let r = perturbed_inner_product_exact(&p, &q, &a, ENUMERATION_BUDGET).unwrap();
        assert_eq!(r.expectation, rational(79, 120));
        assert_eq!(r.baseline, rational(2, 3));
        assert!(r.strict);
        assert_eq!(r.outcomes, 4);
    }

    #[test]
    fn lemma_equality_cases() {
        let a = DiscreteLaw { values: vec![1.0, 3.0], probs: vec![0.5, 0.5] };
        let r = perturbed_inner_product(&[1.0], &[0.7], &a, ENUMERATION_BUDGET).unwrap();
        assert!(!r.strict && (r.expectation - r.baseline).abs() < 1e-15);
        let r = perturbed_inner_product(&[0.5, 0.3, 0.2], &[0.4, 0.4, 0.4], &a, ENUMERATION_BUDGET).unwrap();
        assert!(!r.strict);
        // flat p: the perturbation is exchangeable and the inequality is an equality
        let r = perturbed_inner_product(&[0.5, 0.5], &[1.0, 0.0], &a, ENUMERATION_BUDGET).unwrap();
        assert!((r.expectation - r.baseline).abs() < 1e-15);
        assert!(lemma_hypotheses(&[0.5, 0.5], &[1.0, 0.0], &a));
        assert!(!strictness_expected(&[0.5, 0.5], &[1.0, 0.0], &a));
    }

    #[test]
    fn lemma_budget_and_mc() {
        let a = DiscreteLaw { values: vec![1.0, 2.0, 3.0], probs: vec![0.2, 0.3, 0.5] };
        let p = vec![1.0 / 13.0; 13];
        let q: Vec<f64> = (0..13).map(|i| 13.0 - i as f64).collect();
        assert!(matches!(
            perturbed_inner_product(&p, &q, &a, ENUMERATION_BUDGET),
            Err(Error::EnumerationBudget { .. })
        ));
        let p = [0.6, 0.3, 0.1];
        let q = [2.0, 1.0, 0.0];
        let exact = perturbed_inner_product(&p, &q, &a, ENUMERATION_BUDGET).unwrap();
        let mc = perturbed_inner_product_mc(&p, &q, &a, 200_000, &mut SeedSource::new(10).stream("mc", 0)).unwrap();
        assert!((mc.mean - exact.expectation).abs() < 4.0 * mc.se);
    }

    #[test]
    fn ball_sampler_geometry() {
        let s = BallSampler::new(BallParams { r: 2, big_r: 8, burn_in: 0, thin: 1 }).unwrap();
        assert_eq!(s.sites()[0], (0, 0));
        let inner = s.restrict(&s.initial_state());
        assert_eq!(inner.sites.len(), 13);
        assert!(inner.sites.iter().all(|&(x, y)| x * x + y * y <= 4));
        assert_eq!((1..s.sites().len()).filter(|&i| s.is_truncated(i)).count(), 12);
        // drift is harmonic off the origin, so it is a fixed point of the conditional means
        let init = s.initial_state();
        for i in 1..s.sites().len() {
            assert!((s.conditional_mean(&init, i) - init[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn lemma_suite_small() {
        let r = lemma_suite(300, &SeedSource::new(3)).unwrap();
        assert_eq!(r.violations, 0, "{:?}", r.first_mismatch);
        assert_eq!(r.strictness_mismatches, 0, "{:?}", r.first_mismatch);
        assert!(r.strict > 0 && r.strict < 300);
    }

    #[test]
    fn decoration_check_small() {
        let p = BallParams { r: 2, big_r: 6, burn_in: 50, thin: 1 };
        let c = decoration_self_check(p, 2000, 20_000, &SeedSource::new(4)).unwrap();
        assert_eq!(c.per_site.len(), 12);
        assert!(c.sites_pass());
        assert!((c.zero_mean_target - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-15);
        assert!(c.zero_mean_pass(4.0));
    }
}
