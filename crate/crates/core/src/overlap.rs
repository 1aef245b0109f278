//! Overlap statistics of two Gibbs samples on a finite lattice, the
//! free-energy derivative identity, the near/far dichotomy and a Gaussian
//! integration-by-parts checker.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::fields::{gibbs, log_n2, sample_dgff, sample_rem, FieldModel, FieldSample, SiteSampler};
use crate::greens::{green_and_factor, overlap, CholFactor, GreenMatrix};
use crate::lattice::{build_lattice, DomainSpec, Lattice};
use crate::linalg::psd_factor;
use crate::rng::SeedSource;
use crate::stats::Summary;

/// Thresholds `a` at which `P(q >= a)` is reported.
pub const OVERLAP_GRID: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Largest lattice for which all pairs are summed exactly.
pub const EXACT_SUMMATION_CAP: usize = 200;

/// Lattice, Green matrix and covariance factor shared by all replicas.
#[derive(Debug, Clone)]
pub struct OverlapSetup {
    pub lattice: Arc<Lattice>,
    pub green: GreenMatrix,
    pub chol: CholFactor,
}

impl OverlapSetup {
    pub fn new(spec: DomainSpec, n: u32, dense_cap: usize) -> Result<Self> {
        let lattice = Arc::new(build_lattice(spec, n)?);
        let (green, chol) = green_and_factor(&lattice, dense_cap)?;
        Ok(Self { lattice, green, chol })
    }

    pub fn from_lattice(lattice: Arc<Lattice>, dense_cap: usize) -> Result<Self> {
        let (green, chol) = green_and_factor(&lattice, dense_cap)?;
        Ok(Self { lattice, green, chol })
    }

    fn sample_field<R: Rng + ?Sized>(&self, model: FieldModel, rng: &mut R) -> Result<FieldSample> {
        match model {
            FieldModel::Dgff => Ok(sample_dgff(&self.chol, rng)),
            FieldModel::Rem => sample_rem(&self.lattice, self.green.max_diag(), rng),
        }
    }

    /// Overlap of two sites under the given model.
    pub fn overlap(&self, model: FieldModel, x: usize, y: usize) -> f64 {
        match model {
            FieldModel::Dgff => overlap(&self.green, x, y),
            FieldModel::Rem => f64::from(u8::from(x == y)),
        }
    }
}

/// Draws `u ~ Gibbs(beta)` and `v ~ Gibbs(beta')` given the field and returns `q(u, v)`.
pub fn sample_pair_overlap<R: Rng + ?Sized>(
    field: &FieldSample,
    g: &GreenMatrix,
    beta: f64,
    beta_prime: f64,
    rng: &mut R,
) -> Result<f64> {
    if field.len() != g.len() {
        return Err(invalid("field and Green matrix live on different lattices"));
    }
    let u = gibbs(field, beta)?.sampler().sample(rng);
    let v = gibbs(field, beta_prime)?.sampler().sample(rng);
    Ok(overlap(g, u, v))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlapMode {
    Sampled,
    Exact,
}

/// Per-replica summary: mean overlap and tail probabilities on [`OVERLAP_GRID`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicaOverlap {
    pub seed: u64,
    pub mean: f64,
    pub tail: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OverlapEstimate {
    pub beta: f64,
    pub beta_prime: f64,
    pub model: FieldModel,
    pub mode: OverlapMode,
    pub replicas: usize,
    pub pairs_per_replica: usize,
    pub seed: u64,
    /// Pooled overlap draws (sampled mode only).
    pub draws: Vec<f64>,
    pub grid: Vec<f64>,
    pub tail: Vec<f64>,
    /// Pooled `sd / sqrt(count)`, treating every pair as independent.
    pub tail_se: Vec<f64>,
    /// Standard error across replicas; accounts for pairs sharing a field.
    pub tail_replica_se: Vec<f64>,
    pub mean: f64,
    pub se: f64,
    pub replica_se: f64,
    pub per_replica: Vec<ReplicaOverlap>,
}

impl OverlapEstimate {
    pub fn tail_at(&self, a: f64) -> Option<(f64, f64)> {
        let k = self.grid.iter().position(|&g| (g - a).abs() < 1e-12)?;
        Some((self.tail[k], self.tail_replica_se[k]))
    }
}

fn exact_replica(setup: &OverlapSetup, model: FieldModel, p: &[f64], pp: &[f64]) -> (f64, Vec<f64>) {
    let n = p.len();
    let mut tail = vec![0.0; OVERLAP_GRID.len()];
    let mut mean = 0.0;
    for u in 0..n {
        for v in 0..n {
            let w = p[u] * pp[v];
            let q = setup.overlap(model, u, v);
            mean += w * q;
            for (t, &a) in tail.iter_mut().zip(&OVERLAP_GRID) {
                if q >= a {
                    *t += w;
                }
            }
        }
    }
    (mean, tail)
}

/// Overlap distribution pooled over independent field replicas.
#[allow(clippy::too_many_arguments)]
pub fn overlap_distribution_on(
    setup: &OverlapSetup,
    model: FieldModel,
    beta: f64,
    beta_prime: f64,
    replicas: usize,
    pairs_per_replica: usize,
    mode: OverlapMode,
    seeds: &SeedSource,
) -> Result<OverlapEstimate> {
    if replicas == 0 || (mode == OverlapMode::Sampled && pairs_per_replica == 0) {
        return Err(invalid("overlap estimation needs at least one replica and one pair"));
    }
    if mode == OverlapMode::Exact && setup.lattice.len() > EXACT_SUMMATION_CAP {
        return Err(invalid(format!(
            "exact pair summation is limited to {EXACT_SUMMATION_CAP} sites, lattice has {}",
            setup.lattice.len()
        )));
    }
    let runs: Vec<Result<(ReplicaOverlap, Vec<f64>)>> = (0..replicas as u64)
        .into_par_iter()
        .map(|r| {
            let seed = seeds.stream_id("overlap", r);
            let mut rng = seeds.stream("overlap", r);
            let field = setup.sample_field(model, &mut rng)?;
            let p = gibbs(&field, beta)?.probabilities();
            let pp = gibbs(&field, beta_prime)?.probabilities();
            match mode {
                OverlapMode::Exact => {
                    let (mean, tail) = exact_replica(setup, model, &p, &pp);
                    Ok((ReplicaOverlap { seed, mean, tail }, Vec::new()))
                }
                OverlapMode::Sampled => {
                    let (su, sv) = (SiteSampler::new(&p), SiteSampler::new(&pp));
                    let draws: Vec<f64> = (0..pairs_per_replica)
                        .map(|_| {
                            let u = su.sample(&mut rng);
                            let v = sv.sample(&mut rng);
                            setup.overlap(model, u, v)
                        })
                        .collect();
                    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
                    let tail = OVERLAP_GRID
                        .iter()
                        .map(|&a| draws.iter().filter(|&&q| q >= a).count() as f64 / draws.len() as f64)
                        .collect();
                    Ok((ReplicaOverlap { seed, mean, tail }, draws))
                }
            }
        })
        .collect();
    let mut per_replica = Vec::with_capacity(replicas);
    let mut draws = Vec::new();
    for run in runs {
        let (rep, d) = run?;
        per_replica.push(rep);
        draws.extend(d);
    }
    let means: Vec<f64> = per_replica.iter().map(|r| r.mean).collect();
    let ms = Summary::of(&means);
    let mut tail = Vec::new();
    let mut tail_replica_se = Vec::new();
    let mut tail_se = Vec::new();
    for k in 0..OVERLAP_GRID.len() {
        let col: Vec<f64> = per_replica.iter().map(|r| r.tail[k]).collect();
        let s = Summary::of(&col);
        tail.push(s.mean);
        tail_replica_se.push(s.se);
        if mode == OverlapMode::Sampled {
            let ind: Vec<f64> = draws.iter().map(|&q| f64::from(u8::from(q >= OVERLAP_GRID[k]))).collect();
            tail_se.push(Summary::of(&ind).se);
        } else {
            tail_se.push(s.se);
        }
    }
    let (mean, se) = if mode == OverlapMode::Sampled {
        let s = Summary::of(&draws);
        (s.mean, s.se)
    } else {
        (ms.mean, ms.se)
    };
    Ok(OverlapEstimate {
        beta,
        beta_prime,
        model,
        mode,
        replicas,
        pairs_per_replica,
        seed: seeds.master(),
        draws,
        grid: OVERLAP_GRID.to_vec(),
        tail,
        tail_se,
        tail_replica_se,
        mean,
        se,
        replica_se: ms.se,
        per_replica,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn overlap_distribution(
    spec: DomainSpec,
    n: u32,
    beta: f64,
    beta_prime: f64,
    replicas: usize,
    pairs_per_replica: usize,
    seeds: &SeedSource,
    dense_cap: usize,
) -> Result<OverlapEstimate> {
    let setup = OverlapSetup::new(spec, n, dense_cap)?;
    overlap_distribution_on(
        &setup,
        FieldModel::Dgff,
        beta,
        beta_prime,
        replicas,
        pairs_per_replica,
        OverlapMode::Sampled,
        seeds,
    )
}

/// Both sides of `f_N'(beta) ~ (beta/pi)(1 - E <q>)`.
#[derive(Debug, Clone, Serialize)]
pub struct DerivativeReport {
    pub beta: f64,
    pub delta_beta: f64,
    pub replicas: usize,
    /// Central difference of `f_N` on common fields.
    pub lhs: f64,
    pub lhs_se: f64,
    /// `(beta/pi)(1 - E[mean overlap])`.
    pub rhs: f64,
    pub rhs_se: f64,
    /// Finite-N form `(beta / log N^2) E[sum_x G_xx p_x - sum_xy G_xy p_x p_y]`.
    pub rhs_finite: f64,
    pub mean_overlap: f64,
    pub diff: f64,
    pub combined_se: f64,
    pub diff_finite: f64,
    pub combined_se_finite: f64,
    /// Richardson estimate of the central-difference bias; absent when `beta <= 2 delta_beta`.
    pub fd_bias: Option<f64>,
    /// `rhs_finite - rhs`.
    pub finite_size_bias: f64,
    pub reported_bias: f64,
}

impl DerivativeReport {
    pub fn agrees(&self, k: f64) -> bool {
        self.diff.abs() <= k * self.combined_se + self.reported_bias
    }

    pub fn agrees_finite(&self, k: f64) -> bool {
        self.diff_finite.abs() <= k * self.combined_se_finite + self.fd_bias.unwrap_or(0.0).abs()
    }
}

fn log_z(field: &FieldSample, beta: f64) -> Result<f64> {
    Ok(gibbs(field, beta)?.log_z)
}

pub fn derivative_identity(
    setup: &OverlapSetup,
    beta: f64,
    delta_beta: f64,
    replicas: usize,
    seeds: &SeedSource,
) -> Result<DerivativeReport> {
    if !(delta_beta > 0.0 && beta - delta_beta > 0.0) {
        return Err(invalid(format!(
            "need delta_beta > 0 and beta - delta_beta > 0 (beta={beta}, delta={delta_beta})"
        )));
    }
    if replicas < 2 {
        return Err(invalid("derivative check needs at least two replicas"));
    }
    let scale = setup.lattice.scale();
    if scale < 2 {
        return Err(Error::DegenerateLattice("free energy needs N >= 2".into()));
    }
    let ln2 = log_n2(scale);
    let g = &setup.green;
    let md = g.max_diag();
    let with_richardson = beta > 2.0 * delta_beta;
    let rows: Vec<Result<[f64; 4]>> = (0..replicas as u64)
        .into_par_iter()
        .map(|r| {
            let field = sample_dgff(&setup.chol, &mut seeds.stream("derivative", r));
            let fd =
                |d: f64| -> Result<f64> { Ok((log_z(&field, beta + d)? - log_z(&field, beta - d)?) / (2.0 * d * ln2)) };
            let d1 = fd(delta_beta)?;
            let d2 = if with_richardson { fd(2.0 * delta_beta)? } else { d1 };
            let p = gibbs(&field, beta)?.probabilities();
            let mut quad = 0.0;
            let mut diag = 0.0;
            for x in 0..p.len() {
                diag += g.get(x, x) * p[x];
                quad += p[x] * g.row(x).iter().zip(&p).map(|(a, b)| a * b).sum::<f64>();
            }
            Ok([d1, d2, quad / md, beta / ln2 * (diag - quad)])
        })
        .collect();
    let rows: Vec<[f64; 4]> = rows.into_iter().collect::<Result<_>>()?;
    let col = |k: usize| rows.iter().map(|r| r[k]).collect::<Vec<f64>>();
    let rhs_of = |q: f64| beta / std::f64::consts::PI * (1.0 - q);
    let lhs = Summary::of(&col(0));
    let q = Summary::of(&col(2));
    let rhs_vals: Vec<f64> = col(2).into_iter().map(rhs_of).collect();
    let rhs = Summary::of(&rhs_vals);
    let fin = Summary::of(&col(3));
    let diffs: Vec<f64> = rows.iter().zip(&rhs_vals).map(|(r, s)| r[0] - s).collect();
    let diffs_fin: Vec<f64> = rows.iter().map(|r| r[0] - r[3]).collect();
    let fd_bias = with_richardson.then(|| rows.iter().map(|r| (r[1] - r[0]) / 3.0).sum::<f64>() / rows.len() as f64);
    let finite_size_bias = fin.mean - rhs.mean;
    Ok(DerivativeReport {
        beta,
        delta_beta,
        replicas,
        lhs: lhs.mean,
        lhs_se: lhs.se,
        rhs: rhs.mean,
        rhs_se: rhs.se,
        rhs_finite: fin.mean,
        mean_overlap: q.mean,
        diff: lhs.mean - rhs.mean,
        combined_se: Summary::of(&diffs).se,
        diff_finite: lhs.mean - fin.mean,
        combined_se_finite: Summary::of(&diffs_fin).se,
        fd_bias,
        finite_size_bias,
        reported_bias: fd_bias.unwrap_or(0.0).abs() + finite_size_bias.abs(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NearFar {
    pub r: f64,
    pub fraction: f64,
    pub se: f64,
    pub pairs: usize,
}

fn in_band(lat: &Lattice, u: usize, v: usize, r: f64) -> bool {
    let (a, b) = (lat.site(u), lat.site(v));
    let d = (((a.0 - b.0).pow(2) + (a.1 - b.1).pow(2)) as f64).sqrt();
    r < d && d < f64::from(lat.scale()) / r
}

/// Fraction of Gibbs pairs at intermediate distance `r < |u - v| < N / r`.
#[allow(clippy::too_many_arguments)]
pub fn near_far_mass<R: Rng + ?Sized>(
    field: &FieldSample,
    lat: &Lattice,
    beta: f64,
    beta_prime: f64,
    r: f64,
    pairs: usize,
    rng: &mut R,
) -> Result<NearFar> {
    if r < 1.0 {
        return Err(invalid(format!("band parameter r must be >= 1, got {r}")));
    }
    if pairs == 0 {
        return Err(invalid("near/far estimate needs at least one pair"));
    }
    let su = gibbs(field, beta)?.sampler();
    let sv = gibbs(field, beta_prime)?.sampler();
    let hits: Vec<f64> = (0..pairs)
        .map(|_| {
            let (u, v) = (su.sample(rng), sv.sample(rng));
            f64::from(u8::from(in_band(lat, u, v, r)))
        })
        .collect();
    let s = Summary::of(&hits);
    Ok(NearFar { r, fraction: s.mean, se: s.se, pairs })
}

/// Band probability for two independent uniform sites, by enumeration.
pub fn near_far_uniform_exact(lat: &Lattice, r: f64) -> f64 {
    let n = lat.len();
    let hits: usize = (0..n).into_par_iter().map(|u| (0..n).filter(|&v| in_band(lat, u, v, r)).count()).sum();
    hits as f64 / (n * n) as f64
}

/// Test functions for the integration-by-parts checker.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum TestFunction {
    /// `F(z) = w . z`
    Linear(Vec<f64>),
    /// `F(z) = prod_k z_{i_k}`; repeated indices give powers.
    Product(Vec<usize>),
    /// `F(z) = (1/b) log sum_i exp(b z_i)`, whose gradient is the softmax.
    SoftMax { beta: f64 },
}

impl TestFunction {
    fn check(&self, d: usize) -> Result<()> {
        match self {
            TestFunction::Linear(w) if w.len() != d => {
                Err(invalid(format!("linear weights have length {}, expected {d}", w.len())))
            }
            TestFunction::Product(ix) if ix.iter().any(|&i| i >= d) => Err(invalid("product index out of range")),
            TestFunction::SoftMax { beta } if !(*beta > 0.0) => {
                Err(invalid("softmax needs a positive inverse temperature"))
            }
            _ => Ok(()),
        }
    }

    /// Value and gradient at `z`.
    pub fn eval(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        match self {
            TestFunction::Linear(w) => {
                grad.copy_from_slice(w);
                w.iter().zip(z).map(|(a, b)| a * b).sum()
            }
            TestFunction::Product(ix) => {
                grad.iter_mut().for_each(|g| *g = 0.0);
                for k in 0..ix.len() {
                    let rest: f64 = ix.iter().enumerate().filter(|&(l, _)| l != k).map(|(_, &i)| z[i]).product();
                    grad[ix[k]] += rest;
                }
                ix.iter().map(|&i| z[i]).product()
            }
            TestFunction::SoftMax { beta } => {
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for (g, &x) in grad.iter_mut().zip(z) {
                    *g = (beta * (x - m)).exp();
                    s += *g;
                }
                grad.iter_mut().for_each(|g| *g /= s);
                m + s.ln() / beta
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IbpReport {
    pub lhs: f64,
    pub rhs: f64,
    pub diff: f64,
    pub se: f64,
    pub samples: usize,
}

impl IbpReport {
    /// `|diff| <= k se`, with a rounding floor for functions where the
    /// identity holds draw by draw.
    pub fn within(&self, k: f64) -> bool {
        self.diff.abs() <= k * self.se + 1e-12 * (1.0 + self.lhs.abs())
    }
}

/// `E[X F(Z)]` against `sum_i E[X Z_i] E[d_i F(Z)]` on shared draws.
///
/// `cov` is the `(d+1) x (d+1)` covariance of `(X, Z_1, ..., Z_d)`, row-major.
pub fn gaussian_ibp_check<R: Rng + ?Sized>(
    cov: &[f64],
    f: &TestFunction,
    samples: usize,
    rng: &mut R,
) -> Result<IbpReport> {
    let m = (cov.len() as f64).sqrt().round() as usize;
    if m * m != cov.len() || m < 2 {
        return Err(invalid("covariance must be a square matrix of size at least 2"));
    }
    let d = m - 1;
    if d > 6 {
        return Err(invalid(format!("dimension {d} exceeds the supported maximum of 6")));
    }
    if samples < 2 {
        return Err(invalid("need at least two samples"));
    }
    f.check(d)?;
    let lower = psd_factor(cov, m)?;
    let mut w = vec![0.0; m];
    let mut y = vec![0.0; m];
    let mut grad = vec![0.0; d];
    // per-draw values of X F, X Z_i and d_i F
    let mut xf = Vec::with_capacity(samples);
    let mut xz = vec![Vec::with_capacity(samples); d];
    let mut df = vec![Vec::with_capacity(samples); d];
    for _ in 0..samples {
        for v in w.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for i in 0..m {
            y[i] = (0..=i).map(|j| lower[i * m + j] * w[j]).sum();
        }
        let x = y[0];
        let fv = f.eval(&y[1..], &mut grad);
        xf.push(x * fv);
        for i in 0..d {
            xz[i].push(x * y[i + 1]);
            df[i].push(grad[i]);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let lhs = mean(&xf);
    let a: Vec<f64> = xz.iter().map(|v| mean(v)).collect();
    let b: Vec<f64> = df.iter().map(|v| mean(v)).collect();
    let rhs: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    // delta-method influence of lhs - sum_i a_i b_i
    let psi: Vec<f64> =
        (0..samples).map(|k| xf[k] - (0..d).map(|i| b[i] * xz[i][k] + a[i] * df[i][k]).sum::<f64>()).collect();
    Ok(IbpReport { lhs, rhs, diff: lhs - rhs, se: Summary::of(&psi).se, samples })
}

/// The fixed catalog for dimension `d`: linear, two products, two softmaxes.
pub fn ibp_catalog(d: usize) -> Vec<TestFunction> {
    let w: Vec<f64> = (0..d).map(|i| 1.0 - 0.5 * i as f64).collect();
    let mut out = vec![TestFunction::Linear(w), TestFunction::Product((0..d).collect())];
    if d >= 1 {
        out.push(TestFunction::Product(vec![0, 0]));
    }
    out.push(TestFunction::SoftMax { beta: 1.0 });
    out.push(TestFunction::SoftMax { beta: 3.0 });
    out
}

/// Random `m x m` covariance `A A^T / m` with standard normal `A`, row-major.
pub fn random_covariance<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Vec<f64> {
    let a: Vec<f64> = (0..m * m).map(|_| rng.sample(StandardNormal)).collect();
    let mut c = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            c[i * m + j] = (0..m).map(|k| a[i * m + k] * a[j * m + k]).sum::<f64>() / m as f64;
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::greens::{green_exact, DEFAULT_DENSE_CAP};
    use crate::lattice::interior_mask;

    fn two_site() -> Arc<Lattice> {
        Arc::new(Lattice::from_sites(DomainSpec::UnitSquare, 2, vec![(0, 0), (1, 0)]))
    }

    #[test]
    fn dominant_site_gives_overlap_one() {
        let setup = OverlapSetup::new(DomainSpec::UnitSquare, 8, DEFAULT_DENSE_CAP).unwrap();
        let mut v = vec![0.0; setup.lattice.len()];
        v[12] = 100.0;
        let f = FieldSample::from_values(&setup.lattice, v).unwrap();
        let mut rng = SeedSource::new(1).stream("t", 0);
        for _ in 0..100 {
            assert_eq!(sample_pair_overlap(&f, &setup.green, 1.0, 1.0, &mut rng).unwrap(), 1.0);
        }
    }

    #[test]
    fn uniform_two_site_pairs() {
        let lat = two_site();
        let g = green_exact(&lat, DEFAULT_DENSE_CAP).unwrap();
        let f = FieldSample::from_values(&lat, vec![0.3, -1.0]).unwrap();
        let mut rng = SeedSource::new(2).stream("t", 0);
        let draws: Vec<f64> = (0..20_000).map(|_| sample_pair_overlap(&f, &g, 0.0, 0.0, &mut rng).unwrap()).collect();
        assert!(draws.iter().all(|&q| (q - 1.0).abs() < 1e-12 || (q - 0.25).abs() < 1e-12));
        let ones: Vec<f64> = draws.iter().map(|&q| f64::from(u8::from(q > 0.5))).collect();
        let s = Summary::of(&ones);
        assert!((s.mean - 0.5).abs() < 4.0 * s.se);
    }

    #[test]
    fn single_site_overlap_is_one() {
        let setup = OverlapSetup::new(DomainSpec::UnitSquare, 4, DEFAULT_DENSE_CAP).unwrap();
        let est = overlap_distribution_on(
            &setup,
            FieldModel::Dgff,
            1.0,
            3.0,
            5,
            10,
            OverlapMode::Sampled,
            &SeedSource::new(3),
        )
        .unwrap();
        assert!(est.draws.iter().all(|&q| q == 1.0));
        assert!(est.tail.iter().all(|&t| t == 1.0));
    }

    #[test]
    fn infinite_temperature_tail_matches_overlap_table() {
        let setup = OverlapSetup::new(DomainSpec::UnitSquare, 16, DEFAULT_DENSE_CAP).unwrap();
        let n = setup.lattice.len();
        // exact answer for uniform pairs from the overlap table
        let mut want = 0.0;
        for u in 0..n {
            for v in 0..n {
                if overlap(&setup.green, u, v) >= 0.9 {
                    want += 1.0;
                }
            }
        }
        want /= (n * n) as f64;
        let est = overlap_distribution_on(
            &setup,
            FieldModel::Dgff,
            0.0,
            0.0,
            20,
            5000,
            OverlapMode::Sampled,
            &SeedSource::new(4),
        )
        .unwrap();
        let (t, _) = est.tail_at(0.9).unwrap();
        let se = est.tail_se[8];
        assert!((t - want).abs() <= 4.0 * se, "{t} vs {want} (se {se})");
        let exact =
            overlap_distribution_on(&setup, FieldModel::Dgff, 0.0, 0.0, 1, 0, OverlapMode::Exact, &SeedSource::new(4))
                .unwrap();
        assert!((exact.tail[8] - want).abs() < 1e-12);
        // overlap >= 0.9 only on the diagonal away from the boundary, so the
        // uniform value sits at or below the naive 1/|sites| guess
        assert!(want <= 1.0 / n as f64 + 1e-12);
    }

    #[test]
    fn rem_overlap_table_is_identity() {
        let setup = OverlapSetup::new(DomainSpec::UnitSquare, 8, DEFAULT_DENSE_CAP).unwrap();
        for u in 0..setup.lattice.len() {
            for v in 0..setup.lattice.len() {
                assert_eq!(setup.overlap(FieldModel::Rem, u, v), f64::from(u8::from(u == v)));
            }
        }
    }

    #[test]
    fn sampled_and_exact_modes_agree() {
        let setup = OverlapSetup::new(DomainSpec::UnitSquare, 12, DEFAULT_DENSE_CAP).unwrap();
        let s = SeedSource::new(5);
        let a =
            overlap_distribution_on(&setup, FieldModel::Dgff, 1.0, 4.0, 10, 20_000, OverlapMode::Sampled, &s).unwrap();
        let b = overlap_distribution_on(&setup, FieldModel::Dgff, 1.0, 4.0, 10, 0, OverlapMode::Exact, &s).unwrap();
        for r in 0..10 {
            assert!((a.per_replica[r].mean - b.per_replica[r].mean).abs() < 0.02);
        }
        let big = OverlapSetup::new(DomainSpec::UnitSquare, 32, DEFAULT_DENSE_CAP).unwrap();
        assert!(overlap_distribution_on(&big, FieldModel::Dgff, 1.0, 1.0, 1, 0, OverlapMode::Exact, &s).is_err());
    }

    #[test]
    fn se_shrinks_with_count() {
        let setup = OverlapSetup::new(DomainSpec::UnitSquare, 8, DEFAULT_DENSE_CAP).unwrap();
        let s = SeedSource::new(6);
        let a = overlap_distribution_on(&setup, FieldModel::Dgff, 0.0, 0.0, 4, 2500, OverlapMode::Sampled, &s).unwrap();
        let b =
            overlap_distribution_on(&setup, FieldModel::Dgff, 0.0, 0.0, 16, 2500, OverlapMode::Sampled, &s).unwrap();
        let ratio = a.se / b.se;
        assert!((ratio - 2.0).abs() < 0.2, "{ratio}");
        assert!(a.draws.iter().all(|&q| (0.0..=1.0).contains(&q)));
    }

    #[test]
    fn single_site_derivative_rhs_vanishes() {
        let setup = OverlapSetup::new(DomainSpec::UnitSquare, 4, DEFAULT_DENSE_CAP).unwrap();
        let rep = derivative_identity(&setup, 1.0, 0.05, 10, &SeedSource::new(7)).unwrap();
        assert_eq!(rep.rhs, 0.0);
        assert_eq!(rep.mean_overlap, 1.0);
        assert!(derivative_identity(&setup, 0.04, 0.05, 10, &SeedSource::new(7)).is_err());
    }

    #[test]
    fn derivative_identity_small_lattice() {
        // ten sites: the finite-N identity is exact up to the difference step
        let sites: Vec<_> = (0..5).flat_map(|x| (0..2).map(move |y| (x, y))).collect();
        let lat = Arc::new(Lattice::from_sites(DomainSpec::UnitSquare, 4, sites));
        let setup = OverlapSetup::from_lattice(lat, DEFAULT_DENSE_CAP).unwrap();
        let rep = derivative_identity(&setup, crate::BETA_C / 2.0, 0.05, 20_000, &SeedSource::new(8)).unwrap();
        assert!(rep.agrees_finite(4.0), "{rep:?}");
    }

    #[test]
    fn near_far_uniform_matches_enumeration() {
        let lat = Arc::new(build_lattice(DomainSpec::UnitSquare, 32).unwrap());
        let exact = near_far_uniform_exact(&lat, 2.0);
        let f = FieldSample::from_values(&lat, vec![0.0; lat.len()]).unwrap();
        let mut rng = SeedSource::new(9).stream("nf", 0);
        let est = near_far_mass(&f, &lat, 0.0, 0.0, 2.0, 50_000, &mut rng).unwrap();
        assert!((est.fraction - exact).abs() < 4.0 * est.se);
        let none = near_far_mass(&f, &lat, 0.0, 0.0, 32.0, 1000, &mut rng).unwrap();
        assert_eq!(none.fraction, 0.0);
        assert_eq!(near_far_uniform_exact(&lat, 40.0), 0.0);
    }

    #[test]
    fn supercritical_pairs_avoid_the_band() {
        let setup = OverlapSetup::new(DomainSpec::UnitSquare, 64, DEFAULT_DENSE_CAP).unwrap();
        let seeds = SeedSource::new(10);
        let b = 2.0 * crate::BETA_C;
        let band = |r: f64| {
            let fr: Vec<f64> = (0..400)
                .map(|k| {
                    let mut rng = seeds.stream("nf", k);
                    let f = sample_dgff(&setup.chol, &mut rng);
                    near_far_mass(&f, &setup.lattice, b, b, r, 500, &mut rng).unwrap().fraction
                })
                .collect();
            Summary::of(&fr)
        };
        // at N = 64 the effect is small for r = 4 and clear for r = 2
        let s4 = band(4.0);
        assert!(s4.mean < near_far_uniform_exact(&setup.lattice, 4.0), "{s4:?}");
        let s2 = band(2.0);
        assert!(s2.mean + 4.0 * s2.se < near_far_uniform_exact(&setup.lattice, 2.0), "{s2:?}");
    }

    #[test]
    fn interior_overlap_is_bounded() {
        let setup = OverlapSetup::new(DomainSpec::UnitSquare, 16, DEFAULT_DENSE_CAP).unwrap();
        let m = interior_mask(&setup.lattice, 0.1).unwrap();
        for x in m.iter() {
            for y in m.iter() {
                let q = overlap(&setup.green, x, y);
                assert!((0.0..=1.0 + 1e-12).contains(&q));
            }
        }
    }

    #[test]
    fn ibp_identity_cases() {
        let mut rng = SeedSource::new(11).stream("ibp", 0);
        let lin = gaussian_ibp_check(&[1.0, 0.6, 0.6, 2.0], &TestFunction::Linear(vec![1.0]), 1000, &mut rng).unwrap();
        assert!(lin.diff.abs() < 1e-12);
        let sq =
            gaussian_ibp_check(&[1.0, 1.0, 1.0, 1.0], &TestFunction::Product(vec![0, 0]), 100_000, &mut rng).unwrap();
        assert!(sq.lhs.abs() < 4.0 * 4.0 / (100_000f64).sqrt());
        assert!(sq.within(4.0));
        let bad = gaussian_ibp_check(&[1.0, 2.0, 2.0, 1.0], &TestFunction::Linear(vec![1.0]), 10, &mut rng);
        assert!(bad.is_err());
    }

    #[test]
    fn softmax_gradient_matches_difference() {
        let f = TestFunction::SoftMax { beta: 1.7 };
        let z = [0.3, -1.2, 0.9];
        let mut g = [0.0; 3];
        let v = f.eval(&z, &mut g);
        let mut scratch = [0.0; 3];
        for i in 0..3 {
            let mut zp = z;
            zp[i] += 1e-6;
            let num = (f.eval(&zp, &mut scratch) - v) / 1e-6;
            assert!((num - g[i]).abs() < 1e-5);
        }
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let p = TestFunction::Product(vec![0, 2, 2]);
        let v = p.eval(&z, &mut g);
        assert!((v - 0.3 * 0.81).abs() < 1e-15);
        assert!((g[2] - 2.0 * 0.3 * 0.9).abs() < 1e-15 && g[1] == 0.0);
    }

    #[test]
    fn catalog_on_random_covariances() {
        let mut rng = SeedSource::new(12).stream("ibp-cat", 0);
        let cov = random_covariance(4, &mut rng);
        assert_eq!(cov[1], cov[4]);
        for f in ibp_catalog(3) {
            let r = gaussian_ibp_check(&cov, &f, 50_000, &mut rng).unwrap();
            assert!(r.within(4.0), "{f:?}: {r:?}");
        }
    }
}
