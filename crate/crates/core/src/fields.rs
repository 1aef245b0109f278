//! Field sampling, Gibbs measures, free energy, high points and extremal
//! statistics on a finite lattice.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::greens::CholFactor;
use crate::lattice::Lattice;
use crate::stats::log_sum_exp;
use crate::G;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldModel {
    Dgff,
    Rem,
}

/// One realisation of the field, indexed like the lattice sites.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSample {
    pub values: Vec<f64>,
    pub model: FieldModel,
    pub seed: Option<u64>,
    pub lattice_id: String,
    pub scale: u32,
}

impl FieldSample {
    /// A field given directly by its values (fixtures, tests).
    pub fn from_values(lat: &Lattice, values: Vec<f64>) -> Result<Self> {
        if values.len() != lat.len() {
            return Err(invalid(format!("{} values for {} sites", values.len(), lat.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("field values must be finite"));
        }
        Ok(Self { values, model: FieldModel::Dgff, seed: None, lattice_id: lat.id(), scale: lat.scale() })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Smallest index attaining the maximum.
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, &v) in self.values.iter().enumerate() {
            if best.is_none_or(|b| v > self.values[b]) {
                best = Some(i);
            }
        }
        best
    }

    pub fn write_csv<W: Write>(&self, lat: &Lattice, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# schema=1")?;
        writeln!(w, "index,x,y,h")?;
        for (i, v) in self.values.iter().enumerate() {
            let (x, y) = lat.site(i);
            writeln!(w, "{i},{x},{y},{v}")?;
        }
        Ok(())
    }
}

/// `h = L z` with `z` i.i.d. standard normal.
pub fn sample_dgff<R: Rng + ?Sized>(chol: &CholFactor, rng: &mut R) -> FieldSample {
    let n = chol.len();
    let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let values = (0..n).map(|i| chol.row(i).iter().zip(&z).map(|(l, z)| l * z).sum()).collect();
    let lat = chol.lattice();
    FieldSample { values, model: FieldModel::Dgff, seed: None, lattice_id: lat.id(), scale: lat.scale() }
}

/// I.i.d. centred Gaussians with variance `max_diag`.
pub fn sample_rem<R: Rng + ?Sized>(lat: &Lattice, max_diag: f64, rng: &mut R) -> Result<FieldSample> {
    if !(max_diag > 0.0 && max_diag.is_finite()) {
        return Err(invalid(format!("REM variance must be positive, got {max_diag}")));
    }
    let d = Normal::new(0.0, max_diag.sqrt()).map_err(|e| invalid(e.to_string()))?;
    let values = (0..lat.len()).map(|_| d.sample(rng)).collect();
    Ok(FieldSample { values, model: FieldModel::Rem, seed: None, lattice_id: lat.id(), scale: lat.scale() })
}

/// Gibbs measure `exp(beta h_x) / Z`.
#[derive(Debug, Clone)]
pub struct GibbsWeights {
    pub beta: f64,
    pub log_weights: Vec<f64>,
    pub log_z: f64,
}

impl GibbsWeights {
    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn prob(&self, i: usize) -> f64 {
        (self.log_weights[i] - self.log_z).exp()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| (w - self.log_z).exp()).collect()
    }

    pub fn sampler(&self) -> SiteSampler {
        SiteSampler::new(&self.probabilities())
    }
}

pub fn gibbs(field: &FieldSample, beta: f64) -> Result<GibbsWeights> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(invalid(format!("inverse temperature must be >= 0, got {beta}")));
    }
    if field.is_empty() {
        return Err(Error::DegenerateLattice("Gibbs measure on an empty lattice".into()));
    }
    let log_weights: Vec<f64> = field.values.iter().map(|h| beta * h).collect();
    let log_z = log_sum_exp(log_weights.iter().copied());
    Ok(GibbsWeights { beta, log_weights, log_z })
}

/// Inverse-CDF sampling of a site from a probability vector.
#[derive(Debug, Clone)]
pub struct SiteSampler {
    cumulative: Vec<f64>,
}

impl SiteSampler {
    pub fn new(probs: &[f64]) -> Self {
        let mut acc = 0.0;
        let mut cumulative: Vec<f64> = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        if let Some(last) = cumulative.last_mut() {
            let total = *last;
            for c in cumulative.iter_mut() {
                *c /= total;
            }
        }
        Self { cumulative }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        self.cumulative.partition_point(|&c| c <= u).min(self.cumulative.len() - 1)
    }
}

/// `f_N(beta) = log Z / log N^2`.
pub fn free_energy(field: &FieldSample, beta: f64) -> Result<f64> {
    if field.len() < 2 || field.scale < 2 {
        return Err(Error::DegenerateLattice(format!(
            "free energy needs at least two sites and N >= 2 (got {} sites, N = {})",
            field.len(),
            field.scale
        )));
    }
    Ok(gibbs(field, beta)?.log_z / log_n2(field.scale))
}

pub fn log_n2(n: u32) -> f64 {
    2.0 * f64::from(n).ln()
}

/// Limit of the free energy: `1 + (beta/beta_c)^2` below criticality, `2 beta/beta_c` above.
pub fn free_energy_limit(beta: f64) -> f64 {
    let r = beta / crate::BETA_C;
    if r <= 1.0 {
        1.0 + r * r
    } else {
        2.0 * r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HighPoints {
    pub lambda: f64,
    pub threshold: f64,
    pub count: usize,
    /// `log(count) / log N^2`, `-inf` when nothing exceeds the threshold.
    pub exponent: f64,
}

/// Sites with `h_x >= lambda sqrt(g) log N^2`.
pub fn high_points(field: &FieldSample, lambda: f64) -> Result<HighPoints> {
    if field.is_empty() {
        return Err(Error::DegenerateLattice("high points of an empty lattice".into()));
    }
    let threshold = lambda * G.sqrt() * log_n2(field.scale);
    let count = field.values.iter().filter(|&&h| h >= threshold).count();
    let exponent = if count == 0 { f64::NEG_INFINITY } else { (count as f64).ln() / log_n2(field.scale) };
    Ok(HighPoints { lambda, threshold, count, exponent })
}

/// Centring of the maximum, `2 sqrt(g) log N - (3/4) sqrt(g) log log N`.
pub fn max_centering(n: u32) -> f64 {
    let ln = f64::from(n).ln();
    2.0 * G.sqrt() * ln - 0.75 * G.sqrt() * ln.ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtremalStats {
    pub max: f64,
    pub centering: f64,
    pub recentered_max: f64,
    /// Lattice indices of the `r`-local maxima, in site order.
    pub local_maxima: Vec<usize>,
}

/// Recentred maximum and the `r`-local maxima (Euclidean balls, ties go to
/// the lexicographically smallest site).
pub fn extremal_stats(field: &FieldSample, lat: &Lattice, r: u32) -> Result<ExtremalStats> {
    if field.len() != lat.len() {
        return Err(invalid("field and lattice sizes differ"));
    }
    let Some(arg) = field.argmax() else {
        return Err(Error::DegenerateLattice("extremal statistics of an empty lattice".into()));
    };
    let h = &field.values;
    let local_maxima = if f64::from(r) >= lat.diameter() {
        vec![arg]
    } else {
        let ri = i64::from(r);
        let offsets: Vec<(i64, i64)> = (-ri..=ri)
            .flat_map(|dx| (-ri..=ri).map(move |dy| (dx, dy)))
            .filter(|&(dx, dy)| dx * dx + dy * dy <= ri * ri && (dx, dy) != (0, 0))
            .collect();
        (0..lat.len())
            .filter(|&x| {
                let (sx, sy) = lat.site(x);
                offsets.iter().all(|&(dx, dy)| match lat.index_of((sx + dx, sy + dy)) {
                    Some(y) => h[y] < h[x] || (h[y] == h[x] && y > x),
                    None => true,
                })
            })
            .collect()
    };
    let max = h[arg];
    let centering = max_centering(field.scale);
    Ok(ExtremalStats { max, centering, recentered_max: max - centering, local_maxima })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::greens::{green_and_factor, DEFAULT_DENSE_CAP};
    use crate::lattice::{build_lattice, DomainSpec};
    use crate::rng::SeedSource;
    use crate::stats::Summary;
    use std::sync::Arc;

    fn square(n: u32) -> Arc<Lattice> {
        Arc::new(build_lattice(DomainSpec::UnitSquare, n).unwrap())
    }

    fn two_site() -> Arc<Lattice> {
        Arc::new(Lattice::from_sites(DomainSpec::UnitSquare, 2, vec![(0, 0), (1, 0)]))
    }

    #[test]
    fn single_site_unit_variance() {
        let (_, c) = green_and_factor(&square(4), DEFAULT_DENSE_CAP).unwrap();
        let mut rng = SeedSource::new(11).stream("f", 0);
        let xs: Vec<f64> = (0..100_000).map(|_| sample_dgff(&c, &mut rng).values[0]).collect();
        let sq: Vec<f64> = xs.iter().map(|x| x * x).collect();
        let s = Summary::of(&sq);
        assert!((s.mean - 1.0).abs() < 3.0 * s.se);
        let m = Summary::of(&xs);
        assert!(m.mean.abs() < 4.0 * m.se);
    }

    #[test]
    fn two_site_covariance() {
        let (g, c) = green_and_factor(&two_site(), DEFAULT_DENSE_CAP).unwrap();
        let mut rng = SeedSource::new(12).stream("f", 0);
        let draws: Vec<Vec<f64>> = (0..100_000).map(|_| sample_dgff(&c, &mut rng).values).collect();
        for i in 0..2 {
            for j in 0..2 {
                let prods: Vec<f64> = draws.iter().map(|h| h[i] * h[j]).collect();
                let s = Summary::of(&prods);
                assert!((s.mean - g.get(i, j)).abs() < 4.0 * s.se, "{i}{j}");
            }
        }
    }

    #[test]
    fn rem_variance_and_independence() {
        let lat = square(8);
        let mut rng = SeedSource::new(13).stream("rem", 0);
        let draws: Vec<Vec<f64>> = (0..100_000).map(|_| sample_rem(&lat, 2.5, &mut rng).unwrap().values).collect();
        let sq: Vec<f64> = draws.iter().map(|h| h[3] * h[3]).collect();
        let s = Summary::of(&sq);
        assert!((s.mean - 2.5).abs() < 3.0 * s.se);
        let cross: Vec<f64> = draws.iter().map(|h| h[3] * h[7]).collect();
        let s = Summary::of(&cross);
        assert!(s.mean.abs() < 4.0 * s.se);
        assert!(sample_rem(&lat, 0.0, &mut rng).is_err());
    }

    #[test]
    fn gibbs_examples() {
        let lat = two_site();
        let f = FieldSample::from_values(&lat, vec![0.0, 2f64.ln() / 1.5]).unwrap();
        let w = gibbs(&f, 1.5).unwrap();
        let p = w.probabilities();
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-15 && (p[1] - 2.0 / 3.0).abs() < 1e-15);
        let u = gibbs(&f, 0.0).unwrap().probabilities();
        assert_eq!(u, vec![0.5, 0.5]);
        let big = square(8);
        let mut v = vec![0.0; big.len()];
        v[7] = 100.0;
        let f = FieldSample::from_values(&big, v).unwrap();
        let p = gibbs(&f, 1.0).unwrap().prob(7);
        assert!(p >= 1.0 - big.len() as f64 * (-100f64).exp());
    }

    #[test]
    fn gibbs_normalised_and_concentrating() {
        let lat = square(16);
        let (_, c) = green_and_factor(&lat, DEFAULT_DENSE_CAP).unwrap();
        let seeds = SeedSource::new(14);
        let bc = crate::BETA_C;
        for k in 0..5 {
            let f = sample_dgff(&c, &mut seeds.stream("field", k));
            let arg = f.argmax().unwrap();
            let mut last = 0.0;
            for beta in [0.0, 0.5, 1.0, bc, 2.0 * bc, 4.0 * bc] {
                let w = gibbs(&f, beta).unwrap();
                let total: f64 = w.probabilities().iter().sum();
                assert!((total - 1.0).abs() < 1e-12);
                let m = w.prob(arg);
                assert!(m >= last);
                last = m;
                let fe = free_energy(&f, beta).unwrap();
                let l = log_n2(16);
                let lo = beta * f.max() / l;
                let hi = (beta * f.max() + (lat.len() as f64).ln()) / l;
                assert!(fe >= lo - 1e-12 && fe <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn free_energy_flat_and_degenerate() {
        let lat = square(8);
        let f = FieldSample::from_values(&lat, vec![0.0; 25]).unwrap();
        assert!((free_energy(&f, 1.3).unwrap() - 25f64.ln() / 64f64.ln()).abs() < 1e-14);
        let one = square(4);
        let f = FieldSample::from_values(&one, vec![0.3]).unwrap();
        assert!(matches!(free_energy(&f, 1.0), Err(Error::DegenerateLattice(_))));
        assert_eq!(free_energy_limit(crate::BETA_C / 2.0), 1.25);
        assert_eq!(free_energy_limit(2.0 * crate::BETA_C), 4.0);
    }

    #[test]
    fn high_point_threshold() {
        let lat = square(8);
        let f = FieldSample::from_values(&lat, vec![1.0; 25]).unwrap();
        let hp = high_points(&f, 0.0).unwrap();
        assert_eq!(hp.count, 25);
        assert!((hp.exponent - 25f64.ln() / 64f64.ln()).abs() < 1e-14);
        let none = high_points(&f, 0.9).unwrap();
        assert_eq!(none.count, 0);
        assert_eq!(none.exponent, f64::NEG_INFINITY);
    }

    #[test]
    fn extremal_examples() {
        assert!((max_centering(128) - 6.80).abs() < 5e-3);
        let lat = square(16);
        let (_, c) = green_and_factor(&lat, DEFAULT_DENSE_CAP).unwrap();
        let f = sample_dgff(&c, &mut SeedSource::new(15).stream("x", 0));
        let all = extremal_stats(&f, &lat, 0).unwrap();
        assert_eq!(all.local_maxima.len(), lat.len());
        let top = extremal_stats(&f, &lat, 100).unwrap();
        assert_eq!(top.local_maxima, vec![f.argmax().unwrap()]);
        let mid = extremal_stats(&f, &lat, 3).unwrap();
        assert!(mid.local_maxima.contains(&f.argmax().unwrap()));
        assert!(mid.local_maxima.len() < lat.len());
        // ties: only the smallest site of a flat field survives within reach
        let flat = FieldSample::from_values(&lat, vec![0.0; lat.len()]).unwrap();
        let t = extremal_stats(&flat, &lat, 100).unwrap();
        assert_eq!(t.local_maxima, vec![0]);
    }

    #[test]
    fn sampling_is_reproducible() {
        let (_, c) = green_and_factor(&square(8), DEFAULT_DENSE_CAP).unwrap();
        let s = SeedSource::new(99);
        let a = sample_dgff(&c, &mut s.stream("field", 3));
        let b = sample_dgff(&c, &mut s.stream("field", 3));
        assert_eq!(a, b);
    }
}
