//! Dense and banded symmetric factorizations.
//!
//! Matrices are stored row-major in a flat `Vec<f64>`.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Symmetric positive definite band matrix, lower band stored row by row:
/// `band[i * (bw + 1) + (bw - (i - j))] = A[i][j]` for `i - bw <= j <= i`.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    bw: usize,
    band: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, bw: usize) -> Self {
        Self { n, bw, band: vec![0.0; n * (bw + 1)] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bw);
        i * (self.bw + 1) + self.bw - (i - j)
    }

    /// Entry of the lower band, `j <= i`.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j > i || i - j > self.bw {
            0.0
        } else {
            self.band[self.slot(i, j)]
        }
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let s = self.slot(i, j);
        self.band[s] = v;
    }

    /// In-place Cholesky; afterwards the band holds the lower factor `C`.
    pub fn cholesky_in_place(&mut self) -> Result<()> {
        let (n, bw) = (self.n, self.bw);
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            for j in j0..=i {
                let k0 = j0.max(j.saturating_sub(bw));
                let mut s = self.band[self.slot(i, j)];
                for k in k0..j {
                    s -= self.band[self.slot(i, k)] * self.band[self.slot(j, k)];
                }
                if j == i {
                    if !(s > 0.0) {
                        return Err(Error::NotPositiveDefinite { row: i, pivot: s, jitter: 0.0 });
                    }
                    let d = s.sqrt();
                    let slot = self.slot(i, i);
                    self.band[slot] = d;
                } else {
                    let slot = self.slot(i, j);
                    self.band[slot] = s / self.band[self.slot(j, j)];
                }
            }
        }
        Ok(())
    }

    /// Forward substitution `C v = rhs` starting at row `start`; entries of
    /// `rhs` before `start` must be zero.
    pub fn forward_solve_from(&self, v: &mut [f64], start: usize) {
        let bw = self.bw;
        for i in start..self.n {
            let k0 = i.saturating_sub(bw).max(start);
            let mut s = v[i];
            for k in k0..i {
                s -= self.band[self.slot(i, k)] * v[k];
            }
            v[i] = s / self.band[self.slot(i, i)];
        }
    }

    /// Back substitution `C^T v = rhs`, considering only rows `0..=end`.
    pub fn backward_solve_to(&self, v: &mut [f64], end: usize) {
        let bw = self.bw;
        for i in (0..=end).rev() {
            let mut s = v[i];
            let k1 = (i + bw).min(end);
            for k in i + 1..=k1 {
                s -= self.band[self.slot(k, i)] * v[k];
            }
            v[i] = s / self.band[self.slot(i, i)];
        }
    }

    /// Same matrix with indices reversed (`J A J`).
    pub fn reversed(&self) -> BandMatrix {
        let mut out = BandMatrix::zeros(self.n, self.bw);
        let n = self.n;
        for i in 0..n {
            for j in i.saturating_sub(self.bw)..=i {
                // (J A J)[n-1-j][n-1-i] = A[i][j], and symmetry moves it to the lower band
                out.set(n - 1 - j, n - 1 - i, self.get(i, j));
            }
        }
        out
    }
}

/// Inverse of an SPD band matrix given its Cholesky factor, as a dense
/// row-major matrix. Row `j` solves `A g = e_j`.
pub fn band_inverse(factor: &BandMatrix) -> Vec<f64> {
    let n = factor.n();
    let mut out = vec![0.0; n * n];
    out.par_chunks_mut(n.max(1)).enumerate().for_each(|(j, row)| {
        row[j] = 1.0;
        factor.forward_solve_from(row, j);
        factor.backward_solve_to(row, n - 1);
    });
    out
}

/// Lower Cholesky factor of `A^{-1}` from the Cholesky factor `C` of `J A J`.
///
/// With `J A J = C C^T`, `A^{-1} = (J C^{-T} J)(J C^{-T} J)^T` and
/// `J C^{-T} J` is lower triangular with a positive diagonal, hence it is the
/// Cholesky factor. Row `i` of it is column `n-1-i` of `C^{-1}` reversed.
pub fn inverse_cholesky_from_reversed(reversed_factor: &BandMatrix) -> Vec<f64> {
    let n = reversed_factor.n();
    let mut out = vec![0.0; n * n];
    out.par_chunks_mut(n.max(1)).enumerate().for_each(|(i, row)| {
        let r = n - 1 - i;
        let mut v = vec![0.0; n];
        v[r] = 1.0;
        reversed_factor.forward_solve_from(&mut v, r);
        for j in 0..=i {
            row[j] = v[n - 1 - j];
        }
    });
    out
}

/// Outcome of [`dense_cholesky`].
#[derive(Debug, Clone)]
pub struct DenseCholesky {
    pub lower: Vec<f64>,
    pub jitter: f64,
}

/// Cholesky of a dense SPD matrix. On a non-positive pivot the diagonal is
/// shifted once by `jitter` and the factorization restarted.
pub fn dense_cholesky(a: &[f64], n: usize, jitter: f64) -> Result<DenseCholesky> {
    match try_dense_cholesky(a, n, 0.0) {
        Ok(lower) => Ok(DenseCholesky { lower, jitter: 0.0 }),
        Err(_) => {
            let lower = try_dense_cholesky(a, n, jitter).map_err(|e| match e {
                Error::NotPositiveDefinite { row, pivot, .. } => Error::NotPositiveDefinite { row, pivot, jitter },
                other => other,
            })?;
            Ok(DenseCholesky { lower, jitter })
        }
    }
}

fn try_dense_cholesky(a: &[f64], n: usize, shift: f64) -> Result<Vec<f64>> {
    assert_eq!(a.len(), n * n);
    let mut l = vec![0.0f64; n * n];
    // Row-oriented: each entry is a contiguous dot product of two earlier rows.
    for i in 0..n {
        let (done, rest) = l.split_at_mut(i * n);
        let row_i = &mut rest[..n];
        for j in 0..=i {
            let row_j: &[f64] = if j == i { &[] } else { &done[j * n..j * n + j] };
            let s = if j == i {
                let d: f64 = row_i[..i].iter().map(|x| x * x).sum();
                a[i * n + i] + shift - d
            } else {
                let d: f64 = row_i[..j].iter().zip(row_j).map(|(x, y)| x * y).sum();
                a[i * n + j] - d
            };
            if j == i {
                if !(s > 0.0) {
                    return Err(Error::NotPositiveDefinite { row: i, pivot: s, jitter: shift });
                }
                row_i[i] = s.sqrt();
            } else {
                row_i[j] = s / done[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Factor `L` with `L L^T = A` for a small positive semidefinite matrix.
/// Pivots within `tol * max|diag|` of zero are treated as exact zeros.
pub fn psd_factor(a: &[f64], n: usize) -> Result<Vec<f64>> {
    assert_eq!(a.len(), n * n);
    for i in 0..n {
        for j in 0..i {
            let (x, y) = (a[i * n + j], a[j * n + i]);
            if (x - y).abs() > 1e-12 * (1.0 + x.abs().max(y.abs())) {
                return Err(Error::NotPsd { row: i, pivot: f64::NAN });
            }
        }
    }
    let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let tol = 1e-10 * scale;
    let mut l = vec![0.0f64; n * n];
    for j in 0..n {
        let d = a[j * n + j] - (0..j).map(|k| l[j * n + k].powi(2)).sum::<f64>();
        if d < -tol {
            return Err(Error::NotPsd { row: j, pivot: d });
        }
        if d <= tol {
            // zero pivot: the rest of the column must vanish too
            for i in j + 1..n {
                let s = a[i * n + j] - (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum::<f64>();
                if s.abs() > 1e-8 * scale {
                    return Err(Error::NotPsd { row: i, pivot: d });
                }
            }
            continue;
        }
        let dj = d.sqrt();
        l[j * n + j] = dj;
        for i in j + 1..n {
            let s = a[i * n + j] - (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum::<f64>();
            l[i * n + j] = s / dj;
        }
    }
    Ok(l)
}

/// `max |L L^T - A|` for a lower-triangular `L`.
pub fn reconstruction_error(lower: &[f64], a: &[f64], n: usize) -> f64 {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let li = &lower[i * n..i * n + i + 1];
            let mut worst = 0.0f64;
            for j in 0..=i {
                let lj = &lower[j * n..j * n + j + 1];
                let s: f64 = li[..=j].iter().zip(lj).map(|(x, y)| x * y).sum();
                worst = worst.max((s - a[i * n + j]).abs());
            }
            worst
        })
        .reduce(|| 0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tridiag(n: usize) -> (BandMatrix, Vec<f64>) {
        let mut b = BandMatrix::zeros(n, 1);
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            b.set(i, i, 2.5);
            d[i * n + i] = 2.5;
            if i > 0 {
                b.set(i, i - 1, -1.0);
                d[i * n + i - 1] = -1.0;
                d[(i - 1) * n + i] = -1.0;
            }
        }
        (b, d)
    }

    #[test]
    fn band_inverse_is_inverse() {
        let n = 7;
        let (mut b, dense) = tridiag(n);
        b.cholesky_in_place().unwrap();
        let inv = band_inverse(&b);
        for i in 0..n {
            for j in 0..n {
                let s: f64 = (0..n).map(|k| dense[i * n + k] * inv[k * n + j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((s - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reversed_route_matches_dense_cholesky_of_inverse() {
        let n = 9;
        let (b, _) = tridiag(n);
        let mut f = b.clone();
        f.cholesky_in_place().unwrap();
        let inv = band_inverse(&f);
        let dense = dense_cholesky(&inv, n, 0.0).unwrap();
        let mut rev = b.reversed();
        rev.cholesky_in_place().unwrap();
        let fast = inverse_cholesky_from_reversed(&rev);
        for (x, y) in dense.lower.iter().zip(&fast) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn dense_cholesky_jitters_singular_input() {
        // rank-one matrix: second pivot is exactly zero
        let a = [1.0, 1.0, 1.0, 1.0];
        let f = dense_cholesky(&a, 2, 1e-10).unwrap();
        assert_eq!(f.jitter, 1e-10);
        assert!(reconstruction_error(&f.lower, &a, 2) < 1e-9);
        let bad = [1.0, 2.0, 2.0, 1.0];
        assert!(matches!(dense_cholesky(&bad, 2, 1e-10), Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn psd_factor_handles_rank_deficiency() {
        let a = [1.0, 1.0, 1.0, 1.0];
        let l = psd_factor(&a, 2).unwrap();
        assert!(reconstruction_error(&l, &a, 2) < 1e-12);
        assert!(psd_factor(&[1.0, 2.0, 2.0, 1.0], 2).is_err());
        assert!(psd_factor(&[1.0, 0.5, 0.4, 1.0], 2).is_err());
    }
}
