//! Sparse storage and the two linear solvers used by the forward model.

use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CsrPattern {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
}

impl CsrPattern {
    /// Builds the pattern from (row, col) pairs; duplicates are merged.
    pub fn from_pairs(n: usize, mut pairs: Vec<(usize, usize)>) -> Self {
        pairs.sort_unstable();
        pairs.dedup();
        let mut row_ptr = vec![0; n + 1];
        for &(r, _) in &pairs {
            row_ptr[r + 1] += 1;
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self {
            n,
            row_ptr,
            cols: pairs.into_iter().map(|(_, c)| c).collect(),
        }
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// Storage slot of `(row, col)`.
    pub fn slot(&self, row: usize, col: usize) -> Option<usize> {
        let (a, b) = (self.row_ptr[row], self.row_ptr[row + 1]);
        self.cols[a..b].binary_search(&col).ok().map(|k| a + k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub pattern: Arc<CsrPattern>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    pub fn n(&self) -> usize {
        self.pattern.n
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.pattern.row_ptr[i], self.pattern.row_ptr[i + 1]);
        (&self.pattern.cols[a..b], &self.values[a..b])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.pattern.slot(i, j).map_or(0.0, |s| self.values[s])
    }

    pub fn row_dot(&self, i: usize, x: &[f64]) -> f64 {
        let (cols, vals) = self.row(i);
        cols.iter().zip(vals).map(|(&c, &v)| v * x[c]).sum()
    }

    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.row_dot(i, x);
        }
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.row(i).1.iter().sum()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n()).map(|i| self.get(i, i)).collect()
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Cholesky factor `L` of a symmetric positive-definite band matrix.
///
/// Row `i` stores columns `i − bw ..= i` at offsets `0 ..= bw`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandCholesky {
    n: usize,
    bw: usize,
    l: Vec<f64>,
}

impl BandCholesky {
    /// Factors the matrix whose lower band is supplied by `fill(row, col, value)` callbacks.
    pub fn factor(n: usize, bw: usize, fill: impl FnOnce(&mut dyn FnMut(usize, usize, f64))) -> Result<Self> {
        let w = bw + 1;
        let mut l = vec![0.0; n * w];
        fill(&mut |i, j, v| {
            debug_assert!(j <= i && i - j <= bw);
            l[i * w + (j + bw - i)] += v;
        });
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            for j in j0..=i {
                let len = j - j0;
                let ri = i * w + (j0 + bw - i);
                let rj = j * w + (j0 + bw - j);
                let s = l[i * w + (j + bw - i)] - dot(&l[ri..ri + len], &l[rj..rj + len]);
                if i == j {
                    if s <= 0.0 || !s.is_finite() {
                        return Err(Error::NumericFailure {
                            message: format!("stiffness matrix not positive definite at row {i}"),
                            residual: s,
                        });
                    }
                    l[i * w + bw] = s.sqrt();
                } else {
                    l[i * w + (j + bw - i)] = s / l[j * w + bw];
                }
            }
        }
        Ok(Self { n, bw, l })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    /// Solves `A x = b` for several right-hand sides at once, in place.
    pub fn solve_many(&self, rhs: &mut [Vec<f64>]) {
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            let row = &self.l[i * w + (j0 + bw - i)..i * w + bw];
            let d = self.l[i * w + bw];
            for b in rhs.iter_mut() {
                b[i] = (b[i] - dot(row, &b[j0..i])) / d;
            }
        }
        for i in (0..n).rev() {
            let j0 = i.saturating_sub(bw);
            let row = &self.l[i * w + (j0 + bw - i)..i * w + bw];
            let d = self.l[i * w + bw];
            for b in rhs.iter_mut() {
                let xi = b[i] / d;
                b[i] = xi;
                for (y, &lv) in b[j0..i].iter_mut().zip(row) {
                    *y -= lv * xi;
                }
            }
        }
    }

    pub fn solve(&self, b: &mut Vec<f64>) {
        self.solve_many(std::slice::from_mut(b));
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgStats {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Jacobi-preconditioned conjugate gradients from a zero initial guess, until
/// `‖r‖ ≤ tol·‖b‖`.
pub fn pcg(a: &CsrMatrix, b: &[f64], tol: f64, max_iter: usize) -> Result<(Vec<f64>, CgStats)> {
    let n = a.n();
    let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok((
            x,
            CgStats {
                iterations: 0,
                relative_residual: 0.0,
            },
        ));
    }
    let inv_diag: Vec<f64> = a.diagonal().iter().map(|&d| 1.0 / d).collect();
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, b)| a * b).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut rel = 1.0;
    for it in 1..=max_iter {
        a.mul_vec(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 {
            return Err(Error::NumericFailure {
                message: "conjugate gradients met a non-positive curvature direction".into(),
                residual: rel,
            });
        }
        let alpha = rz / pap;
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        rel = r.iter().map(|v| v * v).sum::<f64>().sqrt() / bnorm;
        if rel <= tol {
            return Ok((
                x,
                CgStats {
                    iterations: it,
                    relative_residual: rel,
                },
            ));
        }
        for k in 0..n {
            z[k] = r[k] * inv_diag[k];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..n {
            p[k] = z[k] + beta * p[k];
        }
    }
    Err(Error::NumericFailure {
        message: format!("conjugate gradients did not converge in {max_iter} iterations"),
        residual: rel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 1-D Dirichlet Laplacian (tridiagonal 2, −1) as CSR.
    fn laplacian(n: usize) -> CsrMatrix {
        let mut pairs = Vec::new();
        for i in 0..n {
            pairs.push((i, i));
            if i > 0 {
                pairs.push((i, i - 1));
            }
            if i + 1 < n {
                pairs.push((i, i + 1));
            }
        }
        let pattern = Arc::new(CsrPattern::from_pairs(n, pairs));
        let values = pattern
            .row_ptr
            .windows(2)
            .enumerate()
            .flat_map(|(i, w)| {
                pattern.cols[w[0]..w[1]]
                    .iter()
                    .map(move |&c| if c == i { 2.0 } else { -1.0 })
            })
            .collect();
        CsrMatrix { pattern, values }
    }

    #[test]
    fn band_cholesky_matches_cg() {
        let n = 50;
        let a = laplacian(n);
        let b: Vec<f64> = (0..n).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let chol = BandCholesky::factor(n, 1, |put| {
            for i in 0..n {
                let (cols, vals) = a.row(i);
                for (&c, &v) in cols.iter().zip(vals) {
                    if c <= i {
                        put(i, c, v);
                    }
                }
            }
        })
        .unwrap();
        let mut x = b.clone();
        chol.solve(&mut x);
        let (y, stats) = pcg(&a, &b, 1e-12, 1000).unwrap();
        assert!(stats.relative_residual <= 1e-12);
        for (p, q) in x.iter().zip(&y) {
            assert!((p - q).abs() < 1e-9);
        }
        let mut ax = vec![0.0; n];
        a.mul_vec(&x, &mut ax);
        for (p, q) in ax.iter().zip(&b) {
            assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn cg_reports_non_convergence() {
        let a = laplacian(200);
        let b = vec![1.0; 200];
        match pcg(&a, &b, 1e-14, 3) {
            Err(Error::NumericFailure { residual, .. }) => assert!(residual > 1e-14),
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn indefinite_band_fails() {
        let r = BandCholesky::factor(2, 1, |put| {
            put(0, 0, 1.0);
            put(1, 0, 2.0);
            put(1, 1, 1.0);
        });
        assert!(matches!(r, Err(Error::NumericFailure { .. })));
    }
}
