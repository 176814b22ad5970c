//! Linearized reconstruction baselines around the empty (all-background) state.
//!
//! The sensitivity of mutual capacitance `C_ij` to the permittivity of element
//! `e` follows from the adjoint identity `C_ij = −ε₀·u_jᵀ K(σ) u_i`, where the
//! potential derivatives drop out because `K u_i` vanishes at free nodes and
//! `δu_i` vanishes at electrodes: `∂C_ij/∂σ_e = −ε₀·u_iᵀ K_e u_j`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fem::{Calibration, CapacitanceMatrix, ForwardModel, PhysicalPermittivity, EPS0};
use crate::image::PermittivityImage;

pub const SENSITIVITY_MAGIC: &[u8; 4] = b"ECTJ";
pub const SENSITIVITY_VERSION: u32 = 1;

/// Row-major `K × P` Jacobian of normalized measurements with respect to pixel values.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMatrix {
    pub k: usize,
    pub p: usize,
    pub data: Vec<f64>,
}

impl SensitivityMatrix {
    pub fn new(k: usize, p: usize, data: Vec<f64>) -> Result<Self> {
        if k == 0 || p == 0 || data.len() != k * p {
            return Err(Error::InvalidInput(format!(
                "sensitivity {k}×{p} needs {} entries, got {}",
                k * p,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("sensitivity entries must be finite".into()));
        }
        Ok(Self { k, p, data })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.p..(r + 1) * self.p]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.p + c]
    }

    /// `J x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.k).map(|r| dot(self.row(r), x)).collect()
    }

    /// `Jᵀ y`.
    pub fn apply_t(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.p];
        for (r, &yr) in y.iter().enumerate() {
            if yr != 0.0 {
                for (o, &j) in out.iter_mut().zip(self.row(r)) {
                    *o += yr * j;
                }
            }
        }
        out
    }

    /// `J Jᵀ`, `K × K`.
    pub fn gram(&self) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.k, self.k);
        for a in 0..self.k {
            for b in 0..=a {
                let v = dot(self.row(a), self.row(b));
                g[(a, b)] = v;
                g[(b, a)] = v;
            }
        }
        g
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + 8 * self.data.len());
        buf.extend_from_slice(SENSITIVITY_MAGIC);
        buf.extend_from_slice(&SENSITIVITY_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.k as u32).to_le_bytes());
        buf.extend_from_slice(&(self.p as u32).to_le_bytes());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::format(bytes.len() as u64, "truncated sensitivity header"));
        }
        if &bytes[..4] != SENSITIVITY_MAGIC {
            return Err(Error::format(0, "bad magic, expected \"ECTJ\""));
        }
        let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        if word(4) != SENSITIVITY_VERSION {
            return Err(Error::format(4, format!("unsupported version {}", word(4))));
        }
        let (k, p) = (word(8) as usize, word(12) as usize);
        let want = 16 + 8 * k * p;
        if bytes.len() != want {
            return Err(Error::format(
                bytes.len().min(want) as u64,
                format!("expected {want} bytes for a {k}×{p} matrix, found {}", bytes.len()),
            ));
        }
        let data = bytes[16..]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        Self::new(k, p, data).map_err(|e| Error::format(16, e.to_string()))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Adjoint sensitivity at the empty background, normalized by `c_full − c_empty`
/// per measurement. Rows follow [`CapacitanceMatrix::measurements`] for offsets `1..=m`.
pub fn sensitivity_matrix(
    model: &ForwardModel,
    phys: &PhysicalPermittivity,
    cal: &Calibration,
) -> Result<SensitivityMatrix> {
    let (rows, cols) = model.spec().image_dims();
    let background = PermittivityImage::uniform(rows, cols, 0.0)?;
    let sys = model.assemble(&background, phys)?;
    let fields = sys.solve_all()?;
    let (m, n) = (cal.empty.m, cal.empty.n);
    if n != model.n_electrodes() {
        return Err(Error::InvalidInput(
            "calibration does not match the electrode count".into(),
        ));
    }
    let pairs = CapacitanceMatrix::measurement_pairs(m, n);
    let span: Vec<f64> = pairs
        .iter()
        .map(|&(i, j)| cal.full.get(j - i - 1, i) - cal.empty.get(j - i - 1, i))
        .collect();
    let mesh = model.mesh();
    let map = model.pixel_map();
    let scale = -EPS0 * phys.contrast();
    let n_pix = rows * cols;
    // Column-major while filling (one pixel at a time), transposed at the end.
    let columns: Vec<Vec<f64>> = (0..n_pix)
        .into_par_iter()
        .map(|px| {
            let mut col = vec![0.0; pairs.len()];
            for &(e, _) in &map.pixels[px] {
                let tri = mesh.triangles[e];
                let ke = model.local_stiffness(e);
                // K_e u_j for every electrode j on the element's three nodes.
                let local: Vec<[f64; 3]> = fields.iter().map(|u| tri.map(|v| u.values[v])).collect();
                let ku: Vec<[f64; 3]> = local
                    .iter()
                    .map(|u| std::array::from_fn(|a| (0..3).map(|b| ke[a * 3 + b] * u[b]).sum()))
                    .collect();
                for (r, &(i, j)) in pairs.iter().enumerate() {
                    let s: f64 = (0..3).map(|a| local[i][a] * ku[j][a]).sum();
                    col[r] += scale * s;
                }
            }
            for (v, s) in col.iter_mut().zip(&span) {
                *v /= s;
            }
            col
        })
        .collect();
    let mut data = vec![0.0; pairs.len() * n_pix];
    for (px, col) in columns.iter().enumerate() {
        for (r, v) in col.iter().enumerate() {
            data[r * n_pix + px] = *v;
        }
    }
    SensitivityMatrix::new(pairs.len(), n_pix, data)
}

fn clamp01(x: &mut [f64]) {
    for v in x {
        *v = v.clamp(0.0, 1.0);
    }
}

fn check_measurements(c: &[f64], j: &SensitivityMatrix) -> Result<()> {
    if c.len() != j.k {
        return Err(Error::InvalidInput(format!(
            "{} measurements for a {}-row sensitivity matrix",
            c.len(),
            j.k
        )));
    }
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite measurement".into()));
    }
    Ok(())
}

/// Default Tikhonov damping `1e-2 · mean(diag(JᵀJ))`.
pub fn default_mu(j: &SensitivityMatrix) -> f64 {
    1e-2 * j.data.iter().map(|v| v * v).sum::<f64>() / j.p as f64
}

/// Iterative Tikhonov with a pre-factored `K × K` system: the step
/// `(JᵀJ + μI)⁻¹Jᵀr` is evaluated as `Jᵀ(JJᵀ + μI)⁻¹r`.
#[derive(Debug, Clone)]
pub struct Tikhonov<'a> {
    j: &'a SensitivityMatrix,
    factor: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    pub mu: f64,
}

impl<'a> Tikhonov<'a> {
    pub fn new(j: &'a SensitivityMatrix, mu: f64) -> Result<Self> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::InvalidInput(format!("Tikhonov damping {mu} must be positive")));
        }
        let mut g = j.gram();
        for d in 0..j.k {
            g[(d, d)] += mu;
        }
        let factor = g.cholesky().ok_or_else(|| Error::NumericFailure {
            message: "JJᵀ + μI is not positive definite".into(),
            residual: mu,
        })?;
        Ok(Self { j, factor, mu })
    }

    /// Runs `iters` projected steps from zero. `on_iter` sees each iterate.
    pub fn solve_with(&self, c: &[f64], iters: usize, mut on_iter: impl FnMut(&[f64])) -> Result<Vec<f64>> {
        check_measurements(c, self.j)?;
        let mut x = vec![0.0; self.j.p];
        for _ in 0..iters {
            let jx = self.j.apply(&x);
            let r = DVector::from_iterator(c.len(), c.iter().zip(&jx).map(|(a, b)| a - b));
            let y = self.factor.solve(&r);
            let step = self.j.apply_t(y.as_slice());
            for (xi, s) in x.iter_mut().zip(&step) {
                *xi += s;
            }
            clamp01(&mut x);
            on_iter(&x);
        }
        Ok(x)
    }

    pub fn solve(&self, c: &[f64], iters: usize) -> Result<Vec<f64>> {
        self.solve_with(c, iters, |_| {})
    }
}

pub const TIKHONOV_ITERS: usize = 200;
pub const LANDWEBER_ITERS: usize = 500;
pub const POWER_ITERS: usize = 50;

pub fn tikhonov_iterative(c: &[f64], j: &SensitivityMatrix, mu: f64, iters: usize) -> Result<Vec<f64>> {
    Tikhonov::new(j, mu)?.solve(c, iters)
}

/// `‖J‖₂²` by power iteration on `JJᵀ` from the all-ones vector.
pub fn spectral_norm_sq(j: &SensitivityMatrix, steps: usize) -> f64 {
    let g = j.gram();
    let mut v = DVector::from_element(j.k, 1.0 / (j.k as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..steps {
        let w = &g * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = v.dot(&w);
        v = w / norm;
    }
    lambda.max((&g * &v).dot(&v))
}

/// Projected Landweber iteration `x ← clamp(x + α Jᵀ(c − Jx))` from zero.
pub fn landweber_with(
    c: &[f64],
    j: &SensitivityMatrix,
    alpha: f64,
    iters: usize,
    mut on_iter: impl FnMut(&[f64]),
) -> Result<Vec<f64>> {
    check_measurements(c, j)?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidInput(format!("Landweber step {alpha} must be positive")));
    }
    let mut x = vec![0.0; j.p];
    for _ in 0..iters {
        let jx = j.apply(&x);
        let r: Vec<f64> = c.iter().zip(&jx).map(|(a, b)| alpha * (a - b)).collect();
        let step = j.apply_t(&r);
        for (xi, s) in x.iter_mut().zip(&step) {
            *xi += s;
        }
        clamp01(&mut x);
        on_iter(&x);
    }
    Ok(x)
}

/// Default step `1.9/‖J‖₂²`.
pub fn landweber_alpha(j: &SensitivityMatrix) -> f64 {
    1.9 / spectral_norm_sq(j, POWER_ITERS)
}

pub fn landweber(c: &[f64], j: &SensitivityMatrix, alpha: f64, iters: usize) -> Result<Vec<f64>> {
    landweber_with(c, j, alpha, iters, |_| {})
}

/// Min-max scaled `Jᵀc`; a constant back-projection maps to zeros.
pub fn linear_back_projection(c: &[f64], j: &SensitivityMatrix) -> Result<Vec<f64>> {
    check_measurements(c, j)?;
    let mut x = j.apply_t(c);
    let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return Ok(vec![0.0; j.p]);
    }
    for v in &mut x {
        *v = (*v - lo) / (hi - lo);
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    Tikhonov,
    Landweber,
    BackProjection,
}

impl Baseline {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tikhonov" => Ok(Self::Tikhonov),
            "landweber" => Ok(Self::Landweber),
            "lbp" => Ok(Self::BackProjection),
            other => Err(Error::InvalidInput(format!(
                "unknown baseline `{other}` (tikhonov, landweber, lbp)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Tikhonov => "tikhonov",
            Self::Landweber => "landweber",
            Self::BackProjection => "lbp",
        }
    }
}

/// A baseline with its one-off precomputation done, mapping normalized
/// measurement matrices to images.
pub struct BaselineReconstructor<'a> {
    kind: Baseline,
    j: &'a SensitivityMatrix,
    tikhonov: Option<Tikhonov<'a>>,
    alpha: f64,
    rows: usize,
    cols: usize,
}

impl<'a> BaselineReconstructor<'a> {
    pub fn new(kind: Baseline, j: &'a SensitivityMatrix, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != j.p {
            return Err(Error::InvalidInput(format!(
                "{rows}×{cols} image does not match {} pixels",
                j.p
            )));
        }
        let tikhonov = match kind {
            Baseline::Tikhonov => Some(Tikhonov::new(j, default_mu(j))?),
            _ => None,
        };
        let alpha = match kind {
            Baseline::Landweber => landweber_alpha(j),
            _ => 0.0,
        };
        Ok(Self {
            kind,
            j,
            tikhonov,
            alpha,
            rows,
            cols,
        })
    }

    pub fn reconstruct(&self, c: &CapacitanceMatrix) -> Result<PermittivityImage> {
        let meas = c.measurements();
        let x = match self.kind {
            Baseline::Tikhonov => self.tikhonov.as_ref().expect("prepared").solve(&meas, TIKHONOV_ITERS)?,
            Baseline::Landweber => landweber(&meas, self.j, self.alpha, LANDWEBER_ITERS)?,
            Baseline::BackProjection => linear_back_projection(&meas, self.j)?,
        };
        PermittivityImage::new(self.rows, self.cols, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> SensitivityMatrix {
        let data = (0..3 * 8).map(|k| ((k * 7 % 11) as f64 - 3.0) * 0.1).collect();
        SensitivityMatrix::new(3, 8, data).unwrap()
    }

    #[test]
    fn zero_measurements_give_zero_images() {
        let j = toy();
        let zero = vec![0.0; 3];
        assert!(tikhonov_iterative(&zero, &j, default_mu(&j), 20)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        assert!(landweber(&zero, &j, landweber_alpha(&j), 20)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        assert!(linear_back_projection(&zero, &j).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spectral_norm_matches_eigenvalue() {
        let j = toy();
        let eig = j.gram().symmetric_eigenvalues().max();
        assert!((spectral_norm_sq(&j, 200) - eig).abs() < 1e-9 * eig);
    }

    #[test]
    fn back_projection_in_unit_range() {
        let j = toy();
        let x = linear_back_projection(&[0.3, -0.1, 0.5], &j).unwrap();
        assert!(x.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(x.contains(&0.0) && x.contains(&1.0));
    }

    #[test]
    fn sensitivity_bytes_round_trip() {
        let j = toy();
        let bytes = j.to_bytes();
        assert_eq!(&bytes[..4], b"ECTJ");
        let back = SensitivityMatrix::from_bytes(&bytes).unwrap();
        assert_eq!(back, j);
        assert_eq!(back.to_bytes(), bytes);
        assert!(SensitivityMatrix::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(
            SensitivityMatrix::from_bytes(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn rejects_wrong_measurement_count() {
        let j = toy();
        assert!(landweber(&[0.0; 2], &j, 1.0, 1).is_err());
        assert!(Baseline::parse("svd").is_err());
    }
}
