//! Electrostatic forward model: P1 finite elements for `∇·(σ∇u) = 0` on the
//! padded planar domain, single-electrode excitations and mutual capacitances.
//!
//! Excitation protocol: the driven electrode is held at 1 V, every other
//! electrode at 0 V, and the remaining outer boundary is insulating (natural
//! zero-flux condition). Electrode charges are read off the unconstrained
//! stiffness residual `K u` on each electrode's nodes, which makes the
//! discrete divergence theorem (total charge zero) hold to solver precision.

pub mod solver;

use std::sync::{Arc, OnceLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::PermittivityImage;
use crate::mesh::{build_mesh, pixel_element_map, DomainSpec, Mesh, NodeKind, PixelElementMap};
use solver::{pcg, BandCholesky, CsrMatrix, CsrPattern};

/// Vacuum permittivity, F/m.
pub const EPS0: f64 = 8.854_187_812_8e-12;

/// Default largest electrode offset kept in a measurement matrix.
pub const MAX_OFFSET: usize = 5;

/// Relative permittivities mapped to normalized pixel values 0 and 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalPermittivity {
    pub eps_background: f64,
    pub eps_inclusion: f64,
}

impl Default for PhysicalPermittivity {
    fn default() -> Self {
        Self {
            eps_background: 2.0,
            eps_inclusion: 2.6,
        }
    }
}

impl PhysicalPermittivity {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_background > 0.0 && self.eps_inclusion > 0.0) {
            return Err(Error::InvalidInput("permittivities must be positive".into()));
        }
        if self.eps_background == self.eps_inclusion {
            return Err(Error::InvalidInput(
                "inclusion and background permittivity coincide".into(),
            ));
        }
        Ok(())
    }

    pub fn contrast(&self) -> f64 {
        self.eps_inclusion - self.eps_background
    }

    pub fn sigma(&self, value: f64) -> f64 {
        self.eps_background + value * self.contrast()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SolverKind {
    /// Banded Cholesky factorization, reused across all excitations of a system.
    #[default]
    Direct,
    /// Jacobi-preconditioned conjugate gradients per excitation.
    ConjugateGradient,
}

/// Degrees-of-freedom bookkeeping shared by every system on one mesh.
#[derive(Debug)]
struct Dofs {
    /// Free (non-electrode) index of each node, `usize::MAX` for Dirichlet nodes.
    free_of: Vec<usize>,
    free_nodes: Vec<usize>,
    electrode_nodes: Vec<Vec<usize>>,
    /// Lower bandwidth of the free–free block in free numbering.
    bandwidth: usize,
}

/// Per-node potential for one excitation.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialField {
    pub excited: usize,
    pub values: Vec<f64>,
}

/// Assembled stiffness operator for one permittivity distribution.
#[derive(Debug)]
pub struct SparseSystem {
    k: CsrMatrix,
    sigma: Vec<f64>,
    dofs: Arc<Dofs>,
    solver: SolverKind,
    cg_tol: f64,
    factor: OnceLock<Result<BandCholesky>>,
}

/// Mesh, pixel map and sparsity structure for one [`DomainSpec`]; assembles and
/// solves systems for any number of permittivity images.
#[derive(Debug, Clone)]
pub struct ForwardModel {
    spec: DomainSpec,
    mesh: Arc<Mesh>,
    map: Arc<PixelElementMap>,
    pattern: Arc<CsrPattern>,
    elem_slots: Arc<Vec<[usize; 9]>>,
    /// Unit-permittivity local stiffness `A·∇φ_a·∇φ_b`, row-major 3×3.
    local: Arc<Vec<[f64; 9]>>,
    dofs: Arc<Dofs>,
    solver: SolverKind,
    cg_tol: f64,
}

fn local_stiffness(mesh: &Mesh, t: usize) -> [f64; 9] {
    let [a, b, c] = mesh.triangles[t];
    let p = [mesh.nodes[a], mesh.nodes[b], mesh.nodes[c]];
    // (y, z) plane: x ≡ y (index 1), y ≡ z (index 0).
    let xs = [p[0][1], p[1][1], p[2][1]];
    let ys = [p[0][0], p[1][0], p[2][0]];
    let area = mesh.signed_area(t);
    let bcoef = [ys[1] - ys[2], ys[2] - ys[0], ys[0] - ys[1]];
    let ccoef = [xs[2] - xs[1], xs[0] - xs[2], xs[1] - xs[0]];
    let mut k = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            k[i * 3 + j] = (bcoef[i] * bcoef[j] + ccoef[i] * ccoef[j]) / (4.0 * area);
        }
    }
    k
}

impl ForwardModel {
    pub fn new(spec: &DomainSpec) -> Result<Self> {
        let mesh = build_mesh(spec)?;
        let map = pixel_element_map(&mesh, spec);
        let n = mesh.nodes.len();

        let mut pairs = Vec::with_capacity(mesh.triangles.len() * 9);
        for tri in &mesh.triangles {
            for &a in tri {
                for &b in tri {
                    pairs.push((a, b));
                }
            }
        }
        let pattern = Arc::new(CsrPattern::from_pairs(n, pairs));
        let elem_slots = mesh
            .triangles
            .iter()
            .map(|tri| {
                let mut s = [0; 9];
                for (i, &a) in tri.iter().enumerate() {
                    for (j, &b) in tri.iter().enumerate() {
                        s[i * 3 + j] = pattern.slot(a, b).expect("pattern covers element");
                    }
                }
                s
            })
            .collect();
        let local = (0..mesh.triangles.len()).map(|t| local_stiffness(&mesh, t)).collect();

        let mut free_of = vec![usize::MAX; n];
        let mut free_nodes = Vec::new();
        for (node, kind) in mesh.node_kind.iter().enumerate() {
            if !matches!(kind, NodeKind::Electrode(_)) {
                free_of[node] = free_nodes.len();
                free_nodes.push(node);
            }
        }
        let mut bandwidth = 0;
        for (fi, &node) in free_nodes.iter().enumerate() {
            for &c in &pattern.cols[pattern.row_ptr[node]..pattern.row_ptr[node + 1]] {
                if free_of[c] != usize::MAX && free_of[c] < fi {
                    bandwidth = bandwidth.max(fi - free_of[c]);
                }
            }
        }
        let dofs = Dofs {
            free_of,
            free_nodes,
            electrode_nodes: mesh.electrode_nodes.clone(),
            bandwidth,
        };

        Ok(Self {
            spec: *spec,
            mesh: Arc::new(mesh),
            map: Arc::new(map),
            pattern,
            elem_slots: Arc::new(elem_slots),
            local: Arc::new(local),
            dofs: Arc::new(dofs),
            solver: SolverKind::Direct,
            cg_tol: 1e-10,
        })
    }

    pub fn with_solver(mut self, solver: SolverKind) -> Self {
        self.solver = solver;
        self
    }

    pub fn spec(&self) -> &DomainSpec {
        &self.spec
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn pixel_map(&self) -> &PixelElementMap {
        &self.map
    }

    pub fn n_electrodes(&self) -> usize {
        self.mesh.n_electrodes()
    }

    /// Unit-permittivity local stiffness of element `e`, row-major 3×3.
    pub fn local_stiffness(&self, e: usize) -> &[f64; 9] {
        &self.local[e]
    }

    /// Per-element permittivity; elements outside the window take the background value.
    pub fn element_sigma(&self, image: &PermittivityImage, phys: &PhysicalPermittivity) -> Result<Vec<f64>> {
        phys.validate()?;
        let (rows, cols) = self.spec.image_dims();
        if image.rows() != rows || image.cols() != cols {
            return Err(Error::InvalidInput(format!(
                "image is {}×{}, domain window is {rows}×{cols}",
                image.rows(),
                image.cols()
            )));
        }
        Ok(self
            .map
            .element_pixel
            .iter()
            .map(|p| match p {
                Some(p) => phys.sigma(image.values()[*p]),
                None => phys.eps_background,
            })
            .collect())
    }

    pub fn assemble(&self, image: &PermittivityImage, phys: &PhysicalPermittivity) -> Result<SparseSystem> {
        let sigma = self.element_sigma(image, phys)?;
        Ok(self.assemble_sigma(sigma))
    }

    /// Assembles from raw per-element coefficients (no range validation).
    pub fn assemble_sigma(&self, sigma: Vec<f64>) -> SparseSystem {
        assert_eq!(sigma.len(), self.mesh.triangles.len());
        let mut values = vec![0.0; self.pattern.nnz()];
        for ((slots, local), &s) in self.elem_slots.iter().zip(self.local.iter()).zip(&sigma) {
            for a in 0..9 {
                values[slots[a]] += s * local[a];
            }
        }
        SparseSystem {
            k: CsrMatrix {
                pattern: Arc::clone(&self.pattern),
                values,
            },
            sigma,
            dofs: Arc::clone(&self.dofs),
            solver: self.solver,
            cg_tol: self.cg_tol,
            factor: OnceLock::new(),
        }
    }

    /// Full `n × n` mutual-capacitance table `C[i][j] = −Q_j` under excitation `i`, F/m.
    pub fn mutual_capacitances(&self, sys: &SparseSystem) -> Result<MutualCapacitances> {
        let n = self.n_electrodes();
        let fields = sys.solve_all()?;
        let mut values = vec![0.0; n * n];
        for (i, u) in fields.iter().enumerate() {
            for j in 0..n {
                values[i * n + j] = -sys.electrode_charge(u, j);
            }
        }
        Ok(MutualCapacitances { n, values })
    }

    /// Offset-indexed measurement matrix for one image (raw, F/m).
    pub fn capacitance_matrix(
        &self,
        image: &PermittivityImage,
        phys: &PhysicalPermittivity,
        max_offset: usize,
    ) -> Result<CapacitanceMatrix> {
        let sys = self.assemble(image, phys)?;
        Ok(self.mutual_capacitances(&sys)?.offset_matrix(max_offset))
    }

    /// Empty (all background) and full (window all inclusion) reference matrices.
    pub fn calibration(&self, phys: &PhysicalPermittivity, max_offset: usize) -> Result<Calibration> {
        let (rows, cols) = self.spec.image_dims();
        let empty = self.capacitance_matrix(&PermittivityImage::uniform(rows, cols, 0.0)?, phys, max_offset)?;
        let full = self.capacitance_matrix(&PermittivityImage::uniform(rows, cols, 1.0)?, phys, max_offset)?;
        Calibration::new(empty, full)
    }
}

impl SparseSystem {
    pub fn stiffness(&self) -> &CsrMatrix {
        &self.k
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn n_electrodes(&self) -> usize {
        self.dofs.electrode_nodes.len()
    }

    fn check_electrode(&self, i: usize) -> Result<()> {
        if i >= self.n_electrodes() {
            return Err(Error::InvalidInput(format!(
                "electrode {i} out of range ({} electrodes)",
                self.n_electrodes()
            )));
        }
        Ok(())
    }

    fn band_factor(&self) -> Result<&BandCholesky> {
        let dofs = &self.dofs;
        self.factor
            .get_or_init(|| {
                BandCholesky::factor(dofs.free_nodes.len(), dofs.bandwidth, |put| {
                    for (fi, &node) in dofs.free_nodes.iter().enumerate() {
                        let (cols, vals) = self.k.row(node);
                        for (&c, &v) in cols.iter().zip(vals) {
                            let fc = dofs.free_of[c];
                            if fc != usize::MAX && fc <= fi {
                                put(fi, fc, v);
                            }
                        }
                    }
                })
            })
            .as_ref()
            .map_err(Clone::clone)
    }

    /// Free-block right-hand side `−K_fd·u_d` for a 1 V drive on electrode `i`.
    fn excitation_rhs(&self, i: usize) -> Vec<f64> {
        let mut rhs = vec![0.0; self.dofs.free_nodes.len()];
        // K is symmetric, so column d of K is row d.
        for &d in &self.dofs.electrode_nodes[i] {
            let (cols, vals) = self.k.row(d);
            for (&c, &v) in cols.iter().zip(vals) {
                let fc = self.dofs.free_of[c];
                if fc != usize::MAX {
                    rhs[fc] -= v;
                }
            }
        }
        rhs
    }

    fn expand(&self, i: usize, free: &[f64]) -> PotentialField {
        let mut values = vec![0.0; self.dofs.free_of.len()];
        for (fi, &node) in self.dofs.free_nodes.iter().enumerate() {
            values[node] = free[fi];
        }
        for &d in &self.dofs.electrode_nodes[i] {
            values[d] = 1.0;
        }
        PotentialField { excited: i, values }
    }

    fn free_block(&self) -> CsrMatrix {
        let dofs = &self.dofs;
        let mut pairs = Vec::new();
        let mut vals = Vec::new();
        for (fi, &node) in dofs.free_nodes.iter().enumerate() {
            let (cols, v) = self.k.row(node);
            for (&c, &x) in cols.iter().zip(v) {
                if dofs.free_of[c] != usize::MAX {
                    pairs.push((fi, dofs.free_of[c]));
                    vals.push(x);
                }
            }
        }
        // Rows are visited in order and columns stay sorted, so values align with the pattern.
        let pattern = Arc::new(CsrPattern::from_pairs(dofs.free_nodes.len(), pairs));
        CsrMatrix { pattern, values: vals }
    }

    fn cg_solve(&self, free: &CsrMatrix, rhs: &[f64]) -> Result<Vec<f64>> {
        let cap = 20 * self.dofs.free_of.len();
        Ok(pcg(free, rhs, self.cg_tol, cap)?.0)
    }

    /// Potential for a 1 V drive on electrode `i` with all other electrodes grounded.
    pub fn solve_excitation(&self, i: usize) -> Result<PotentialField> {
        self.check_electrode(i)?;
        let mut rhs = self.excitation_rhs(i);
        match self.solver {
            SolverKind::Direct => self.band_factor()?.solve(&mut rhs),
            SolverKind::ConjugateGradient => rhs = self.cg_solve(&self.free_block(), &rhs)?,
        }
        Ok(self.expand(i, &rhs))
    }

    /// Potentials for every electrode excitation.
    pub fn solve_all(&self) -> Result<Vec<PotentialField>> {
        let n = self.n_electrodes();
        let mut rhs: Vec<Vec<f64>> = (0..n).map(|i| self.excitation_rhs(i)).collect();
        match self.solver {
            SolverKind::Direct => self.band_factor()?.solve_many(&mut rhs),
            SolverKind::ConjugateGradient => {
                let free = self.free_block();
                rhs.par_iter_mut().try_for_each(|r| -> Result<()> {
                    *r = self.cg_solve(&free, r)?;
                    Ok(())
                })?;
            }
        }
        Ok(rhs.iter().enumerate().map(|(i, r)| self.expand(i, r)).collect())
    }

    /// Charge per unit length on electrode `j`, C/m: `ε₀·Σ (K u)` over its nodes.
    pub fn electrode_charge(&self, u: &PotentialField, j: usize) -> f64 {
        EPS0 * self.dofs.electrode_nodes[j]
            .iter()
            .map(|&d| self.k.row_dot(d, &u.values))
            .sum::<f64>()
    }

    /// Net flux through the non-electrode boundary and interior, C/m (zero for an exact solve).
    pub fn residual_flux(&self, u: &PotentialField) -> f64 {
        EPS0 * self
            .dofs
            .free_nodes
            .iter()
            .map(|&f| self.k.row_dot(f, &u.values))
            .sum::<f64>()
    }
}

/// Full mutual-capacitance table, row = excited electrode.
#[derive(Debug, Clone, PartialEq)]
pub struct MutualCapacitances {
    pub n: usize,
    pub values: Vec<f64>,
}

impl MutualCapacitances {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    /// Row `d − 1` holds `C[i][i + d]` for `d = 1..=max_offset`; pairs past the array end are 0.
    pub fn offset_matrix(&self, max_offset: usize) -> CapacitanceMatrix {
        let mut c = CapacitanceMatrix::zeros(max_offset, self.n);
        for d in 1..=max_offset {
            for i in 0..self.n.saturating_sub(d) {
                c.set(d - 1, i, self.get(i, i + d));
            }
        }
        c
    }
}

/// `m × n` matrix of pairwise capacitances indexed by (offset − 1, first electrode).
#[derive(Debug, Clone, PartialEq)]
pub struct CapacitanceMatrix {
    pub m: usize,
    pub n: usize,
    pub values: Vec<f64>,
}

impl CapacitanceMatrix {
    pub fn zeros(m: usize, n: usize) -> Self {
        Self {
            m,
            n,
            values: vec![0.0; m * n],
        }
    }

    pub fn new(m: usize, n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != m * n {
            return Err(Error::InvalidInput(format!(
                "capacitance matrix {m}×{n} needs {} values, got {}",
                m * n,
                values.len()
            )));
        }
        Ok(Self { m, n, values })
    }

    pub fn get(&self, row: usize, i: usize) -> f64 {
        self.values[row * self.n + i]
    }

    pub fn set(&mut self, row: usize, i: usize, v: f64) {
        self.values[row * self.n + i] = v;
    }

    /// Entry `(row, i)` pairs electrodes `i` and `i + row + 1`; padded when that is past the end.
    pub fn is_padded(&self, row: usize, i: usize) -> bool {
        i + row + 1 >= self.n
    }

    /// Number of non-padded entries.
    pub fn measurement_count(&self) -> usize {
        (1..=self.m).map(|d| self.n.saturating_sub(d)).sum()
    }

    /// Non-padded entries, row-major. This is the row order of a sensitivity matrix.
    pub fn measurements(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.measurement_count());
        for row in 0..self.m {
            for i in 0..self.n {
                if !self.is_padded(row, i) {
                    out.push(self.get(row, i));
                }
            }
        }
        out
    }

    /// Electrode pairs `(i, j)` of [`Self::measurements`], in the same order.
    pub fn measurement_pairs(m: usize, n: usize) -> Vec<(usize, usize)> {
        (1..=m)
            .flat_map(|d| (0..n.saturating_sub(d)).map(move |i| (i, i + d)))
            .collect()
    }
}

/// Empty/full reference measurements for normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub empty: CapacitanceMatrix,
    pub full: CapacitanceMatrix,
}

impl Calibration {
    pub fn new(empty: CapacitanceMatrix, full: CapacitanceMatrix) -> Result<Self> {
        // Validate once so later normalization cannot fail on the references.
        normalize(&empty, &empty, &full)?;
        Ok(Self { empty, full })
    }

    pub fn normalize(&self, c: &CapacitanceMatrix) -> Result<CapacitanceMatrix> {
        normalize(c, &self.empty, &self.full)
    }
}

/// Per-entry `(c − c_empty)/(c_full − c_empty)`; padded entries stay 0. Not clamped.
pub fn normalize(
    c: &CapacitanceMatrix,
    c_empty: &CapacitanceMatrix,
    c_full: &CapacitanceMatrix,
) -> Result<CapacitanceMatrix> {
    if (c.m, c.n) != (c_empty.m, c_empty.n) || (c.m, c.n) != (c_full.m, c_full.n) {
        return Err(Error::InvalidInput("calibration matrices differ in shape".into()));
    }
    let mut out = CapacitanceMatrix::zeros(c.m, c.n);
    for row in 0..c.m {
        for i in 0..c.n {
            if c.is_padded(row, i) {
                continue;
            }
            let span = c_full.get(row, i) - c_empty.get(row, i);
            let scale = c_full.get(row, i).abs().max(c_empty.get(row, i).abs());
            if span.is_nan() || span.abs() <= 1e-12 * scale {
                return Err(Error::DegenerateCalibration {
                    offset: row + 1,
                    electrode: i,
                });
            }
            out.set(row, i, (c.get(row, i) - c_empty.get(row, i)) / span);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DomainSpec {
        DomainSpec {
            width_um: 40,
            depth_um: 20,
            pad_side_um: 10,
            pad_top_um: 10,
            n_electrodes: 4,
            ..DomainSpec::default()
        }
    }

    fn blob(spec: &DomainSpec, cy: f64, cz: f64, r: f64) -> PermittivityImage {
        let (rows, cols) = spec.image_dims();
        let mut v = vec![0.0; rows * cols];
        for row in 0..rows {
            for col in 0..cols {
                let (y, z) = (col as f64 + 0.5, row as f64 + 0.5);
                if (y - cy).powi(2) + (z - cz).powi(2) <= r * r {
                    v[row * cols + col] = 1.0;
                }
            }
        }
        PermittivityImage::new(rows, cols, v).unwrap()
    }

    #[test]
    fn stiffness_rows_sum_to_zero() {
        let spec = small_spec();
        let model = ForwardModel::new(&spec).unwrap();
        let sys = model
            .assemble(&blob(&spec, 12.0, 8.0, 5.0), &PhysicalPermittivity::default())
            .unwrap();
        let k = sys.stiffness();
        let scale = k.diagonal().iter().cloned().fold(0.0, f64::max);
        for i in 0..k.n() {
            assert!(k.row_sum(i).abs() < 1e-12 * scale);
            assert!((k.get(i, (i + 3) % k.n()) - k.get((i + 3) % k.n(), i)).abs() < 1e-15 * scale);
        }
    }

    #[test]
    fn dirichlet_values_and_maximum_principle() {
        let spec = small_spec();
        let model = ForwardModel::new(&spec).unwrap();
        let sys = model
            .assemble(&blob(&spec, 20.0, 10.0, 6.0), &PhysicalPermittivity::default())
            .unwrap();
        for u in sys.solve_all().unwrap() {
            for (k, nodes) in model.mesh().electrode_nodes.iter().enumerate() {
                let want = if k == u.excited { 1.0 } else { 0.0 };
                assert!(nodes.iter().all(|&n| u.values[n] == want));
            }
            assert!(u.values.iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
        }
    }

    #[test]
    fn reciprocity_and_conservation() {
        let spec = small_spec();
        let model = ForwardModel::new(&spec).unwrap();
        let sys = model
            .assemble(&blob(&spec, 13.0, 6.0, 5.0), &PhysicalPermittivity::default())
            .unwrap();
        let c = model.mutual_capacitances(&sys).unwrap();
        let max = c.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..c.n {
            for j in 0..c.n {
                assert!((c.get(i, j) - c.get(j, i)).abs() < 1e-10 * max);
            }
        }
        for u in sys.solve_all().unwrap() {
            let total: f64 = (0..c.n).map(|j| sys.electrode_charge(&u, j)).sum::<f64>() + sys.residual_flux(&u);
            assert!(total.abs() < 1e-12 * max);
            // Driven electrode carries positive charge, grounded ones negative.
            assert!(sys.electrode_charge(&u, u.excited) > 0.0);
        }
    }

    #[test]
    fn mirror_image_mirrors_capacitances() {
        let spec = small_spec();
        let model = ForwardModel::new(&spec).unwrap();
        let phys = PhysicalPermittivity::default();
        let img = blob(&spec, 11.0, 7.0, 4.0);
        let (rows, cols) = spec.image_dims();
        let mut flipped = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                flipped[r * cols + c] = img.get(r, cols - 1 - c);
            }
        }
        let mirrored = PermittivityImage::new(rows, cols, flipped).unwrap();
        let a = model
            .mutual_capacitances(&model.assemble(&img, &phys).unwrap())
            .unwrap();
        let b = model
            .mutual_capacitances(&model.assemble(&mirrored, &phys).unwrap())
            .unwrap();
        let n = a.n;
        for i in 0..n {
            for j in 0..n {
                let (x, y) = (a.get(i, j), b.get(n - 1 - i, n - 1 - j));
                assert!((x - y).abs() < 1e-10 * x.abs().max(1e-20), "{i},{j}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn capacitance_scales_linearly_with_uniform_permittivity() {
        let spec = small_spec();
        let model = ForwardModel::new(&spec).unwrap();
        let (rows, cols) = spec.image_dims();
        let img = PermittivityImage::uniform(rows, cols, 0.0).unwrap();
        let one = PhysicalPermittivity {
            eps_background: 1.0,
            eps_inclusion: 2.0,
        };
        let three = PhysicalPermittivity {
            eps_background: 3.0,
            eps_inclusion: 2.0,
        };
        let a = model.capacitance_matrix(&img, &one, MAX_OFFSET.min(3)).unwrap();
        let b = model.capacitance_matrix(&img, &three, MAX_OFFSET.min(3)).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((3.0 * x - y).abs() <= 1e-10 * y.abs());
        }
    }

    #[test]
    fn conjugate_gradient_agrees_with_direct() {
        let spec = small_spec();
        let direct = ForwardModel::new(&spec).unwrap();
        let cg = direct.clone().with_solver(SolverKind::ConjugateGradient);
        let phys = PhysicalPermittivity::default();
        let img = blob(&spec, 25.0, 9.0, 7.0);
        let a = direct.capacitance_matrix(&img, &phys, 3).unwrap();
        let b = cg.capacitance_matrix(&img, &phys, 3).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() <= 1e-8 * x.abs().max(1e-30));
        }
    }

    #[test]
    fn measurement_layout() {
        let c = CapacitanceMatrix::zeros(5, 20);
        assert_eq!(c.measurement_count(), 19 + 18 + 17 + 16 + 15);
        let pairs = CapacitanceMatrix::measurement_pairs(5, 20);
        assert_eq!(pairs.len(), 85);
        assert!(pairs.iter().all(|&(i, j)| j > i && j - i <= 5 && j < 20));
        assert!(c.is_padded(0, 19) && !c.is_padded(0, 18) && c.is_padded(4, 15) && !c.is_padded(4, 14));
    }

    #[test]
    fn normalization_maps_references_to_zero_and_one() {
        let spec = small_spec();
        let model = ForwardModel::new(&spec).unwrap();
        let phys = PhysicalPermittivity::default();
        let cal = model.calibration(&phys, 3).unwrap();
        let e = cal.normalize(&cal.empty).unwrap();
        let f = cal.normalize(&cal.full).unwrap();
        for row in 0..3 {
            for i in 0..4 {
                if e.is_padded(row, i) {
                    assert_eq!((e.get(row, i), f.get(row, i)), (0.0, 0.0));
                } else {
                    assert_eq!(e.get(row, i), 0.0);
                    assert!((f.get(row, i) - 1.0).abs() < 1e-12);
                }
            }
        }
        let err = normalize(&cal.empty, &cal.empty, &cal.empty).unwrap_err();
        assert!(matches!(
            err,
            Error::DegenerateCalibration {
                offset: 1,
                electrode: 0
            }
        ));
    }

    #[test]
    fn rejects_mismatched_image_and_bad_electrode() {
        let spec = small_spec();
        let model = ForwardModel::new(&spec).unwrap();
        let phys = PhysicalPermittivity::default();
        let wrong = PermittivityImage::uniform(3, 3, 0.0).unwrap();
        assert!(matches!(model.assemble(&wrong, &phys), Err(Error::InvalidInput(_))));
        let (rows, cols) = spec.image_dims();
        let sys = model
            .assemble(&PermittivityImage::uniform(rows, cols, 0.0).unwrap(), &phys)
            .unwrap();
        assert!(sys.solve_excitation(4).is_err());
        let same = PhysicalPermittivity {
            eps_background: 2.0,
            eps_inclusion: 2.0,
        };
        assert!(model
            .assemble(&PermittivityImage::uniform(rows, cols, 0.0).unwrap(), &same)
            .is_err());
    }
}
