//! Planar one-sided imaging domain and its structured triangulation.
//!
//! Coordinates are `(z, y)` in micrometres: `z` is height above the sensor
//! surface, `y` the lateral position along the electrode row with `y = 0` at
//! the left edge of the imaging window. The electrodes sit on `z = 0`.
//!
//! Cells are split along one diagonal left of the domain centre and along the
//! other diagonal to the right, so the mesh is exactly mirror-symmetric.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry of the imaging window, the simulation padding and the electrode row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub width_um: u32,
    pub depth_um: u32,
    pub pad_side_um: u32,
    pub pad_top_um: u32,
    pub n_electrodes: u32,
    pub pitch_um: u32,
    pub electrode_width_um: u32,
    pub elements_per_um: u32,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self {
            width_um: 200,
            depth_um: 100,
            pad_side_um: 50,
            pad_top_um: 50,
            n_electrodes: 20,
            pitch_um: 10,
            electrode_width_um: 8,
            elements_per_um: 1,
        }
    }
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let lengths = [
            ("width_um", self.width_um),
            ("depth_um", self.depth_um),
            ("pad_side_um", self.pad_side_um),
            ("pad_top_um", self.pad_top_um),
            ("pitch_um", self.pitch_um),
            ("electrode_width_um", self.electrode_width_um),
            ("n_electrodes", self.n_electrodes),
            ("elements_per_um", self.elements_per_um),
        ];
        if let Some((name, _)) = lengths.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidSpec(format!("{name} must be positive")));
        }
        if self.n_electrodes * self.pitch_um != self.width_um {
            return Err(Error::InvalidSpec(format!(
                "{} electrodes at {} µm pitch cover {} µm, window is {} µm",
                self.n_electrodes,
                self.pitch_um,
                self.n_electrodes * self.pitch_um,
                self.width_um
            )));
        }
        if self.electrode_width_um >= self.pitch_um {
            return Err(Error::InvalidSpec(format!(
                "electrode width {} µm leaves no gap at {} µm pitch",
                self.electrode_width_um, self.pitch_um
            )));
        }
        Ok(())
    }

    /// Image rows (depth pixels) × columns (lateral pixels) at 1 µm per pixel.
    pub fn image_dims(&self) -> (usize, usize) {
        (self.depth_um as usize, self.width_um as usize)
    }

    pub fn lateral_nodes(&self) -> usize {
        ((self.width_um + 2 * self.pad_side_um) * self.elements_per_um) as usize + 1
    }

    pub fn vertical_nodes(&self) -> usize {
        ((self.depth_um + self.pad_top_um) * self.elements_per_um) as usize + 1
    }

    /// Lateral extent `[start, end]` of electrode `k`'s metal, in window coordinates.
    pub fn electrode_span(&self, k: usize) -> (f64, f64) {
        let gap = f64::from(self.pitch_um - self.electrode_width_um) / 2.0;
        let start = k as f64 * f64::from(self.pitch_um) + gap;
        (start, start + f64::from(self.electrode_width_um))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Interior,
    /// Outer boundary without metal: zero normal flux.
    Insulating,
    Electrode(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub spec: DomainSpec,
    /// `(z, y)` in µm.
    pub nodes: Vec<[f64; 2]>,
    /// Counter-clockwise in the `(y, z)` plane.
    pub triangles: Vec<[usize; 3]>,
    pub electrode_nodes: Vec<Vec<usize>>,
    pub node_kind: Vec<NodeKind>,
    /// Lateral × vertical node counts; node `(iy, iz)` has index `iy·nz + iz`.
    pub nx: usize,
    pub nz: usize,
}

impl Mesh {
    pub fn node_index(&self, iy: usize, iz: usize) -> usize {
        iy * self.nz + iz
    }

    /// Node at the lateral mirror position `y → width − y`.
    pub fn mirror_node(&self, node: usize) -> usize {
        let (iy, iz) = (node / self.nz, node % self.nz);
        self.node_index(self.nx - 1 - iy, iz)
    }

    /// Signed area in the `(y, z)` plane.
    pub fn signed_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let (pa, pb, pc) = (self.nodes[a], self.nodes[b], self.nodes[c]);
        0.5 * ((pb[1] - pa[1]) * (pc[0] - pa[0]) - (pc[1] - pa[1]) * (pb[0] - pa[0]))
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.signed_area(t)).sum()
    }

    pub fn n_electrodes(&self) -> usize {
        self.electrode_nodes.len()
    }

    /// Cell `(iy, iz)` containing triangle `t`.
    pub fn element_cell(&self, t: usize) -> (usize, usize) {
        let cell = t / 2;
        (cell / (self.nz - 1), cell % (self.nz - 1))
    }
}

/// Structured right-triangle mesh of the padded rectangle
/// `[−pad_side, width + pad_side] × [0, depth + pad_top]`.
pub fn build_mesh(spec: &DomainSpec) -> Result<Mesh> {
    spec.validate()?;
    let r = f64::from(spec.elements_per_um);
    let (nx, nz) = (spec.lateral_nodes(), spec.vertical_nodes());
    let y0 = -f64::from(spec.pad_side_um);

    let mut nodes = Vec::with_capacity(nx * nz);
    for iy in 0..nx {
        for iz in 0..nz {
            nodes.push([iz as f64 / r, y0 + iy as f64 / r]);
        }
    }

    let idx = |iy: usize, iz: usize| iy * nz + iz;
    let cells_x = nx - 1;
    let mut triangles = Vec::with_capacity(2 * (nx - 1) * (nz - 1));
    for iy in 0..nx - 1 {
        for iz in 0..nz - 1 {
            let (a, b, c, d) = (idx(iy, iz), idx(iy + 1, iz), idx(iy + 1, iz + 1), idx(iy, iz + 1));
            if 2 * iy < cells_x {
                triangles.push([a, b, c]);
                triangles.push([a, c, d]);
            } else {
                triangles.push([a, b, d]);
                triangles.push([b, c, d]);
            }
        }
    }

    let mut node_kind = vec![NodeKind::Interior; nx * nz];
    for iy in 0..nx {
        for iz in 0..nz {
            if iy == 0 || iy == nx - 1 || iz == 0 || iz == nz - 1 {
                node_kind[idx(iy, iz)] = NodeKind::Insulating;
            }
        }
    }
    let tol = 1e-9;
    let mut electrode_nodes = Vec::with_capacity(spec.n_electrodes as usize);
    for k in 0..spec.n_electrodes as usize {
        let (start, end) = spec.electrode_span(k);
        let members: Vec<usize> = (0..nx)
            .filter(|&iy| {
                let y = nodes[idx(iy, 0)][1];
                y >= start - tol && y <= end + tol
            })
            .map(|iy| idx(iy, 0))
            .collect();
        if members.is_empty() {
            return Err(Error::InvalidSpec(format!("electrode {k} covers no mesh node")));
        }
        for &n in &members {
            node_kind[n] = NodeKind::Electrode(k);
        }
        electrode_nodes.push(members);
    }

    Ok(Mesh {
        spec: *spec,
        nodes,
        triangles,
        electrode_nodes,
        node_kind,
        nx,
        nz,
    })
}

/// Links image pixels (1 µm squares of the imaging window) to mesh triangles.
///
/// Each triangle lies inside exactly one pixel or outside the window; the
/// stored fraction is the share of the pixel's area the triangle covers, so the
/// fractions of every pixel sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelElementMap {
    pub rows: usize,
    pub cols: usize,
    /// Row-major over pixels: `(element, fraction of pixel area)`.
    pub pixels: Vec<Vec<(usize, f64)>>,
    /// Pixel index of every element, `None` outside the window.
    pub element_pixel: Vec<Option<usize>>,
}

impl PixelElementMap {
    /// Fraction of element `e`'s own area lying inside the window (1 or 0 for a structured mesh).
    pub fn element_coverage(&self, mesh: &Mesh, e: usize) -> f64 {
        match self.element_pixel[e] {
            None => 0.0,
            Some(p) => {
                let pixel_area = 1.0;
                let frac: f64 = self.pixels[p].iter().filter(|(el, _)| *el == e).map(|(_, f)| f).sum();
                frac * pixel_area / mesh.signed_area(e)
            }
        }
    }
}

pub fn pixel_element_map(mesh: &Mesh, spec: &DomainSpec) -> PixelElementMap {
    let (rows, cols) = spec.image_dims();
    let r = spec.elements_per_um as usize;
    let pad = spec.pad_side_um as usize * r;
    let mut pixels = vec![Vec::with_capacity(2 * r * r); rows * cols];
    let mut element_pixel = vec![None; mesh.triangles.len()];
    for (t, slot) in element_pixel.iter_mut().enumerate() {
        let (iy, iz) = mesh.element_cell(t);
        if iy < pad || iy >= pad + cols * r || iz >= rows * r {
            continue;
        }
        let p = (iz / r) * cols + (iy - pad) / r;
        // Pixel area is 1 µm².
        pixels[p].push((t, mesh.signed_area(t)));
        *slot = Some(p);
    }
    PixelElementMap {
        rows,
        cols,
        pixels,
        element_pixel,
    }
}
