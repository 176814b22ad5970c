//! Synthetic permittivity phantoms: anti-aliased microspheres and rough biofilm
//! layers grown from the sensor surface.
//!
//! Image row `r` covers depths `[r, r + 1)` µm above the sensor, column `c`
//! the lateral interval `[c, c + 1)` µm.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{PermittivityImage, IMG_H, IMG_W};

/// Rejection attempts per disk before giving up.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

/// Sub-pixel samples per axis when estimating disk coverage of boundary pixels.
const SUPERSAMPLE: usize = 16;

/// Closed interval `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub min: f64,
    pub max: f64,
}

impl Interval {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub const fn point(v: f64) -> Self {
        Self { min: v, max: v }
    }

    fn check(&self, name: &str) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite() && self.min <= self.max) {
            return Err(Error::InvalidInput(format!(
                "{name} range [{}, {}] is empty",
                self.min, self.max
            )));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.min == self.max {
            self.min
        } else {
            rng.random_range(self.min..=self.max)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MicrosphereSpec {
    pub count: (u32, u32),
    pub radius_um: Interval,
    /// Depth of the disk centre above the sensor.
    pub center_depth_um: Interval,
}

impl Default for MicrosphereSpec {
    fn default() -> Self {
        Self {
            count: (1, 3),
            radius_um: Interval::new(10.0, 20.0),
            center_depth_um: Interval::new(5.0, 80.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiofilmSpec {
    pub base_thickness_um: Interval,
    pub roughness_amplitude_um: Interval,
    pub correlation_length_um: Interval,
    /// Probability that a film carries one or two elliptical voids.
    pub void_probability: f64,
}

impl Default for BiofilmSpec {
    fn default() -> Self {
        Self {
            base_thickness_um: Interval::new(10.0, 60.0),
            roughness_amplitude_um: Interval::new(0.0, 20.0),
            correlation_length_um: Interval::new(20.0, 60.0),
            void_probability: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PhantomSpec {
    Microsphere(MicrosphereSpec),
    Biofilm(BiofilmSpec),
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec::Microsphere(MicrosphereSpec::default())
    }
}

impl PhantomSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            PhantomSpec::Microsphere(_) => "microsphere",
            PhantomSpec::Biofilm(_) => "biofilm",
        }
    }

    /// Checks the ranges against a `rows × cols` window.
    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        let (h, w) = (rows as f64, cols as f64);
        match self {
            PhantomSpec::Microsphere(s) => {
                if s.count.0 == 0 || s.count.0 > s.count.1 {
                    return Err(Error::InvalidInput(format!(
                        "sphere count range {:?} is empty",
                        s.count
                    )));
                }
                s.radius_um.check("radius")?;
                s.center_depth_um.check("centre depth")?;
                if s.radius_um.min <= 0.0 {
                    return Err(Error::InvalidInput("radii must be positive".into()));
                }
                let r = s.radius_um.min;
                let lo = s.center_depth_um.min.max(r);
                let hi = s.center_depth_um.max.min(h - r);
                if 2.0 * r > w || lo > hi {
                    return Err(Error::InvalidInput(format!(
                        "no disk of radius {r} µm fits the {rows}×{cols} window at the requested depths"
                    )));
                }
            }
            PhantomSpec::Biofilm(s) => {
                s.base_thickness_um.check("base thickness")?;
                s.roughness_amplitude_um.check("roughness amplitude")?;
                s.correlation_length_um.check("correlation length")?;
                if s.base_thickness_um.min < 0.0 || s.base_thickness_um.max > h {
                    return Err(Error::InvalidInput(format!(
                        "base thickness must lie within [0, {h}] µm"
                    )));
                }
                if s.roughness_amplitude_um.min < 0.0 || s.correlation_length_um.min <= 0.0 {
                    return Err(Error::InvalidInput("roughness parameters must be non-negative".into()));
                }
                if !(0.0..=1.0).contains(&s.void_probability) {
                    return Err(Error::InvalidInput("void probability must lie in [0, 1]".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Disk {
    /// Lateral centre, µm.
    pub y: f64,
    /// Depth of the centre, µm.
    pub z: f64,
    pub r: f64,
}

impl Disk {
    pub fn overlaps(&self, other: &Disk) -> bool {
        (self.y - other.y).hypot(self.z - other.z) <= self.r + other.r
    }

    /// Pixel bounding box `(row0, row1, col0, col1)`, exclusive ends, clipped to the window.
    pub fn bounding_box(&self, rows: usize, cols: usize) -> (usize, usize, usize, usize) {
        let clip = |v: f64, n: usize| v.max(0.0).min(n as f64) as usize;
        (
            clip((self.z - self.r).floor(), rows),
            clip((self.z + self.r).ceil(), rows),
            clip((self.y - self.r).floor(), cols),
            clip((self.y + self.r).ceil(), cols),
        )
    }
}

/// Fraction of pixel `(row, col)` inside the ellipse `((y−cy)/ay)² + ((z−cz)/az)² ≤ 1`.
fn ellipse_coverage(row: usize, col: usize, cy: f64, cz: f64, ay: f64, az: f64) -> f64 {
    let inside = |y: f64, z: f64| ((y - cy) / ay).powi(2) + ((z - cz) / az).powi(2) <= 1.0;
    let (y0, z0) = (col as f64, row as f64);
    let corners = [(y0, z0), (y0 + 1.0, z0), (y0, z0 + 1.0), (y0 + 1.0, z0 + 1.0)];
    let n_in = corners.iter().filter(|&&(y, z)| inside(y, z)).count();
    // An ellipse is convex, so a pixel with all corners inside is fully covered. A pixel
    // with no corner inside may still be clipped by the ellipse's extremal points.
    if n_in == 4 {
        return 1.0;
    }
    let near = (y0 + 0.5 - cy).abs() <= ay + 1.0 && (z0 + 0.5 - cz).abs() <= az + 1.0;
    if n_in == 0 && !near {
        return 0.0;
    }
    let step = 1.0 / SUPERSAMPLE as f64;
    let mut hits = 0usize;
    for i in 0..SUPERSAMPLE {
        for j in 0..SUPERSAMPLE {
            if inside(y0 + (j as f64 + 0.5) * step, z0 + (i as f64 + 0.5) * step) {
                hits += 1;
            }
        }
    }
    hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
}

/// Adds anti-aliased disks to `values` (row-major `rows × cols`).
pub fn paint_disks(values: &mut [f64], rows: usize, cols: usize, disks: &[Disk]) {
    for d in disks {
        let (r0, r1, c0, c1) = d.bounding_box(rows, cols);
        for row in r0..r1 {
            for col in c0..c1 {
                let v = &mut values[row * cols + col];
                *v = (*v + ellipse_coverage(row, col, d.y, d.z, d.r, d.r)).min(1.0);
            }
        }
    }
}

/// Image containing exactly the given disks.
pub fn disk_image(rows: usize, cols: usize, disks: &[Disk]) -> Result<PermittivityImage> {
    let mut v = vec![0.0; rows * cols];
    paint_disks(&mut v, rows, cols, disks);
    PermittivityImage::new(rows, cols, v)
}

/// Non-overlapping disks fully inside the window, drawn in sequence by rejection.
pub fn place_disks(s: &MicrosphereSpec, rows: usize, cols: usize, rng: &mut impl Rng) -> Result<Vec<Disk>> {
    let count = rng.random_range(s.count.0..=s.count.1) as usize;
    let (h, w) = (rows as f64, cols as f64);
    let mut disks: Vec<Disk> = Vec::with_capacity(count);
    for k in 0..count {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let r = s.radius_um.sample(rng);
            let (zlo, zhi) = (s.center_depth_um.min.max(r), s.center_depth_um.max.min(h - r));
            if zlo > zhi || 2.0 * r > w {
                continue;
            }
            let cand = Disk {
                y: Interval::new(r, w - r).sample(rng),
                z: Interval::new(zlo, zhi).sample(rng),
                r,
            };
            if disks.iter().all(|d| !d.overlaps(&cand)) {
                disks.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::GenerationFailure(format!(
                "could not place disk {} of {count} after {MAX_PLACEMENT_ATTEMPTS} attempts",
                k + 1
            )));
        }
    }
    Ok(disks)
}

/// Zero-mean, unit-variance Gaussian random field along `n` columns with
/// squared-exponential correlation of length `ell`.
fn smooth_field(n: usize, ell: f64, rng: &mut impl Rng) -> Vec<f64> {
    // Pad so the kernel's tails do not see a boundary.
    let half = (3.0 * ell).ceil() as usize;
    let white: Vec<f64> = (0..n + 2 * half).map(|_| rng.sample(StandardNormal)).collect();
    // Convolving white noise with exp(−x²/ℓ²) yields correlation exp(−x²/(2ℓ²)).
    let kernel: Vec<f64> = (0..=2 * half)
        .map(|k| {
            let x = k as f64 - half as f64;
            (-(x * x) / (ell * ell)).exp()
        })
        .collect();
    let norm = kernel.iter().map(|k| k * k).sum::<f64>().sqrt();
    (0..n)
        .map(|i| kernel.iter().zip(&white[i..]).map(|(k, w)| k * w).sum::<f64>() / norm)
        .collect()
}

fn biofilm(s: &BiofilmSpec, rows: usize, cols: usize, rng: &mut impl Rng) -> Vec<f64> {
    let base = s.base_thickness_um.sample(rng);
    let amp = s.roughness_amplitude_um.sample(rng);
    let ell = s.correlation_length_um.sample(rng);
    let field = smooth_field(cols, ell, rng);
    let h = rows as f64;
    let mut v = vec![0.0; rows * cols];
    let heights: Vec<f64> = field.iter().map(|f| (base + amp * f).clamp(0.0, h)).collect();
    for (col, &top) in heights.iter().enumerate() {
        for row in 0..rows {
            v[row * cols + col] = (top - row as f64).clamp(0.0, 1.0);
        }
    }
    if s.void_probability > 0.0 && rng.random_bool(s.void_probability) {
        let n_voids = rng.random_range(1..=2);
        for _ in 0..n_voids {
            let col = rng.random_range(0..cols);
            let top = heights[col];
            if top < 6.0 {
                continue;
            }
            let az = rng.random_range(1.5..=(top / 4.0).max(1.5));
            let ay = rng.random_range(az..=3.0 * az);
            let cz = rng.random_range(az + 1.0..=(top - az - 1.0).max(az + 1.0));
            let cy = col as f64 + 0.5;
            for row in 0..rows {
                for c in 0..cols {
                    let cov = ellipse_coverage(row, c, cy, cz, ay, az);
                    if cov > 0.0 {
                        v[row * cols + c] *= 1.0 - cov;
                    }
                }
            }
        }
    }
    v
}

/// Phantom on the default 100 × 200 window.
pub fn gen_phantom(spec: &PhantomSpec, seed: u64) -> Result<PermittivityImage> {
    gen_phantom_in(spec, IMG_H, IMG_W, seed)
}

pub fn gen_phantom_in(spec: &PhantomSpec, rows: usize, cols: usize, seed: u64) -> Result<PermittivityImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gen_phantom_with(spec, rows, cols, &mut rng)
}

/// Phantom drawn from a caller-supplied generator.
pub fn gen_phantom_with(spec: &PhantomSpec, rows: usize, cols: usize, rng: &mut impl Rng) -> Result<PermittivityImage> {
    spec.validate(rows, cols)?;
    let v = match spec {
        PhantomSpec::Microsphere(s) => {
            let disks = place_disks(s, rows, cols, rng)?;
            let mut v = vec![0.0; rows * cols];
            paint_disks(&mut v, rows, cols, &disks);
            v
        }
        PhantomSpec::Biofilm(s) => biofilm(s, rows, cols, rng),
    };
    PermittivityImage::new(rows, cols, v)
}
