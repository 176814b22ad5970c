//! Cross-sectional images and 8-bit PGM export.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Image rows (depth from the sensor surface, 1 µm each).
pub const IMG_H: usize = 100;
/// Image columns (lateral position, 1 µm each).
pub const IMG_W: usize = 200;

/// Row-major grid of real values. Used for anything image-shaped that is not
/// necessarily a valid permittivity map (stitched panoramas, metric inputs).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::InvalidInput(format!(
                "image {rows}×{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// Binary PGM (`P5`, maxval 255), byte = `round(255·clamp(v, 0, 1))`.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.cols, self.rows).into_bytes();
        out.extend(self.data.iter().map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8));
        out
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_pgm())?;
        Ok(())
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        // Header: magic, width, height, maxval, each separated by whitespace; comments start with '#'.
        let mut pos = 0usize;
        let mut fields = Vec::new();
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::format(pos as u64, "truncated PGM header"));
            }
            fields.push((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()));
        }
        if fields[0].1 != "P5" {
            return Err(Error::format(0, format!("expected P5 magic, found {:?}", fields[0].1)));
        }
        let num = |i: usize| -> Result<usize> {
            fields[i]
                .1
                .parse()
                .map_err(|_| Error::format(fields[i].0 as u64, format!("bad header number {:?}", fields[i].1)))
        };
        let (cols, rows, maxval) = (num(1)?, num(2)?, num(3)?);
        if maxval != 255 {
            return Err(Error::format(fields[3].0 as u64, "only maxval 255 is supported"));
        }
        pos += 1; // single whitespace after maxval
        let body = bytes
            .get(pos..pos + rows * cols)
            .ok_or_else(|| Error::format(bytes.len() as u64, format!("expected {} pixel bytes", rows * cols)))?;
        Image::new(rows, cols, body.iter().map(|&b| f64::from(b) / 255.0).collect())
    }

    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_pgm(&bytes)
    }
}

/// Normalized permittivity cross-section: 0 = background, 1 = inclusion.
/// Rows are depth above the sensor, columns lateral position.
#[derive(Debug, Clone, PartialEq)]
pub struct PermittivityImage(Image);

impl PermittivityImage {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        let img = Image::new(rows, cols, values)?;
        Self::try_from(img)
    }

    pub fn uniform(rows: usize, cols: usize, value: f64) -> Result<Self> {
        Self::new(rows, cols, vec![value; rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.0.rows
    }

    pub fn cols(&self) -> usize {
        self.0.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.0.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.0.get(r, c)
    }

    pub fn as_image(&self) -> &Image {
        &self.0
    }

    pub fn into_image(self) -> Image {
        self.0
    }

    /// Clamps arbitrary finite values into `[0, 1]`.
    pub fn clamped(img: Image) -> Result<Self> {
        if img.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite pixel value".into()));
        }
        let data = img.data.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self::new(img.rows, img.cols, data)
    }
}

impl TryFrom<Image> for PermittivityImage {
    type Error = Error;

    fn try_from(img: Image) -> Result<Self> {
        if let Some((i, v)) = img.data.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!(
                "pixel {i} has value {v}, permittivity images must lie in [0, 1]"
            )));
        }
        Ok(Self(img))
    }
}
