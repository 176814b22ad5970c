//! Simulated (capacitance, image) pairs, measurement noise, splits and the
//! on-disk dataset format.
//!
//! A dataset directory holds `manifest.json` and `samples.bin`. The binary file
//! starts with the magic `ECTD` and a little-endian `u32` version, followed by
//! fixed-size records: `m × n` normalized capacitances then the `rows × cols`
//! image, all `f32` little-endian row-major. Stored capacitances are clean;
//! noise is drawn at training time.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{Calibration, CapacitanceMatrix, ForwardModel, PhysicalPermittivity, MAX_OFFSET};
use crate::image::PermittivityImage;
use crate::mesh::DomainSpec;
use crate::phantom::{gen_phantom_with, PhantomSpec};

pub const DATASET_MAGIC: &[u8; 4] = b"ECTD";
pub const DATASET_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SAMPLES_FILE: &str = "samples.bin";

/// Additive i.i.d. Gaussian noise on normalized capacitances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub std: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self { std: 0.03 }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.std >= 0.0 && self.std.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "noise std {} must be non-negative",
                self.std
            )));
        }
        Ok(())
    }
}

/// Adds noise to the non-padded entries of `c`; padded entries stay zero.
pub fn add_noise(c: &CapacitanceMatrix, noise: &NoiseModel, seed: u64) -> CapacitanceMatrix {
    add_noise_with(c, noise, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn add_noise_with(c: &CapacitanceMatrix, noise: &NoiseModel, rng: &mut impl Rng) -> CapacitanceMatrix {
    let mut out = c.clone();
    if noise.std == 0.0 {
        return out;
    }
    let dist = Normal::new(0.0, noise.std).expect("validated std");
    for row in 0..c.m {
        for i in 0..c.n {
            if !c.is_padded(row, i) {
                out.set(row, i, c.get(row, i) + dist.sample(rng));
            }
        }
    }
    out
}

/// Left-right mirror image of a sample. The electrode row is symmetric about
/// the window centre, so pair `(i, i+d)` maps to `(n−1−i−d, n−1−i)` and the
/// mirrored measurements are exactly those of the mirrored phantom.
pub fn mirror_sample(c: &CapacitanceMatrix, image: &PermittivityImage) -> (CapacitanceMatrix, PermittivityImage) {
    let mut mc = c.clone();
    for row in 0..c.m {
        let d = row + 1;
        for i in 0..c.n.saturating_sub(d) {
            mc.set(row, c.n - 1 - d - i, c.get(row, i));
        }
    }
    let (h, w) = (image.rows(), image.cols());
    let v = (0..h * w).map(|k| image.get(k / w, w - 1 - k % w)).collect();
    (mc, PermittivityImage::new(h, w, v).expect("same dimensions"))
}

/// Independent generator for `(seed, stream, index)`; streams separate phantom
/// geometry from training noise.
pub fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.wrapping_mul(1 << 40) ^ index);
    rng
}

pub(crate) const PHANTOM_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    /// Raw all-background capacitances, F/m, `m × n` row-major.
    pub empty: Vec<f64>,
    /// Raw all-inclusion capacitances, F/m.
    pub full: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub count: usize,
    pub m: usize,
    pub n: usize,
    pub img_h: usize,
    pub img_w: usize,
    pub domain_spec: DomainSpec,
    pub phantom_spec: PhantomSpec,
    pub permittivity: PhysicalPermittivity,
    pub noise_std: f64,
    pub seed: u64,
    pub normalization: String,
    pub calibration: CalibrationRecord,
}

impl DatasetManifest {
    pub fn calibration(&self) -> Result<Calibration> {
        Calibration::new(
            CapacitanceMatrix::new(self.m, self.n, self.calibration.empty.clone())?,
            CapacitanceMatrix::new(self.m, self.n, self.calibration.full.clone())?,
        )
    }

    fn record_bytes(&self) -> usize {
        4 * (self.m * self.n + self.img_h * self.img_w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Normalized, noise-free.
    pub capacitance: CapacitanceMatrix,
    pub image: PermittivityImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

fn round_f32(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x as f32)).collect()
}

/// Everything `build_dataset` needs besides the sample count.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DatasetConfig {
    pub phantom: PhantomSpec,
    pub domain: DomainSpec,
    pub permittivity: PhysicalPermittivity,
    pub noise: NoiseModel,
    pub seed: u64,
}

/// Phantom of sample `index` in a dataset built with `seed`.
pub fn sample_phantom(
    phantom: &PhantomSpec,
    domain: &DomainSpec,
    seed: u64,
    index: usize,
) -> Result<PermittivityImage> {
    let (rows, cols) = domain.image_dims();
    gen_phantom_with(phantom, rows, cols, &mut stream_rng(seed, PHANTOM_STREAM, index as u64))
}

/// Simulates `count` samples in parallel. Values are rounded to `f32` so the
/// in-memory dataset equals what a write/read cycle returns.
pub fn build_dataset(count: usize, cfg: &DatasetConfig) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::InvalidInput("dataset count must be positive".into()));
    }
    cfg.noise.validate()?;
    let (rows, cols) = cfg.domain.image_dims();
    cfg.phantom.validate(rows, cols)?;
    let model = ForwardModel::new(&cfg.domain)?;
    let cal = model.calibration(&cfg.permittivity, MAX_OFFSET)?;
    let samples = (0..count)
        .into_par_iter()
        .map(|i| {
            let run = || -> Result<Sample> {
                let image = sample_phantom(&cfg.phantom, &cfg.domain, cfg.seed, i)?;
                let raw = model.capacitance_matrix(&image, &cfg.permittivity, MAX_OFFSET)?;
                let mut c = cal.normalize(&raw)?;
                c.values = round_f32(&c.values);
                let img = image.into_image();
                let image = PermittivityImage::new(rows, cols, round_f32(&img.data))?;
                Ok(Sample { capacitance: c, image })
            };
            run().map_err(|e| e.in_sample(i))
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        format_version: DATASET_VERSION,
        count,
        m: MAX_OFFSET,
        n: model.n_electrodes(),
        img_h: rows,
        img_w: cols,
        domain_spec: cfg.domain,
        phantom_spec: cfg.phantom,
        permittivity: cfg.permittivity,
        noise_std: cfg.noise.std,
        seed: cfg.seed,
        normalization: "full_empty".into(),
        calibration: CalibrationRecord {
            empty: cal.empty.values.clone(),
            full: cal.full.values.clone(),
        },
    };
    Ok(Dataset { manifest, samples })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Subset in the given order, with the manifest count updated.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut manifest = self.manifest.clone();
        manifest.count = indices.len();
        Dataset {
            manifest,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Un-normalized capacitances of sample `i`, F/m.
    pub fn raw_capacitance(&self, i: usize) -> Result<CapacitanceMatrix> {
        let cal = self.manifest.calibration()?;
        let c = &self.samples[i].capacitance;
        let mut out = c.clone();
        for row in 0..c.m {
            for j in 0..c.n {
                if !c.is_padded(row, j) {
                    let (e, f) = (cal.empty.get(row, j), cal.full.get(row, j));
                    out.set(row, j, e + c.get(row, j) * (f - e));
                }
            }
        }
        Ok(out)
    }
}

/// Shuffled partition into train/val/test. Val and test get `floor(f·count)`
/// samples, train takes the remainder.
pub fn split(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidSplit(format!(
            "fractions {fractions:?} must be in [0, 1] and sum to 1"
        )));
    }
    let n = dataset.len();
    let take = |f: f64| (f * n as f64 + 1e-9).floor() as usize;
    let (n_val, n_test) = (take(fractions[1]), take(fractions[2]));
    let n_train = n - n_val - n_test;
    for (name, f, k) in [
        ("train", fractions[0], n_train),
        ("val", fractions[1], n_val),
        ("test", fractions[2], n_test),
    ] {
        if f > 0.0 && k == 0 {
            return Err(Error::InvalidSplit(format!("{n} samples leave the {name} split empty")));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
    Ok((
        dataset.subset(&order[..n_train]),
        dataset.subset(&order[n_train..n_train + n_val]),
        dataset.subset(&order[n_train + n_val..]),
    ))
}

fn push_f32(buf: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Encoded `samples.bin` contents.
pub fn encode_samples(dataset: &Dataset) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + dataset.len() * dataset.manifest.record_bytes());
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    for s in &dataset.samples {
        push_f32(&mut buf, &s.capacitance.values);
        push_f32(&mut buf, s.image.values());
    }
    buf
}

pub fn encode_manifest(manifest: &DatasetManifest) -> Result<String> {
    serde_json::to_string_pretty(manifest)
        .map(|s| s + "\n")
        .map_err(|e| Error::InvalidInput(e.to_string()))
}

pub fn write_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    if dataset.manifest.count != dataset.len() {
        return Err(Error::InvalidInput(format!(
            "manifest count {} differs from {} samples",
            dataset.manifest.count,
            dataset.len()
        )));
    }
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(MANIFEST_FILE), encode_manifest(&dataset.manifest)?)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(SAMPLES_FILE))?);
    f.write_all(&encode_samples(dataset))?;
    f.flush()?;
    Ok(())
}

pub fn decode_dataset(manifest_text: &str, bytes: &[u8]) -> Result<Dataset> {
    let manifest: DatasetManifest = serde_json::from_str(manifest_text).map_err(|e| {
        Error::format(
            0,
            format!("{MANIFEST_FILE} line {} column {}: {e}", e.line(), e.column()),
        )
    })?;
    if manifest.format_version != DATASET_VERSION {
        return Err(Error::format(
            0,
            format!("unsupported manifest version {}", manifest.format_version),
        ));
    }
    if bytes.len() < 8 {
        return Err(Error::format(bytes.len() as u64, "truncated header"));
    }
    if &bytes[..4] != DATASET_MAGIC {
        return Err(Error::format(
            0,
            format!("bad magic {:?}, expected \"ECTD\"", &bytes[..4]),
        ));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != DATASET_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let rec = manifest.record_bytes();
    let body = bytes.len() - 8;
    if !body.is_multiple_of(rec) {
        return Err(Error::format(
            (8 + body / rec * rec) as u64,
            format!("trailing partial record ({} of {rec} bytes)", body % rec),
        ));
    }
    if body / rec != manifest.count {
        return Err(Error::format(
            8,
            format!(
                "manifest count {} but file holds {} records",
                manifest.count,
                body / rec
            ),
        ));
    }
    let floats = |off: usize, len: usize| -> Vec<f64> {
        bytes[off..off + 4 * len]
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
            .collect()
    };
    let mc = manifest.m * manifest.n;
    let mut samples = Vec::with_capacity(manifest.count);
    for k in 0..manifest.count {
        let off = 8 + k * rec;
        let capacitance = CapacitanceMatrix::new(manifest.m, manifest.n, floats(off, mc))?;
        let image = PermittivityImage::new(
            manifest.img_h,
            manifest.img_w,
            floats(off + 4 * mc, manifest.img_h * manifest.img_w),
        )
        .map_err(|e| Error::format((off + 4 * mc) as u64, e.to_string()))?;
        samples.push(Sample { capacitance, image });
    }
    Ok(Dataset { manifest, samples })
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let bytes = std::fs::read(dir.join(SAMPLES_FILE))?;
    decode_dataset(&text, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dataset(count: usize) -> Dataset {
        let spec = DomainSpec::default();
        let samples = (0..count)
            .map(|i| Sample {
                capacitance: CapacitanceMatrix::new(
                    5,
                    20,
                    (0..100).map(|k| f64::from((k + i) as f32 * 0.01)).collect(),
                )
                .unwrap(),
                image: PermittivityImage::uniform(100, 200, (i % 2) as f64).unwrap(),
            })
            .collect();
        Dataset {
            manifest: DatasetManifest {
                format_version: 1,
                count,
                m: 5,
                n: 20,
                img_h: 100,
                img_w: 200,
                domain_spec: spec,
                phantom_spec: PhantomSpec::default(),
                permittivity: PhysicalPermittivity::default(),
                noise_std: 0.03,
                seed: 7,
                normalization: "full_empty".into(),
                calibration: CalibrationRecord {
                    empty: vec![1.0; 100],
                    full: vec![2.0; 100],
                },
            },
            samples,
        }
    }

    #[test]
    fn zero_noise_is_identity_and_padding_untouched() {
        let c = toy_dataset(1).samples[0].capacitance.clone();
        assert_eq!(add_noise(&c, &NoiseModel { std: 0.0 }, 1), c);
        let mut padded = c.clone();
        for row in 0..5 {
            for i in 0..20 {
                if padded.is_padded(row, i) {
                    padded.set(row, i, 0.0);
                }
            }
        }
        let noisy = add_noise(&padded, &NoiseModel::default(), 1);
        for row in 0..5 {
            for i in 0..20 {
                if padded.is_padded(row, i) {
                    assert_eq!(noisy.get(row, i), 0.0);
                } else {
                    assert_ne!(noisy.get(row, i), padded.get(row, i));
                }
            }
        }
    }

    #[test]
    fn split_sizes_follow_floor_rule() {
        let d = toy_dataset(10);
        let (a, b, c) = split(&d, [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (8, 1, 1));
        assert_eq!(a.manifest.count, 8);
        let (a2, _, _) = split(&d, [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!(a, a2);
        assert!(matches!(
            split(&toy_dataset(5), [0.8, 0.1, 0.1], 0),
            Err(Error::InvalidSplit(_))
        ));
        assert!(matches!(split(&d, [0.5, 0.1, 0.1], 0), Err(Error::InvalidSplit(_))));
    }

    #[test]
    fn paper_scale_split() {
        let d = toy_dataset(6400);
        let (a, b, c) = split(&d, [0.8, 0.1, 0.1], 0).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (5120, 640, 640));
    }

    #[test]
    fn encode_decode_round_trip() {
        let d = toy_dataset(3);
        let bytes = encode_samples(&d);
        let text = encode_manifest(&d.manifest).unwrap();
        let back = decode_dataset(&text, &bytes).unwrap();
        assert_eq!(back, d);
        assert_eq!(encode_samples(&back), bytes);
    }

    #[test]
    fn decode_rejects_corruption() {
        let d = toy_dataset(2);
        let text = encode_manifest(&d.manifest).unwrap();
        let mut bytes = encode_samples(&d);
        bytes[0] = b'X';
        assert!(matches!(
            decode_dataset(&text, &bytes),
            Err(Error::Format { offset: 0, .. })
        ));

        let bytes = encode_samples(&d);
        let mut m = d.manifest.clone();
        m.count = 3;
        let err = decode_dataset(&encode_manifest(&m).unwrap(), &bytes).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));

        let truncated = &bytes[..bytes.len() - 10];
        assert!(matches!(decode_dataset(&text, truncated), Err(Error::Format { .. })));
    }
}
