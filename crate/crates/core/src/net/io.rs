//! Model file: magic `ECTM`, `u32` version, a length-prefixed JSON block with
//! the network configuration and training metadata, then named `f32` tensors.
//! All integers are little-endian `u32`.

use std::collections::HashMap;
use std::path::Path;

use ect_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use super::train::{TrainedModel, TrainingMeta};
use super::{Network, NetworkConfig};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"ECTM";
pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    meta: TrainingMeta,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

pub fn encode_model(model: &TrainedModel) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        config: model.network.config().clone(),
        meta: model.meta.clone(),
    })
    .expect("header serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    put_u32(&mut buf, MODEL_VERSION as usize);
    put_u32(&mut buf, header.len());
    buf.extend_from_slice(&header);
    let tensors = model.network.named_tensors();
    put_u32(&mut buf, tensors.len());
    for (name, t) in &tensors {
        put_u32(&mut buf, name.len());
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.shape().len());
        for &d in t.shape() {
            put_u32(&mut buf, d);
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.pos as u64, format!("truncated model file reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<TrainedModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MODEL_MAGIC {
        return Err(Error::format(0, "bad magic, expected \"ECTM\""));
    }
    let version = r.u32("version")?;
    if version != MODEL_VERSION as usize {
        return Err(Error::format(4, format!("unsupported model version {version}")));
    }
    let len = r.u32("header length")?;
    let start = r.pos;
    let header: Header = serde_json::from_slice(r.take(len, "header")?)
        .map_err(|e| Error::format(start as u64, format!("bad header: {e}")))?;
    let count = r.u32("record count")?;
    let mut tensors: HashMap<String, Tensor<f32>> = HashMap::with_capacity(count);
    for _ in 0..count {
        let at = r.pos as u64;
        let name_len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::format(at, "parameter name is not UTF-8"))?
            .to_string();
        let ndims = r.u32("rank")?;
        let shape = (0..ndims).map(|_| r.u32("shape")).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data = r
            .take(4 * len, "tensor data")?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::from_vec(&shape, data).map_err(|e| Error::format(at, e.to_string()))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::format(at, format!("duplicate parameter `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after last record"));
    }
    let expected = Network::<f32>::new(&header.config, 0)
        .map_err(|e| Error::format(start as u64, e.to_string()))?
        .named_tensors()
        .len();
    if expected != tensors.len() {
        return Err(Error::format(
            start as u64,
            format!("{} records, configuration expects {expected}", tensors.len()),
        ));
    }
    let network = Network::from_named(&header.config, |name| tensors.remove(name))
        .map_err(|e| Error::format(start as u64, e.to_string()))?;
    Ok(TrainedModel {
        network,
        meta: header.meta,
    })
}

pub fn save_model(model: &TrainedModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_model(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<TrainedModel> {
    decode_model(&std::fs::read(path)?)
}

/// Loads a model and rejects it unless its architecture equals `config`.
pub fn load_model_expecting(path: impl AsRef<Path>, config: &NetworkConfig) -> Result<TrainedModel> {
    let model = load_model(path)?;
    if model.network.config() != config {
        return Err(Error::format(
            8,
            "model architecture differs from the requested configuration",
        ));
    }
    Ok(model)
}
