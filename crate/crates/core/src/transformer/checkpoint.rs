//! `TRAX1` checkpoint files.
//!
//! Layout: the 5-byte magic, a little-endian `u64` header length, the UTF-8
//! JSON header, then every tensor as little-endian `f32` in manifest order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layers::Parameters;
use super::model::{Model, ModelConfig};
use crate::error::{Result, TrackError};
use crate::scalar::Scalar;
use crate::tokenizer::FeatureNorm;

pub const MAGIC: &[u8; 5] = b"TRAX1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the data section.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    pub norm: FeatureNorm,
    pub tensors: Vec<TensorEntry>,
    /// Free-form training metadata.
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn write<T: Scalar, W: Write>(model: &Model<T>, meta: serde_json::Value, mut out: W) -> Result<()> {
    let mut tensors = Vec::new();
    let mut data = Vec::new();
    model.visit("", &mut |name, shape, xs| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset: data.len(),
        });
        for x in xs {
            data.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    });
    let header = Header {
        config: model.config.clone(),
        norm: model.norm.clone(),
        tensors,
        meta,
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(MAGIC)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    out.write_all(&data)?;
    Ok(())
}

pub fn read<T: Scalar, R: Read>(mut input: R) -> Result<(Model<T>, Header)> {
    let bad = |m: String| TrackError::Checkpoint(m);
    let mut magic = [0u8; 5];
    input.read_exact(&mut magic).map_err(|_| bad("file too short".into()))?;
    if &magic != MAGIC {
        return Err(bad("bad magic, not a TRAX1 checkpoint".into()));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len).map_err(|_| bad("truncated header length".into()))?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 64 << 20 {
        return Err(bad(format!("implausible header length {len}")));
    }
    let mut json = vec![0u8; len];
    input.read_exact(&mut json).map_err(|_| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&json)?;
    let mut data = Vec::new();
    input.read_to_end(&mut data)?;

    let mut model = Model::<T>::zeros(header.config.clone(), header.norm.clone())?;
    let mut expected = Vec::new();
    model.visit("", &mut |name, shape, _| expected.push((name.to_string(), shape.to_vec())));
    if expected.len() != header.tensors.len() {
        return Err(bad(format!(
            "manifest lists {} tensors, config implies {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    for ((name, shape), e) in expected.iter().zip(&header.tensors) {
        if name != &e.name || shape != &e.shape {
            return Err(bad(format!("tensor {} {:?} does not match expected {name} {shape:?}", e.name, e.shape)));
        }
    }
    let mut k = 0;
    let mut err = None;
    model.visit_mut("", &mut |_, xs| {
        let start = header.tensors[k].offset;
        let end = start + 4 * xs.len();
        if end > data.len() {
            err.get_or_insert_with(|| format!("tensor {} runs past end of data", header.tensors[k].name));
        } else {
            for (x, b) in xs.iter_mut().zip(data[start..end].chunks_exact(4)) {
                *x = T::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
            }
        }
        k += 1;
    });
    if let Some(e) = err {
        return Err(bad(e));
    }
    Ok((model, header))
}

pub fn save<T: Scalar>(model: &Model<T>, meta: serde_json::Value, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write(model, meta, std::io::BufWriter::new(f))
}

pub fn load<T: Scalar>(path: &Path) -> Result<(Model<T>, Header)> {
    let f = std::fs::File::open(path)?;
    read(std::io::BufReader::new(f))
}
