//! Binary parameter archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"NMNCKPT\0"  u32 version
//! u32 n_meta   { u32 len, utf8 key, u32 len, utf8 value } * n_meta
//! u32 n_arrays { u32 len, utf8 name, u32 ndim, u64 dim * ndim, f64 * prod(dims) } * n_arrays
//! ```
//!
//! Array names: `gcn_w_{l}`, `hw_t_{l}`, `hw_b_{l}` for each encoder layer,
//! then `w_s`, `w_gate`, `w_n`. Metadata holds the training config text
//! under `config`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use crate::error::{NmnError, Result};
use crate::model::ModelParams;
use crate::training::TrainConfig;

const MAGIC: &[u8; 8] = b"NMNCKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub arrays: BTreeMap<String, Array2<f64>>,
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(truncated)?;
    String::from_utf8(buf).map_err(|_| NmnError::Checkpoint("invalid UTF-8 string".into()))
}

fn truncated(_: std::io::Error) -> NmnError {
    NmnError::Checkpoint("truncated archive".into())
}

impl Checkpoint {
    pub fn from_model(params: &ModelParams, config: &TrainConfig) -> Self {
        let mut metadata = BTreeMap::new();
        metadata.insert("config".to_string(), config.to_text());
        let arrays = params
            .named_arrays()
            .into_iter()
            .map(|(k, v)| (k, v.clone()))
            .collect();
        Checkpoint { metadata, arrays }
    }

    pub fn config(&self) -> Result<TrainConfig> {
        let text = self
            .metadata
            .get("config")
            .ok_or_else(|| NmnError::Checkpoint("missing config metadata".into()))?;
        TrainConfig::parse(text)
    }

    /// Parameters and the config they were trained with.
    pub fn into_model(self) -> Result<(ModelParams, TrainConfig)> {
        let config = self.config()?;
        let params = ModelParams::from_named(self.arrays, config.beta)?;
        Ok((params, config))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let w = &mut out;
        // writes into a Vec cannot fail
        w.write_u32::<LittleEndian>(VERSION).unwrap();
        w.write_u32::<LittleEndian>(self.metadata.len() as u32).unwrap();
        for (k, v) in &self.metadata {
            write_str(w, k).unwrap();
            write_str(w, v).unwrap();
        }
        w.write_u32::<LittleEndian>(self.arrays.len() as u32).unwrap();
        for (name, a) in &self.arrays {
            write_str(w, name).unwrap();
            w.write_u32::<LittleEndian>(2).unwrap();
            w.write_u64::<LittleEndian>(a.nrows() as u64).unwrap();
            w.write_u64::<LittleEndian>(a.ncols() as u64).unwrap();
            for &x in a.iter() {
                w.write_f64::<LittleEndian>(x).unwrap();
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(NmnError::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
        if version != VERSION {
            return Err(NmnError::Checkpoint(format!("unsupported version {version}")));
        }
        let n_meta = r.read_u32::<LittleEndian>().map_err(truncated)?;
        let mut metadata = BTreeMap::new();
        for _ in 0..n_meta {
            let k = read_str(&mut r)?;
            let v = read_str(&mut r)?;
            metadata.insert(k, v);
        }
        let n_arrays = r.read_u32::<LittleEndian>().map_err(truncated)?;
        let mut arrays = BTreeMap::new();
        for _ in 0..n_arrays {
            let name = read_str(&mut r)?;
            let ndim = r.read_u32::<LittleEndian>().map_err(truncated)?;
            if ndim != 2 {
                return Err(NmnError::Checkpoint(format!("array {name}: expected 2 dims, found {ndim}")));
            }
            let rows = r.read_u64::<LittleEndian>().map_err(truncated)? as usize;
            let cols = r.read_u64::<LittleEndian>().map_err(truncated)? as usize;
            let len = rows
                .checked_mul(cols)
                .filter(|&n| n.saturating_mul(8) <= r.len())
                .ok_or_else(|| NmnError::Checkpoint(format!("array {name}: truncated data")))?;
            let mut data = vec![0.0; len];
            r.read_f64_into::<LittleEndian>(&mut data).map_err(truncated)?;
            let a = Array2::from_shape_vec((rows, cols), data).expect("length checked");
            arrays.insert(name, a);
        }
        if !r.is_empty() {
            return Err(NmnError::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint { metadata, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| NmnError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| NmnError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
