//! Single-file tensor container: a JSON meta section, a JSON manifest
//! mapping tensor name -> {shape, dtype, offset}, then a raw little-endian
//! blob. Used for checkpoints, exported weights, and raw test dumps.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SSTENS1\n";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    F32,
}

impl DType {
    fn size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    shape: Vec<usize>,
    dtype: DType,
    offset: u64,
}

/// Write tensors with a caller-supplied JSON meta string.
pub fn write_container(
    path: &Path,
    meta_json: &str,
    entries: &[(String, &Tensor, DType)],
) -> io::Result<()> {
    let mut manifest: BTreeMap<String, ManifestEntry> = BTreeMap::new();
    let mut blob: Vec<u8> = Vec::new();
    for (name, tensor, dtype) in entries {
        let offset = blob.len() as u64;
        match dtype {
            DType::F64 => {
                for v in tensor.data() {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
            }
            DType::F32 => {
                for v in tensor.data() {
                    blob.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
        }
        manifest.insert(
            name.clone(),
            ManifestEntry { shape: tensor.shape().to_vec(), dtype: *dtype, offset },
        );
    }
    let manifest_json = serde_json::to_vec(&manifest)?;
    let mut f = File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(meta_json.len() as u64).to_le_bytes())?;
    f.write_all(meta_json.as_bytes())?;
    f.write_all(&(manifest_json.len() as u64).to_le_bytes())?;
    f.write_all(&manifest_json)?;
    f.write_all(&blob)?;
    Ok(())
}

pub struct Container {
    pub meta_json: String,
    pub tensors: BTreeMap<String, Tensor>,
    pub dtypes: BTreeMap<String, DType>,
}

pub fn read_container(path: &Path) -> io::Result<Container> {
    let mut f = File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "bad container magic"));
    }
    let meta_json = read_section(&mut f)?;
    let manifest_json = read_section(&mut f)?;
    let manifest: BTreeMap<String, ManifestEntry> = serde_json::from_str(&manifest_json)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    let mut blob = Vec::new();
    f.read_to_end(&mut blob)?;
    let mut tensors = BTreeMap::new();
    let mut dtypes = BTreeMap::new();
    for (name, entry) in manifest {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + n * entry.dtype.size();
        if end > blob.len() {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("tensor {name} extends past blob end"),
            ));
        }
        let bytes = &blob[start..end];
        let mut data = Vec::with_capacity(n);
        match entry.dtype {
            DType::F64 => {
                for c in bytes.chunks_exact(8) {
                    data.push(f64::from_le_bytes(c.try_into().unwrap()));
                }
            }
            DType::F32 => {
                for c in bytes.chunks_exact(4) {
                    data.push(f32::from_le_bytes(c.try_into().unwrap()) as f64);
                }
            }
        }
        tensors.insert(name.clone(), Tensor::new(entry.shape, data));
        dtypes.insert(name, entry.dtype);
    }
    Ok(Container { meta_json, tensors, dtypes })
}

fn read_section(f: &mut File) -> io::Result<String> {
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)?;
    let len = u64::from_le_bytes(len_bytes) as usize;
    let mut buf = vec![0u8; len];
    f.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}
