//! Flat named-array container with a JSON manifest.
//!
//! Used both for model checkpoints (name -> f64 tensor, plus free-form
//! metadata such as the canonical run config) and for packed single-file
//! volumes (image slices as f64, label slices as u8).
//!
//! Layout: 8-byte magic, little-endian u64 manifest length, JSON manifest
//! (entry name, dtype, shape, byte offset/length into the blob, metadata),
//! then the raw little-endian blob.

use crate::error::{AtmError, Result};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"ATMARCH1";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    byte_len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    entries: Vec<ManifestEntry>,
    meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub enum ArchiveArray {
    F64(ArrayD<f64>),
    U8(ArrayD<u8>),
}

impl ArchiveArray {
    fn dtype(&self) -> &'static str {
        match self {
            ArchiveArray::F64(_) => "f64",
            ArchiveArray::U8(_) => "u8",
        }
    }

    fn shape(&self) -> Vec<usize> {
        match self {
            ArchiveArray::F64(a) => a.shape().to_vec(),
            ArchiveArray::U8(a) => a.shape().to_vec(),
        }
    }
}

/// In-memory archive; entries keep insertion-independent (sorted) order on
/// write so the same content always produces the same bytes.
#[derive(Debug, Default, Clone)]
pub struct Archive {
    arrays: BTreeMap<String, ArchiveArray>,
    pub meta: BTreeMap<String, String>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_f64(&mut self, name: impl Into<String>, arr: ArrayD<f64>) {
        self.arrays.insert(name.into(), ArchiveArray::F64(arr));
    }

    pub fn insert_u8(&mut self, name: impl Into<String>, arr: ArrayD<u8>) {
        self.arrays.insert(name.into(), ArchiveArray::U8(arr));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&ArchiveArray> {
        self.arrays.get(name)
    }

    pub fn get_f64(&self, name: &str) -> Result<&ArrayD<f64>> {
        match self.arrays.get(name) {
            Some(ArchiveArray::F64(a)) => Ok(a),
            Some(_) => Err(AtmError::Checkpoint(format!("entry '{name}' is not f64"))),
            None => Err(AtmError::Checkpoint(format!("missing entry '{name}'"))),
        }
    }

    pub fn get_u8(&self, name: &str) -> Result<&ArrayD<u8>> {
        match self.arrays.get(name) {
            Some(ArchiveArray::U8(a)) => Ok(a),
            Some(_) => Err(AtmError::Checkpoint(format!("entry '{name}' is not u8"))),
            None => Err(AtmError::Checkpoint(format!("missing entry '{name}'"))),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let mut entries = Vec::with_capacity(self.arrays.len());
        let mut blob: Vec<u8> = Vec::new();
        for (name, arr) in &self.arrays {
            let offset = blob.len();
            match arr {
                ArchiveArray::F64(a) => {
                    for v in a.iter() {
                        blob.extend_from_slice(&v.to_le_bytes());
                    }
                }
                ArchiveArray::U8(a) => {
                    blob.extend(a.iter().copied());
                }
            }
            entries.push(ManifestEntry {
                name: name.clone(),
                dtype: arr.dtype().to_string(),
                shape: arr.shape(),
                offset,
                byte_len: blob.len() - offset,
            });
        }
        let manifest = Manifest { entries, meta: self.meta.clone() };
        let json = serde_json::to_vec(&manifest)?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        w.write_all(&blob)?;
        Ok(())
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(AtmError::Checkpoint("bad magic; not an archive file".into()));
        }
        let mut len8 = [0u8; 8];
        r.read_exact(&mut len8)?;
        let jlen = u64::from_le_bytes(len8) as usize;
        let mut json = vec![0u8; jlen];
        r.read_exact(&mut json)?;
        let manifest: Manifest = serde_json::from_slice(&json)?;
        let mut blob = Vec::new();
        r.read_to_end(&mut blob)?;

        let mut arrays = BTreeMap::new();
        for e in manifest.entries {
            let bytes = blob.get(e.offset..e.offset + e.byte_len).ok_or_else(|| {
                AtmError::Checkpoint(format!("entry '{}' out of blob bounds", e.name))
            })?;
            let n: usize = e.shape.iter().product();
            let arr = match e.dtype.as_str() {
                "f64" => {
                    if e.byte_len != n * 8 {
                        return Err(AtmError::Checkpoint(format!(
                            "entry '{}' byte length mismatch",
                            e.name
                        )));
                    }
                    let data: Vec<f64> = bytes
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    ArchiveArray::F64(ArrayD::from_shape_vec(IxDyn(&e.shape), data).unwrap())
                }
                "u8" => {
                    if e.byte_len != n {
                        return Err(AtmError::Checkpoint(format!(
                            "entry '{}' byte length mismatch",
                            e.name
                        )));
                    }
                    ArchiveArray::U8(
                        ArrayD::from_shape_vec(IxDyn(&e.shape), bytes.to_vec()).unwrap(),
                    )
                }
                other => {
                    return Err(AtmError::Checkpoint(format!(
                        "entry '{}' has unsupported dtype '{other}'",
                        e.name
                    )))
                }
            };
            arrays.insert(e.name, arr);
        }
        Ok(Archive { arrays, meta: manifest.meta })
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| {
            AtmError::Load { path: path.display().to_string(), reason: e.to_string() }
        })?);
        Self::read_from(&mut f)
    }
}
