//! Flat binary container of named arrays.
//!
//! Layout: magic, version, entry count, then per entry
//! (name length, name bytes, dtype tag, rank, dims, raw little-endian data).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::Error;
use crate::tensor::Dtype;

const MAGIC: &[u8; 8] = b"SNASCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayValue {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ArrayValue {
    pub fn dtype(&self) -> Dtype {
        match self {
            ArrayValue::F32(_) => Dtype::F32,
            ArrayValue::F64(_) => Dtype::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayValue::F32(v) => v.len(),
            ArrayValue::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            ArrayValue::F32(v) => v.iter().map(|&x| x as f64).collect(),
            ArrayValue::F64(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub value: ArrayValue,
}

/// Ordered collection of named arrays; iteration order is name order, which
/// makes writes reproducible.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub entries: BTreeMap<String, NamedArray>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, value: ArrayValue) {
        self.entries.insert(name.into(), NamedArray { shape, value });
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.entries.get(name)
    }

    /// Atomic write: temp file in the same directory, then rename.
    pub fn write(&self, path: &Path) -> Result<(), Error> {
        let tmp = path.with_extension("tmp");
        {
            let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let mut w = BufWriter::new(file);
            self.write_to(&mut w).map_err(|e| Error::io(&tmp, e))?;
            w.flush().map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, arr) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[arr.value.dtype().tag()])?;
            w.write_all(&(arr.shape.len() as u32).to_le_bytes())?;
            for &d in &arr.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            match &arr.value {
                ArrayValue::F32(v) => {
                    for &x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
                ArrayValue::F64(v) => {
                    for &x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, Error> {
        let corrupt = |detail: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            detail: detail.to_string(),
        };
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = read_u32(&mut r).map_err(|e| Error::io(path, e))?;
        if version != VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r).map_err(|e| Error::io(path, e))?;
        let mut archive = Archive::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r).map_err(|e| Error::io(path, e))? as usize;
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf).map_err(|e| Error::io(path, e))?;
            let name = String::from_utf8(name_buf).map_err(|_| corrupt("non-utf8 name"))?;
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag).map_err(|e| Error::io(path, e))?;
            let dtype = Dtype::from_tag(tag[0]).ok_or_else(|| corrupt("unknown dtype tag"))?;
            let rank = read_u32(&mut r).map_err(|e| Error::io(path, e))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut r).map_err(|e| Error::io(path, e))? as usize);
            }
            let n: usize = shape.iter().product();
            let value = match dtype {
                Dtype::F32 => {
                    let mut v = Vec::with_capacity(n);
                    let mut buf = [0u8; 4];
                    for _ in 0..n {
                        r.read_exact(&mut buf)
                            .map_err(|_| corrupt("truncated array data"))?;
                        v.push(f32::from_le_bytes(buf));
                    }
                    ArrayValue::F32(v)
                }
                Dtype::F64 => {
                    let mut v = Vec::with_capacity(n);
                    let mut buf = [0u8; 8];
                    for _ in 0..n {
                        r.read_exact(&mut buf)
                            .map_err(|_| corrupt("truncated array data"))?;
                        v.push(f64::from_le_bytes(buf));
                    }
                    ArrayValue::F64(v)
                }
            };
            archive.entries.insert(name, NamedArray { shape, value });
        }
        Ok(archive)
    }
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
