//! Self-describing binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   [8]  b"S2ICKPT\0"
//! version u32
//! module  string (u32 length + utf-8 bytes)
//! count   u64  number of records
//! record* :
//!   name   string
//!   dtype  u8   (0 = f32, 1 = f64, 2 = u64)
//!   rank   u32
//!   shape  u64 * rank
//!   data   raw little-endian values
//! ```
//!
//! Round-trips are bit-exact: floats are stored as their IEEE bytes.

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Scalar, Tensor};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"S2ICKPT\0";
pub const FORMAT_VERSION: u32 = 1;

/// One named record: a tensor of floats or a vector of u64 state words.
#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    F64 { shape: Vec<usize>, data: Vec<f64> },
    U64 { data: Vec<u64> },
}

impl Record {
    pub fn dtype(&self) -> Dtype {
        match self {
            Record::F32 { .. } => Dtype::F32,
            Record::F64 { .. } => Dtype::F64,
            Record::U64 { .. } => Dtype::U64,
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            Record::F32 { shape, .. } => shape.clone(),
            Record::F64 { shape, .. } => shape.clone(),
            Record::U64 { data } => vec![data.len()],
        }
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Record {
        match T::DTYPE {
            Dtype::F32 => Record::F32 {
                shape: t.shape().to_vec(),
                data: t.to_vec().iter().map(|v| v.to_f64() as f32).collect(),
            },
            _ => Record::F64 {
                shape: t.shape().to_vec(),
                data: t.to_vec().iter().map(|v| v.to_f64()).collect(),
            },
        }
    }
}

/// An ordered name -> record map.
#[derive(Debug, Default, Clone)]
pub struct Checkpoint {
    pub module: String,
    records: BTreeMap<String, Record>,
}

impl Checkpoint {
    pub fn new(module: &str) -> Checkpoint {
        Checkpoint {
            module: module.to_string(),
            records: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.records.keys().map(|s| s.as_str())
    }

    pub fn insert(&mut self, name: &str, rec: Record) {
        if self.records.insert(name.to_string(), rec).is_some() {
            panic!("duplicate checkpoint record {name}");
        }
    }

    pub fn insert_tensor<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) {
        self.insert(name, Record::from_tensor(t));
    }

    pub fn insert_u64s(&mut self, name: &str, data: Vec<u64>) {
        self.insert(name, Record::U64 { data });
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.get(name)
    }

    pub fn get_u64s(&self, name: &str) -> Result<&[u64]> {
        match self.records.get(name) {
            Some(Record::U64 { data }) => Ok(data),
            Some(_) => Err(Error::Checkpoint(format!("record {name} is not u64"))),
            None => Err(Error::Checkpoint(format!("missing record {name}"))),
        }
    }

    /// Copy a float record into an existing tensor, which must shape-match.
    pub fn load_into<T: Scalar>(&self, name: &str, t: &Tensor<T>) -> Result<()> {
        let rec = self
            .records
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing record {name}")))?;
        if rec.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "record {name}: checkpoint shape {:?} vs model shape {:?}",
                rec.shape(),
                t.shape()
            )));
        }
        let values: Vec<T> = match rec {
            Record::F32 { data, .. } => data.iter().map(|&v| T::from_f64(v as f64)).collect(),
            Record::F64 { data, .. } => data.iter().map(|&v| T::from_f64(v)).collect(),
            Record::U64 { .. } => {
                return Err(Error::Checkpoint(format!("record {name} is u64 state")))
            }
        };
        t.with_data_mut(|d| d.copy_from_slice(&values));
        Ok(())
    }

    /// Compare this checkpoint's float records against an expected
    /// (name, shape) inventory. Returns human-readable differences.
    pub fn diff_against(&self, expected: &[(String, Vec<usize>)]) -> Vec<String> {
        let mut diffs = Vec::new();
        let expect: BTreeMap<&str, &Vec<usize>> =
            expected.iter().map(|(n, s)| (n.as_str(), s)).collect();
        for (name, shape) in &expect {
            match self.records.get(*name) {
                None => diffs.push(format!("missing in checkpoint: {name} {shape:?}")),
                Some(rec) if &rec.shape() != *shape => diffs.push(format!(
                    "shape mismatch: {name} checkpoint {:?} vs model {shape:?}",
                    rec.shape()
                )),
                Some(_) => {}
            }
        }
        for name in self.records.keys() {
            if !expect.contains_key(name.as_str()) && !name.starts_with("state.") {
                diffs.push(format!("unexpected in checkpoint: {name}"));
            }
        }
        diffs
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        write_string(&mut buf, &self.module);
        buf.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for (name, rec) in &self.records {
            write_string(&mut buf, name);
            buf.push(rec.dtype().tag());
            let shape = rec.shape();
            buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in &shape {
                buf.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            match rec {
                Record::F32 { data, .. } => {
                    for v in data {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Record::F64 { data, .. } => {
                    for v in data {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Record::U64 { data } => {
                    for v in data {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        let tmp = path.with_extension("tmp");
        std::fs::File::create(&tmp)?.write_all(&buf)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        let mut at = 0usize;
        let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
            if *at + n > bytes.len() {
                return Err(Error::Checkpoint("truncated checkpoint".into()));
            }
            let s = &bytes[*at..*at + n];
            *at += n;
            Ok(s)
        };
        if take(&mut at, 8)? != MAGIC {
            return Err(Error::Checkpoint(format!(
                "{} is not a checkpoint (bad magic)",
                path.display()
            )));
        }
        let version = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let module = read_string(&bytes, &mut at)?;
        let count = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()) as usize;
        let mut ck = Checkpoint::new(&module);
        for _ in 0..count {
            let name = read_string(&bytes, &mut at)?;
            let tag = take(&mut at, 1)?[0];
            let dtype = Dtype::from_tag(tag)
                .ok_or_else(|| Error::Checkpoint(format!("bad dtype tag {tag} for {name}")))?;
            let rank = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let rec = match dtype {
                Dtype::F32 => {
                    let raw = take(&mut at, numel * 4)?;
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Record::F32 { shape, data }
                }
                Dtype::F64 => {
                    let raw = take(&mut at, numel * 8)?;
                    let data = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Record::F64 { shape, data }
                }
                Dtype::U64 => {
                    let raw = take(&mut at, numel * 8)?;
                    let data = raw
                        .chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Record::U64 { data }
                }
            };
            ck.records.insert(name, rec);
        }
        Ok(ck)
    }
}

fn write_string(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn read_string(bytes: &[u8], at: &mut usize) -> Result<String> {
    if *at + 4 > bytes.len() {
        return Err(Error::Checkpoint("truncated string".into()));
    }
    let len = u32::from_le_bytes(bytes[*at..*at + 4].try_into().unwrap()) as usize;
    *at += 4;
    if *at + len > bytes.len() {
        return Err(Error::Checkpoint("truncated string".into()));
    }
    let s = String::from_utf8(bytes[*at..*at + len].to_vec())
        .map_err(|_| Error::Checkpoint("non-utf8 record name".into()))?;
    *at += len;
    Ok(s)
}
