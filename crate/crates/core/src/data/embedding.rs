//! Id-keyed unit-norm embedding tables and the `TVSE` binary file format.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic   "TVSE"
//! version u16 = 1
//! dim     u32
//! count   u64
//! entries count x { id_len u16, id bytes (UTF-8), dim x f32 }
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"TVSE";
pub const EMBEDDING_VERSION: u16 = 1;

/// Vectors whose norm is already this close to one are stored untouched, so
/// that reloading a saved table never perturbs its bits.
const NORM_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<f32>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dim must be positive"));
        }
        Ok(Self {
            dim,
            ids: Vec::new(),
            index: HashMap::new(),
            data: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    /// Inserts `vector`, normalizing it to unit length.
    pub fn insert(&mut self, id: impl Into<String>, vector: &[f64]) -> Result<()> {
        let v32: Vec<f32> = vector.iter().map(|&x| x as f32).collect();
        self.insert_f32(id.into(), v32)
    }

    fn insert_f32(&mut self, id: String, mut vector: Vec<f32>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Shape(format!(
                "vector for {id:?} has length {}, table dim is {}",
                vector.len(),
                self.dim
            )));
        }
        if self.index.contains_key(&id) {
            return Err(Error::invalid(format!("duplicate id {id:?}")));
        }
        let n = vector
            .iter()
            .map(|&x| f64::from(x) * f64::from(x))
            .sum::<f64>()
            .sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::invalid(format!(
                "vector for {id:?} has zero or non-finite norm and cannot be normalized"
            )));
        }
        if (n - 1.0).abs() > NORM_SLACK {
            for x in vector.iter_mut() {
                *x = (f64::from(*x) / n) as f32;
            }
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.data.extend_from_slice(&vector);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index
            .get(id)
            .map(|&i| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    /// Looks up `id` widened to f64, or fails naming the missing id.
    pub fn vector(&self, id: &str) -> Result<Vec<f64>> {
        self.get(id)
            .map(|v| v.iter().map(|&x| f64::from(x)).collect())
            .ok_or_else(|| Error::MissingId(id.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids
            .iter()
            .zip(self.data.chunks_exact(self.dim))
            .map(|(id, v)| (id.as_str(), v))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(18 + self.data.len() * 4 + self.ids.len() * 10);
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        for (id, v) in self.iter() {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(4, "magic")?;
        if magic != EMBEDDING_MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:?}")));
        }
        let version = r.u16("version")?;
        if version != EMBEDDING_VERSION {
            return Err(Error::Version {
                found: version,
                expected: EMBEDDING_VERSION,
            });
        }
        let dim = r.u32("dim")? as usize;
        if dim == 0 {
            return Err(Error::format(6, "dim must be positive"));
        }
        let count = r.u64("count")?;
        let mut table = EmbeddingTable::new(dim)?;
        for _ in 0..count {
            let id_len = r.u16("id length")? as usize;
            let at = r.offset();
            let id = std::str::from_utf8(r.take(id_len, "id bytes")?)
                .map_err(|e| Error::format(at, format!("id is not UTF-8: {e}")))?
                .to_string();
            let at = r.offset();
            let raw = r.take(dim * 4, "vector payload")?;
            let v: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            table
                .insert_f32(id, v)
                .map_err(|e| Error::format(at, e.to_string()))?;
        }
        if r.offset() as usize != bytes.len() {
            return Err(Error::format(
                r.offset(),
                format!("{} trailing bytes", bytes.len() - r.offset() as usize),
            ));
        }
        Ok(table)
    }
}

/// Key of the vector for word `i` of text `text_id`.
pub fn word_key(text_id: &str, i: usize) -> String {
    format!("{text_id}#w{i}")
}

/// Key of the vector for the word span `start..end` of text `text_id`.
pub fn span_key(text_id: &str, start: usize, end: usize) -> String {
    format!("{text_id}#s{start}:{end}")
}

pub fn save_embeddings(table: &EmbeddingTable, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&table.to_bytes())?;
    Ok(())
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    EmbeddingTable::from_bytes(&fs::read(path)?)
}

/// Cursor over a byte slice that reports offsets in its errors.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(
                self.offset(),
                format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.remaining()
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_bits(self.u64(what)?))
    }
}
