//! Versioned binary container for trained parameters.
//!
//! Layout (little-endian): magic `TVSC`, `u16` version, `u32` byte length of
//! a UTF-8 `key=value` config block (one pair per line), `u32` tensor count,
//! then per tensor a `u16` name length, the name, a `u8` rank, `u64` dims and
//! the `f64` payload in row-major order.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;

use super::head::{HeadConfig, RetrievalHead};
use super::orderer::{OrdererConfig, OrdererModel};
use super::rerank::{RerankConfig, RerankModel};
use super::tape::ParamSet;
use crate::data::embedding::ByteReader;
use crate::error::{Error, Result};
use crate::vq::{Codebook, VqVariant};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TVSC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub config: BTreeMap<String, String>,
    pub tensors: Vec<(String, Array2<f64>)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let block: String = self.config.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        out.extend_from_slice(&(block.len() as u32).to_le_bytes());
        out.extend_from_slice(block.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(2);
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for x in t.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "not a checkpoint (bad magic)"));
        }
        let version = r.u16("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let len = r.u32("config length")? as usize;
        let at = r.offset();
        let block = std::str::from_utf8(r.take(len, "config block")?)
            .map_err(|_| Error::format(at, "config block is not UTF-8"))?;
        let mut config = BTreeMap::new();
        for line in block.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(at, format!("config line without '=': {line:?}")))?;
            config.insert(k.to_string(), v.to_string());
        }
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let n = r.u16("tensor name length")? as usize;
            let at = r.offset();
            let name = std::str::from_utf8(r.take(n, "tensor name")?)
                .map_err(|_| Error::format(at, "tensor name is not UTF-8"))?
                .to_string();
            let at = r.offset();
            let rank = r.u8("rank")?;
            let dims = match rank {
                1 => (1, r.u64("dim")? as usize),
                2 => (r.u64("dim")? as usize, r.u64("dim")? as usize),
                _ => return Err(Error::format(at, format!("tensor {name} has unsupported rank {rank}"))),
            };
            let total = dims.0.checked_mul(dims.1).filter(|t| t.checked_mul(8).is_some_and(|b| b <= r.remaining()));
            let Some(total) = total else {
                return Err(Error::format(r.offset(), format!("tensor {name} payload is truncated")));
            };
            let data = (0..total).map(|_| r.f64("tensor payload")).collect::<Result<Vec<_>>>()?;
            tensors.push((name, Array2::from_shape_vec(dims, data).expect("length checked")));
        }
        if r.remaining() != 0 {
            return Err(Error::format(r.offset(), "trailing bytes after last tensor"));
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Fails on the first key of `expected` whose stored value differs.
    pub fn check_config(&self, expected: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in expected {
            let stored = self.config.get(k).cloned().unwrap_or_default();
            if &stored != v {
                return Err(Error::ConfigMismatch {
                    key: k.clone(),
                    stored,
                    expected: v.clone(),
                });
            }
        }
        Ok(())
    }

    fn has_prefix(&self, prefix: &str) -> bool {
        self.config.keys().any(|k| k.starts_with(prefix))
    }
}

pub fn codebook_config(cb: &Codebook) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("codebook.variant".to_string(), cb.variant.spec_string()),
        ("codebook.size".to_string(), cb.size.to_string()),
        ("codebook.code_dim".to_string(), cb.code_dim.to_string()),
        ("codebook.beta".to_string(), cb.beta.to_string()),
    ])
}

/// Every trained component a run may produce.
#[derive(Debug, Clone, Default)]
pub struct Bundle {
    pub orderer: Option<OrdererModel>,
    pub codebook: Option<Codebook>,
    pub head: Option<RetrievalHead>,
    pub rerank: Option<RerankModel>,
    /// Further settings recorded alongside, e.g. training weights.
    pub extra: BTreeMap<String, String>,
}

fn push_params(out: &mut Vec<(String, Array2<f64>)>, params: &ParamSet) {
    out.extend(params.iter().map(|p| (p.name.clone(), p.value.clone())));
}

fn fill_params(params: &mut ParamSet, tensors: &mut BTreeMap<String, Array2<f64>>) -> Result<()> {
    for p in params.iter_mut() {
        let t = tensors
            .remove(&p.name)
            .ok_or_else(|| Error::invalid(format!("checkpoint lacks tensor {}", p.name)))?;
        if t.dim() != p.value.dim() {
            return Err(Error::Shape(format!(
                "tensor {} has shape {:?}, model expects {:?}",
                p.name,
                t.dim(),
                p.value.dim()
            )));
        }
        p.value = t;
    }
    Ok(())
}

impl Bundle {
    pub fn config(&self) -> BTreeMap<String, String> {
        let mut c = self.extra.clone();
        if let Some(m) = &self.orderer {
            c.extend(m.config.to_map());
        }
        if let Some(cb) = &self.codebook {
            c.extend(codebook_config(cb));
        }
        if let Some(h) = &self.head {
            c.extend(h.config.to_map());
        }
        if let Some(r) = &self.rerank {
            c.extend(r.config.to_map());
        }
        c
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        if let Some(m) = &self.orderer {
            push_params(&mut tensors, &m.params);
        }
        if let Some(cb) = &self.codebook {
            for (i, b) in cb.books.iter().enumerate() {
                tensors.push((format!("codebook.book{i}"), b.clone()));
            }
        }
        if let Some(h) = &self.head {
            push_params(&mut tensors, &h.params);
        }
        if let Some(r) = &self.rerank {
            push_params(&mut tensors, &r.params);
        }
        Checkpoint {
            config: self.config(),
            tensors,
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let mut tensors: BTreeMap<String, Array2<f64>> = BTreeMap::new();
        for (name, t) in ck.tensors.iter().cloned() {
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::invalid(format!("duplicate tensor {name} in checkpoint")));
            }
        }
        let mut bundle = Bundle::default();
        if ck.has_prefix("orderer.") {
            let mut m = OrdererModel::new(OrdererConfig::from_map(&ck.config)?, 0)?;
            fill_params(&mut m.params, &mut tensors)?;
            bundle.orderer = Some(m);
        }
        if ck.has_prefix("codebook.") {
            let get = |k: &str| {
                ck.config
                    .get(k)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("checkpoint config lacks {k}")))
            };
            let size: usize = get("codebook.size")?.parse().map_err(|_| Error::invalid("bad codebook.size"))?;
            let dim: usize = get("codebook.code_dim")?
                .parse()
                .map_err(|_| Error::invalid("bad codebook.code_dim"))?;
            let beta: f64 = get("codebook.beta")?.parse().map_err(|_| Error::invalid("bad codebook.beta"))?;
            let variant = VqVariant::parse(&get("codebook.variant")?, size)?;
            let mut cb = Codebook::new(variant, size, dim, beta, 0)?;
            for (i, book) in cb.books.iter_mut().enumerate() {
                let name = format!("codebook.book{i}");
                let t = tensors
                    .remove(&name)
                    .ok_or_else(|| Error::invalid(format!("checkpoint lacks tensor {name}")))?;
                if t.dim() != book.dim() {
                    return Err(Error::Shape(format!("tensor {name} has shape {:?}", t.dim())));
                }
                *book = t;
            }
            bundle.codebook = Some(cb);
        }
        if ck.has_prefix("head.") {
            let mut h = RetrievalHead::new(HeadConfig::from_map(&ck.config)?, 0)?;
            fill_params(&mut h.params, &mut tensors)?;
            bundle.head = Some(h);
        }
        if ck.has_prefix("rerank.") {
            let mut r = RerankModel::new(RerankConfig::from_map(&ck.config)?, 0)?;
            fill_params(&mut r.params, &mut tensors)?;
            bundle.rerank = Some(r);
        }
        if let Some(name) = tensors.keys().next() {
            return Err(Error::invalid(format!("checkpoint tensor {name} belongs to no component")));
        }
        bundle.extra = ck
            .config
            .into_iter()
            .filter(|(k, _)| !["orderer.", "codebook.", "head.", "rerank."].iter().any(|p| k.starts_with(p)))
            .collect();
        Ok(bundle)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }

    /// Loads and refuses a checkpoint whose recorded config disagrees with `expected`.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &BTreeMap<String, String>) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        ck.check_config(expected)?;
        Self::from_checkpoint(ck)
    }
}
