//! Text-to-frame retrieval over candidate pools.

use serde::{Deserialize, Serialize};

use crate::data::EmbeddingTable;
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::nn::RetrievalHead;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRanking {
    pub text_id: String,
    /// `(frame id, similarity)`, best first.
    pub ranked: Vec<(String, f64)>,
}

impl RetrievalRanking {
    pub fn ids(&self) -> Vec<String> {
        self.ranked.iter().map(|(id, _)| id.clone()).collect()
    }
}

/// Ranks candidates by cosine similarity to the text, in raw embedding space
/// or in the head's projected space. Ties go to the lexicographically lower id.
pub fn retrieve_topk(
    text_id: &str,
    candidates: &[String],
    texts: &EmbeddingTable,
    frames: &EmbeddingTable,
    head: Option<&RetrievalHead>,
    k: usize,
) -> Result<RetrievalRanking> {
    if k == 0 {
        return Err(Error::invalid("K must be positive"));
    }
    let raw = texts.vector(text_id)?;
    let query = match head {
        Some(h) => h.embed_text(&raw),
        None => raw,
    };
    let mut ranked = Vec::with_capacity(candidates.len());
    for id in candidates {
        let v = frames.vector(id)?;
        let v = match head {
            Some(h) => h.embed_frame(&v),
            None => v,
        };
        ranked.push((id.clone(), dot(&query, &v)));
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(RetrievalRanking {
        text_id: text_id.to_string(),
        ranked,
    })
}

/// Copies of both tables mapped through the head's projections.
pub fn project_tables(
    head: &RetrievalHead,
    texts: &EmbeddingTable,
    frames: &EmbeddingTable,
) -> Result<(EmbeddingTable, EmbeddingTable)> {
    let map = |t: &EmbeddingTable, f: &dyn Fn(&[f64]) -> Vec<f64>| -> Result<EmbeddingTable> {
        let mut out = EmbeddingTable::new(head.config.shared_dim)?;
        for (id, v) in t.iter() {
            let v: Vec<f64> = v.iter().map(|&x| x as f64).collect();
            out.insert(id, &f(&v))?;
        }
        Ok(out)
    };
    Ok((map(texts, &|v| head.embed_text(v))?, map(frames, &|v| head.embed_frame(v))?))
}
