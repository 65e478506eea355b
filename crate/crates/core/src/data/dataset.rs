//! Storyboard examples and their JSON Lines file format.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::embedding::{load_embeddings, EmbeddingTable};
use crate::error::{Error, Result};

pub const MIN_FRAMES: usize = 2;
pub const MAX_FRAMES: usize = 20;

/// One synopsis paired with its ordered keyframes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoryboardExample {
    pub example_id: String,
    pub movie_id: String,
    pub synopsis_text: String,
    pub text_id: String,
    pub frame_ids: Vec<String>,
    /// Alternative acceptable orderings. Always contains the canonical order
    /// once validated.
    #[serde(default)]
    pub gt_variants: Vec<Vec<String>>,
}

impl StoryboardExample {
    pub fn len(&self) -> usize {
        self.frame_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_ids.is_empty()
    }

    /// Checks the structural invariants and inserts the canonical order into
    /// `gt_variants` when it is missing.
    pub fn validate(&mut self) -> Result<()> {
        let m = self.frame_ids.len();
        if !(MIN_FRAMES..=MAX_FRAMES).contains(&m) {
            return Err(Error::invalid(format!(
                "example {:?} has {m} frames; expected {MIN_FRAMES}..={MAX_FRAMES}",
                self.example_id
            )));
        }
        let set: HashSet<&str> = self.frame_ids.iter().map(String::as_str).collect();
        if set.len() != m {
            return Err(Error::invalid(format!(
                "example {:?} repeats a frame id",
                self.example_id
            )));
        }
        for variant in &self.gt_variants {
            let vs: HashSet<&str> = variant.iter().map(String::as_str).collect();
            if variant.len() != m || vs != set {
                return Err(Error::invalid(format!(
                    "example {:?} has a ground-truth variant that is not a permutation of its frames",
                    self.example_id
                )));
            }
        }
        if !self.gt_variants.contains(&self.frame_ids) {
            self.gt_variants.insert(0, self.frame_ids.clone());
        }
        Ok(())
    }
}

pub fn write_examples(examples: &[StoryboardExample], path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::new();
    for ex in examples {
        serde_json::to_writer(&mut out, ex).map_err(|e| Error::invalid(e.to_string()))?;
        out.push(b'\n');
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn read_examples(path: impl AsRef<Path>) -> Result<Vec<StoryboardExample>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut examples = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut ex: StoryboardExample =
            serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        ex.validate().map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(ex.example_id.clone()) {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("duplicate example_id {:?}", ex.example_id),
            });
        }
        examples.push(ex);
    }
    Ok(examples)
}

/// Everything needed to run experiments over one corpus.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub examples: Vec<StoryboardExample>,
    pub texts: EmbeddingTable,
    pub frames: EmbeddingTable,
}

impl Corpus {
    pub fn new(
        examples: Vec<StoryboardExample>,
        texts: EmbeddingTable,
        frames: EmbeddingTable,
    ) -> Result<Self> {
        check_references(&examples, &texts, &frames)?;
        Ok(Self {
            examples,
            texts,
            frames,
        })
    }

    pub fn example(&self, id: &str) -> Option<&StoryboardExample> {
        self.examples.iter().find(|e| e.example_id == id)
    }
}

fn check_references(
    examples: &[StoryboardExample],
    texts: &EmbeddingTable,
    frames: &EmbeddingTable,
) -> Result<()> {
    for ex in examples {
        if !texts.contains(&ex.text_id) {
            return Err(Error::MissingId(ex.text_id.clone()));
        }
        if let Some(f) = ex.frame_ids.iter().find(|f| !frames.contains(f)) {
            return Err(Error::MissingId(f.clone()));
        }
    }
    Ok(())
}

pub fn load_dataset(
    dataset_path: impl AsRef<Path>,
    text_emb_path: impl AsRef<Path>,
    frame_emb_path: impl AsRef<Path>,
) -> Result<Corpus> {
    let examples = read_examples(dataset_path)?;
    let texts = load_embeddings(text_emb_path)?;
    let frames = load_embeddings(frame_emb_path)?;
    Corpus::new(examples, texts, frames)
}
