//! Dataset and embedding data model, file formats, splits, the synthetic
//! generator and corpus statistics.

pub mod dataset;
pub mod embedding;
pub mod split;
pub mod stats;
pub mod synth;

pub use dataset::{load_dataset, read_examples, write_examples, Corpus, StoryboardExample};
pub use embedding::{load_embeddings, save_embeddings, span_key, word_key, EmbeddingTable};
pub use split::{split_dataset, DatasetSplit};
pub use stats::{corpus_stats, CorpusStats};
pub use synth::{generate_synthetic, SynthConfig};
