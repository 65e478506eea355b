//! Corpus diversity and concreteness statistics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::StoryboardExample;
use crate::error::{Error, Result};

/// Lowercases, splits on whitespace and strips every non-alphanumeric
/// character; tokens left empty are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordCountStats {
    pub total_words: usize,
    pub mean_words: f64,
    pub min_words: usize,
    pub max_words: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub unique_ngrams: BTreeMap<usize, usize>,
    pub avg_concreteness: Option<f64>,
    /// Tokens found in the lexicon, out of all tokens.
    pub lexicon_coverage: Option<(usize, usize)>,
    pub word_counts: WordCountStats,
}

pub type ConcretenessLexicon = HashMap<String, f64>;

/// Reads a `word<TAB>rating` file. Lines starting with `#` and blank lines are
/// skipped.
pub fn load_lexicon(path: impl AsRef<Path>) -> Result<ConcretenessLexicon> {
    parse_lexicon(&fs::read_to_string(path)?)
}

pub fn parse_lexicon(text: &str) -> Result<ConcretenessLexicon> {
    let mut lex = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (word, rating) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: "expected word<TAB>rating".into(),
        })?;
        let rating: f64 = rating.trim().parse().map_err(|e| Error::Parse {
            line: i + 1,
            message: format!("bad rating: {e}"),
        })?;
        lex.insert(word.trim().to_lowercase(), rating);
    }
    Ok(lex)
}

pub fn corpus_stats(
    examples: &[StoryboardExample],
    n_values: &[usize],
    lexicon: Option<&ConcretenessLexicon>,
) -> Result<CorpusStats> {
    if n_values.is_empty() || n_values.contains(&0) {
        return Err(Error::invalid("n_values must be non-empty and positive"));
    }
    let docs: Vec<Vec<String>> = examples.iter().map(|e| tokenize(&e.synopsis_text)).collect();

    let mut unique_ngrams = BTreeMap::new();
    for &n in n_values {
        let grams: HashSet<&[String]> = docs.iter().flat_map(|d| d.windows(n)).collect();
        unique_ngrams.insert(n, grams.len());
    }

    let lens: Vec<usize> = docs.iter().map(Vec::len).collect();
    let total_words: usize = lens.iter().sum();
    let word_counts = WordCountStats {
        total_words,
        mean_words: if lens.is_empty() {
            0.0
        } else {
            total_words as f64 / lens.len() as f64
        },
        min_words: lens.iter().copied().min().unwrap_or(0),
        max_words: lens.iter().copied().max().unwrap_or(0),
    };

    let (avg_concreteness, lexicon_coverage) = match lexicon {
        None => (None, None),
        Some(lex) => {
            let ratings: Vec<f64> = docs.iter().flatten().filter_map(|w| lex.get(w).copied()).collect();
            let avg = (!ratings.is_empty()).then(|| ratings.iter().sum::<f64>() / ratings.len() as f64);
            (avg, Some((ratings.len(), total_words)))
        }
    };

    Ok(CorpusStats {
        unique_ngrams,
        avg_concreteness,
        lexicon_coverage,
        word_counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(text: &str) -> StoryboardExample {
        StoryboardExample {
            example_id: "e".into(),
            movie_id: "m".into(),
            synopsis_text: text.into(),
            text_id: "t".into(),
            frame_ids: vec!["a".into(), "b".into()],
            gt_variants: vec![],
        }
    }

    /// Hand enumeration: "the cat the cat" has 1-grams {the, cat} and
    /// 2-grams {the cat, cat the}.
    #[test]
    fn ngram_counts() {
        let s = corpus_stats(&[ex("the cat the cat")], &[1, 2, 3], None).unwrap();
        assert_eq!(s.unique_ngrams[&1], 2);
        assert_eq!(s.unique_ngrams[&2], 2);
        assert_eq!(s.unique_ngrams[&3], 2);
        assert_eq!(s.word_counts.total_words, 4);
    }

    #[test]
    fn tokenizer_strips_punctuation_and_case() {
        assert_eq!(tokenize("The Cat, the cat!"), vec!["the", "cat", "the", "cat"]);
        assert_eq!(tokenize(" -- "), Vec::<String>::new());
    }

    #[test]
    fn concreteness_reference_words() {
        let lex = parse_lexicon("banana\t5\nlove\t2.07\n").unwrap();
        let s = corpus_stats(&[ex("Banana")], &[1], Some(&lex)).unwrap();
        assert_eq!(s.avg_concreteness, Some(5.0));
        let s = corpus_stats(&[ex("love")], &[1], Some(&lex)).unwrap();
        assert_eq!(s.avg_concreteness, Some(2.07));
        // uncovered words are ignored
        let s = corpus_stats(&[ex("love xyzzy banana")], &[1], Some(&lex)).unwrap();
        assert!((s.avg_concreteness.unwrap() - 3.535).abs() < 1e-12);
        assert_eq!(s.lexicon_coverage, Some((2, 3)));
    }

    #[test]
    fn empty_corpus() {
        let lex = parse_lexicon("banana\t5\n").unwrap();
        let s = corpus_stats(&[], &[1, 2], Some(&lex)).unwrap();
        assert!(s.unique_ngrams.values().all(|&c| c == 0));
        assert_eq!(s.avg_concreteness, None);
        assert_eq!(s.word_counts.total_words, 0);
    }

    #[test]
    fn malformed_lexicon_line() {
        assert!(matches!(parse_lexicon("banana 5"), Err(Error::Parse { line: 1, .. })));
    }
}
