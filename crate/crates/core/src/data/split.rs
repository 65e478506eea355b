//! Deterministic movie-disjoint train/val/test splits.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::StoryboardExample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn parts(&self) -> [&Vec<String>; 3] {
        [&self.train, &self.val, &self.test]
    }
}

/// Splits by movie so that no movie contributes examples to two splits.
///
/// Movies are shuffled with `seed`, laid end to end, and each movie goes to the
/// split whose cumulative ratio band contains the midpoint of its example span.
pub fn split_dataset(
    examples: &[StoryboardExample],
    ratios: [f64; 3],
    seed: u64,
) -> Result<DatasetSplit> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!(
            "split ratios must be non-negative and sum to 1, got {ratios:?}"
        )));
    }
    let mut by_movie: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for ex in examples {
        by_movie
            .entry(ex.movie_id.as_str())
            .or_default()
            .push(ex.example_id.as_str());
    }
    let wanted = ratios.iter().filter(|r| **r > 0.0).count();
    if by_movie.len() < wanted {
        return Err(Error::invalid(format!(
            "{} distinct movies cannot fill {wanted} non-empty splits",
            by_movie.len()
        )));
    }

    let mut movies: Vec<(&str, Vec<&str>)> = by_movie.into_iter().collect();
    movies.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let total = examples.len() as f64;
    let bounds = [ratios[0], ratios[0] + ratios[1], 1.0];
    let mut assign = Vec::with_capacity(movies.len());
    let mut before = 0.0;
    for (_, exs) in &movies {
        let mid = (before + exs.len() as f64 / 2.0) / total;
        let k = bounds.iter().position(|b| mid < *b).unwrap_or(2);
        assign.push(k);
        before += exs.len() as f64;
    }

    // A split with a positive ratio must own at least one movie; borrow one
    // from the nearest split that can spare it.
    for k in 0..3 {
        if ratios[k] == 0.0 || assign.contains(&k) {
            continue;
        }
        let donor = (0..3)
            .filter(|&d| assign.iter().filter(|&&a| a == d).count() > 1)
            .min_by_key(|&d| d.abs_diff(k))
            .ok_or_else(|| Error::invalid("not enough movies to fill every split"))?;
        let pos = if donor < k {
            assign.iter().rposition(|&a| a == donor)
        } else {
            assign.iter().position(|&a| a == donor)
        }
        .expect("donor owns a movie");
        assign[pos] = k;
    }

    let mut split = DatasetSplit::default();
    for ((_, exs), k) in movies.iter().zip(assign) {
        let part = match k {
            0 => &mut split.train,
            1 => &mut split.val,
            _ => &mut split.test,
        };
        part.extend(exs.iter().map(|s| s.to_string()));
    }
    Ok(split)
}
