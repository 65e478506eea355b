//! Ordering and retrieve-and-order metrics, candidate pools and reports.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::hash::Hash;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::StoryboardExample;
use crate::error::{Error, Result};

/// Inversions of `seq` relative to ascending order, by merge sort.
pub fn count_inversions(seq: &[usize]) -> u64 {
    fn sort(v: &mut [usize], buf: &mut Vec<usize>) -> u64 {
        if v.len() < 2 {
            return 0;
        }
        let mid = v.len() / 2;
        let mut inv = sort(&mut v[..mid], buf) + sort(&mut v[mid..], buf);
        buf.clear();
        let (mut i, mut j) = (0, mid);
        while i < mid && j < v.len() {
            if v[i] <= v[j] {
                buf.push(v[i]);
                i += 1;
            } else {
                buf.push(v[j]);
                inv += (mid - i) as u64;
                j += 1;
            }
        }
        buf.extend_from_slice(&v[i..mid]);
        buf.extend_from_slice(&v[j..]);
        v.copy_from_slice(buf);
        inv
    }
    let mut v = seq.to_vec();
    sort(&mut v, &mut Vec::with_capacity(seq.len()))
}

/// Positions of `predicted` items inside `reference`.
fn ranks<T: Eq + Hash>(predicted: &[T], reference: &[T]) -> Result<Vec<usize>> {
    if predicted.len() != reference.len() {
        return Err(Error::invalid(format!(
            "orderings differ in length: {} vs {}",
            predicted.len(),
            reference.len()
        )));
    }
    let pos: HashMap<&T, usize> = reference.iter().enumerate().map(|(i, x)| (x, i)).collect();
    if pos.len() != reference.len() {
        return Err(Error::invalid("reference ordering has duplicates"));
    }
    let mut seen = vec![false; reference.len()];
    predicted
        .iter()
        .map(|x| {
            let &p = pos.get(x).ok_or_else(|| Error::invalid("orderings cover different items"))?;
            if std::mem::replace(&mut seen[p], true) {
                return Err(Error::invalid("predicted ordering has duplicates"));
            }
            Ok(p)
        })
        .collect()
}

/// `1 - 2 * inversions / (m (m - 1) / 2)`.
pub fn kendall_tau<T: Eq + Hash>(predicted: &[T], reference: &[T]) -> Result<f64> {
    let r = ranks(predicted, reference)?;
    let m = r.len();
    if m < 2 {
        return Err(Error::invalid("kendall tau needs at least two items"));
    }
    let pairs = (m * (m - 1) / 2) as f64;
    Ok(1.0 - 2.0 * count_inversions(&r) as f64 / pairs)
}

/// Best tau over all accepted ground-truth orderings.
pub fn tau_best<T: Eq + Hash>(predicted: &[T], variants: &[Vec<T>]) -> Result<f64> {
    if variants.is_empty() {
        return Err(Error::invalid("no ground-truth variants"));
    }
    let mut best = f64::NEG_INFINITY;
    for v in variants {
        best = best.max(kendall_tau(predicted, v)?);
    }
    Ok(best)
}

fn check_distinct(ids: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::invalid(format!("duplicate id {id:?} in ranking")));
        }
    }
    Ok(())
}

/// Fraction of `gt` found among the first `k` of `ranked`.
pub fn recall_at_k(ranked: &[String], gt: &[String], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("K must be positive"));
    }
    check_distinct(ranked)?;
    if gt.is_empty() {
        return Ok(0.0);
    }
    let gt: HashSet<&str> = gt.iter().map(String::as_str).collect();
    let hits = ranked.iter().take(k).filter(|id| gt.contains(id.as_str())).count();
    Ok(hits as f64 / gt.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrieveOrderScore {
    pub r_at_k: f64,
    pub tau_at_k: f64,
    pub product: f64,
}

/// Scores an ordered top-K list. Tau is taken over the ground-truth frames
/// present, against each variant restricted to them; with fewer than two
/// present it is 1.
pub fn retrieve_and_order_score(predicted: &[String], gt: &StoryboardExample, k: usize) -> Result<RetrieveOrderScore> {
    let top = &predicted[..predicted.len().min(k)];
    let r_at_k = recall_at_k(predicted, &gt.frame_ids, k)?;
    let gt_set: HashSet<&str> = gt.frame_ids.iter().map(String::as_str).collect();
    let found: Vec<&str> = top.iter().map(String::as_str).filter(|id| gt_set.contains(id)).collect();
    let tau_at_k = if found.len() < 2 {
        1.0
    } else {
        let found_set: HashSet<&str> = found.iter().copied().collect();
        let variants: Vec<Vec<&str>> = gt
            .gt_variants
            .iter()
            .map(|v| v.iter().map(String::as_str).filter(|id| found_set.contains(id)).collect())
            .collect();
        tau_best(&found, &variants)?
    };
    Ok(RetrieveOrderScore {
        r_at_k,
        tau_at_k,
        product: r_at_k * tau_at_k,
    })
}

pub const DEFAULT_POOL_SIZE: usize = 500;

/// Samples retrieval pools: the ground-truth frames plus random frames of
/// other examples.
#[derive(Debug, Clone)]
pub struct PoolBuilder {
    frames: Vec<String>,
}

/// FNV-1a of `s`, stable across runs and platforms.
pub fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl PoolBuilder {
    pub fn new(corpus: &[StoryboardExample]) -> Self {
        let mut frames: Vec<String> = corpus.iter().flat_map(|e| e.frame_ids.iter().cloned()).collect();
        frames.sort();
        frames.dedup();
        Self { frames }
    }

    /// Deterministic in `(seed, example_id)`.
    pub fn build(&self, example: &StoryboardExample, pool_size: usize, seed: u64) -> Result<Vec<String>> {
        let gt: HashSet<&str> = example.frame_ids.iter().map(String::as_str).collect();
        if pool_size < gt.len() {
            return Err(Error::invalid(format!(
                "pool size {pool_size} is smaller than the {} ground-truth frames",
                gt.len()
            )));
        }
        let need = pool_size - gt.len();
        let available = self.frames.iter().filter(|f| !gt.contains(f.as_str())).count();
        if available < need {
            return Err(Error::invalid(format!(
                "corpus has {available} negative frames, pool of {pool_size} needs {need}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stable_hash(&example.example_id));
        let mut picked = HashSet::with_capacity(need);
        let mut pool: Vec<String> = example.frame_ids.clone();
        if need * 2 > available {
            let mut rest: Vec<&String> = self.frames.iter().filter(|f| !gt.contains(f.as_str())).collect();
            rest.shuffle(&mut rng);
            pool.extend(rest.into_iter().take(need).cloned());
        } else {
            while picked.len() < need {
                let f = &self.frames[rng.random_range(0..self.frames.len())];
                if !gt.contains(f.as_str()) && picked.insert(f.as_str()) {
                    pool.push(f.clone());
                }
            }
        }
        pool.shuffle(&mut rng);
        Ok(pool)
    }
}

/// Convenience wrapper over [`PoolBuilder`].
pub fn build_candidate_pool(
    example: &StoryboardExample,
    corpus: &[StoryboardExample],
    pool_size: usize,
    seed: u64,
) -> Result<Vec<String>> {
    PoolBuilder::new(corpus).build(example, pool_size, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleResult {
    pub example_id: String,
    /// Ground-truth storyboard length.
    pub length: usize,
    pub tau: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_at_k: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub product: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub label: String,
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
    pub mean_tau: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtK {
    pub k: usize,
    pub count: usize,
    pub r_at_k: f64,
    pub tau_at_k: f64,
    pub product: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    pub label: String,
    pub pool_size: usize,
    /// `(K, mean recall)` pairs.
    pub recall: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub strategy: String,
    pub count: usize,
    pub overall_tau: Option<f64>,
    pub buckets: Vec<Bucket>,
    #[serde(default)]
    pub at_k: Vec<AtK>,
    #[serde(default)]
    pub retrieval: Vec<RecallRow>,
    #[serde(default)]
    pub notes: Vec<String>,
    pub per_example: Vec<ExampleResult>,
}

pub const BUCKETS: [(usize, usize); 2] = [(3, 5), (6, 11)];

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Overall and per-length-bucket mean tau. Results carrying a `k` are
/// additionally summarized per K.
pub fn bucket_report(results: &[ExampleResult]) -> EvalReport {
    let ordering: Vec<&ExampleResult> = results.iter().filter(|r| r.k.is_none()).collect();
    let buckets = BUCKETS
        .iter()
        .map(|&(lo, hi)| {
            let inside: Vec<f64> = ordering
                .iter()
                .filter(|r| (lo..=hi).contains(&r.length))
                .map(|r| r.tau)
                .collect();
            Bucket {
                label: format!("[{lo}-{hi}]"),
                lo,
                hi,
                count: inside.len(),
                mean_tau: mean(inside.into_iter()),
            }
        })
        .collect();
    let mut ks: Vec<usize> = results.iter().filter_map(|r| r.k).collect();
    ks.sort_unstable();
    ks.dedup();
    let at_k = ks
        .into_iter()
        .map(|k| {
            let rows: Vec<&ExampleResult> = results.iter().filter(|r| r.k == Some(k)).collect();
            AtK {
                k,
                count: rows.len(),
                r_at_k: mean(rows.iter().filter_map(|r| r.r_at_k)).unwrap_or(0.0),
                tau_at_k: mean(rows.iter().map(|r| r.tau)).unwrap_or(0.0),
                product: mean(rows.iter().filter_map(|r| r.product)).unwrap_or(0.0),
            }
        })
        .collect();
    EvalReport {
        protocol: String::new(),
        strategy: String::new(),
        count: ordering.len(),
        overall_tau: mean(ordering.iter().map(|r| r.tau)),
        buckets,
        at_k,
        retrieval: Vec::new(),
        notes: Vec::new(),
        per_example: results.to_vec(),
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::invalid(format!("bad report json: {e}")))
    }

    /// Aligned plain-text tables.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "protocol: {}  strategy: {}", self.protocol, self.strategy);
        if self.overall_tau.is_some() || self.count > 0 {
            let _ = writeln!(out);
            let mut header = format!("{:<16} {:>9}", "Method", "Over-All");
            let mut row = format!("{:<16} {:>9}", self.strategy, fmt_opt(self.overall_tau));
            for b in &self.buckets {
                let _ = write!(header, " {:>9}", b.label);
                let _ = write!(row, " {:>9}", fmt_opt(b.mean_tau));
            }
            let _ = writeln!(out, "{header}");
            let _ = writeln!(out, "{row}");
            let counts: Vec<String> = self.buckets.iter().map(|b| format!("{} {}", b.label, b.count)).collect();
            let _ = writeln!(out, "examples: {} ({})", self.count, counts.join(", "));
        }
        if !self.at_k.is_empty() {
            let _ = writeln!(out);
            let _ = writeln!(out, "{:<16} {:>5} {:>8} {:>8} {:>10}", "Method", "K", "R@K", "tau@K", "R@K*tau@K");
            for a in &self.at_k {
                let _ = writeln!(
                    out,
                    "{:<16} {:>5} {:>8.3} {:>8.3} {:>10.3}",
                    self.strategy, a.k, a.r_at_k, a.tau_at_k, a.product
                );
            }
        }
        if !self.retrieval.is_empty() {
            let _ = writeln!(out);
            let mut header = format!("{:<16} {:>6}", "Retrieval", "Pool");
            for (k, _) in &self.retrieval[0].recall {
                let _ = write!(header, " {:>7}", format!("R@{k}"));
            }
            let _ = writeln!(out, "{header}");
            for r in &self.retrieval {
                let mut line = format!("{:<16} {:>6}", r.label, r.pool_size);
                for (_, v) in &r.recall {
                    let _ = write!(line, " {:>7.2}", v * 100.0);
                }
                let _ = writeln!(out, "{line}");
            }
        }
        for n in &self.notes {
            let _ = writeln!(out, "note: {n}");
        }
        out
    }
}
