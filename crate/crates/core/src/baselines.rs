//! Similarity-based ordering baselines and their segmentation and
//! assignment machinery.

use std::collections::{HashMap, HashSet};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{span_key, word_key, EmbeddingTable};
use crate::error::{Error, Result};
use crate::linalg::{dot, mean_direction};
use crate::ordering::OrderingResult;

/// Half-open token range `start..end`.
pub type Span = (usize, usize);

pub const DEFAULT_BEAM_WIDTH: usize = 5;
pub const DEFAULT_SEGMENTATION_LIMIT: usize = 10_000;

/// Splits `n_tokens` into `m` contiguous spans whose lengths differ by at
/// most one; the earlier spans take the remainder.
pub fn segment_text<T>(tokens: &[T], m: usize) -> Result<Vec<Span>> {
    let n = tokens.len();
    if m == 0 || n == 0 {
        return Err(Error::invalid("segmentation needs m >= 1 and a non-empty text"));
    }
    if m > n {
        return Err(Error::invalid(format!("cannot cut {n} tokens into {m} segments")));
    }
    let (base, extra) = (n / m, n % m);
    let mut spans = Vec::with_capacity(m);
    let mut at = 0;
    for i in 0..m {
        let len = base + usize::from(i < extra);
        spans.push((at, at + len));
        at += len;
    }
    Ok(spans)
}

/// Maps a word span of a synopsis to a unit vector.
pub trait SegmentEmbedder {
    fn embed(&self, text_id: &str, span: Span) -> Result<Vec<f64>>;
}

/// Span vectors stored in the text table under `textid#s<start>:<end>`.
pub struct TableSpanEmbedder<'a>(pub &'a EmbeddingTable);

impl SegmentEmbedder for TableSpanEmbedder<'_> {
    fn embed(&self, text_id: &str, span: Span) -> Result<Vec<f64>> {
        self.0.vector(&span_key(text_id, span.0, span.1))
    }
}

/// Normalized mean of the word vectors `textid#w<i>` inside the span.
pub struct PooledTokenEmbedder<'a>(pub &'a EmbeddingTable);

impl SegmentEmbedder for PooledTokenEmbedder<'_> {
    fn embed(&self, text_id: &str, span: Span) -> Result<Vec<f64>> {
        let words = (span.0..span.1)
            .map(|i| self.0.vector(&word_key(text_id, i)))
            .collect::<Result<Vec<_>>>()?;
        mean_direction(words.iter().map(Vec::as_slice))
            .ok_or_else(|| Error::invalid(format!("span {}:{} of {text_id} pools to zero", span.0, span.1)))
    }
}

/// Span vectors when the table has them, pooled word vectors otherwise.
pub struct DefaultEmbedder<'a>(pub &'a EmbeddingTable);

impl SegmentEmbedder for DefaultEmbedder<'_> {
    fn embed(&self, text_id: &str, span: Span) -> Result<Vec<f64>> {
        if self.0.contains(&span_key(text_id, span.0, span.1)) {
            TableSpanEmbedder(self.0).embed(text_id, span)
        } else {
            PooledTokenEmbedder(self.0).embed(text_id, span)
        }
    }
}

/// Candidate ids with their vectors, kept in ascending id order so that
/// "first maximum" means "lowest id".
struct Pool {
    ids: Vec<String>,
    vecs: Vec<Vec<f64>>,
}

impl Pool {
    fn new(candidates: &[String], frames: &EmbeddingTable) -> Result<Self> {
        let mut ids = candidates.to_vec();
        ids.sort();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("candidate pool has duplicate ids"));
        }
        let vecs = ids.iter().map(|id| frames.vector(id)).collect::<Result<_>>()?;
        Ok(Self { ids, vecs })
    }

    fn len(&self) -> usize {
        self.ids.len()
    }
}

/// Picks, for each query in turn, the most similar unused candidate.
fn greedy_picks(queries: &[Vec<f64>], pool: &Pool) -> OrderingResult {
    let mut used = vec![false; pool.len()];
    let mut out = OrderingResult::default();
    for q in queries {
        let mut best: Option<(usize, f64)> = None;
        for (i, v) in pool.vecs.iter().enumerate() {
            if used[i] {
                continue;
            }
            let s = dot(q, v);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        let Some((i, s)) = best else { break };
        used[i] = true;
        out.ordered_ids.push(pool.ids[i].clone());
        out.scores.push(s);
    }
    out
}

fn cumulative_queries(segments: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    (1..=segments.len())
        .map(|t| {
            mean_direction(segments[..t].iter().map(Vec::as_slice))
                .ok_or_else(|| Error::invalid("cumulative query is the zero vector"))
        })
        .collect()
}

fn check_lengths(segments: &[Vec<f64>], candidates: &[String], exact: bool) -> Result<()> {
    let ok = if exact {
        segments.len() == candidates.len()
    } else {
        segments.len() <= candidates.len()
    };
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{} segments for {} candidates",
            segments.len(),
            candidates.len()
        )))
    }
}

/// Candidates by descending similarity to the whole-text vector.
pub fn order_naive(text: &[f64], candidates: &[String], frames: &EmbeddingTable) -> Result<OrderingResult> {
    let pool = Pool::new(candidates, frames)?;
    let mut scored: Vec<(usize, f64)> = pool.vecs.iter().map(|v| dot(text, v)).enumerate().collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(OrderingResult {
        ordered_ids: scored.iter().map(|&(i, _)| pool.ids[i].clone()).collect(),
        stopped_by_eos: false,
        scores: scored.iter().map(|&(_, s)| s).collect(),
    })
}

/// Each segment in turn takes its most similar remaining candidate.
pub fn order_sliding(segments: &[Vec<f64>], candidates: &[String], frames: &EmbeddingTable) -> Result<OrderingResult> {
    check_lengths(segments, candidates, true)?;
    Ok(greedy_picks(segments, &Pool::new(candidates, frames)?))
}

/// Like [`order_sliding`] with the query at step `t` being the normalized
/// mean of segments `1..=t`.
pub fn order_cumulative(
    segments: &[Vec<f64>],
    candidates: &[String],
    frames: &EmbeddingTable,
) -> Result<OrderingResult> {
    check_lengths(segments, candidates, true)?;
    Ok(greedy_picks(&cumulative_queries(segments)?, &Pool::new(candidates, frames)?))
}

/// [`order_sliding`] for at most as many segments as candidates; only
/// `segments.len()` candidates are chosen.
pub fn order_sliding_partial(
    segments: &[Vec<f64>],
    candidates: &[String],
    frames: &EmbeddingTable,
) -> Result<OrderingResult> {
    check_lengths(segments, candidates, false)?;
    Ok(greedy_picks(segments, &Pool::new(candidates, frames)?))
}

pub fn order_cumulative_partial(
    segments: &[Vec<f64>],
    candidates: &[String],
    frames: &EmbeddingTable,
) -> Result<OrderingResult> {
    check_lengths(segments, candidates, false)?;
    Ok(greedy_picks(&cumulative_queries(segments)?, &Pool::new(candidates, frames)?))
}

pub fn order_contextual_partial(
    segments: &[Vec<f64>],
    candidates: &[String],
    frames: &EmbeddingTable,
    beam_width: usize,
) -> Result<OrderingResult> {
    check_lengths(segments, candidates, false)?;
    if beam_width == 0 {
        return Err(Error::invalid("beam width must be at least 1"));
    }
    Ok(beam_search(&cumulative_queries(segments)?, &Pool::new(candidates, frames)?, beam_width))
}

/// Sum of cumulative-query similarities of a pick sequence.
pub fn contextual_score(segments: &[Vec<f64>], picked: &[Vec<f64>]) -> Result<f64> {
    let q = cumulative_queries(segments)?;
    Ok(q.iter().zip(picked).map(|(q, v)| dot(q, v)).sum())
}

fn beam_search(queries: &[Vec<f64>], pool: &Pool, width: usize) -> OrderingResult {
    #[derive(Clone)]
    struct Beam {
        picks: Vec<usize>,
        scores: Vec<f64>,
        total: f64,
    }
    let mut beams = vec![Beam {
        picks: Vec::new(),
        scores: Vec::new(),
        total: 0.0,
    }];
    for q in queries.iter().take(pool.len()) {
        let sims: Vec<f64> = pool.vecs.iter().map(|v| dot(q, v)).collect();
        let mut next = Vec::with_capacity(beams.len() * pool.len());
        for b in &beams {
            for (i, &s) in sims.iter().enumerate() {
                if b.picks.contains(&i) {
                    continue;
                }
                let mut nb = b.clone();
                nb.picks.push(i);
                nb.scores.push(s);
                nb.total += s;
                next.push(nb);
            }
        }
        // equal totals fall back to the lexicographically smaller id sequence
        next.sort_by(|a, b| b.total.total_cmp(&a.total).then_with(|| a.picks.cmp(&b.picks)));
        next.truncate(width);
        beams = next;
    }
    let best = beams.swap_remove(0);
    OrderingResult {
        ordered_ids: best.picks.iter().map(|&i| pool.ids[i].clone()).collect(),
        stopped_by_eos: false,
        scores: best.scores,
    }
}

/// Beam search over pick sequences maximizing the summed cumulative-query
/// similarity. Width 1 reproduces [`order_cumulative`].
pub fn order_contextual(
    segments: &[Vec<f64>],
    candidates: &[String],
    frames: &EmbeddingTable,
    beam_width: usize,
) -> Result<OrderingResult> {
    check_lengths(segments, candidates, true)?;
    if beam_width == 0 {
        return Err(Error::invalid("beam width must be at least 1"));
    }
    Ok(beam_search(&cumulative_queries(segments)?, &Pool::new(candidates, frames)?, beam_width))
}

fn binomial_capped(n: usize, k: usize, cap: usize) -> Option<usize> {
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 0..k {
        c = c * (n - i) as u128 / (i + 1) as u128;
        if c > cap as u128 {
            return None;
        }
    }
    Some(c as usize)
}

fn spans_from_cuts(cuts: &[usize], n: usize) -> Vec<Span> {
    let mut spans = Vec::with_capacity(cuts.len() + 1);
    let mut at = 0;
    for &c in cuts {
        spans.push((at, c));
        at = c;
    }
    spans.push((at, n));
    spans
}

/// Segmentations of `n_tokens` tokens into `m` non-empty contiguous spans:
/// all of them (in lexicographic cut order) when there are at most `limit`,
/// otherwise `limit` distinct ones drawn uniformly. Sampling is sequential,
/// so a larger limit with the same seed extends a smaller one.
pub fn enumerate_segmentations(n_tokens: usize, m: usize, limit: usize, seed: u64) -> Result<Vec<Vec<Span>>> {
    if m == 0 || m > n_tokens {
        return Err(Error::invalid(format!("cannot cut {n_tokens} tokens into {m} segments")));
    }
    if limit == 0 {
        return Ok(Vec::new());
    }
    let gaps = n_tokens - 1;
    let k = m - 1;
    if binomial_capped(gaps, k, limit).is_some() {
        let mut out = Vec::new();
        let mut cuts: Vec<usize> = (1..=k).collect();
        loop {
            out.push(spans_from_cuts(&cuts, n_tokens));
            // next k-combination of 1..=gaps
            let mut i = k;
            while i > 0 && cuts[i - 1] == gaps - (k - i) {
                i -= 1;
            }
            if i == 0 {
                break;
            }
            cuts[i - 1] += 1;
            for j in i..k {
                cuts[j] = cuts[j - 1] + 1;
            }
        }
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::with_capacity(limit);
    let mut out = Vec::with_capacity(limit);
    while out.len() < limit {
        let mut cuts: Vec<usize> = sample(&mut rng, gaps, k).into_iter().map(|c| c + 1).collect();
        cuts.sort_unstable();
        if seen.insert(cuts.clone()) {
            out.push(spans_from_cuts(&cuts, n_tokens));
        }
    }
    Ok(out)
}

/// Maximum-weight assignment of every row to a distinct column
/// (`rows <= cols`). Among optimal assignments the lexicographically smallest
/// row-to-column vector is returned.
pub fn bipartite_match(sim: &[Vec<f64>]) -> Result<(Vec<usize>, f64)> {
    let n = sim.len();
    if n == 0 {
        return Ok((Vec::new(), 0.0));
    }
    let m = sim[0].len();
    if sim.iter().any(|r| r.len() != m) || n > m {
        return Err(Error::invalid("assignment needs a rectangular matrix with rows <= cols"));
    }
    if sim.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::invalid("assignment matrix has non-finite entries"));
    }
    // square minimization problem; padding rows cost nothing
    let cost = |i: usize, j: usize| if i < n { -sim[i][j] } else { 0.0 };
    let (u, v, row_of_col) = hungarian(m, &cost);
    let mut assign = vec![0; n];
    for (j, &i) in row_of_col.iter().enumerate() {
        if i < n {
            assign[i] = j;
        }
    }
    let scale = 1.0 + sim.iter().flatten().fold(0.0f64, |a, x| a.max(x.abs()));
    let tol = 1e-9 * scale;
    let tight: Vec<Vec<usize>> = (0..m)
        .map(|i| (0..m).filter(|&j| (cost(i, j) - u[i] - v[j]).abs() <= tol).collect())
        .collect();
    if tight[..n].iter().any(|t| t.len() > 1) {
        assign = lexicographic_tight(&tight, n, m);
    }
    let total = assign.iter().enumerate().map(|(i, &j)| sim[i][j]).sum();
    Ok((assign, total))
}

/// Hungarian method with potentials for a square cost matrix (minimization).
/// Returns row potentials, column potentials and the row matched to each column.
fn hungarian(size: usize, cost: &dyn Fn(usize, usize) -> f64) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    // 1-based internals, index 0 is the virtual root
    let mut u = vec![0.0; size + 1];
    let mut v = vec![0.0; size + 1];
    let mut p = vec![0usize; size + 1];
    let mut way = vec![0usize; size + 1];
    for i in 1..=size {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; size + 1];
        let mut used = vec![false; size + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=size {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=size {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (u[1..].to_vec(), v[1..].to_vec(), p[1..].iter().map(|&i| i - 1).collect())
}

/// Lexicographically smallest assignment of the first `n` rows that extends
/// to a perfect matching of the tight-edge graph.
fn lexicographic_tight(tight: &[Vec<usize>], n: usize, m: usize) -> Vec<usize> {
    let mut fixed: Vec<Option<usize>> = vec![None; m];
    let mut assign = Vec::with_capacity(n);
    for i in 0..n {
        for &j in &tight[i] {
            if fixed.iter().any(|f| *f == Some(j)) {
                continue;
            }
            fixed[i] = Some(j);
            if perfect_matching_exists(tight, &fixed, m) {
                assign.push(j);
                break;
            }
            fixed[i] = None;
        }
    }
    assign
}

fn perfect_matching_exists(tight: &[Vec<usize>], fixed: &[Option<usize>], m: usize) -> bool {
    fn augment(i: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &j in &adj[i] {
            if seen[j] {
                continue;
            }
            seen[j] = true;
            if owner[j].is_none_or(|o| augment(o, adj, seen, owner)) {
                owner[j] = Some(i);
                return true;
            }
        }
        false
    }
    let taken: HashSet<usize> = fixed.iter().flatten().copied().collect();
    let adj: Vec<Vec<usize>> = (0..m)
        .map(|i| match fixed[i] {
            Some(j) => vec![j],
            None => tight[i].iter().copied().filter(|j| !taken.contains(j)).collect(),
        })
        .collect();
    let mut owner = vec![None; m];
    (0..m).all(|i| augment(i, &adj, &mut vec![false; m], &mut owner))
}

/// Best segmentation by optimal segment-to-candidate matching; candidates
/// come out in the order of their matched segments. With fewer segments than
/// candidates only the matched candidates are returned.
pub fn order_dynamic(
    text_id: &str,
    n_tokens: usize,
    n_segments: usize,
    candidates: &[String],
    frames: &EmbeddingTable,
    embedder: &dyn SegmentEmbedder,
    limit: usize,
    seed: u64,
) -> Result<(OrderingResult, f64)> {
    let pool = Pool::new(candidates, frames)?;
    if n_segments > pool.len() {
        return Err(Error::invalid("more segments than candidates"));
    }
    let segmentations = enumerate_segmentations(n_tokens, n_segments, limit, seed)?;
    let mut cache: HashMap<Span, Vec<f64>> = HashMap::new();
    let mut best: Option<(Vec<usize>, Vec<f64>, f64)> = None;
    for seg in &segmentations {
        let mut sim = Vec::with_capacity(seg.len());
        for &span in seg {
            if !cache.contains_key(&span) {
                cache.insert(span, embedder.embed(text_id, span)?);
            }
            let e = &cache[&span];
            sim.push(pool.vecs.iter().map(|v| dot(e, v)).collect::<Vec<f64>>());
        }
        let (assign, total) = bipartite_match(&sim)?;
        // first segmentation wins ties
        if best.as_ref().is_none_or(|(_, _, b)| total > *b) {
            let scores = assign.iter().enumerate().map(|(s, &c)| sim[s][c]).collect();
            best = Some((assign, scores, total));
        }
    }
    let (assign, scores, total) = best.ok_or_else(|| Error::invalid("no segmentation to score"))?;
    Ok((
        OrderingResult {
            ordered_ids: assign.iter().map(|&c| pool.ids[c].clone()).collect(),
            stopped_by_eos: false,
            scores,
        },
        total,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(vs: &[(&str, Vec<f64>)]) -> EmbeddingTable {
        let mut t = EmbeddingTable::new(vs[0].1.len()).unwrap();
        for (id, v) in vs {
            t.insert(*id, v).unwrap();
        }
        t
    }

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn unit(v: &[f64]) -> Vec<f64> {
        crate::linalg::normalized(v).unwrap()
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for at in 0..=p.len() {
                let mut q = p.clone();
                q.insert(at, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn seven_tokens_three_segments() {
        let toks = vec![0; 7];
        assert_eq!(segment_text(&toks, 3).unwrap(), vec![(0, 3), (3, 5), (5, 7)]);
        assert!(segment_text(&toks, 8).is_err());
        assert!(segment_text(&toks, 0).is_err());
    }

    #[test]
    fn four_tokens_two_segments_enumerated() {
        let all = enumerate_segmentations(4, 2, 100, 0).unwrap();
        assert_eq!(
            all,
            vec![vec![(0, 1), (1, 4)], vec![(0, 2), (2, 4)], vec![(0, 3), (3, 4)]]
        );
    }

    #[test]
    fn sampled_segmentations_are_distinct_and_nested() {
        // C(29, 4) = 23751 > 500
        let small = enumerate_segmentations(30, 5, 500, 7).unwrap();
        let large = enumerate_segmentations(30, 5, 800, 7).unwrap();
        assert_eq!(small.len(), 500);
        assert_eq!(&large[..500], &small[..]);
        let set: HashSet<_> = large.iter().collect();
        assert_eq!(set.len(), 800);
        for seg in &large {
            assert_eq!(seg.len(), 5);
            assert_eq!(seg[0].0, 0);
            assert_eq!(seg[4].1, 30);
            assert!(seg.iter().all(|&(a, b)| a < b));
            assert!(seg.windows(2).all(|w| w[0].1 == w[1].0));
        }
    }

    #[test]
    fn greedy_example_picks_a_c_b() {
        let frames = table(&[
            ("a", unit(&[1.0, 0.0, 0.0])),
            ("b", unit(&[0.0, 0.0, 1.0])),
            ("c", unit(&[0.0, 1.0, 0.0])),
        ]);
        let segs = vec![unit(&[1.0, 0.1, 0.0]), unit(&[0.1, 1.0, 0.0]), unit(&[0.0, 0.1, 1.0])];
        let r = order_sliding(&segs, &ids(&["a", "b", "c"]), &frames).unwrap();
        assert_eq!(r.ordered_ids, ids(&["a", "c", "b"]));
        assert!(order_sliding(&segs[..2], &ids(&["a", "b", "c"]), &frames).is_err());
    }

    #[test]
    fn naive_ties_go_to_lower_id() {
        let frames = table(&[("z", vec![1.0, 0.0]), ("a", vec![1.0, 0.0]), ("m", vec![0.0, 1.0])]);
        let r = order_naive(&[1.0, 0.0], &ids(&["z", "m", "a"]), &frames).unwrap();
        assert_eq!(r.ordered_ids, ids(&["a", "z", "m"]));
    }

    #[test]
    fn duplicate_candidates_rejected() {
        let frames = table(&[("a", vec![1.0, 0.0])]);
        assert!(order_naive(&[1.0, 0.0], &ids(&["a", "a"]), &frames).is_err());
    }

    #[test]
    fn lexicographic_tie_break_in_matching() {
        let sim = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        assert_eq!(bipartite_match(&sim).unwrap().0, vec![0, 1]);
        let sim = vec![vec![0.0, 0.0, 0.0]];
        assert_eq!(bipartite_match(&sim).unwrap().0, vec![0]);
    }

    fn brute_match(sim: &[Vec<f64>]) -> (Vec<usize>, f64) {
        let m = sim[0].len();
        let mut best: Option<(Vec<usize>, f64)> = None;
        for p in permutations(m) {
            let a: Vec<usize> = p[..sim.len()].to_vec();
            let t: f64 = a.iter().enumerate().map(|(i, &j)| sim[i][j]).sum();
            let better = match &best {
                None => true,
                Some((ba, bt)) => t > bt + 1e-12 || ((t - bt).abs() <= 1e-12 && a < *ba),
            };
            if better {
                best = Some((a, t));
            }
        }
        best.unwrap()
    }

    fn brute_contextual(segs: &[Vec<f64>], vecs: &[Vec<f64>]) -> f64 {
        let q = cumulative_queries(segs).unwrap();
        permutations(vecs.len())
            .iter()
            .map(|p| p.iter().zip(&q).map(|(&i, q)| dot(q, &vecs[i])).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    fn vecs_strategy(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), n)
            .prop_filter("non-degenerate", |vs| vs.iter().all(|v| crate::linalg::norm(v) > 1e-3))
            .prop_map(|vs| vs.iter().map(|v| unit(v)).collect())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn matching_matches_brute_force(
            (r, c) in (1usize..5).prop_flat_map(|r| (Just(r), r..6)),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // coarse grid so ties are common
            let sim: Vec<Vec<f64>> = (0..r)
                .map(|_| (0..c).map(|_| f64::from(rand::Rng::random_range(&mut rng, -2i32..3))).collect())
                .collect();
            let (a, t) = bipartite_match(&sim).unwrap();
            let (ba, bt) = brute_match(&sim);
            prop_assert!((t - bt).abs() < 1e-9);
            prop_assert_eq!(a, ba);
        }

        #[test]
        fn matching_continuous_optimum(sim in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 5), 4)) {
            let (_, t) = bipartite_match(&sim).unwrap();
            let (_, bt) = brute_match(&sim);
            prop_assert!((t - bt).abs() < 1e-9);
        }

        #[test]
        fn wide_beam_is_exhaustive(segs in vecs_strategy(4, 3), vecs in vecs_strategy(4, 3)) {
            let names = ["c0", "c1", "c2", "c3"];
            let frames = table(&names.iter().zip(&vecs).map(|(n, v)| (*n, v.clone())).collect::<Vec<_>>());
            // stored as f32, so compare against the stored vectors
            let stored: Vec<Vec<f64>> = names.iter().map(|n| frames.vector(n).unwrap()).collect();
            let r = order_contextual(&segs, &ids(&names), &frames, 24).unwrap();
            let got: f64 = r.scores.iter().sum();
            prop_assert!((got - brute_contextual(&segs, &stored)).abs() < 1e-9);
        }

        #[test]
        fn beam_one_is_cumulative(segs in vecs_strategy(5, 4), vecs in vecs_strategy(5, 4)) {
            let names = ["a", "b", "c", "d", "e"];
            let frames = table(&names.iter().zip(&vecs).map(|(n, v)| (*n, v.clone())).collect::<Vec<_>>());
            let c = order_cumulative(&segs, &ids(&names), &frames).unwrap();
            let b = order_contextual(&segs, &ids(&names), &frames, 1).unwrap();
            prop_assert_eq!(c.ordered_ids, b.ordered_ids);
        }

        #[test]
        fn baselines_emit_permutations(segs in vecs_strategy(6, 3), vecs in vecs_strategy(6, 3)) {
            let names = ["a", "b", "c", "d", "e", "f"];
            let frames = table(&names.iter().zip(&vecs).map(|(n, v)| (*n, v.clone())).collect::<Vec<_>>());
            let pool = ids(&names);
            for r in [
                order_naive(&segs[0], &pool, &frames).unwrap(),
                order_sliding(&segs, &pool, &frames).unwrap(),
                order_cumulative(&segs, &pool, &frames).unwrap(),
                order_contextual(&segs, &pool, &frames, 3).unwrap(),
            ] {
                let mut got = r.ordered_ids.clone();
                got.sort();
                prop_assert_eq!(got, pool.clone());
            }
        }

        #[test]
        fn segmentation_count_matches_binomial(n in 1usize..12, m in 1usize..6) {
            prop_assume!(m <= n);
            let all = enumerate_segmentations(n, m, usize::MAX, 0).unwrap();
            let expect = binomial_capped(n - 1, m - 1, usize::MAX).unwrap();
            prop_assert_eq!(all.len(), expect);
            let set: HashSet<_> = all.iter().collect();
            prop_assert_eq!(set.len(), expect);
        }
    }

    #[test]
    fn dynamic_finds_planted_segmentation() {
        // words 0..2 point at x, words 2..6 at y, word 6 at z
        let mut texts = EmbeddingTable::new(3).unwrap();
        let dirs = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let owner = [0, 0, 1, 1, 1, 1, 2];
        for (i, &o) in owner.iter().enumerate() {
            texts.insert(word_key("t", i), &dirs[o]).unwrap();
        }
        let frames = table(&[("x", dirs[0].to_vec()), ("y", dirs[1].to_vec()), ("z", dirs[2].to_vec())]);
        let (r, total) = order_dynamic(
            "t",
            7,
            3,
            &ids(&["z", "y", "x"]),
            &frames,
            &DefaultEmbedder(&texts),
            1000,
            0,
        )
        .unwrap();
        assert_eq!(r.ordered_ids, ids(&["x", "y", "z"]));
        assert!((total - 3.0).abs() < 1e-6);
    }

    #[test]
    fn span_vectors_take_precedence() {
        let mut texts = EmbeddingTable::new(2).unwrap();
        texts.insert(word_key("t", 0), &[1.0, 0.0]).unwrap();
        texts.insert(word_key("t", 1), &[1.0, 0.0]).unwrap();
        texts.insert(span_key("t", 0, 2), &[0.0, 1.0]).unwrap();
        let e = DefaultEmbedder(&texts).embed("t", (0, 2)).unwrap();
        assert!((e[1] - 1.0).abs() < 1e-6);
        let p = PooledTokenEmbedder(&texts).embed("t", (0, 2)).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-6);
        assert!(TableSpanEmbedder(&texts).embed("t", (0, 1)).is_err());
    }
}
