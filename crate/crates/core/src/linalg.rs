//! Small dense-vector helpers shared by the similarity-based code paths.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Returns `a / |a|`, or `None` for a zero (or non-finite) vector.
pub fn normalized(a: &[f64]) -> Option<Vec<f64>> {
    let n = norm(a);
    if n > 0.0 && n.is_finite() {
        Some(a.iter().map(|x| x / n).collect())
    } else {
        None
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Normalized mean of a non-empty set of vectors.
pub fn mean_direction<'a>(vs: impl IntoIterator<Item = &'a [f64]>) -> Option<Vec<f64>> {
    let mut acc: Option<Vec<f64>> = None;
    for v in vs {
        match acc.as_mut() {
            None => acc = Some(v.to_vec()),
            Some(a) => a.iter_mut().zip(v).for_each(|(x, y)| *x += y),
        }
    }
    acc.and_then(|a| normalized(&a))
}

/// Index of the maximum score; ties go to the entry whose key compares lowest.
pub fn argmax_by_key<K: Ord>(scores: &[f64], key: impl Fn(usize) -> K) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        best = match best {
            None => Some(i),
            Some(b) if s > scores[b] || (s == scores[b] && key(i) < key(b)) => Some(i),
            keep => keep,
        };
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_vector_cannot_be_normalized() {
        assert!(normalized(&[0.0, 0.0]).is_none());
        assert_eq!(normalized(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
    }

    #[test]
    fn argmax_ties_use_key() {
        let scores = [0.5, 0.9, 0.9, 0.1];
        assert_eq!(argmax_by_key(&scores, |i| i), Some(1));
        assert_eq!(argmax_by_key(&scores, |i| std::cmp::Reverse(i)), Some(2));
        assert_eq!(argmax_by_key(&[], |i| i), None);
    }
}
