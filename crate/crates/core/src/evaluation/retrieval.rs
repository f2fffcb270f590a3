use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::linalg;
use crate::par;

pub const DEFAULT_KS: [usize; 4] = [1, 2, 5, 10];

/// Candidate indices ordered by descending cosine; ties keep index order.
pub fn rank_candidates(query: &[f64], candidates: &[Vec<f64>]) -> Vec<usize> {
    let scores: Vec<f64> = candidates.iter().map(|c| linalg::dot(query, c)).collect();
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    // stable sort: equal scores stay in index order
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Mean over queries of `(relevant in top k) / k`, relevance meaning equal
/// class ids. Returns one value per entry of `ks`, keyed by k.
pub fn precision_at_k(
    queries: &[Vec<f64>],
    query_classes: &[usize],
    candidates: &[Vec<f64>],
    candidate_classes: &[usize],
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    if queries.len() != query_classes.len() || candidates.len() != candidate_classes.len() {
        return Err(Error::Shape(
            "embeddings and class ids differ in length".into(),
        ));
    }
    if queries.is_empty() {
        return Err(Error::Shape("no retrieval queries".into()));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > candidates.len()) {
        return Err(Error::Shape(format!(
            "k = {k} invalid for {} candidates",
            candidates.len()
        )));
    }
    let max_k = ks.iter().copied().max().unwrap_or(0);
    let hits: Vec<Vec<usize>> = par::map_range(queries.len(), |q| {
        let order = rank_candidates(&queries[q], candidates);
        // cumulative relevant count within the first k
        let mut running = 0;
        order[..max_k]
            .iter()
            .map(|&c| {
                running += usize::from(candidate_classes[c] == query_classes[q]);
                running
            })
            .collect()
    });
    Ok(ks
        .iter()
        .map(|&k| {
            let total: f64 = hits.iter().map(|h| h[k - 1] as f64 / k as f64).sum();
            (k, total / queries.len() as f64)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_relevant_top_two() {
        let q = vec![vec![1.0, 0.0]];
        let c = vec![vec![1.0, 0.0], vec![0.8, 0.6], vec![0.0, 1.0]];
        let p = precision_at_k(&q, &[0], &c, &[0, 1, 0], &[1, 2]).unwrap();
        assert_eq!(p[&1], 1.0);
        assert_eq!(p[&2], 0.5);
    }

    #[test]
    fn ties_break_by_index() {
        let c = vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.0]];
        assert_eq!(rank_candidates(&[1.0, 0.0], &c), vec![1, 2, 0]);
    }

    #[test]
    fn all_or_none_relevant() {
        let q = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let c: Vec<Vec<f64>> = (0..10)
            .map(|i| vec![(i as f64).cos(), (i as f64).sin()])
            .collect();
        let all = precision_at_k(&q, &[3, 3], &c, &[3; 10], &DEFAULT_KS).unwrap();
        assert!(all.values().all(|p| *p == 1.0));
        let none = precision_at_k(&q, &[3, 3], &c, &[4; 10], &DEFAULT_KS).unwrap();
        assert!(none.values().all(|p| *p == 0.0));
    }

    #[test]
    fn k_beyond_candidates_is_an_error() {
        let q = vec![vec![1.0]];
        assert!(precision_at_k(&q, &[0], &[vec![1.0]], &[0], &[2]).is_err());
        assert!(precision_at_k(&q, &[0], &[vec![1.0]], &[0], &[0]).is_err());
    }
}
