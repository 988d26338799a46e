//! Agreement between partitions.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Largest number of distinct labels accepted by [`misclassification_rate`].
pub const MAX_MATCHED_LABELS: usize = 12;

/// Contingency table of two labelings with dense row/column indices.
fn contingency(a: &[usize], b: &[usize]) -> (Vec<Vec<u64>>, usize, usize) {
    let index = |labels: &[usize]| {
        let mut map = BTreeMap::new();
        for &l in labels {
            let next = map.len();
            map.entry(l).or_insert(next);
        }
        map
    };
    let (ia, ib) = (index(a), index(b));
    let mut table = vec![vec![0u64; ib.len()]; ia.len()];
    for (x, y) in a.iter().zip(b) {
        table[ia[x]][ib[y]] += 1;
    }
    (table, ia.len(), ib.len())
}

fn choose2(v: u64) -> f64 {
    (v as f64) * (v as f64 - 1.0) / 2.0
}

/// Adjusted Rand index of two labelings.
///
/// When both partitions are trivial in the same way (all in one cluster, or
/// all singletons) the index is defined as 1.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!("label vectors differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Contract("adjusted Rand index needs at least two observations".into()));
    }
    let (table, _, _) = contingency(a, b);
    let index: f64 = table.iter().flatten().map(|&v| choose2(v)).sum();
    let rows: f64 = table.iter().map(|r| choose2(r.iter().sum())).sum();
    let cols_n: Vec<u64> = (0..table[0].len()).map(|c| table.iter().map(|r| r[c]).sum()).collect();
    let cols: f64 = cols_n.iter().map(|&v| choose2(v)).sum();
    let total = choose2(a.len() as u64);
    let expected = rows * cols / total;
    let max = 0.5 * (rows + cols);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Smallest fraction of disagreeing observations over all one-to-one
/// matchings of the labels of `a` to the labels of `b`.
pub fn misclassification_rate(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!("label vectors differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Contract("misclassification rate needs at least one observation".into()));
    }
    let (table, ra, rb) = contingency(a, b);
    let size = ra.max(rb);
    if size > MAX_MATCHED_LABELS {
        return Err(Error::Contract(format!(
            "{size} distinct labels exceed the limit of {MAX_MATCHED_LABELS} for exact matching"
        )));
    }
    let mut cost = vec![vec![0i64; size]; size];
    for (r, row) in table.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            cost[r][c] = -(v as i64);
        }
    }
    let (_, total) = min_cost_assignment(&cost);
    Ok(1.0 - (-total) as f64 / a.len() as f64)
}

/// Hungarian algorithm for a square cost matrix. Returns the column
/// assigned to each row and the minimum total cost.
pub fn min_cost_assignment(cost: &[Vec<i64>]) -> (Vec<usize>, i64) {
    let n = cost.len();
    if n == 0 {
        return (Vec::new(), 0);
    }
    const INF: i64 = i64::MAX / 4;
    // Potentials and matching use 1-based indices with 0 as a sentinel.
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut matched = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[matched[j] - 1] = j - 1;
    }
    let total = (0..n).map(|r| cost[r][assignment[r]]).sum();
    (assignment, total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ari_examples() {
        assert_eq!(adjusted_rand_index(&[1, 1, 2, 2], &[3, 3, 7, 7]).unwrap(), 1.0);
        assert!((adjusted_rand_index(&[1, 1, 2, 2], &[1, 2, 1, 2]).unwrap() + 0.5).abs() < 1e-15);
        assert!(adjusted_rand_index(&[1, 2], &[1]).is_err());
    }

    #[test]
    fn misclassification_examples() {
        assert_eq!(misclassification_rate(&[1, 1, 2], &[2, 2, 1]).unwrap(), 0.0);
        assert_eq!(misclassification_rate(&[1, 1, 2, 2], &[1, 2, 1, 2]).unwrap(), 0.5);
        assert_eq!(misclassification_rate(&[3, 1, 2], &[3, 1, 2]).unwrap(), 0.0);
        // Unequal label counts pad with empty labels.
        assert!((misclassification_rate(&[1, 1, 1, 2], &[1, 2, 3, 3]).unwrap() - 0.5).abs() < 1e-15);
        let many: Vec<usize> = (0..13).collect();
        assert!(misclassification_rate(&many, &many).is_err());
    }

    #[test]
    fn assignment_small_cases() {
        let cost = vec![vec![4, 1, 3], vec![2, 0, 5], vec![3, 2, 2]];
        let (a, total) = min_cost_assignment(&cost);
        assert_eq!(total, 5);
        assert_eq!(a, vec![1, 0, 2]);
    }
}
