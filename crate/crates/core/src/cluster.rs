//! Ward agglomerative clustering used to seed the mixture.

use nalgebra::DMatrix;

/// Partitions the rows of `points` into `k` groups by Ward's minimum-variance
/// agglomeration. Returns 0-based labels numbered by first appearance.
///
/// Uses the nearest-neighbour-chain algorithm with Lance-Williams updates on
/// squared Euclidean distances, so time is quadratic and memory is one
/// `n x n` matrix.
pub fn ward_labels(points: &DMatrix<f64>, k: usize) -> Vec<usize> {
    let n = points.nrows();
    if n == 0 {
        return Vec::new();
    }
    let k = k.clamp(1, n);
    let mut dist = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..a {
            let d = (points.row(a) - points.row(b)).norm_squared();
            dist[a * n + b] = d;
            dist[b * n + a] = d;
        }
    }
    let mut size = vec![1.0f64; n];
    let mut active = vec![true; n];
    let mut merges: Vec<(f64, usize, usize)> = Vec::with_capacity(n - 1);
    let mut chain: Vec<usize> = Vec::new();
    let mut remaining = n;

    while remaining > 1 {
        if chain.is_empty() {
            chain.push(active.iter().position(|&a| a).expect("an active cluster remains"));
        }
        loop {
            let a = *chain.last().unwrap();
            let prev = if chain.len() >= 2 { Some(chain[chain.len() - 2]) } else { None };
            let mut best = prev.unwrap_or(usize::MAX);
            let mut best_d = prev.map_or(f64::INFINITY, |b| dist[a * n + b]);
            for c in 0..n {
                if c != a && active[c] && dist[a * n + c] < best_d {
                    best_d = dist[a * n + c];
                    best = c;
                }
            }
            if Some(best) == prev {
                chain.pop();
                chain.pop();
                let (keep, gone) = (a.min(best), a.max(best));
                merges.push((best_d, keep, gone));
                let (na, nb) = (size[keep], size[gone]);
                for c in 0..n {
                    if !active[c] || c == keep || c == gone {
                        continue;
                    }
                    let nc = size[c];
                    let d = ((na + nc) * dist[keep * n + c] + (nb + nc) * dist[gone * n + c] - nc * best_d)
                        / (na + nb + nc);
                    dist[keep * n + c] = d;
                    dist[c * n + keep] = d;
                }
                size[keep] = na + nb;
                active[gone] = false;
                remaining -= 1;
                break;
            }
            chain.push(best);
        }
    }

    merges.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for &(_, a, b) in merges.iter().take(n - k) {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        parent[ra.max(rb)] = ra.min(rb);
    }
    let mut label_of_root = vec![usize::MAX; n];
    let mut next = 0;
    (0..n)
        .map(|l| {
            let r = find(&mut parent, l);
            if label_of_root[r] == usize::MAX {
                label_of_root[r] = next;
                next += 1;
            }
            label_of_root[r]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separates_obvious_groups() {
        let pts = DMatrix::from_row_slice(6, 2, &[0.0, 0.0, 0.1, 0.0, 0.0, 0.1, 5.0, 5.0, 5.1, 5.0, 5.0, 5.2]);
        assert_eq!(ward_labels(&pts, 2), vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(ward_labels(&pts, 1), vec![0; 6]);
        assert_eq!(ward_labels(&pts, 6), vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn merge_order_follows_ward_cost() {
        // Points on a line: {0, 1} and {10} then 30; with k = 3 the pair
        // {0, 1} is the only merge.
        let pts = DMatrix::from_row_slice(4, 1, &[0.0, 1.0, 10.0, 30.0]);
        assert_eq!(ward_labels(&pts, 3), vec![0, 0, 1, 2]);
        assert_eq!(ward_labels(&pts, 2), vec![0, 0, 0, 1]);
    }
}
