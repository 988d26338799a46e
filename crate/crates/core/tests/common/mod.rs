#![allow(dead_code)]

use countmix::em::restandardize_masked;
use countmix::model::{LatentMixture, Loadings, Theta};
use countmix::simulation::simulate_dataset;
use countmix::CountMatrix;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Unstandardized parameters with moderate rates.
pub fn raw_theta(p: usize, q: usize, k: usize, seed: u64) -> Theta {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let intercepts = DVector::from_fn(p, |_, _| rng.gen_range(-0.5..1.0));
    let lam = DMatrix::from_fn(p, q, |_, _| rng.gen_range(-0.8..0.8));
    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.5..2.0)).collect();
    let total: f64 = raw.iter().sum();
    let means = (0..k).map(|_| DVector::from_fn(q, |_, _| rng.gen_range(-1.5..1.5))).collect();
    let covariances = (0..k)
        .map(|_| {
            let a = DMatrix::from_fn(q, q, |_, _| rng.gen_range(-0.5..0.5));
            &a * a.transpose() + DMatrix::identity(q, q) * 0.3
        })
        .collect();
    Theta {
        loadings: Loadings::new(intercepts, lam, false).unwrap(),
        mixture: LatentMixture {
            weights: DVector::from_iterator(k, raw.iter().map(|w| w / total)),
            logit: None,
            means,
            covariances,
        },
    }
}

/// Parameters satisfying every identification constraint.
pub fn standardized_theta(p: usize, q: usize, k: usize, seed: u64) -> Theta {
    let mut theta = restandardize_masked(&raw_theta(p, q, k, seed)).unwrap();
    let mask: Vec<bool> = countmix::model::standard_mask(p, q, true);
    theta.loadings =
        Loadings::with_mask(theta.loadings.intercepts.clone(), theta.loadings.loadings.clone(), mask).unwrap();
    theta
}

pub fn counts_from(theta: &Theta, n: usize, seed: u64) -> CountMatrix {
    simulate_dataset(theta, n, seed).unwrap().counts
}

/// Every set partition of `0..n` as restricted growth strings.
pub fn set_partitions(n: usize) -> Vec<Vec<usize>> {
    fn grow(prefix: &mut Vec<usize>, max: usize, n: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        for v in 0..=max + 1 {
            prefix.push(v);
            grow(prefix, max.max(v), n, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if n == 0 {
        return out;
    }
    grow(&mut vec![0], 0, n, &mut out);
    out
}

/// Adjusted Rand index by direct enumeration of all observation pairs.
pub fn ari_by_pairs(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let (mut both, mut only_a, mut only_b, mut neither) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..n {
        for j in i + 1..n {
            match (a[i] == a[j], b[i] == b[j]) {
                (true, true) => both += 1.0,
                (true, false) => only_a += 1.0,
                (false, true) => only_b += 1.0,
                (false, false) => neither += 1.0,
            }
        }
    }
    let total = both + only_a + only_b + neither;
    let same_a = both + only_a;
    let same_b = both + only_b;
    let expected = same_a * same_b / total;
    let max = 0.5 * (same_a + same_b);
    if max == expected {
        1.0
    } else {
        (both - expected) / (max - expected)
    }
}

/// Misclassification rate by trying every injective relabeling.
pub fn misclassification_by_permutations(a: &[usize], b: &[usize]) -> f64 {
    let mut la: Vec<usize> = a.to_vec();
    la.sort_unstable();
    la.dedup();
    let mut lb: Vec<usize> = b.to_vec();
    lb.sort_unstable();
    lb.dedup();
    let size = la.len().max(lb.len());
    let mut best = 0usize;
    let mut perm: Vec<usize> = (0..size).collect();
    permute(&mut perm, 0, &mut |perm| {
        // label la[r] is matched to lb[perm[r]] when both exist
        let agree = a
            .iter()
            .zip(b)
            .filter(|(x, y)| {
                let r = la.iter().position(|v| v == *x).unwrap();
                perm[r] < lb.len() && lb[perm[r]] == **y
            })
            .count();
        best = best.max(agree);
    });
    1.0 - best as f64 / a.len() as f64
}

fn permute(v: &mut Vec<usize>, start: usize, visit: &mut impl FnMut(&[usize])) {
    if start == v.len() {
        visit(v);
        return;
    }
    for i in start..v.len() {
        v.swap(start, i);
        permute(v, start + 1, visit);
        v.swap(start, i);
    }
}
