use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::standardize::standardize_mixture;
use super::{FirstIntercept, InitStrategy};
use crate::cluster::ward_labels;
use crate::covariates::{average_weights, DesignMatrix, LogitCoefficients};
use crate::error::{Error, Result};
use crate::model::{CountMatrix, LatentMixture, Loadings, ModelDims, Theta};

/// Rows used for the Ward agglomeration; the rest join the nearest centroid.
const WARD_SUBSAMPLE: usize = 1000;
const MAX_INIT_LOADING: f64 = 3.0;

/// Starting values for the EM iterations.
///
/// With `design`, the logit coefficients start at zero apart from intercepts
/// matching the initial proportions.
pub fn initialize(
    counts: &CountMatrix,
    dims: ModelDims,
    strategy: InitStrategy,
    first_intercept: FirstIntercept,
    seed: u64,
    design: Option<&DesignMatrix>,
) -> Result<Theta> {
    dims.validate()?;
    if counts.ncols() != dims.p || counts.nrows() != dims.n {
        return Err(Error::Contract(format!(
            "counts are {}x{}, dims say {}x{}",
            counts.nrows(),
            counts.ncols(),
            dims.n,
            dims.p
        )));
    }
    let means = column_stats(counts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (loadings, mut mixture) = match strategy {
        InitStrategy::Random => random_start(dims, &mut rng),
        InitStrategy::FactorWard => factor_ward_start(counts, dims, &means, &mut rng)?,
    };
    if dims.k == 1 {
        mixture.means = vec![DVector::zeros(dims.q)];
        mixture.covariances = vec![DMatrix::identity(dims.q, dims.q)];
        mixture.weights = DVector::from_element(1, 1.0);
    } else {
        standardize_mixture(&mut mixture)?;
    }

    let intercepts =
        DVector::from_iterator(dims.p, (0..dims.p).map(|j| means.0[j].ln() - 0.5 * loadings.row(j).norm_squared()));
    let loadings = Loadings::new(intercepts, loadings, first_intercept == FirstIntercept::Fixed)?;

    if let Some(x) = design {
        if x.ncols() != dims.m + 1 {
            return Err(Error::Contract(format!("design has {} columns, expected {}", x.ncols(), dims.m + 1)));
        }
        let mut coefs = LogitCoefficients::zeros(dims.k, x.ncols());
        let last = mixture.weights[dims.k - 1];
        for i in 0..dims.k - 1 {
            coefs.eta[(i, 0)] = (mixture.weights[i] / last).ln();
        }
        mixture.weights = average_weights(&coefs, x);
        mixture.logit = Some(coefs);
    }
    let theta = Theta { loadings, mixture };
    theta.validate()?;
    Ok(theta)
}

/// Column means (floored away from zero) and standard deviations of
/// `log(1 + y)`; a constant column is an error.
fn column_stats(counts: &CountMatrix) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, p) = (counts.nrows(), counts.ncols());
    let mut means = Vec::with_capacity(p);
    let mut sds = Vec::with_capacity(p);
    for j in 0..p {
        let first = counts.row(0)[j];
        if (0..n).all(|l| counts.row(l)[j] == first) {
            return Err(Error::Data(format!(
                "column {} ('{}') is constant; initialization needs variation in every variable",
                j + 1,
                counts.column_names()[j]
            )));
        }
        means.push(counts.column_mean(j).max(0.05));
        let logs: Vec<f64> = (0..n).map(|l| (counts.row(l)[j] as f64).ln_1p()).collect();
        let m = logs.iter().sum::<f64>() / n as f64;
        sds.push((logs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt());
    }
    Ok((means, sds))
}

fn random_start(dims: ModelDims, rng: &mut ChaCha8Rng) -> (DMatrix<f64>, LatentMixture) {
    let (p, q, k) = (dims.p, dims.q, dims.k);
    let mut lam = DMatrix::zeros(p, q);
    for j in 0..p {
        for c in 0..q {
            let v: f64 = rng.sample(StandardNormal);
            if j >= c {
                lam[(j, c)] = 0.5 * v;
            }
        }
    }
    let means = (0..k)
        .map(|_| {
            let v = DVector::from_iterator(q, (0..q).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let norm = v.norm();
            if norm > 0.0 {
                v / norm
            } else {
                DVector::from_element(q, 1.0 / (q as f64).sqrt())
            }
        })
        .collect();
    let mixture = LatentMixture {
        weights: DVector::from_element(k, 1.0 / k as f64),
        logit: None,
        means,
        covariances: vec![DMatrix::identity(q, q) * 0.2; k],
    };
    (lam, mixture)
}

/// Principal-factor loadings of `log(1 + y)`, Thomson factor scores and a
/// Ward partition of the scores.
fn factor_ward_start(
    counts: &CountMatrix,
    dims: ModelDims,
    stats: &(Vec<f64>, Vec<f64>),
    rng: &mut ChaCha8Rng,
) -> Result<(DMatrix<f64>, LatentMixture)> {
    let (n, p, q, k) = (dims.n, dims.p, dims.q, dims.k);
    let (means, sds) = stats;
    let mut x = DMatrix::zeros(n, p);
    for j in 0..p {
        let col: Vec<f64> = (0..n).map(|l| (counts.row(l)[j] as f64).ln_1p()).collect();
        let m = col.iter().sum::<f64>() / n as f64;
        for l in 0..n {
            x[(l, j)] = (col[l] - m) / sds[j];
        }
    }
    let corr = (x.transpose() * &x) / n as f64;
    let fa = principal_factors(&corr, q)?;

    let ridge = &corr + DMatrix::identity(p, p) * 1e-6;
    let weights = ridge
        .cholesky()
        .map(|c| c.solve(&fa))
        .ok_or_else(|| Error::Numerical("correlation matrix of log counts is not positive definite".into()))?;
    let scores = &x * weights;

    let labels = partition(&scores, k, rng);
    let mut mixture = group_moments(&scores, &labels, k);
    if mixture.weights.iter().any(|w| *w == 0.0) {
        // Ward never yields empty groups, but nearest-centroid reassignment can.
        mixture = LatentMixture { weights: DVector::from_element(k, 1.0 / k as f64), ..mixture };
    }

    let mut lam = DMatrix::zeros(p, q);
    for j in 0..p {
        let ratio = (1.0 + means[j]) / means[j];
        for c in 0..q.min(j + 1) {
            lam[(j, c)] = (fa[(j, c)] * sds[j] * ratio).clamp(-MAX_INIT_LOADING, MAX_INIT_LOADING);
        }
    }
    Ok((lam, mixture))
}

/// Iterated principal-axis factoring with squared multiple correlations as
/// starting communalities, rotated so the top `q x q` block is lower
/// triangular with a non-negative diagonal.
fn principal_factors(corr: &DMatrix<f64>, q: usize) -> Result<DMatrix<f64>> {
    let p = corr.nrows();
    let mut h2: Vec<f64> = match corr.clone().try_inverse() {
        Some(inv) => (0..p).map(|j| (1.0 - 1.0 / inv[(j, j)]).clamp(0.05, 0.995)).collect(),
        None => (0..p).map(|j| (0..p).filter(|&b| b != j).map(|b| corr[(j, b)].abs()).fold(0.05, f64::max)).collect(),
    };
    let mut fa = DMatrix::zeros(p, q);
    for _ in 0..25 {
        let mut reduced = corr.clone();
        for j in 0..p {
            reduced[(j, j)] = h2[j];
        }
        let eig = SymmetricEigen::new(reduced);
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        for (c, &idx) in order.iter().take(q).enumerate() {
            let scale = eig.eigenvalues[idx].max(1e-6).sqrt();
            for j in 0..p {
                fa[(j, c)] = eig.eigenvectors[(j, idx)] * scale;
            }
        }
        let mut change = 0.0f64;
        for j in 0..p {
            let new = fa.row(j).norm_squared().clamp(0.005, 0.995);
            change = change.max((new - h2[j]).abs());
            h2[j] = new;
        }
        if change < 1e-6 {
            break;
        }
    }
    let top = fa.rows(0, q).transpose();
    let qr = top.qr();
    let rot = qr.q();
    let mut out = fa * rot;
    for c in 0..q {
        if out[(c, c)] < 0.0 {
            out.column_mut(c).neg_mut();
        }
        for j in 0..c {
            out[(j, c)] = 0.0;
        }
    }
    Ok(out)
}

/// Ward labels on a seeded subsample, remaining rows assigned to the nearest
/// group centroid.
fn partition(scores: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = scores.nrows();
    if k == 1 {
        return vec![0; n];
    }
    let mut rows: Vec<usize> =
        if n > WARD_SUBSAMPLE { sample(rng, n, WARD_SUBSAMPLE).into_vec() } else { (0..n).collect() };
    rows.sort_unstable();
    let sub = DMatrix::from_fn(rows.len(), scores.ncols(), |r, c| scores[(rows[r], c)]);
    let sub_labels = ward_labels(&sub, k);
    if rows.len() == n {
        return sub_labels;
    }
    let q = scores.ncols();
    let mut centroids = vec![DVector::<f64>::zeros(q); k];
    let mut sizes = vec![0.0; k];
    for (r, &g) in sub_labels.iter().enumerate() {
        centroids[g] += scores.row(rows[r]).transpose();
        sizes[g] += 1.0;
    }
    for g in 0..k {
        if sizes[g] > 0.0 {
            centroids[g] /= sizes[g];
        }
    }
    (0..n)
        .map(|l| {
            let z = scores.row(l).transpose();
            (0..k)
                .filter(|&g| sizes[g] > 0.0)
                .min_by(|&a, &b| (&z - &centroids[a]).norm_squared().total_cmp(&(&z - &centroids[b]).norm_squared()))
                .unwrap_or(0)
        })
        .collect()
}

/// Proportions, means and covariances of each labelled group; small groups
/// borrow the pooled covariance.
fn group_moments(scores: &DMatrix<f64>, labels: &[usize], k: usize) -> LatentMixture {
    let (n, q) = scores.shape();
    let mut counts = vec![0usize; k];
    let mut means = vec![DVector::zeros(q); k];
    for (l, &g) in labels.iter().enumerate() {
        counts[g] += 1;
        means[g] += scores.row(l).transpose();
    }
    for g in 0..k {
        if counts[g] > 0 {
            means[g] /= counts[g] as f64;
        }
    }
    let mut covs = vec![DMatrix::zeros(q, q); k];
    let mut pooled = DMatrix::zeros(q, q);
    for (l, &g) in labels.iter().enumerate() {
        let d = scores.row(l).transpose() - &means[g];
        let outer = &d * d.transpose();
        covs[g] += &outer;
        pooled += outer;
    }
    pooled /= n as f64;
    let floor = DMatrix::identity(q, q) * 0.01;
    for g in 0..k {
        covs[g] = if counts[g] > q + 1 { &covs[g] / counts[g] as f64 + &floor } else { &pooled + &floor };
    }
    LatentMixture {
        weights: DVector::from_iterator(k, counts.iter().map(|&c| c as f64 / n as f64)),
        logit: None,
        means,
        covariances: covs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::check_identifiability;

    fn data() -> CountMatrix {
        let rows: Vec<Vec<u32>> = (0..60u32)
            .map(|l| {
                let g = l % 3;
                vec![g * 2 + l % 2, 3 - g + l % 2, (l * 7) % 5, g + (l % 4), (l * 3) % 4 + g]
            })
            .collect();
        CountMatrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn same_seed_same_start() {
        let y = data();
        let dims = ModelDims::new(60, 5, 2, 3, 0);
        for strategy in [InitStrategy::Random, InitStrategy::FactorWard] {
            let a = initialize(&y, dims, strategy, FirstIntercept::Fixed, 11, None).unwrap();
            let b = initialize(&y, dims, strategy, FirstIntercept::Fixed, 11, None).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn single_component_is_standard_normal() {
        let y = data();
        let dims = ModelDims::new(60, 5, 2, 1, 0);
        for strategy in [InitStrategy::Random, InitStrategy::FactorWard] {
            let t = initialize(&y, dims, strategy, FirstIntercept::Fixed, 3, None).unwrap();
            assert_eq!(t.mixture.means[0], DVector::zeros(2));
            assert_eq!(t.mixture.covariances[0], DMatrix::identity(2, 2));
        }
    }

    #[test]
    fn starts_are_identified() {
        let y = data();
        let dims = ModelDims::new(60, 5, 2, 3, 0);
        for seed in 0..10 {
            for strategy in [InitStrategy::Random, InitStrategy::FactorWard] {
                let t = initialize(&y, dims, strategy, FirstIntercept::Fixed, seed, None).unwrap();
                let report = check_identifiability(&t, 1e-10);
                assert!(report.all_passed(), "{strategy:?} seed {seed}\n{report}");
            }
        }
    }

    #[test]
    fn constant_column_is_named() {
        let rows: Vec<Vec<u32>> = (0..10u32).map(|l| vec![l % 3, 2, l % 2]).collect();
        let y = CountMatrix::from_rows(&rows).unwrap();
        let err = initialize(&y, ModelDims::new(10, 3, 1, 2, 0), InitStrategy::Random, FirstIntercept::Fixed, 0, None)
            .unwrap_err();
        assert!(err.to_string().contains("column 2"), "{err}");
    }

    #[test]
    fn principal_factors_are_lower_triangular() {
        let corr = DMatrix::from_row_slice(
            4,
            4,
            &[1.0, 0.5, 0.4, 0.1, 0.5, 1.0, 0.45, 0.2, 0.4, 0.45, 1.0, 0.3, 0.1, 0.2, 0.3, 1.0],
        );
        let fa = principal_factors(&corr, 2).unwrap();
        assert_eq!(fa[(0, 1)], 0.0);
        assert!(fa[(0, 0)] >= 0.0 && fa[(1, 1)] >= 0.0);
    }
}
