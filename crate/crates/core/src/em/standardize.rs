use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{LatentMixture, Theta};

/// Centering shift and lower Cholesky factor of the centred second moment.
fn standardizing_map(mixture: &LatentMixture) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let shift = mixture.overall_mean();
    let q = shift.len();
    let mut v = DMatrix::zeros(q, q);
    for ((w, mu), s) in mixture.weights.iter().zip(&mixture.means).zip(&mixture.covariances) {
        let c = mu - &shift;
        v += (s + &c * c.transpose()) * *w;
    }
    let v = (&v + v.transpose()) * 0.5;
    let chol = v.cholesky().ok_or_else(|| Error::Numerical("latent variance is not positive definite".into()))?;
    Ok((shift, chol.l()))
}

/// Centres and scales the latent mixture to mean zero and identity variance
/// without touching the observation layer.
pub fn standardize_latent(mixture: &mut LatentMixture) -> Result<()> {
    standardize_mixture(mixture).map(|_| ())
}

pub(crate) fn standardize_mixture(mixture: &mut LatentMixture) -> Result<DMatrix<f64>> {
    let (shift, l) = standardizing_map(mixture)?;
    let inv = l.clone().try_inverse().ok_or_else(|| Error::Numerical("latent variance factor is singular".into()))?;
    for (mu, s) in mixture.means.iter_mut().zip(mixture.covariances.iter_mut()) {
        *mu = &inv * (&*mu - &shift);
        let t = &inv * &*s * inv.transpose();
        *s = (&t + t.transpose()) * 0.5;
    }
    Ok(l)
}

/// Reparameterises `theta` so the latent mixture has mean zero and identity
/// variance, compensating the intercepts and loadings so the likelihood is
/// unchanged.
///
/// The scaling uses the lower Cholesky factor `L` of the centred variance:
/// `mu -> L^-1 mu`, `Sigma -> L^-1 Sigma L^-T`, `Lambda -> Lambda L`. Because
/// `L` is lower triangular the zero pattern of the loadings is preserved.
/// All intercepts absorb the centring shift, so a fixed first intercept may
/// move; [`restandardize_masked`] keeps masked entries at zero instead.
pub fn restandardize(theta: &Theta) -> Result<Theta> {
    let mut out = theta.clone();
    let shift = out.mixture.overall_mean();
    out.loadings.intercepts += &out.loadings.loadings * &shift;
    let l = standardize_mixture(&mut out.mixture)?;
    out.loadings.loadings = &out.loadings.loadings * l;
    Ok(out)
}

/// [`restandardize`] followed by re-imposing the loading mask. The result
/// satisfies every structural constraint exactly; when the mixture was
/// already centred the likelihood changes only by the dropped shift of the
/// masked intercepts.
pub fn restandardize_masked(theta: &Theta) -> Result<Theta> {
    let mut out = restandardize(theta)?;
    out.loadings.apply_mask();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{check_identifiability, observed_loglik, CountMatrix, Loadings};
    use crate::quadrature::{gauss_hermite_rule, tensor_grid};
    use nalgebra::{dmatrix, dvector};

    fn raw_theta() -> Theta {
        Theta {
            loadings: Loadings::new(
                dvector![0.0, 0.3, -0.2, 0.5],
                dmatrix![0.7, 0.0; 0.2, 0.5; -0.4, 0.3; 0.1, -0.6],
                false,
            )
            .unwrap(),
            mixture: LatentMixture {
                weights: dvector![0.25, 0.75],
                logit: None,
                means: vec![dvector![1.3, 0.4], dvector![-0.2, 0.5]],
                covariances: vec![dmatrix![0.5, 0.1; 0.1, 0.3], dmatrix![0.8, -0.2; -0.2, 1.4]],
            },
        }
    }

    #[test]
    fn output_is_standardized_and_likelihood_preserving() {
        let theta = raw_theta();
        let out = restandardize(&theta).unwrap();
        let report = check_identifiability(&out, 1e-10);
        use crate::model::Condition::*;
        assert!(report.get(MixtureMean).passed && report.get(MixtureVariance).passed, "{report}");
        assert!(report.get(LoadingTriangle).passed);

        let grid = tensor_grid(&gauss_hermite_rule(8).unwrap(), 2).unwrap();
        let counts = CountMatrix::from_rows(&[vec![0, 2, 1, 3], vec![4, 0, 0, 1], vec![1, 1, 2, 0]]).unwrap();
        let before = observed_loglik(&counts, &theta, &grid, None).unwrap();
        let after = observed_loglik(&counts, &out, &grid, None).unwrap();
        assert!((before - after).abs() <= 1e-8 * before.abs(), "{before} vs {after}");
    }

    #[test]
    fn standardized_input_is_a_fixed_point() {
        let once = restandardize(&raw_theta()).unwrap();
        let twice = restandardize(&once).unwrap();
        assert!((&once.loadings.loadings - &twice.loadings.loadings).amax() < 1e-12);
        assert!((&once.loadings.intercepts - &twice.loadings.intercepts).amax() < 1e-12);
        for i in 0..2 {
            assert!((&once.mixture.means[i] - &twice.mixture.means[i]).amax() < 1e-12);
            assert!((&once.mixture.covariances[i] - &twice.mixture.covariances[i]).amax() < 1e-12);
        }
    }

    #[test]
    fn singular_variance_is_an_error() {
        let mut theta = raw_theta();
        theta.mixture.means = vec![dvector![0.0, 0.0], dvector![0.0, 0.0]];
        theta.mixture.covariances = vec![dmatrix![1.0, 1.0; 1.0, 1.0], dmatrix![1.0, 1.0; 1.0, 1.0]];
        assert!(matches!(restandardize(&theta), Err(Error::Numerical(_))));
    }
}
