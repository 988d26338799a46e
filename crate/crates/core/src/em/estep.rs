use nalgebra::{DMatrix, DVector};

use crate::covariates::DesignMatrix;
use crate::error::{Error, Result};
use crate::model::{CountMatrix, NodeTable, PreparedCounts, Theta};
use crate::quadrature::{log_sum_exp, TensorGrid};

/// Responsibilities below this are left out of the node aggregates.
const NEGLIGIBLE_MASS: f64 = 1e-15;
/// Nodes whose log-density falls this far below the best node are dropped.
const PRUNE_LOG_RATIO: f64 = -40.0;

/// Dot product with four independent partial sums.
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let tail: f64 = xc.remainder().iter().zip(yc.remainder()).map(|(a, b)| a * b).sum();
    for (a, b) in xc.zip(yc) {
        for u in 0..4 {
            acc[u] += a[u] * b[u];
        }
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

/// Posterior quantities of one E-step.
#[derive(Debug, Clone, PartialEq)]
pub struct EStepSummary {
    pub n: usize,
    pub p: usize,
    pub k: usize,
    pub q: usize,
    /// Quadrature nodes per component.
    pub nodes: usize,
    /// `n x k`, `log f(s_i = 1 | y_l)`.
    pub log_resp: Vec<f64>,
    /// `n x k x q`, `E(z | y_l, s_i = 1)`.
    pub cond_mean: Vec<f64>,
    /// `n x k x q x q`, `E(z z^T | y_l, s_i = 1)`.
    pub cond_second: Vec<f64>,
    /// `log f(y_l)`.
    pub per_obs_loglik: Vec<f64>,
    /// `k x K`: posterior mass at each component's quadrature node, summed
    /// over observations.
    pub node_mass: Vec<f64>,
    /// `k x p x K`: the same mass weighted by the observed counts.
    pub node_counts: Vec<f64>,
}

impl EStepSummary {
    /// Count-weighted posterior mass of variable `j` at node `t` of
    /// component `i`.
    pub fn node_count(&self, i: usize, t: usize, j: usize) -> f64 {
        self.node_counts[(i * self.p + j) * self.nodes + t]
    }

    pub fn loglik(&self) -> f64 {
        self.per_obs_loglik.iter().sum()
    }

    pub fn resp(&self, l: usize, i: usize) -> f64 {
        self.log_resp[l * self.k + i].exp()
    }

    /// Responsibilities as probabilities, `n x k`.
    pub fn responsibilities(&self) -> Vec<f64> {
        self.log_resp.iter().map(|v| v.exp()).collect()
    }

    pub fn cond_mean(&self, l: usize, i: usize) -> &[f64] {
        let q = self.q;
        &self.cond_mean[(l * self.k + i) * q..(l * self.k + i + 1) * q]
    }

    pub fn cond_second(&self, l: usize, i: usize) -> &[f64] {
        let qq = self.q * self.q;
        &self.cond_second[(l * self.k + i) * qq..(l * self.k + i + 1) * qq]
    }

    /// Posterior mean of the factors, `sum_i r_li E(z | y_l, s_i = 1)`.
    pub fn factor_scores(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, self.q);
        for l in 0..self.n {
            for i in 0..self.k {
                let r = self.resp(l, i);
                for (d, v) in self.cond_mean(l, i).iter().enumerate() {
                    out[(l, d)] += r * v;
                }
            }
        }
        out
    }
}

/// Posterior responsibilities and conditional latent moments at `theta`.
pub fn e_step(
    counts: &CountMatrix,
    theta: &Theta,
    grid: &TensorGrid,
    design: Option<&DesignMatrix>,
) -> Result<EStepSummary> {
    theta.validate()?;
    if counts.ncols() != theta.p() {
        return Err(Error::Contract(format!("counts have {} columns, theta has p={}", counts.ncols(), theta.p())));
    }
    let data = PreparedCounts::new(counts);
    let table = NodeTable::build(theta, grid)?;
    e_step_prepared(&data, theta, &table, grid, design)
}

pub(crate) fn e_step_prepared(
    data: &PreparedCounts,
    theta: &Theta,
    table: &NodeTable,
    grid: &TensorGrid,
    design: Option<&DesignMatrix>,
) -> Result<EStepSummary> {
    let (n, p, q, k) = (data.n, data.p, theta.q(), theta.k());
    let big_k = grid.len();
    let log_w = theta.log_weights(n, design)?;
    let pts = grid.points();

    let mut log_resp = vec![0.0; n * k];
    let mut cond_mean = vec![0.0; n * k * q];
    let mut cond_second = vec![0.0; n * k * q * q];
    let mut per_obs = vec![0.0; n];
    let mut node_mass = vec![0.0; k * big_k];
    let mut node_counts = vec![0.0; k * big_k * p];

    let mut buf = vec![0.0; k * big_k];
    let mut beta = vec![0.0; q];
    let mut marg = vec![0.0; k];
    let mut scale_sum = vec![0.0; k];
    let mut joint = vec![0.0; k];
    let mut e1 = vec![0.0; q];
    let mut e2 = vec![0.0; q * q];
    let mut w = vec![0.0; big_k];
    // Coordinates and pairwise products of the nodes, one contiguous row per
    // feature: `z_a` for `a < q`, then `z_a z_b` for `b <= a`.
    let pairs: Vec<(usize, usize)> = (0..q).flat_map(|a| (0..=a).map(move |b| (a, b))).collect();
    let mut features = vec![0.0; (q + pairs.len()) * big_k];
    for t in 0..big_k {
        let z = &pts[t * q..(t + 1) * q];
        for a in 0..q {
            features[a * big_k + t] = z[a];
        }
        for (f, &(a, b)) in pairs.iter().enumerate() {
            features[(q + f) * big_k + t] = z[a] * z[b];
        }
    }
    let mut nz: Vec<usize> = Vec::with_capacity(p);

    for l in 0..n {
        let y = data.row(l);
        table.row_node_logliks(y, data.log_fact[l], grid, &mut buf, &mut beta);
        for i in 0..k {
            // Node weights relative to the row maximum are kept in `buf` for
            // the moment pass below; far-off nodes are zeroed without `exp`.
            let row = &mut buf[i * big_k..(i + 1) * big_k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                row.iter_mut().for_each(|v| *v = 0.0);
                marg[i] = f64::NEG_INFINITY;
                scale_sum[i] = 0.0;
            } else {
                let mut s = 0.0;
                for v in row.iter_mut() {
                    let d = *v - max;
                    *v = if d < PRUNE_LOG_RATIO { 0.0 } else { d.exp() };
                    s += *v;
                }
                marg[i] = max + s.ln();
                scale_sum[i] = s;
            }
            joint[i] = log_w[l * k + i] + marg[i];
        }
        let row_ll = log_sum_exp(&joint);
        if !row_ll.is_finite() {
            return Err(Error::Numerical(format!("observation {} has zero likelihood under every component", l + 1)));
        }
        per_obs[l] = row_ll;
        nz.clear();
        nz.extend((0..p).filter(|&j| y[j] != 0.0));

        for i in 0..k {
            let lr = joint[i] - row_ll;
            log_resp[l * k + i] = lr;
            let r = lr.exp();
            e1.iter_mut().for_each(|v| *v = 0.0);
            e2.iter_mut().for_each(|v| *v = 0.0);
            let accumulate = r > NEGLIGIBLE_MASS;
            if marg[i] == f64::NEG_INFINITY {
                // Impossible under this component: fall back to prior moments.
                fill_prior_moments(
                    theta,
                    i,
                    &mut cond_mean[(l * k + i) * q..],
                    &mut cond_second[(l * k + i) * q * q..],
                );
                continue;
            }
            let inv = 1.0 / scale_sum[i];
            for (wt, &v) in w.iter_mut().zip(&buf[i * big_k..(i + 1) * big_k]) {
                *wt = v * inv;
            }
            for a in 0..q {
                e1[a] = dot(&w, &features[a * big_k..(a + 1) * big_k]);
            }
            for (f, &(a, b)) in pairs.iter().enumerate() {
                e2[a * q + b] = dot(&w, &features[(q + f) * big_k..(q + f + 1) * big_k]);
            }
            if accumulate {
                for (m, &wt) in node_mass[i * big_k..(i + 1) * big_k].iter_mut().zip(&w) {
                    *m += r * wt;
                }
                for &j in &nz {
                    let ry = r * y[j];
                    let dst = &mut node_counts[(i * p + j) * big_k..(i * p + j + 1) * big_k];
                    for (c, &wt) in dst.iter_mut().zip(&w) {
                        *c += ry * wt;
                    }
                }
            }
            for a in 0..q {
                for b in 0..a {
                    e2[b * q + a] = e2[a * q + b];
                }
            }
            // Map standard-space moments through z = mu + C u.
            let c = &table.scale[i];
            let mu = &theta.mixture.means[i];
            let cm = &mut cond_mean[(l * k + i) * q..(l * k + i + 1) * q];
            let mut ce1 = vec![0.0; q];
            for a in 0..q {
                let mut v = 0.0;
                for b in 0..=a {
                    v += c[(a, b)] * e1[b];
                }
                ce1[a] = v;
                cm[a] = mu[a] + v;
            }
            let cs = &mut cond_second[(l * k + i) * q * q..(l * k + i + 1) * q * q];
            for a in 0..q {
                for b in 0..q {
                    let mut v = 0.0;
                    for s in 0..=a {
                        for u in 0..=b {
                            v += c[(a, s)] * e2[s * q + u] * c[(b, u)];
                        }
                    }
                    cs[a * q + b] = mu[a] * mu[b] + mu[a] * ce1[b] + ce1[a] * mu[b] + v;
                }
            }
        }
    }

    Ok(EStepSummary {
        n,
        p,
        k,
        q,
        nodes: big_k,
        log_resp,
        cond_mean,
        cond_second,
        per_obs_loglik: per_obs,
        node_mass,
        node_counts,
    })
}

fn fill_prior_moments(theta: &Theta, i: usize, mean: &mut [f64], second: &mut [f64]) {
    let q = theta.q();
    let mu: &DVector<f64> = &theta.mixture.means[i];
    let s = &theta.mixture.covariances[i];
    for a in 0..q {
        mean[a] = mu[a];
        for b in 0..q {
            second[a * q + b] = s[(a, b)] + mu[a] * mu[b];
        }
    }
}

/// Per-row argmax of the responsibilities as 1-based labels; ties go to the
/// lowest component.
pub fn assign_clusters(estep: &EStepSummary) -> Vec<usize> {
    (0..estep.n)
        .map(|l| {
            let row = &estep.log_resp[l * estep.k..(l + 1) * estep.k];
            let mut best = 0;
            for i in 1..estep.k {
                if row[i] > row[best] {
                    best = i;
                }
            }
            best + 1
        })
        .collect()
}
