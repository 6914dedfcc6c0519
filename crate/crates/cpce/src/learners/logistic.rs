//! Logistic regression by iteratively reweighted least squares.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::sigmoid;
use crate::error::{CpceError, Result};

/// IRLS settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IrlsConfig {
    pub max_iter: usize,
    /// Tolerance on the max-norm of the average score.
    pub tol: f64,
    /// L2 penalty on the slopes (not the intercept), in log-likelihood units.
    pub ridge: f64,
}

impl Default for IrlsConfig {
    fn default() -> Self {
        IrlsConfig { max_iter: 100, tol: 1e-8, ridge: 0.0 }
    }
}

fn log_lik(x: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>, ridge: f64) -> f64 {
    let eta = x * beta;
    let mut ll = 0.0;
    for (e, &yi) in eta.iter().zip(y) {
        // log(1 + exp(e)) computed stably
        let softplus = if *e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
        ll += yi * e - softplus;
    }
    ll - 0.5 * ridge * beta.rows(1, beta.len() - 1).norm_squared()
}

/// Coefficients (intercept first) of a logistic regression of `labels` on `features`.
pub fn fit_logistic_coefs(features: &DMatrix<f64>, labels: &[u8], cfg: &IrlsConfig) -> Result<Vec<f64>> {
    let (n, p) = features.shape();
    if p == 0 {
        return Err(CpceError::Schema("logistic regression needs at least one feature".into()));
    }
    if n != labels.len() || n == 0 {
        return Err(CpceError::Schema("feature and label lengths differ".into()));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(CpceError::DegenerateLabels);
    }
    let d = p + 1;
    let x = DMatrix::from_fn(n, d, |i, j| if j == 0 { 1.0 } else { features[(i, j - 1)] });
    let y: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    let mut beta = DVector::<f64>::zeros(d);
    let mut ll = log_lik(&x, &y, &beta, cfg.ridge);
    for _ in 0..cfg.max_iter {
        let eta = &x * &beta;
        let mu: Vec<f64> = eta.iter().map(|&e| sigmoid(e)).collect();
        let mut grad = DVector::<f64>::zeros(d);
        let mut hess = DMatrix::<f64>::zeros(d, d);
        for i in 0..n {
            let r = y[i] - mu[i];
            let w = (mu[i] * (1.0 - mu[i])).max(1e-12);
            let xi = x.row(i);
            for a in 0..d {
                grad[a] += xi[a] * r;
                let wa = w * xi[a];
                for b in a..d {
                    hess[(a, b)] += wa * xi[b];
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                hess[(a, b)] = hess[(b, a)];
            }
        }
        for a in 1..d {
            grad[a] -= cfg.ridge * beta[a];
            hess[(a, a)] += cfg.ridge;
        }
        if grad.amax() / n as f64 <= cfg.tol {
            if cfg.ridge == 0.0 && y.iter().zip(&mu).all(|(a, b)| (a - b).abs() < 1e-6) {
                return Err(CpceError::Convergence("perfect separation; MLE does not exist".into()));
            }
            return Ok(beta.iter().copied().collect());
        }
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => hess
                .pseudo_inverse(1e-12)
                .map_err(|e| CpceError::Convergence(e.to_string()))?
                * &grad,
        };
        let mut t = 1.0;
        loop {
            let cand = &beta + &step * t;
            let cand_ll = log_lik(&x, &y, &cand, cfg.ridge);
            if cand_ll >= ll - 1e-12 * ll.abs() || t < 1e-10 {
                beta = cand;
                ll = cand_ll;
                break;
            }
            t *= 0.5;
        }
        if !beta.iter().all(|b| b.is_finite()) || beta.amax() > 1e8 {
            return Err(CpceError::Convergence("IRLS coefficients diverged (separation?)".into()));
        }
    }
    Err(CpceError::Convergence(format!(
        "IRLS did not reach tolerance {} within {} iterations",
        cfg.tol, cfg.max_iter
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn recovers_slope_on_large_sample() {
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = DMatrix::from_fn(n, 1, |_, _| rng.random::<f64>() * 4.0 - 2.0);
        let labels: Vec<u8> = (0..n)
            .map(|i| (rng.random::<f64>() < sigmoid(0.4 * x[(i, 0)])) as u8)
            .collect();
        let beta = fit_logistic_coefs(&x, &labels, &IrlsConfig::default()).unwrap();
        assert!((beta[1] - 0.4).abs() < 0.05, "slope {}", beta[1]);
    }

    #[test]
    fn antisymmetric_design_has_zero_intercept() {
        let xs = [-2.0, -1.0, -0.5, 0.5, 1.0, 2.0, 0.3, -0.3];
        let ls = [0u8, 0, 1, 0, 1, 1, 1, 0];
        let mut col = Vec::new();
        let mut labels = Vec::new();
        for (&x, &l) in xs.iter().zip(&ls) {
            col.push(x);
            labels.push(l);
            col.push(-x);
            labels.push(1 - l);
        }
        let x = DMatrix::from_column_slice(col.len(), 1, &col);
        let beta = fit_logistic_coefs(&x, &labels, &IrlsConfig::default()).unwrap();
        assert!(beta[0].abs() < 1e-8);
    }

    #[test]
    fn all_ones_is_degenerate() {
        let x = DMatrix::from_column_slice(3, 1, &[0.1, 0.2, 0.3]);
        assert!(matches!(
            fit_logistic_coefs(&x, &[1, 1, 1], &IrlsConfig::default()),
            Err(CpceError::DegenerateLabels)
        ));
    }

    #[test]
    fn separated_data_fails_to_converge() {
        let x = DMatrix::from_column_slice(6, 1, &[-3.0, -2.0, -1.0, 1.0, 2.0, 3.0]);
        let r = fit_logistic_coefs(&x, &[0, 0, 0, 1, 1, 1], &IrlsConfig::default());
        assert!(matches!(r, Err(CpceError::Convergence(_))));
    }
}
