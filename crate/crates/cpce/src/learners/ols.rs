//! Ordinary least squares viewed as a linear smoother.

use nalgebra::{DMatrix, DVector};

use super::row_major;
use crate::error::{CpceError, Result};

/// OLS fit on `[1, x]` with retrievable smoother weights.
#[derive(Debug, Clone)]
pub struct OlsFit {
    coef: DVector<f64>,
    /// Pseudo-inverse of the Gram matrix of the design.
    gram_inv: DMatrix<f64>,
    rows: Vec<f64>,
    p: usize,
}

impl OlsFit {
    pub fn fit(x: &DMatrix<f64>, r: &[f64]) -> Result<OlsFit> {
        let (n, p) = x.shape();
        let d = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] });
        let gram = d.transpose() * &d;
        let scale = gram.diagonal().amax().max(1.0);
        let gram_inv = gram
            .pseudo_inverse(1e-12 * scale)
            .map_err(|e| CpceError::Convergence(e.to_string()))?;
        let coef = &gram_inv * (d.transpose() * DVector::from_column_slice(r));
        Ok(OlsFit { coef, gram_inv, rows: row_major(x), p })
    }

    pub fn coefficients(&self) -> &[f64] {
        self.coef.as_slice()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.coef[0] + self.coef.iter().skip(1).zip(x).map(|(b, v)| b * v).sum::<f64>()
    }

    pub fn weights_at(&self, x: &[f64]) -> Vec<f64> {
        let mut q0 = DVector::<f64>::zeros(self.p + 1);
        q0[0] = 1.0;
        for j in 0..self.p {
            q0[j + 1] = x[j];
        }
        let q = &self.gram_inv * q0;
        let n = self.rows.len() / self.p.max(1);
        (0..n)
            .map(|i| {
                q[0] + (0..self.p)
                    .map(|j| q[j + 1] * self.rows[i * self.p + j])
                    .sum::<f64>()
            })
            .collect()
    }

    pub(crate) fn train_rows(&self) -> (&[f64], usize) {
        (&self.rows, self.p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_on_linear_data_and_weights_reproduce() {
        let x = DMatrix::from_fn(30, 2, |i, j| ((i * 7 + j * 3) % 11) as f64 / 11.0);
        let r: Vec<f64> = (0..30).map(|i| 1.0 + 2.0 * x[(i, 0)] - 0.5 * x[(i, 1)]).collect();
        let f = OlsFit::fit(&x, &r).unwrap();
        let q = [0.3, 0.8];
        assert!((f.predict(&q) - (1.0 + 0.6 - 0.4)).abs() < 1e-10);
        let w = f.weights_at(&q);
        let via_w: f64 = w.iter().zip(&r).map(|(a, b)| a * b).sum();
        assert!((via_w - f.predict(&q)).abs() < 1e-10);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn collinear_design_still_predicts() {
        let x = DMatrix::from_fn(10, 2, |i, _| i as f64);
        let r: Vec<f64> = (0..10).map(|i| 3.0 * i as f64).collect();
        let f = OlsFit::fit(&x, &r).unwrap();
        assert!((f.predict(&[4.0, 4.0]) - 12.0).abs() < 1e-8);
    }
}
