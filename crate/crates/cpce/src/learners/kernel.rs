//! Nadaraya-Watson and local-linear smoothers with a product Gaussian kernel.

use nalgebra::{DMatrix, DVector};

use super::{row_major, Bandwidth};
use crate::error::{CpceError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    NadarayaWatson,
    LocalLinear,
}

/// A fitted kernel smoother; predictions are weighted sums of responses.
#[derive(Debug, Clone)]
pub struct KernelFit {
    kind: KernelKind,
    rows: Vec<f64>,
    p: usize,
    r: Vec<f64>,
    h: Vec<f64>,
    /// Coordinates with nonzero spread, used for local slopes.
    active: Vec<usize>,
}

fn spread(col: &[f64]) -> f64 {
    let n = col.len() as f64;
    if col.len() < 2 {
        return 0.0;
    }
    let mean = col.iter().sum::<f64>() / n;
    let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut sorted = col.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let q = |t: f64| {
        let pos = t * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
    };
    let iqr = (q(0.75) - q(0.25)) / 1.349;
    if iqr > 0.0 { sd.min(iqr) } else { sd }
}

/// Silverman's multivariate rule `s_j (4 / ((p + 2) n))^(1 / (p + 4))`.
/// Coordinates with zero spread get bandwidth 1.
pub fn silverman_bandwidth(x: &DMatrix<f64>) -> Vec<f64> {
    let (n, p) = x.shape();
    let factor = (4.0 / ((p as f64 + 2.0) * n.max(1) as f64)).powf(1.0 / (p as f64 + 4.0));
    (0..p)
        .map(|j| {
            let col: Vec<f64> = x.column(j).iter().copied().collect();
            let s = spread(&col);
            if s > 0.0 { s * factor } else { 1.0 }
        })
        .collect()
}

impl KernelFit {
    pub fn fit(x: &DMatrix<f64>, r: &[f64], kind: KernelKind, bandwidth: &Bandwidth) -> Result<KernelFit> {
        let (n, p) = x.shape();
        if n == 0 {
            return Err(CpceError::EmptyCell("no rows to smooth".into()));
        }
        let active: Vec<usize> = (0..p)
            .filter(|&j| {
                let c = x.column(j);
                c.iter().any(|&v| v != c[0])
            })
            .collect();
        let base = KernelFit {
            kind,
            rows: row_major(x),
            p,
            r: r.to_vec(),
            h: vec![1.0; p],
            active,
        };
        let h = match bandwidth {
            Bandwidth::Silverman => silverman_bandwidth(x),
            Bandwidth::Fixed(h) => vec![*h; p],
            Bandwidth::PerCoordinate(h) => {
                if h.len() != p {
                    return Err(CpceError::Config(format!(
                        "expected {p} bandwidths, got {}",
                        h.len()
                    )));
                }
                h.clone()
            }
            Bandwidth::LooCv(factors) => {
                if factors.is_empty() {
                    return Err(CpceError::Config("empty bandwidth grid".into()));
                }
                let s = silverman_bandwidth(x);
                let mut best = (f64::INFINITY, s.clone());
                for &f in factors {
                    if !(f > 0.0) {
                        return Err(CpceError::Config(format!("bandwidth factor must be positive, got {f}")));
                    }
                    let cand = KernelFit { h: s.iter().map(|v| v * f).collect(), ..base.clone() };
                    let score = cand.loo_score();
                    if score < best.0 {
                        best = (score, cand.h);
                    }
                }
                best.1
            }
        };
        if h.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(CpceError::Config("bandwidth must be positive".into()));
        }
        Ok(KernelFit { h, ..base })
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn bandwidth(&self) -> &[f64] {
        &self.h
    }

    fn n(&self) -> usize {
        self.r.len()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.p..(i + 1) * self.p]
    }

    /// Kernel values rescaled so the largest equals one.
    fn kernel_values(&self, x: &[f64]) -> Vec<f64> {
        let logs: Vec<f64> = (0..self.n())
            .map(|i| {
                -0.5 * self
                    .row(i)
                    .iter()
                    .zip(x)
                    .zip(&self.h)
                    .map(|((a, b), h)| ((a - b) / h).powi(2))
                    .sum::<f64>()
            })
            .collect();
        let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        logs.iter().map(|l| (l - m).exp()).collect()
    }

    fn nw_weights(k: &[f64]) -> Vec<f64> {
        let total: f64 = k.iter().sum();
        k.iter().map(|v| v / total).collect()
    }

    fn ll_weights(&self, x: &[f64], k: &[f64]) -> Option<Vec<f64>> {
        let d = self.active.len() + 1;
        if self.active.is_empty() {
            return None;
        }
        let design = |i: usize, a: usize| -> f64 {
            if a == 0 {
                1.0
            } else {
                let j = self.active[a - 1];
                (self.row(i)[j] - x[j]) / self.h[j]
            }
        };
        let mut gram = DMatrix::<f64>::zeros(d, d);
        for (i, &ki) in k.iter().enumerate() {
            if ki < 1e-300 {
                continue;
            }
            for a in 0..d {
                let da = ki * design(i, a);
                for b in a..d {
                    gram[(a, b)] += da * design(i, b);
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                gram[(a, b)] = gram[(b, a)];
            }
        }
        let chol = gram.clone().cholesky()?;
        let diag = chol.l().diagonal();
        let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if !(lo > 0.0) || (lo / hi).powi(2) < 1e-12 {
            return None;
        }
        let mut e1 = DVector::<f64>::zeros(d);
        e1[0] = 1.0;
        let q = chol.solve(&e1);
        Some(
            k.iter()
                .enumerate()
                .map(|(i, &ki)| ki * (0..d).map(|a| q[a] * design(i, a)).sum::<f64>())
                .collect(),
        )
    }

    /// Smoother weights at `x`. Local-linear falls back to Nadaraya-Watson
    /// weights when the local design is numerically singular.
    pub fn weights_at(&self, x: &[f64]) -> Vec<f64> {
        let k = self.kernel_values(x);
        match self.kind {
            KernelKind::NadarayaWatson => Self::nw_weights(&k),
            KernelKind::LocalLinear => self.ll_weights(x, &k).unwrap_or_else(|| Self::nw_weights(&k)),
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.weights_at(x).iter().zip(&self.r).map(|(w, r)| w * r).sum()
    }

    fn loo_score(&self) -> f64 {
        let n = self.n();
        if n < 3 {
            return 0.0;
        }
        let mut sse = 0.0;
        for i in 0..n {
            let w = self.weights_at(self.row(i));
            let fit: f64 = w.iter().zip(&self.r).map(|(a, b)| a * b).sum();
            let denom = 1.0 - w[i];
            if denom.abs() < 1e-8 {
                return f64::INFINITY;
            }
            sse += ((self.r[i] - fit) / denom).powi(2);
        }
        sse / n as f64
    }

    pub(crate) fn train_rows(&self) -> (&[f64], usize) {
        (&self.rows, self.p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, 1, |i, _| i as f64 / (n - 1) as f64)
    }

    #[test]
    fn constant_response_is_reproduced() {
        let x = line(25);
        let r = vec![3.5; 25];
        for kind in [KernelKind::NadarayaWatson, KernelKind::LocalLinear] {
            let f = KernelFit::fit(&x, &r, kind, &Bandwidth::Silverman).unwrap();
            assert!((f.predict(&[0.42]) - 3.5).abs() < 1e-12);
        }
    }

    #[test]
    fn single_distinct_covariate_gives_mean() {
        let x = DMatrix::from_element(5, 1, 0.3);
        let r = vec![1.0, 2.0, 3.0, 4.0, 10.0];
        for kind in [KernelKind::NadarayaWatson, KernelKind::LocalLinear] {
            let f = KernelFit::fit(&x, &r, kind, &Bandwidth::Silverman).unwrap();
            assert!((f.predict(&[0.9]) - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn local_linear_is_exact_for_lines() {
        let x = line(40);
        let r: Vec<f64> = (0..40).map(|i| 2.0 * x[(i, 0)]).collect();
        let f = KernelFit::fit(&x, &r, KernelKind::LocalLinear, &Bandwidth::Silverman).unwrap();
        for q in [0.2, 0.5, 0.77] {
            assert!((f.predict(&[q]) - 2.0 * q).abs() < 1e-8);
        }
    }

    #[test]
    fn far_query_weights_still_normalised() {
        let x = line(10);
        let r: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let f = KernelFit::fit(&x, &r, KernelKind::NadarayaWatson, &Bandwidth::Fixed(0.05)).unwrap();
        let w = f.weights_at(&[50.0]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w[9] > 0.99);
    }

    #[test]
    fn hand_points_local_linear_weights() {
        // Independent closed form: weighted simple regression evaluated at x0.
        let xs = [0.0, 0.5, 2.0];
        let r = [1.0, -1.0, 4.0];
        let x = DMatrix::from_column_slice(3, 1, &xs);
        let f = KernelFit::fit(&x, &r, KernelKind::LocalLinear, &Bandwidth::Fixed(1.0)).unwrap();
        let x0 = 0.8;
        let k: Vec<f64> = xs.iter().map(|v: &f64| (-0.5 * (v - x0).powi(2)).exp()).collect();
        let s0: f64 = k.iter().sum();
        let s1: f64 = k.iter().zip(&xs).map(|(k, v)| k * (v - x0)).sum();
        let s2: f64 = k.iter().zip(&xs).map(|(k, v)| k * (v - x0).powi(2)).sum();
        let expected: f64 = (0..3)
            .map(|i| k[i] * (s2 - s1 * (xs[i] - x0)) / (s0 * s2 - s1 * s1) * r[i])
            .sum();
        assert!((f.predict(&[x0]) - expected).abs() < 1e-10);
        let w = f.weights_at(&[x0]);
        let via: f64 = w.iter().zip(&r).map(|(a, b)| a * b).sum();
        assert!((via - f.predict(&[x0])).abs() < 1e-10);
    }

    #[test]
    fn single_row_predicts_its_value() {
        let x = DMatrix::from_element(1, 2, 0.5);
        let f = KernelFit::fit(&x, &[7.0], KernelKind::LocalLinear, &Bandwidth::Silverman).unwrap();
        assert_eq!(f.predict(&[0.1, 0.9]), 7.0);
    }

    #[test]
    fn loo_cv_picks_a_grid_value() {
        let x = line(60);
        let r: Vec<f64> = (0..60).map(|i| (6.0 * x[(i, 0)]).sin()).collect();
        let grid = vec![0.25, 0.5, 1.0, 2.0];
        let f = KernelFit::fit(&x, &r, KernelKind::LocalLinear, &Bandwidth::LooCv(grid.clone())).unwrap();
        let s = silverman_bandwidth(&x)[0];
        assert!(grid.iter().any(|g| (g * s - f.bandwidth()[0]).abs() < 1e-12));
    }

    #[test]
    fn non_positive_bandwidth_rejected() {
        let x = line(5);
        let r = vec![0.0; 5];
        assert!(matches!(
            KernelFit::fit(&x, &r, KernelKind::NadarayaWatson, &Bandwidth::Fixed(0.0)),
            Err(CpceError::Config(_))
        ));
    }
}
