//! Nuisance and second-stage regressions.
//!
//! Probability models ([`ProbModel`]) are logistic-linear or additive-spline
//! logit fits whose predictions are clipped to `[eps, 1 - eps]`. Regression
//! fits ([`SmootherFit`]) are OLS, Nadaraya-Watson, local-linear or additive
//! splines; all but the spline kind are linear smoothers with retrievable
//! weights.

mod kernel;
mod logistic;
mod ols;
mod spline;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::SampleTable;
use crate::error::{CpceError, Result};

pub use kernel::{silverman_bandwidth, KernelFit, KernelKind};
pub use logistic::{fit_logistic_coefs, IrlsConfig};
pub use ols::OlsFit;
pub use spline::{AdditiveSpline, Link, SplineConfig};

/// Default probability clipping level.
pub const DEFAULT_EPS: f64 = 0.01;

/// `min(max(p, eps), 1 - eps)`.
pub fn clip_probability(p: f64, eps: f64) -> f64 {
    p.max(eps).min(1.0 - eps)
}

pub(crate) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Rows of a column-major matrix as a flat row-major buffer.
pub(crate) fn row_major(x: &DMatrix<f64>) -> Vec<f64> {
    let (n, p) = x.shape();
    let mut out = Vec::with_capacity(n * p);
    for i in 0..n {
        for j in 0..p {
            out.push(x[(i, j)]);
        }
    }
    out
}

/// Working model for a probability such as `pi(x)` or `p_z(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProbSpec {
    LogisticLinear(IrlsConfig),
    AdditiveSplineLogit(SplineConfig),
}

impl Default for ProbSpec {
    fn default() -> Self {
        ProbSpec::LogisticLinear(IrlsConfig::default())
    }
}

#[derive(Debug, Clone)]
pub enum ProbKind {
    /// Coefficients with the intercept first.
    LogisticLinear(Vec<f64>),
    AdditiveSplineLogit(AdditiveSpline),
}

/// Fitted probability model with output clipping.
#[derive(Debug, Clone)]
pub struct ProbModel {
    pub kind: ProbKind,
    pub clip_eps: f64,
}

impl ProbModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let raw = match &self.kind {
            ProbKind::LogisticLinear(beta) => {
                let eta = beta[0] + beta[1..].iter().zip(x).map(|(b, v)| b * v).sum::<f64>();
                sigmoid(eta)
            }
            ProbKind::AdditiveSplineLogit(m) => m.predict(x),
        };
        clip_probability(raw, self.clip_eps)
    }
}

/// Fit a probability model of binary `labels` on `features`.
pub fn fit_prob(features: &DMatrix<f64>, labels: &[u8], spec: &ProbSpec, eps: f64) -> Result<ProbModel> {
    if !(eps > 0.0 && eps < 0.5) {
        return Err(CpceError::Config(format!("clip eps must lie in (0, 0.5), got {eps}")));
    }
    let kind = match spec {
        ProbSpec::LogisticLinear(cfg) => ProbKind::LogisticLinear(fit_logistic_coefs(features, labels, cfg)?),
        ProbSpec::AdditiveSplineLogit(cfg) => {
            let y: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
            if labels.iter().all(|&l| l == labels[0]) {
                return Err(CpceError::DegenerateLabels);
            }
            ProbKind::AdditiveSplineLogit(AdditiveSpline::fit(features, &y, Link::Logit, cfg)?)
        }
    };
    Ok(ProbModel { kind, clip_eps: eps })
}

/// Logistic-linear fit with the default IRLS settings.
pub fn fit_logistic(features: &DMatrix<f64>, labels: &[u8], cfg: &IrlsConfig) -> Result<ProbModel> {
    fit_prob(features, labels, &ProbSpec::LogisticLinear(cfg.clone()), DEFAULT_EPS)
}

/// Bandwidth rule for kernel smoothers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Bandwidth {
    /// Silverman rule of thumb per coordinate.
    Silverman,
    /// A single bandwidth for every coordinate.
    Fixed(f64),
    /// One bandwidth per coordinate.
    PerCoordinate(Vec<f64>),
    /// Leave-one-out CV over multiples of the Silverman bandwidth.
    LooCv(Vec<f64>),
}

impl Default for Bandwidth {
    fn default() -> Self {
        Bandwidth::Silverman
    }
}

/// Regression learner used for outcome models and second stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SmootherSpec {
    OlsLinear,
    NadarayaWatson { bandwidth: Bandwidth },
    LocalLinear { bandwidth: Bandwidth },
    AdditiveSpline(SplineConfig),
}

impl Default for SmootherSpec {
    fn default() -> Self {
        SmootherSpec::LocalLinear { bandwidth: Bandwidth::Silverman }
    }
}

impl SmootherSpec {
    pub fn name(&self) -> &'static str {
        match self {
            SmootherSpec::OlsLinear => "ols-linear",
            SmootherSpec::NadarayaWatson { .. } => "nadaraya-watson",
            SmootherSpec::LocalLinear { .. } => "local-linear",
            SmootherSpec::AdditiveSpline(_) => "additive-spline",
        }
    }

    pub fn is_linear_smoother(&self) -> bool {
        !matches!(self, SmootherSpec::AdditiveSpline(_))
    }
}

/// Fitted regression.
#[derive(Debug, Clone)]
pub enum SmootherFit {
    Ols(OlsFit),
    Kernel(KernelFit),
    Spline(AdditiveSpline),
}

/// `(sum |w_i|, sum |w_i| 1{|X_i - x| > delta})` for a linear smoother.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightDiagnostics {
    pub abs_weight_sum: f64,
    pub tail_mass: f64,
}

/// Fit a regression of `train_r` on `train_x`.
pub fn fit_smoother(train_x: &DMatrix<f64>, train_r: &[f64], spec: &SmootherSpec) -> Result<SmootherFit> {
    if train_x.nrows() != train_r.len() {
        return Err(CpceError::Schema("covariate and response lengths differ".into()));
    }
    if train_r.is_empty() {
        return Err(CpceError::EmptyCell("no rows to fit".into()));
    }
    match spec {
        SmootherSpec::OlsLinear => Ok(SmootherFit::Ols(OlsFit::fit(train_x, train_r)?)),
        SmootherSpec::NadarayaWatson { bandwidth } => Ok(SmootherFit::Kernel(KernelFit::fit(
            train_x,
            train_r,
            KernelKind::NadarayaWatson,
            bandwidth,
        )?)),
        SmootherSpec::LocalLinear { bandwidth } => Ok(SmootherFit::Kernel(KernelFit::fit(
            train_x,
            train_r,
            KernelKind::LocalLinear,
            bandwidth,
        )?)),
        SmootherSpec::AdditiveSpline(cfg) => Ok(SmootherFit::Spline(AdditiveSpline::fit(
            train_x,
            train_r,
            Link::Identity,
            cfg,
        )?)),
    }
}

impl SmootherFit {
    pub fn kind_name(&self) -> &'static str {
        match self {
            SmootherFit::Ols(_) => "ols-linear",
            SmootherFit::Kernel(k) => match k.kind() {
                KernelKind::NadarayaWatson => "nadaraya-watson",
                KernelKind::LocalLinear => "local-linear",
            },
            SmootherFit::Spline(_) => "additive-spline",
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        match self {
            SmootherFit::Ols(f) => f.predict(x),
            SmootherFit::Kernel(f) => f.predict(x),
            SmootherFit::Spline(f) => f.predict(x),
        }
    }

    pub fn predict_rows(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows())
            .map(|i| {
                let row: Vec<f64> = x.row(i).iter().copied().collect();
                self.predict(&row)
            })
            .collect()
    }

    /// Weights `w(x)` with `predict(x) = sum_i w_i(x) R_i`.
    pub fn weights_at(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            SmootherFit::Ols(f) => Ok(f.weights_at(x)),
            SmootherFit::Kernel(f) => Ok(f.weights_at(x)),
            SmootherFit::Spline(_) => Err(CpceError::Unsupported(
                "additive-spline fits are not linear smoothers".into(),
            )),
        }
    }

    /// Training covariates, row-major, for linear-smoother kinds.
    fn train_rows(&self) -> Option<(&[f64], usize)> {
        match self {
            SmootherFit::Ols(f) => Some(f.train_rows()),
            SmootherFit::Kernel(f) => Some(f.train_rows()),
            SmootherFit::Spline(_) => None,
        }
    }
}

/// Absolute weight sum and tail mass beyond Euclidean distance `delta`.
pub fn weight_diagnostics(fit: &SmootherFit, x: &[f64], delta: f64) -> Result<WeightDiagnostics> {
    let w = fit.weights_at(x)?;
    let (rows, p) = fit.train_rows().expect("linear smoother has training rows");
    let mut abs_weight_sum = 0.0;
    let mut tail_mass = 0.0;
    for (i, wi) in w.iter().enumerate() {
        let d2: f64 = rows[i * p..(i + 1) * p]
            .iter()
            .zip(x)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        abs_weight_sum += wi.abs();
        if d2.sqrt() > delta {
            tail_mass += wi.abs();
        }
    }
    Ok(WeightDiagnostics { abs_weight_sum, tail_mass })
}

/// Outcome regressions per observed cell, indexed `[z][s]`.
pub type CellFits = [[SmootherFit; 2]; 2];

/// Fit `mu_zs` on the rows with `Z = z, S = s`.
pub fn fit_cell_regressions(data: &SampleTable, spec: &SmootherSpec) -> Result<CellFits> {
    data.require_all_cells()?;
    let fit = |z: u8, s: u8| -> Result<SmootherFit> {
        let idx = data.cell_indices(z, s);
        let x = data.x().select_rows(&idx);
        let r: Vec<f64> = idx.iter().map(|&i| data.y()[i]).collect();
        fit_smoother(&x, &r, spec)
    };
    Ok([[fit(0, 0)?, fit(0, 1)?], [fit(1, 0)?, fit(1, 1)?]])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_examples() {
        assert_eq!(clip_probability(0.005, 0.01), 0.01);
        assert_eq!(clip_probability(0.5, 0.01), 0.5);
        assert_eq!(clip_probability(1.2, 0.01), 0.99);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!((sigmoid(800.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn spline_weights_unsupported() {
        let x = DMatrix::from_fn(40, 1, |i, _| i as f64 / 40.0);
        let r: Vec<f64> = (0..40).map(|i| (i as f64 / 40.0).sin()).collect();
        let fit = fit_smoother(&x, &r, &SmootherSpec::AdditiveSpline(SplineConfig::default())).unwrap();
        assert!(matches!(fit.weights_at(&[0.5]), Err(CpceError::Unsupported(_))));
    }

    #[test]
    fn cell_regressions_noiseless_shared_signal() {
        let n = 80;
        let x = DMatrix::from_fn(n, 1, |i, _| (i as f64 + 0.5) / n as f64);
        let y: Vec<f64> = (0..n).map(|i| x[(i, 0)]).collect();
        let s: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let z: Vec<u8> = (0..n).map(|i| ((i / 2) % 2) as u8).collect();
        let t = SampleTable::new(x, y, s, z).unwrap();
        let fits = fit_cell_regressions(&t, &SmootherSpec::OlsLinear).unwrap();
        for zs in fits.iter().flatten() {
            assert!((zs.predict(&[0.37]) - 0.37).abs() < 1e-10);
        }
    }
}
