//! Additive cubic P-splines fit by backfitting (identity link) or local
//! scoring (logit link), with per-term smoothing chosen by GCV.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::sigmoid;
use crate::error::{CpceError, Result};

/// Additive spline settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplineConfig {
    /// Interior knots per coordinate, placed at quantiles.
    pub interior_knots: usize,
    /// Smoothing parameters relative to `tr(B'WB) / tr(P)`.
    pub lambda_grid: Vec<f64>,
    pub max_backfit_iter: usize,
    pub backfit_tol: f64,
    pub max_outer_iter: usize,
    pub outer_tol: f64,
    /// Coordinates with fewer distinct values enter linearly.
    pub min_unique_for_spline: usize,
}

impl Default for SplineConfig {
    fn default() -> Self {
        SplineConfig {
            interior_knots: 8,
            lambda_grid: (0..19).map(|k| 10f64.powf(-6.0 + 0.5 * k as f64)).collect(),
            max_backfit_iter: 100,
            backfit_tol: 1e-6,
            max_outer_iter: 30,
            outer_tol: 1e-6,
            min_unique_for_spline: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    Identity,
    Logit,
}

const DEGREE: usize = 3;

/// Nonzero cubic B-spline values at `x`: `(first index, values)`.
fn basis_at(knots: &[f64], x: f64) -> (usize, [f64; 4]) {
    let nb = knots.len() - DEGREE - 1;
    let lo = knots[DEGREE];
    let hi = knots[nb];
    let x = x.clamp(lo, hi);
    // span: largest mu in [DEGREE, nb-1] with knots[mu] <= x
    let mut mu = DEGREE;
    let (mut a, mut b) = (DEGREE, nb - 1);
    if x >= knots[nb - 1] {
        mu = nb - 1;
    } else {
        while a <= b {
            let m = (a + b) / 2;
            if knots[m] <= x {
                mu = m;
                a = m + 1;
            } else {
                if m == 0 {
                    break;
                }
                b = m - 1;
            }
        }
    }
    let mut n = [0.0; 4];
    let mut left = [0.0; 4];
    let mut right = [0.0; 4];
    n[0] = 1.0;
    for j in 1..=DEGREE {
        left[j] = x - knots[mu + 1 - j];
        right[j] = knots[mu + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let temp = if denom > 0.0 { n[r] / denom } else { 0.0 };
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }
    (mu - DEGREE, n)
}

fn second_difference_penalty(k: usize) -> DMatrix<f64> {
    let mut d = DMatrix::<f64>::zeros(k.saturating_sub(2), k);
    for i in 0..k.saturating_sub(2) {
        d[(i, i)] = 1.0;
        d[(i, i + 1)] = -2.0;
        d[(i, i + 2)] = 1.0;
    }
    d.transpose() * d
}

#[derive(Debug, Clone)]
enum Term {
    Linear { center: f64, coef: f64 },
    Spline { knots: Vec<f64>, coef: Vec<f64>, offset: f64 },
}

impl Term {
    fn eval(&self, x: f64) -> f64 {
        match self {
            Term::Linear { center, coef } => coef * (x - center),
            Term::Spline { knots, coef, offset } => {
                let (start, v) = basis_at(knots, x);
                (0..4).map(|a| v[a] * coef[start + a]).sum::<f64>() - offset
            }
        }
    }
}

/// Per-coordinate design information reused across sweeps.
enum Design {
    Linear { x: Vec<f64> },
    Spline { knots: Vec<f64>, rows: Vec<(usize, [f64; 4])>, penalty: DMatrix<f64> },
}

fn make_design(col: &[f64], cfg: &SplineConfig) -> Design {
    let mut uniq = col.to_vec();
    uniq.sort_by(|a, b| a.total_cmp(b));
    uniq.dedup();
    if uniq.len() < cfg.min_unique_for_spline.max(4) {
        return Design::Linear { x: col.to_vec() };
    }
    let lo = uniq[0];
    let hi = *uniq.last().unwrap();
    let k = cfg.interior_knots.min(uniq.len() - 2);
    let mut interior: Vec<f64> = (1..=k)
        .map(|j| {
            let pos = j as f64 / (k + 1) as f64 * (uniq.len() - 1) as f64;
            let i = pos.floor() as usize;
            let frac = pos - i as f64;
            if i + 1 < uniq.len() { uniq[i] + frac * (uniq[i + 1] - uniq[i]) } else { uniq[i] }
        })
        .filter(|&t| t > lo && t < hi)
        .collect();
    interior.dedup();
    let mut knots = vec![lo; DEGREE + 1];
    knots.extend(interior);
    knots.extend(vec![hi; DEGREE + 1]);
    let nb = knots.len() - DEGREE - 1;
    let rows = col.iter().map(|&x| basis_at(&knots, x)).collect();
    Design::Spline { knots, rows, penalty: second_difference_penalty(nb) }
}

fn wmean(v: &[f64], w: &[f64]) -> f64 {
    let sw: f64 = w.iter().sum();
    v.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw
}

/// Penalized weighted fit of `r` on one coordinate; returns the centered term
/// and its fitted values.
fn fit_term(design: &Design, r: &[f64], w: &[f64], cfg: &SplineConfig) -> Result<(Term, Vec<f64>)> {
    match design {
        Design::Linear { x } => {
            let xm = wmean(x, w);
            let sxx: f64 = x.iter().zip(w).map(|(v, wi)| wi * (v - xm).powi(2)).sum();
            let sxr: f64 = x.iter().zip(r).zip(w).map(|((v, ri), wi)| wi * (v - xm) * ri).sum();
            let coef = if sxx > 0.0 { sxr / sxx } else { 0.0 };
            let term = Term::Linear { center: xm, coef };
            let f = x.iter().map(|&v| term.eval(v)).collect();
            Ok((term, f))
        }
        Design::Spline { knots, rows, penalty } => {
            let k = penalty.nrows();
            let mut g = DMatrix::<f64>::zeros(k, k);
            let mut b = DVector::<f64>::zeros(k);
            let mut rr = 0.0;
            for ((&(s, v), &ri), &wi) in rows.iter().zip(r).zip(w) {
                for a in 0..4 {
                    let wa = wi * v[a];
                    b[s + a] += wa * ri;
                    for c in 0..4 {
                        g[(s + a, s + c)] += wa * v[c];
                    }
                }
                rr += wi * ri * ri;
            }
            let scale = g.trace() / penalty.trace();
            let n = r.len() as f64;
            let mut best: Option<(f64, DVector<f64>)> = None;
            for &c in &cfg.lambda_grid {
                let lambda = c * scale;
                let a = &g + penalty * lambda + DMatrix::identity(k, k) * (1e-10 * scale);
                let Some(ch) = a.cholesky() else { continue };
                let beta = ch.solve(&b);
                let rss = (rr - 2.0 * beta.dot(&b) + beta.dot(&(&g * &beta))).max(0.0);
                let edf = ch.solve(&g).trace();
                let denom = n - edf;
                if denom <= 0.0 {
                    continue;
                }
                let gcv = n * rss / (denom * denom);
                if best.as_ref().is_none_or(|(s, _)| gcv < *s) {
                    best = Some((gcv, beta));
                }
            }
            let (_, beta) = best.ok_or_else(|| CpceError::Convergence("no admissible smoothing parameter".into()))?;
            let raw: Vec<f64> = rows
                .iter()
                .map(|&(s, v)| (0..4).map(|a| v[a] * beta[s + a]).sum())
                .collect();
            let offset = wmean(&raw, w);
            let f = raw.iter().map(|v| v - offset).collect();
            Ok((Term::Spline { knots: knots.clone(), coef: beta.iter().copied().collect(), offset }, f))
        }
    }
}

/// Fitted additive model `g(E[Y|x]) = alpha + sum_j f_j(x_j)`.
#[derive(Debug, Clone)]
pub struct AdditiveSpline {
    link: Link,
    intercept: f64,
    terms: Vec<Term>,
}

struct Backfit {
    intercept: f64,
    terms: Vec<Term>,
    fitted: Vec<Vec<f64>>,
}

fn backfit(
    designs: &[Design],
    y: &[f64],
    w: &[f64],
    start: Option<Vec<Vec<f64>>>,
    cfg: &SplineConfig,
) -> Result<Backfit> {
    let n = y.len();
    let p = designs.len();
    let mut fitted = start.unwrap_or_else(|| vec![vec![0.0; n]; p]);
    let mut terms: Vec<Option<Term>> = vec![None; p];
    let mut intercept = 0.0;
    for _ in 0..cfg.max_backfit_iter.max(1) {
        let total: Vec<f64> = (0..n).map(|i| fitted.iter().map(|f| f[i]).sum()).collect();
        let resid: Vec<f64> = y.iter().zip(&total).map(|(a, b)| a - b).collect();
        intercept = wmean(&resid, w);
        let mut change = 0.0;
        let mut size = 0.0;
        let mut partial = total;
        for j in 0..p {
            let r: Vec<f64> = (0..n).map(|i| y[i] - intercept - (partial[i] - fitted[j][i])).collect();
            let (term, f) = fit_term(&designs[j], &r, w, cfg)?;
            for i in 0..n {
                change += w[i] * (f[i] - fitted[j][i]).powi(2);
                size += w[i] * f[i] * f[i];
                partial[i] += f[i] - fitted[j][i];
            }
            fitted[j] = f;
            terms[j] = Some(term);
        }
        if change <= cfg.backfit_tol * cfg.backfit_tol * (size + 1e-12) {
            break;
        }
    }
    Ok(Backfit {
        intercept,
        terms: terms.into_iter().map(|t| t.expect("every term visited")).collect(),
        fitted,
    })
}

impl AdditiveSpline {
    pub fn fit(x: &DMatrix<f64>, y: &[f64], link: Link, cfg: &SplineConfig) -> Result<AdditiveSpline> {
        let (n, p) = x.shape();
        if n == 0 || p == 0 {
            return Err(CpceError::Schema("additive spline needs rows and columns".into()));
        }
        let designs: Vec<Design> = (0..p)
            .map(|j| {
                let col: Vec<f64> = x.column(j).iter().copied().collect();
                make_design(&col, cfg)
            })
            .collect();
        match link {
            Link::Identity => {
                let w = vec![1.0; n];
                let bf = backfit(&designs, y, &w, None, cfg)?;
                Ok(AdditiveSpline { link, intercept: bf.intercept, terms: bf.terms })
            }
            Link::Logit => {
                let ybar = y.iter().sum::<f64>() / n as f64;
                if ybar <= 0.0 || ybar >= 1.0 {
                    return Err(CpceError::DegenerateLabels);
                }
                let mut eta = vec![(ybar / (1.0 - ybar)).ln(); n];
                let mut state: Option<Backfit> = None;
                for _ in 0..cfg.max_outer_iter.max(1) {
                    let mut w = Vec::with_capacity(n);
                    let mut z = Vec::with_capacity(n);
                    for i in 0..n {
                        let mu = sigmoid(eta[i]).clamp(1e-6, 1.0 - 1e-6);
                        let wi = mu * (1.0 - mu);
                        w.push(wi);
                        z.push(eta[i] + (y[i] - mu) / wi);
                    }
                    let start = state.take().map(|s| s.fitted);
                    let bf = backfit(&designs, &z, &w, start, cfg)?;
                    let new_eta: Vec<f64> = (0..n)
                        .map(|i| (bf.intercept + bf.fitted.iter().map(|f| f[i]).sum::<f64>()).clamp(-30.0, 30.0))
                        .collect();
                    let delta = new_eta
                        .iter()
                        .zip(&eta)
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max);
                    eta = new_eta;
                    state = Some(bf);
                    if delta < cfg.outer_tol {
                        break;
                    }
                }
                let bf = state.expect("at least one outer iteration");
                Ok(AdditiveSpline { link, intercept: bf.intercept, terms: bf.terms })
            }
        }
    }

    /// Linear predictor at `x`.
    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        self.intercept + self.terms.iter().zip(x).map(|(t, &v)| t.eval(v)).sum::<f64>()
    }

    /// Mean response at `x` (probability for the logit link).
    pub fn predict(&self, x: &[f64]) -> f64 {
        let eta = self.linear_predictor(x);
        match self.link {
            Link::Identity => eta,
            Link::Logit => sigmoid(eta),
        }
    }

    /// Value of the centered component for coordinate `j` at `v`.
    pub fn component(&self, j: usize, v: f64) -> f64 {
        self.terms[j].eval(v)
    }
}
