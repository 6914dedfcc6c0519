//! Replicated RMSE and coverage benchmark.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::derive_seed;
use super::dgp::{generate, sample_grid, DgpKind, DgpSpec};
use crate::data::{fmt_f64, Stratum};
use crate::error::{CpceError, Result};
use crate::estimators::{estimate, EstimatorConfig, EstimatorKind, Overrides};
use crate::learners::{ProbSpec, SmootherSpec};

/// Benchmark grid definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub dgp: DgpKind,
    pub estimators: Vec<EstimatorKind>,
    pub strata: Vec<Stratum>,
    pub ns: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
    pub estimator: EstimatorConfig,
    /// Evaluation points drawn from the covariate law per replication.
    pub grid_size: usize,
    /// Fixed points at which interval coverage is recorded.
    pub coverage_points: Vec<Vec<f64>>,
    pub noise_sd: Option<f64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let dgp = DgpKind::Study1 { scenario: 1 };
        BenchConfig {
            dgp,
            estimators: EstimatorKind::ALL.to_vec(),
            strata: vec![Stratum::Complier],
            ns: vec![1000, 2000, 4000, 8000],
            reps: 100,
            seed: 1,
            estimator: preset_for(dgp),
            grid_size: 200,
            coverage_points: Vec::new(),
            noise_sd: None,
        }
    }
}

/// Learners matching each design: parametric fits for Study I, additive
/// splines for the smooth designs, local-linear otherwise.
pub fn preset_for(dgp: DgpKind) -> EstimatorConfig {
    let base = EstimatorConfig::default();
    match dgp {
        DgpKind::Study1 { .. } => EstimatorConfig {
            prob: ProbSpec::default(),
            outcome: SmootherSpec::OlsLinear,
            second_stage: SmootherSpec::OlsLinear,
            denominator: Some(SmootherSpec::OlsLinear),
            ..base
        },
        DgpKind::Toy | DgpKind::Study2 | DgpKind::Study2NonlinearTau | DgpKind::Study3 => {
            let spline = SmootherSpec::AdditiveSpline(Default::default());
            EstimatorConfig {
                prob: ProbSpec::AdditiveSplineLogit(Default::default()),
                outcome: spline.clone(),
                second_stage: spline.clone(),
                denominator: Some(spline),
                ..base
            }
        }
        DgpKind::HotspotSynthetic => base,
    }
}

/// Five interior points used for coverage checks.
pub fn coverage_points() -> Vec<Vec<f64>> {
    crate::bias_lab::default_points()
}

/// Results for one `(estimator, stratum, n)` cell across replications.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchResult {
    pub dgp: String,
    pub estimator: EstimatorKind,
    pub stratum: Stratum,
    pub n: usize,
    pub reps: usize,
    /// Per replication; `NaN` where estimation failed.
    pub rmse: Vec<f64>,
    pub mean_rmse: f64,
    /// Per replication and coverage point.
    pub covered: Vec<Vec<bool>>,
    /// Coverage rate per point, when intervals exist.
    pub coverage: Option<Vec<f64>>,
    pub errors: Vec<Option<String>>,
}

impl BenchResult {
    pub fn failures(&self) -> usize {
        self.errors.iter().filter(|e| e.is_some()).count()
    }

    pub fn sd_rmse(&self) -> f64 {
        let ok: Vec<f64> = self.rmse.iter().copied().filter(|v| !v.is_nan()).collect();
        let m = ok.iter().sum::<f64>() / ok.len() as f64;
        (ok.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (ok.len() as f64 - 1.0)).sqrt()
    }
}

/// `sqrt(mean((tau_hat - tau)^2))`.
pub fn rmse_eval(tau_hat: &[f64], tau: &[f64]) -> f64 {
    assert_eq!(tau_hat.len(), tau.len(), "estimate and truth lengths differ");
    (tau_hat.iter().zip(tau).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / tau.len() as f64).sqrt()
}

struct Outcome {
    rmse: f64,
    covered: Vec<bool>,
    error: Option<String>,
}

fn one_rep(cfg: &BenchConfig, n: usize, rep: usize) -> Result<Vec<Outcome>> {
    let seed = derive_seed(cfg.seed, &[n as u64, rep as u64]);
    let spec = DgpSpec { kind: cfg.dgp, n, seed, noise_sd: cfg.noise_sd };
    let (data, _) = generate(&spec)?;
    let grid = sample_grid(cfg.dgp, cfg.grid_size, derive_seed(seed, &[1]));
    let p = cfg.dgp.p();
    let m = cfg.grid_size + cfg.coverage_points.len();
    let query = nalgebra::DMatrix::from_fn(m, p, |i, j| {
        if i < cfg.grid_size { grid[(i, j)] } else { cfg.coverage_points[i - cfg.grid_size][j] }
    });
    let mut est_cfg = cfg.estimator.clone();
    est_cfg.seed = derive_seed(seed, &[2]);
    let mut out = Vec::new();
    for &kind in &cfg.estimators {
        for &u in &cfg.strata {
            let truth: Vec<f64> = (0..m)
                .map(|i| cfg.dgp.tau(query.row(i).iter().copied().collect::<Vec<_>>().as_slice(), u))
                .collect();
            out.push(match estimate(kind, &data, &est_cfg, &query, u, &Overrides::default()) {
                Ok(e) => Outcome {
                    rmse: rmse_eval(&e.tau_hat[..cfg.grid_size], &truth[..cfg.grid_size]),
                    covered: (cfg.grid_size..m).map(|i| e.ci_lo[i] <= truth[i] && truth[i] <= e.ci_hi[i]).collect(),
                    error: None,
                },
                Err(err) => Outcome { rmse: f64::NAN, covered: Vec::new(), error: Some(err.to_string()) },
            });
        }
    }
    Ok(out)
}

/// Full factorial benchmark; replications run in parallel and are reduced in
/// replication order, so results depend only on the config.
pub fn run_benchmark(cfg: &BenchConfig) -> Result<Vec<BenchResult>> {
    if cfg.reps == 0 || cfg.ns.is_empty() || cfg.estimators.is_empty() || cfg.strata.is_empty() {
        return Err(CpceError::Config("benchmark needs reps, sample sizes, estimators and strata".into()));
    }
    if cfg.grid_size == 0 {
        return Err(CpceError::Config("grid_size must be positive".into()));
    }
    if cfg.coverage_points.iter().any(|x| x.len() != cfg.dgp.p()) {
        return Err(CpceError::Config(format!("coverage points must have {} coordinates", cfg.dgp.p())));
    }
    let tasks: Vec<(usize, usize)> = cfg.ns.iter().flat_map(|&n| (0..cfg.reps).map(move |r| (n, r))).collect();
    let mut done: Vec<((usize, usize), Vec<Outcome>)> = tasks
        .par_iter()
        .map(|&(n, r)| {
            let res = one_rep(cfg, n, r).unwrap_or_else(|e| {
                let k = cfg.estimators.len() * cfg.strata.len();
                (0..k).map(|_| Outcome { rmse: f64::NAN, covered: Vec::new(), error: Some(e.to_string()) }).collect()
            });
            ((n, r), res)
        })
        .collect();
    done.sort_by_key(|(k, _)| *k);
    let mut results = Vec::new();
    for &n in &cfg.ns {
        let reps: Vec<&Vec<Outcome>> = done.iter().filter(|((m, _), _)| *m == n).map(|(_, o)| o).collect();
        let mut slot = 0;
        for &kind in &cfg.estimators {
            for &u in &cfg.strata {
                let rmse: Vec<f64> = reps.iter().map(|o| o[slot].rmse).collect();
                let covered: Vec<Vec<bool>> = reps.iter().map(|o| o[slot].covered.clone()).collect();
                let errors: Vec<Option<String>> = reps.iter().map(|o| o[slot].error.clone()).collect();
                let ok: Vec<f64> = rmse.iter().copied().filter(|v| !v.is_nan()).collect();
                let mean_rmse = if ok.is_empty() { f64::NAN } else { ok.iter().sum::<f64>() / ok.len() as f64 };
                let npts = cfg.coverage_points.len();
                let with_ci: Vec<&Vec<bool>> = covered.iter().filter(|c| c.len() == npts).collect();
                let coverage = (npts > 0 && kind != EstimatorKind::TLearner && !with_ci.is_empty()).then(|| {
                    (0..npts)
                        .map(|j| with_ci.iter().filter(|c| c[j]).count() as f64 / with_ci.len() as f64)
                        .collect()
                });
                results.push(BenchResult {
                    dgp: cfg.dgp.to_string(),
                    estimator: kind,
                    stratum: u,
                    n,
                    reps: cfg.reps,
                    rmse,
                    mean_rmse,
                    covered,
                    coverage,
                    errors,
                });
                slot += 1;
            }
        }
    }
    Ok(results)
}

/// Tidy CSV: one row per replication x estimator x stratum x n.
pub fn write_bench_csv<W: Write>(results: &[BenchResult], npoints: usize, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = ["dgp", "estimator", "stratum", "n", "rep", "rmse"].map(String::from).to_vec();
    header.extend((1..=npoints).map(|j| format!("covered_{j}")));
    header.push("error".into());
    w.write_record(&header)?;
    for r in results {
        for rep in 0..r.rmse.len() {
            let mut rec = vec![
                r.dgp.clone(),
                r.estimator.to_string(),
                r.stratum.to_string(),
                r.n.to_string(),
                rep.to_string(),
                fmt_f64(r.rmse[rep]),
            ];
            for j in 0..npoints {
                rec.push(r.covered[rep].get(j).map(|c| (*c as u8).to_string()).unwrap_or_default());
            }
            rec.push(r.errors[rep].clone().unwrap_or_default());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// JSON summary with the config echoed.
pub fn bench_summary_json(cfg: &BenchConfig, results: &[BenchResult]) -> serde_json::Value {
    let cells: Vec<serde_json::Value> = results
        .iter()
        .map(|r| {
            serde_json::json!({
                "dgp": r.dgp,
                "estimator": r.estimator,
                "stratum": r.stratum,
                "n": r.n,
                "reps": r.reps,
                "mean_rmse": r.mean_rmse,
                "sd_rmse": r.sd_rmse(),
                "coverage": r.coverage,
                "failures": r.failures(),
            })
        })
        .collect();
    serde_json::json!({ "config": cfg, "results": cells })
}
