//! The four CPCE estimators: T-learner, and the cross-fitted subset,
//! one-step and EIF-ratio estimators with pointwise confidence intervals.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{fmt_f64, SampleTable, Stratum};
use crate::error::{CpceError, Result};
use crate::identification::{
    eif_parts, hajek_normalize, principal_score_floored, pseudo_eif_ratio, pseudo_onestep_floored, pseudo_subset,
    subset_propensity, HajekGrouping, NuisanceBundle, NuisanceValues, PseudoOutcomeRecord,
};
use crate::learners::{
    clip_probability, fit_cell_regressions, fit_prob, fit_smoother, CellFits, ProbModel, ProbSpec, SmootherFit,
    SmootherSpec, DEFAULT_EPS,
};

/// Estimator family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EstimatorKind {
    #[serde(rename = "tlearner")]
    TLearner,
    #[serde(rename = "subset")]
    Subset,
    #[serde(rename = "onestep")]
    OneStep,
    #[serde(rename = "eif")]
    Eif,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 4] =
        [EstimatorKind::TLearner, EstimatorKind::Subset, EstimatorKind::OneStep, EstimatorKind::Eif];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::TLearner => "tlearner",
            EstimatorKind::Subset => "subset",
            EstimatorKind::OneStep => "onestep",
            EstimatorKind::Eif => "eif",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = CpceError;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL
            .into_iter()
            .find(|k| k.name() == s || (s == "one-step" && *k == EstimatorKind::OneStep))
            .ok_or_else(|| CpceError::Config(format!("unknown estimator {s}")))
    }
}

/// Sample-splitting scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FoldScheme {
    KFold(usize),
    ThreeWay,
}

impl fmt::Display for FoldScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FoldScheme::KFold(k) => write!(f, "kfold({k})"),
            FoldScheme::ThreeWay => write!(f, "threeway"),
        }
    }
}

/// Roles of the three folds in the EIF procedure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Nuisance,
    Denominator,
    Regression,
}

/// Partition of row indices into folds.
///
/// Folds are stored in canonical order (by smallest member), so two
/// labellings of the same partition compare equal and drive identical
/// computations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    scheme: FoldScheme,
    assignment: Vec<usize>,
    folds: Vec<Vec<usize>>,
}

impl FoldPlan {
    /// Build a plan from arbitrary fold labels.
    pub fn from_assignment(scheme: FoldScheme, labels: &[usize]) -> Result<FoldPlan> {
        let k = match scheme {
            FoldScheme::KFold(k) => k,
            FoldScheme::ThreeWay => 3,
        };
        let mut folds = vec![Vec::new(); k];
        for (i, &l) in labels.iter().enumerate() {
            if l >= k {
                return Err(CpceError::Config(format!("fold label {l} out of range for {scheme}")));
            }
            folds[l].push(i);
        }
        if folds.iter().any(Vec::is_empty) {
            return Err(CpceError::Config(format!("{scheme} plan has an empty fold")));
        }
        folds.sort_by_key(|f| f[0]);
        let mut assignment = vec![0; labels.len()];
        for (j, f) in folds.iter().enumerate() {
            for &i in f {
                assignment[i] = j;
            }
        }
        Ok(FoldPlan { scheme, assignment, folds })
    }

    pub fn scheme(&self) -> FoldScheme {
        self.scheme
    }

    /// Canonical fold labels per row.
    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn folds(&self) -> &[Vec<usize>] {
        &self.folds
    }

    /// Rows outside fold `k`.
    pub fn complement(&self, k: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] != k).collect()
    }

    /// Rows playing `role` in a three-way plan.
    pub fn role(&self, role: Role) -> Result<&[usize]> {
        if self.scheme != FoldScheme::ThreeWay {
            return Err(CpceError::Config("roles exist only for three-way plans".into()));
        }
        Ok(&self.folds[match role {
            Role::Nuisance => 0,
            Role::Denominator => 1,
            Role::Regression => 2,
        }])
    }
}

/// Uniformly random equal-size partition (sizes differ by at most one).
pub fn make_fold_plan(n: usize, scheme: FoldScheme, seed: u64) -> Result<FoldPlan> {
    let k = match scheme {
        FoldScheme::KFold(k) if k >= 2 => k,
        FoldScheme::KFold(k) => return Err(CpceError::Config(format!("kfold needs K >= 2, got {k}"))),
        FoldScheme::ThreeWay => 3,
    };
    if n < 2 * k {
        return Err(CpceError::Config(format!("n = {n} is too small for {scheme}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut labels = vec![0; n];
    for (j, &i) in idx.iter().enumerate() {
        labels[i] = j % k;
    }
    FoldPlan::from_assignment(scheme, &labels)
}

/// Source of the subset propensity `pi_{S_u}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubsetPropensitySource {
    /// Composed from fitted `pi`, `p1`, `p0`.
    #[default]
    Composed,
    /// Probability model of `Z` fitted on the subset rows.
    Direct,
}

/// Preliminary estimator for the one-step correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrelimKind {
    #[default]
    Tlearner,
    Zero,
    /// Supplied through [`Overrides::prelim`].
    External,
}

/// Estimator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    /// Working model for `pi`, `p1`, `p0` (and a direct subset propensity).
    pub prob: ProbSpec,
    /// Learner for the cell regressions `mu_zs`.
    pub outcome: SmootherSpec,
    /// Second-stage regression of pseudo-outcomes.
    pub second_stage: SmootherSpec,
    /// EIF denominator regression; defaults to the second stage.
    pub denominator: Option<SmootherSpec>,
    /// Number of folds for the subset and one-step estimators.
    pub folds: usize,
    pub eps: f64,
    pub level: f64,
    pub seed: u64,
    pub hajek: bool,
    pub subset_propensity: SubsetPropensitySource,
    pub prelim: PrelimKind,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            prob: ProbSpec::default(),
            outcome: SmootherSpec::default(),
            second_stage: SmootherSpec::default(),
            denominator: None,
            folds: 2,
            eps: DEFAULT_EPS,
            level: 0.95,
            seed: 0,
            hajek: false,
            subset_propensity: SubsetPropensitySource::default(),
            prelim: PrelimKind::default(),
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(CpceError::Config(format!("eps must lie in (0, 0.5), got {}", self.eps)));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(CpceError::Config(format!("level must lie in (0, 1), got {}", self.level)));
        }
        if self.folds < 2 {
            return Err(CpceError::Config(format!("folds must be >= 2, got {}", self.folds)));
        }
        Ok(())
    }
}

/// Inputs that bypass fitting.
#[derive(Clone, Copy, Default)]
pub struct Overrides<'a> {
    /// Exact nuisances injected in place of every stage-one fit (oracle mode).
    pub oracle: Option<&'a dyn NuisanceBundle>,
    /// External preliminary estimate for the one-step estimator.
    pub prelim: Option<&'a (dyn Fn(&[f64]) -> f64 + Sync)>,
    /// Fold plan used instead of a seeded one.
    pub plan: Option<&'a FoldPlan>,
}

/// Stage-one fits on one training split.
#[derive(Debug, Clone)]
pub struct FittedNuisances {
    pub pi: ProbModel,
    pub p1: ProbModel,
    pub p0: ProbModel,
    pub mu: CellFits,
    /// Direct subset propensity model, when requested.
    pub subset_pi: Option<ProbModel>,
}

impl FittedNuisances {
    /// Fit on rows `idx` of `data`.
    pub fn fit(data: &SampleTable, idx: &[usize], cfg: &EstimatorConfig, u: Stratum) -> Result<FittedNuisances> {
        let train = data.select(idx);
        train.require_all_cells()?;
        let x = train.x();
        let pi = fit_prob(x, train.z(), &cfg.prob, cfg.eps)?;
        let arm = |a: u8| -> Result<ProbModel> {
            let rows: Vec<usize> = (0..train.n()).filter(|&i| train.z()[i] == a).collect();
            let labels: Vec<u8> = rows.iter().map(|&i| train.s()[i]).collect();
            fit_prob(&x.select_rows(&rows), &labels, &cfg.prob, cfg.eps)
        };
        let p1 = arm(1)?;
        let p0 = arm(0)?;
        let mu = fit_cell_regressions(&train, &cfg.outcome)?;
        let subset_pi = match cfg.subset_propensity {
            SubsetPropensitySource::Composed => None,
            SubsetPropensitySource::Direct => {
                let rows: Vec<usize> = (0..train.n()).filter(|&i| u.in_subset(train.s()[i], train.z()[i])).collect();
                let labels: Vec<u8> = rows.iter().map(|&i| train.z()[i]).collect();
                Some(fit_prob(&x.select_rows(&rows), &labels, &cfg.prob, cfg.eps)?)
            }
        };
        Ok(FittedNuisances { pi, p1, p0, mu, subset_pi })
    }
}

impl NuisanceBundle for FittedNuisances {
    fn eval(&self, x: &[f64]) -> NuisanceValues {
        let m = |z: usize, s: usize| self.mu[z][s].predict(x);
        NuisanceValues {
            pi: self.pi.predict(x),
            p1: self.p1.predict(x),
            p0: self.p0.predict(x),
            mu: [[m(0, 0), m(0, 1)], [m(1, 0), m(1, 1)]],
        }
    }
}

enum Stage1<'a> {
    Fitted(FittedNuisances),
    Oracle(&'a dyn NuisanceBundle),
}

impl Stage1<'_> {
    fn get<'b>(data: &SampleTable, idx: &[usize], cfg: &EstimatorConfig, u: Stratum, ov: &Overrides<'b>) -> Result<Stage1<'b>> {
        match ov.oracle {
            Some(b) => Ok(Stage1::Oracle(b)),
            None => Ok(Stage1::Fitted(FittedNuisances::fit(data, idx, cfg, u)?)),
        }
    }

    fn eval(&self, x: &[f64]) -> NuisanceValues {
        match self {
            Stage1::Fitted(f) => f.eval(x),
            Stage1::Oracle(b) => b.eval(x),
        }
    }

    fn subset_pi(&self, x: &[f64], nv: &NuisanceValues, u: Stratum, eps: f64) -> Result<f64> {
        let raw = match self {
            Stage1::Fitted(FittedNuisances { subset_pi: Some(m), .. }) => m.predict(x),
            _ => subset_propensity(nv.pi, nv.p1, nv.p0, u)?,
        };
        Ok(clip_probability(raw, eps))
    }
}

/// A fitted second-stage regression and its training residuals.
#[derive(Debug, Clone)]
pub struct SecondStage {
    pub fit: SmootherFit,
    pub residuals: Vec<f64>,
}

impl SecondStage {
    pub fn fit(x: &DMatrix<f64>, values: &[f64], spec: &SmootherSpec) -> Result<SecondStage> {
        let fit = fit_smoother(x, values, spec)?;
        let fitted = fit.predict_rows(x);
        let residuals = values.iter().zip(&fitted).map(|(v, f)| v - f).collect();
        Ok(SecondStage { fit, residuals })
    }
}

/// Cross-fitted predictions with pointwise intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct CiBands {
    pub tau_hat: Vec<f64>,
    pub se: Vec<f64>,
    pub ci_lo: Vec<f64>,
    pub ci_hi: Vec<f64>,
}

/// Unweighted mean of the stages' predictions at each query row.
pub fn cross_fit_predict(stages: &[SecondStage], query_x: &DMatrix<f64>) -> Vec<f64> {
    let k = stages.len() as f64;
    (0..query_x.nrows())
        .map(|q| {
            let row: Vec<f64> = query_x.row(q).iter().copied().collect();
            stages.iter().map(|s| s.fit.predict(&row)).sum::<f64>() / k
        })
        .collect()
}

/// `se(x)^2 = sum_k sum_i (w_i^k(x) / K)^2 r_i^2` and a normal interval at `level`.
pub fn pointwise_ci(stages: &[SecondStage], query_x: &DMatrix<f64>, level: f64) -> Result<CiBands> {
    if !(level > 0.0 && level < 1.0) {
        return Err(CpceError::Config(format!("level must lie in (0, 1), got {level}")));
    }
    let zq = Normal::standard().inverse_cdf(0.5 + level / 2.0);
    let k = stages.len() as f64;
    let tau_hat = cross_fit_predict(stages, query_x);
    let mut se = Vec::with_capacity(tau_hat.len());
    for q in 0..query_x.nrows() {
        let row: Vec<f64> = query_x.row(q).iter().copied().collect();
        let mut v = 0.0;
        for s in stages {
            let w = s.fit.weights_at(&row)?;
            v += w.iter().zip(&s.residuals).map(|(wi, ri)| (wi / k).powi(2) * ri * ri).sum::<f64>();
        }
        se.push(v.sqrt());
    }
    let ci_lo = tau_hat.iter().zip(&se).map(|(t, s)| t - zq * s).collect();
    let ci_hi = tau_hat.iter().zip(&se).map(|(t, s)| t + zq * s).collect();
    Ok(CiBands { tau_hat, se, ci_lo, ci_hi })
}

/// Provenance carried with every estimate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateMeta {
    pub estimator: EstimatorKind,
    pub stratum: Stratum,
    pub outcome_learner: String,
    pub second_stage: String,
    pub fold_scheme: String,
    pub fold_averaging: String,
    pub seed: u64,
    pub eps: f64,
    pub level: f64,
    pub hajek_grouping: Option<HajekGrouping>,
    pub oracle_nuisances: bool,
    /// Units whose principal score was floored at `eps`.
    pub score_floor_repairs: usize,
    /// Units whose EIF denominator was truncated at `eps`.
    pub denominator_truncations: usize,
    pub frac_ci_excludes_zero: Option<f64>,
    pub notes: Vec<String>,
    pub config: EstimatorConfig,
}

/// Point estimates and intervals at query points.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CpceEstimate {
    pub stratum: Stratum,
    pub x_names: Vec<String>,
    #[serde(skip)]
    pub query_x: DMatrix<f64>,
    pub tau_hat: Vec<f64>,
    /// `NaN` when no interval is available.
    pub se: Vec<f64>,
    pub ci_lo: Vec<f64>,
    pub ci_hi: Vec<f64>,
    pub level: f64,
    pub meta: EstimateMeta,
}

impl CpceEstimate {
    pub fn has_ci(&self) -> bool {
        self.se.iter().all(|s| !s.is_nan())
    }

    /// CSV with query columns followed by `tau_hat, se, ci_lo, ci_hi`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = self.x_names.clone();
        header.extend(["tau_hat", "se", "ci_lo", "ci_hi"].map(String::from));
        w.write_record(&header)?;
        for q in 0..self.tau_hat.len() {
            let mut rec: Vec<String> = self.query_x.row(q).iter().map(|&v| fmt_f64(v)).collect();
            for v in [self.tau_hat[q], self.se[q], self.ci_lo[q], self.ci_hi[q]] {
                rec.push(fmt_f64(v));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// JSON document with the meta block and one object per query point.
    pub fn to_json(&self) -> serde_json::Value {
        let opt = |v: f64| if v.is_nan() { serde_json::Value::Null } else { serde_json::json!(v) };
        let rows: Vec<serde_json::Value> = (0..self.tau_hat.len())
            .map(|q| {
                serde_json::json!({
                    "x": self.query_x.row(q).iter().copied().collect::<Vec<f64>>(),
                    "tau_hat": self.tau_hat[q],
                    "se": opt(self.se[q]),
                    "ci_lo": opt(self.ci_lo[q]),
                    "ci_hi": opt(self.ci_hi[q]),
                })
            })
            .collect();
        serde_json::json!({
            "stratum": self.stratum,
            "x_names": self.x_names,
            "level": self.level,
            "meta": self.meta,
            "estimates": rows,
        })
    }
}

struct Assembly {
    stages: Vec<SecondStage>,
    repairs: usize,
    truncations: usize,
    scheme: String,
}

fn finish(
    kind: EstimatorKind,
    data: &SampleTable,
    cfg: &EstimatorConfig,
    query_x: &DMatrix<f64>,
    u: Stratum,
    ov: &Overrides<'_>,
    a: Assembly,
) -> Result<CpceEstimate> {
    let mut notes = Vec::new();
    let bands = if cfg.second_stage.is_linear_smoother() {
        pointwise_ci(&a.stages, query_x, cfg.level)?
    } else {
        notes.push(format!("second stage {} is not a linear smoother; no intervals", cfg.second_stage.name()));
        let tau_hat = cross_fit_predict(&a.stages, query_x);
        let nan = vec![f64::NAN; tau_hat.len()];
        CiBands { tau_hat, se: nan.clone(), ci_lo: nan.clone(), ci_hi: nan }
    };
    if a.repairs > 0 {
        log::warn!("{kind}: principal score floored at eps for {} units", a.repairs);
    }
    if a.truncations > 0 {
        log::warn!("{kind}: EIF denominator truncated at eps for {} units", a.truncations);
    }
    let frac = ci_exclusion(&bands);
    Ok(CpceEstimate {
        stratum: u,
        x_names: data.x_names().to_vec(),
        query_x: query_x.clone(),
        tau_hat: bands.tau_hat,
        se: bands.se,
        ci_lo: bands.ci_lo,
        ci_hi: bands.ci_hi,
        level: cfg.level,
        meta: EstimateMeta {
            estimator: kind,
            stratum: u,
            outcome_learner: cfg.outcome.name().to_string(),
            second_stage: cfg.second_stage.name().to_string(),
            fold_scheme: a.scheme,
            fold_averaging: "unweighted-mean".into(),
            seed: cfg.seed,
            eps: cfg.eps,
            level: cfg.level,
            hajek_grouping: cfg.hajek.then(|| HajekGrouping::for_family(match kind {
                EstimatorKind::Subset => crate::identification::Family::Subset,
                EstimatorKind::Eif => crate::identification::Family::Eif,
                _ => crate::identification::Family::OneStep,
            })),
            oracle_nuisances: ov.oracle.is_some(),
            score_floor_repairs: a.repairs,
            denominator_truncations: a.truncations,
            frac_ci_excludes_zero: frac,
            notes,
            config: cfg.clone(),
        },
    })
}

fn ci_exclusion(b: &CiBands) -> Option<f64> {
    if b.se.is_empty() || b.se.iter().any(|s| s.is_nan()) {
        return None;
    }
    let k = b.ci_lo.iter().zip(&b.ci_hi).filter(|(lo, hi)| **lo > 0.0 || **hi < 0.0).count();
    Some(k as f64 / b.se.len() as f64)
}

fn check_query(data: &SampleTable, query_x: &DMatrix<f64>) -> Result<()> {
    if query_x.ncols() != data.p() {
        return Err(CpceError::Schema(format!(
            "query points have {} columns, data has {}",
            query_x.ncols(),
            data.p()
        )));
    }
    Ok(())
}

fn kfold_plan(data: &SampleTable, cfg: &EstimatorConfig, ov: &Overrides<'_>) -> Result<FoldPlan> {
    match ov.plan {
        Some(p) => {
            if p.assignment().len() != data.n() {
                return Err(CpceError::Config("fold plan length differs from n".into()));
            }
            Ok(p.clone())
        }
        None => make_fold_plan(data.n(), FoldScheme::KFold(cfg.folds), cfg.seed),
    }
}

fn maybe_hajek(records: Vec<PseudoOutcomeRecord>, cfg: &EstimatorConfig, g: HajekGrouping) -> Result<Vec<PseudoOutcomeRecord>> {
    if cfg.hajek { hajek_normalize(&records, g) } else { Ok(records) }
}

fn regress(data: &SampleTable, records: &[PseudoOutcomeRecord], spec: &SmootherSpec) -> Result<SecondStage> {
    let rows: Vec<usize> = records.iter().map(|r| r.unit_index).collect();
    let values: Vec<f64> = records.iter().map(|r| r.value).collect();
    SecondStage::fit(&data.x().select_rows(&rows), &values, spec)
}

/// `mu_1? - mu_0?` from cell regressions fit on all rows; no intervals.
pub fn estimate_tlearner(
    data: &SampleTable,
    cfg: &EstimatorConfig,
    query_x: &DMatrix<f64>,
    u: Stratum,
    ov: &Overrides<'_>,
) -> Result<CpceEstimate> {
    cfg.validate()?;
    check_query(data, query_x)?;
    data.require_all_cells()?;
    let tau_hat: Vec<f64> = match ov.oracle {
        Some(b) => (0..query_x.nrows())
            .map(|q| b.eval(query_x.row(q).iter().copied().collect::<Vec<_>>().as_slice()).contrast(u))
            .collect(),
        None => {
            let fits = fit_cell_regressions(data, &cfg.outcome)?;
            (0..query_x.nrows())
                .map(|q| {
                    let row: Vec<f64> = query_x.row(q).iter().copied().collect();
                    let m = |z: usize, s: usize| fits[z][s].predict(&row);
                    match u {
                        Stratum::NeverTaker => m(1, 0) - m(0, 0),
                        Stratum::Complier => m(1, 1) - m(0, 0),
                        Stratum::AlwaysTaker => m(1, 1) - m(0, 1),
                    }
                })
                .collect()
        }
    };
    let nan = vec![f64::NAN; tau_hat.len()];
    Ok(CpceEstimate {
        stratum: u,
        x_names: data.x_names().to_vec(),
        query_x: query_x.clone(),
        tau_hat,
        se: nan.clone(),
        ci_lo: nan.clone(),
        ci_hi: nan,
        level: cfg.level,
        meta: EstimateMeta {
            estimator: EstimatorKind::TLearner,
            stratum: u,
            outcome_learner: cfg.outcome.name().to_string(),
            second_stage: "none".into(),
            fold_scheme: "none".into(),
            fold_averaging: "none".into(),
            seed: cfg.seed,
            eps: cfg.eps,
            level: cfg.level,
            hajek_grouping: None,
            oracle_nuisances: ov.oracle.is_some(),
            score_floor_repairs: 0,
            denominator_truncations: 0,
            frac_ci_excludes_zero: None,
            notes: vec!["the T-learner has no confidence intervals".into()],
            config: cfg.clone(),
        },
    })
}

/// Cross-fitted subset estimator.
pub fn estimate_subset(
    data: &SampleTable,
    cfg: &EstimatorConfig,
    query_x: &DMatrix<f64>,
    u: Stratum,
    ov: &Overrides<'_>,
) -> Result<CpceEstimate> {
    cfg.validate()?;
    check_query(data, query_x)?;
    data.require_all_cells()?;
    let plan = kfold_plan(data, cfg, ov)?;
    let mut stages = Vec::new();
    for (k, fold) in plan.folds().iter().enumerate() {
        let nuis = Stage1::get(data, &plan.complement(k), cfg, u, ov)?;
        let mut records = Vec::with_capacity(fold.len());
        for &i in fold {
            let x = data.row(i);
            let nv = nuis.eval(&x);
            let pi_s = nuis.subset_pi(&x, &nv, u, cfg.eps)?;
            records.push(pseudo_subset(&data.obs(i), &nv, pi_s, u, cfg.eps, i)?);
        }
        let records = maybe_hajek(records, cfg, HajekGrouping::SubsetArm)?;
        let kept: Vec<PseudoOutcomeRecord> = records.into_iter().filter(|r| r.in_subset).collect();
        if kept.is_empty() {
            return Err(CpceError::EmptyCell(format!("subset {u} is empty in fold {k}")));
        }
        stages.push(regress(data, &kept, &cfg.second_stage)?);
    }
    let a = Assembly { stages, repairs: 0, truncations: 0, scheme: plan.scheme().to_string() };
    finish(EstimatorKind::Subset, data, cfg, query_x, u, ov, a)
}

/// Cross-fitted one-step estimator.
pub fn estimate_onestep(
    data: &SampleTable,
    cfg: &EstimatorConfig,
    query_x: &DMatrix<f64>,
    u: Stratum,
    ov: &Overrides<'_>,
) -> Result<CpceEstimate> {
    cfg.validate()?;
    check_query(data, query_x)?;
    data.require_all_cells()?;
    if cfg.prelim == PrelimKind::External && ov.prelim.is_none() {
        return Err(CpceError::Config("external preliminary estimator requested but not supplied".into()));
    }
    let plan = kfold_plan(data, cfg, ov)?;
    let mut stages = Vec::new();
    let mut repairs = 0;
    for (k, fold) in plan.folds().iter().enumerate() {
        let nuis = Stage1::get(data, &plan.complement(k), cfg, u, ov)?;
        let mut records = Vec::with_capacity(fold.len());
        for &i in fold {
            let x = data.row(i);
            let nv = nuis.eval(&x);
            let prelim = match (cfg.prelim, ov.prelim) {
                (PrelimKind::External, Some(f)) => f(&x),
                (PrelimKind::Zero, _) => 0.0,
                _ => nv.contrast(u),
            };
            let (r, fixed) = pseudo_onestep_floored(&data.obs(i), &nv, prelim, u, cfg.eps, i);
            repairs += fixed as usize;
            records.push(r);
        }
        let records = maybe_hajek(records, cfg, HajekGrouping::Arm)?;
        stages.push(regress(data, &records, &cfg.second_stage)?);
    }
    let a = Assembly { stages, repairs, truncations: 0, scheme: plan.scheme().to_string() };
    finish(EstimatorKind::OneStep, data, cfg, query_x, u, ov, a)
}

/// EIF-ratio estimator on a single three-way split.
pub fn estimate_eif(
    data: &SampleTable,
    cfg: &EstimatorConfig,
    query_x: &DMatrix<f64>,
    u: Stratum,
    ov: &Overrides<'_>,
) -> Result<CpceEstimate> {
    cfg.validate()?;
    check_query(data, query_x)?;
    data.require_all_cells()?;
    let plan = match ov.plan {
        Some(p) if p.scheme() != FoldScheme::ThreeWay => {
            return Err(CpceError::Config("the EIF estimator requires a three-way split".into()))
        }
        Some(p) => p.clone(),
        None => make_fold_plan(data.n(), FoldScheme::ThreeWay, cfg.seed)?,
    };
    let d1 = plan.role(Role::Nuisance)?;
    let d2 = plan.role(Role::Denominator)?;
    let d3 = plan.role(Role::Regression)?;
    let nuis = Stage1::get(data, d1, cfg, u, ov)?;
    let m_g: Box<dyn Fn(&[f64], &NuisanceValues) -> f64> = match &nuis {
        Stage1::Oracle(_) => Box::new(|_, nv| principal_score_floored(nv.p1, nv.p0, u, 0.0).0),
        Stage1::Fitted(_) => {
            let g: Vec<f64> = d2
                .iter()
                .map(|&i| eif_parts(&data.obs(i), &nuis.eval(&data.row(i)), u).g)
                .collect();
            let spec = cfg.denominator.as_ref().unwrap_or(&cfg.second_stage);
            let fit = fit_smoother(&data.x().select_rows(d2), &g, spec)?;
            Box::new(move |x, _| fit.predict(x))
        }
    };
    let mut truncations = 0;
    let mut records = Vec::with_capacity(d3.len());
    for &i in d3 {
        let x = data.row(i);
        let nv = nuis.eval(&x);
        let mg = m_g(&x, &nv);
        if mg < cfg.eps {
            truncations += 1;
            log::debug!("eif: denominator {mg} truncated at row {i}");
        }
        records.push(pseudo_eif_ratio(&data.obs(i), &nv, mg, u, cfg.eps, i)?);
    }
    let records = maybe_hajek(records, cfg, HajekGrouping::Arm)?;
    let stages = vec![regress(data, &records, &cfg.second_stage)?];
    let a = Assembly { stages, repairs: 0, truncations, scheme: plan.scheme().to_string() };
    finish(EstimatorKind::Eif, data, cfg, query_x, u, ov, a)
}

/// Dispatch on the estimator kind.
pub fn estimate(
    kind: EstimatorKind,
    data: &SampleTable,
    cfg: &EstimatorConfig,
    query_x: &DMatrix<f64>,
    u: Stratum,
    ov: &Overrides<'_>,
) -> Result<CpceEstimate> {
    match kind {
        EstimatorKind::TLearner => estimate_tlearner(data, cfg, query_x, u, ov),
        EstimatorKind::Subset => estimate_subset(data, cfg, query_x, u, ov),
        EstimatorKind::OneStep => estimate_onestep(data, cfg, query_x, u, ov),
        EstimatorKind::Eif => estimate_eif(data, cfg, query_x, u, ov),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::Bandwidth;

    #[test]
    fn fold_plans_are_equal_sized_and_seeded() {
        let p = make_fold_plan(6, FoldScheme::KFold(2), 1).unwrap();
        assert_eq!(p.folds().iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3]);
        let t = make_fold_plan(9, FoldScheme::ThreeWay, 1).unwrap();
        assert!(t.folds().iter().all(|f| f.len() == 3));
        assert_ne!(t.role(Role::Nuisance).unwrap(), t.role(Role::Regression).unwrap());
        assert_eq!(make_fold_plan(50, FoldScheme::KFold(3), 9).unwrap(), make_fold_plan(50, FoldScheme::KFold(3), 9).unwrap());
        assert!(matches!(make_fold_plan(3, FoldScheme::KFold(2), 0), Err(CpceError::Config(_))));
        assert!(matches!(make_fold_plan(5, FoldScheme::ThreeWay, 0), Err(CpceError::Config(_))));
    }

    #[test]
    fn relabelled_plan_is_identical() {
        let a = FoldPlan::from_assignment(FoldScheme::KFold(3), &[0, 1, 2, 0, 1, 2, 2]).unwrap();
        let b = FoldPlan::from_assignment(FoldScheme::KFold(3), &[2, 0, 1, 2, 0, 1, 1]).unwrap();
        assert_eq!(a, b);
    }

    fn stage(values: &[f64]) -> (SecondStage, DMatrix<f64>) {
        let x = DMatrix::from_fn(values.len(), 1, |i, _| i as f64 / values.len() as f64);
        let spec = SmootherSpec::NadarayaWatson { bandwidth: Bandwidth::Fixed(0.3) };
        (SecondStage::fit(&x, values, &spec).unwrap(), x)
    }

    #[test]
    fn constant_pseudo_outcomes_have_zero_se() {
        let (s, x) = stage(&[0.7; 20]);
        let b = pointwise_ci(&[s], &x, 0.95).unwrap();
        for q in 0..x.nrows() {
            assert!((b.tau_hat[q] - 0.7).abs() < 1e-12);
            assert!(b.se[q] < 1e-12);
        }
    }

    #[test]
    fn doubling_residuals_doubles_se() {
        let v: Vec<f64> = (0..30).map(|i| ((i * 37) % 11) as f64 / 11.0).collect();
        let (s, x) = stage(&v);
        let mut s2 = s.clone();
        for r in &mut s2.residuals {
            *r *= 2.0;
        }
        let a = pointwise_ci(&[s], &x, 0.95).unwrap();
        let b = pointwise_ci(&[s2], &x, 0.95).unwrap();
        for q in 0..x.nrows() {
            assert!((2.0 * a.se[q] - b.se[q]).abs() < 1e-12);
            assert!(a.ci_lo[q] <= a.tau_hat[q] && a.tau_hat[q] <= a.ci_hi[q]);
            assert!(((a.ci_hi[q] - a.tau_hat[q]) - 1.959963984540054 * a.se[q]).abs() < 1e-9);
        }
    }

    #[test]
    fn spline_second_stage_has_no_interval() {
        let v: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let x = DMatrix::from_fn(40, 1, |i, _| i as f64);
        let s = SecondStage::fit(&x, &v, &SmootherSpec::AdditiveSpline(Default::default())).unwrap();
        assert!(matches!(pointwise_ci(&[s], &x, 0.95), Err(CpceError::Unsupported(_))));
    }

    #[test]
    fn kind_names_round_trip() {
        for k in EstimatorKind::ALL {
            assert_eq!(k.name().parse::<EstimatorKind>().unwrap(), k);
        }
    }
}
