//! Plug-in bias of the three pseudo-outcome families under controlled
//! nuisance perturbations: exact closed forms and a Monte-Carlo oracle.
//!
//! Errors are written `e_pi = pi~ - pi`, `e_z = p~_z - p_z`,
//! `d_zs = mu~_zs - mu_zs` and `e_tau = tau_check - tau`.

use std::f64::consts::PI;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{fmt_f64, Obs, Stratum};
use crate::error::{CpceError, Result};
use crate::identification::{eif_parts, principal_score, subset_propensity, Family, NuisanceValues};
use crate::learners::{clip_probability, DEFAULT_EPS};
use crate::sim::derive_seed;
use crate::sim::dgp::{draw_obs, DgpKind};

/// Spatial profile multiplying every perturbation amplitude.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    #[default]
    Constant,
    /// `sin(2 pi mean(x) + pi/4)`.
    Wave,
}

impl Shape {
    fn factor(self, x: &[f64]) -> f64 {
        match self {
            Shape::Constant => 1.0,
            Shape::Wave => (2.0 * PI * x.iter().sum::<f64>() / x.len() as f64 + PI / 4.0).sin(),
        }
    }
}

/// Additive perturbation of the true nuisances, applied on the probability
/// scale and re-clipped to `[eps, 1 - eps]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Perturbation {
    pub tag: String,
    pub pi: f64,
    pub p1: f64,
    pub p0: f64,
    /// Indexed `[z][s]`.
    pub mu: [[f64; 2]; 2],
    /// Extra shift of the subset propensity beyond what `pi`, `p_z` induce.
    pub subset_pi: f64,
    /// Extra error of the preliminary estimate beyond the contrast of `mu~`.
    pub prelim: f64,
    pub shape: Shape,
}

impl Default for Perturbation {
    fn default() -> Self {
        Perturbation {
            tag: "all-exact".into(),
            pi: 0.0,
            p1: 0.0,
            p0: 0.0,
            mu: [[0.0; 2]; 2],
            subset_pi: 0.0,
            prelim: 0.0,
            shape: Shape::Constant,
        }
    }
}

/// Perturbed nuisances at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tilde {
    pub nv: NuisanceValues,
    subset_shift: f64,
    prelim_shift: f64,
    eps: f64,
}

impl Tilde {
    /// `pi~_{S_u}`: composed from the perturbed scores, shifted, re-clipped.
    pub fn pi_s(&self, u: Stratum) -> Result<f64> {
        let c = subset_propensity(self.nv.pi, self.nv.p1, self.nv.p0, u)?;
        Ok(clip_probability(c + self.subset_shift, self.eps))
    }

    /// Preliminary estimate `tau_check^u`.
    pub fn prelim(&self, u: Stratum) -> f64 {
        self.nv.contrast(u) + self.prelim_shift
    }
}

impl Perturbation {
    pub fn scaled(&self, c: f64) -> Perturbation {
        let mut p = self.clone();
        p.pi *= c;
        p.p1 *= c;
        p.p0 *= c;
        for row in &mut p.mu {
            for v in row {
                *v *= c;
            }
        }
        p.subset_pi *= c;
        p.prelim *= c;
        p
    }

    pub fn apply(&self, truth: &NuisanceValues, x: &[f64], eps: f64) -> Tilde {
        let f = self.shape.factor(x);
        let mut mu = truth.mu;
        for (z, row) in mu.iter_mut().enumerate() {
            for (s, v) in row.iter_mut().enumerate() {
                *v += f * self.mu[z][s];
            }
        }
        Tilde {
            nv: NuisanceValues {
                pi: clip_probability(truth.pi + f * self.pi, eps),
                p1: clip_probability(truth.p1 + f * self.p1, eps),
                p0: clip_probability(truth.p0 + f * self.p0, eps),
                mu,
            },
            subset_shift: f * self.subset_pi,
            prelim_shift: f * self.prelim,
            eps,
        }
    }

    fn scores_exact(&self) -> bool {
        self.pi == 0.0 && self.p1 == 0.0 && self.p0 == 0.0
    }

    fn mu_exact(&self) -> bool {
        self.mu.iter().flatten().all(|&v| v == 0.0)
    }

    /// Whether the family's plug-in limit is unbiased under this perturbation.
    pub fn protects(&self, family: Family) -> bool {
        let p_exact = self.p1 == 0.0 && self.p0 == 0.0;
        match family {
            Family::Subset => self.mu_exact() || (self.scores_exact() && self.subset_pi == 0.0),
            Family::Eif => self.mu_exact() || self.scores_exact(),
            Family::OneStep => {
                self.scores_exact() || (self.mu_exact() && p_exact) || (self.mu_exact() && self.prelim == 0.0)
            }
        }
    }
}

/// The default regime suite.
pub fn default_regimes() -> Vec<Perturbation> {
    let mu = [[0.10, -0.08], [0.12, -0.10]];
    vec![
        Perturbation::default(),
        Perturbation { tag: "mu-exact".into(), pi: 0.08, p1: 0.06, p0: -0.05, subset_pi: 0.04, ..Default::default() },
        Perturbation { tag: "scores-exact".into(), mu, prelim: 0.07, ..Default::default() },
        Perturbation { tag: "mu-p-exact".into(), pi: 0.08, prelim: 0.15, ..Default::default() },
        all_perturbed(),
    ]
}

/// Every nuisance perturbed, with magnitude 0.1.
pub fn all_perturbed() -> Perturbation {
    Perturbation {
        tag: "all-perturbed".into(),
        pi: 0.1,
        p1: 0.08,
        p0: -0.06,
        mu: [[0.10, -0.10], [-0.08, 0.10]],
        subset_pi: 0.05,
        prelim: 0.1,
        shape: Shape::Constant,
    }
}

fn check_overlap(t: &NuisanceValues, u: Stratum, eps: f64) -> Result<()> {
    let ok = |v: f64| v >= eps && v <= 1.0 - eps;
    if !ok(t.pi) || !ok(t.p1) || !ok(t.p0) {
        return Err(CpceError::Overlap(format!("perturbed scores ({}, {}, {}) outside [{eps}, {}]", t.pi, t.p1, t.p0, 1.0 - eps)));
    }
    if u == Stratum::Complier && t.p1 - t.p0 < eps {
        return Err(CpceError::Overlap(format!("perturbed p1 - p0 = {} below {eps}", t.p1 - t.p0)));
    }
    Ok(())
}

/// Exact two-term identity for the subset plug-in bias.
pub fn bias_subset_closed(truth: &NuisanceValues, tilde: &Tilde, u: Stratum) -> Result<f64> {
    let ps = subset_propensity(truth.pi, truth.p1, truth.p0, u)?;
    let pt = tilde.pi_s(u)?;
    if !(pt >= tilde.eps && pt <= 1.0 - tilde.eps) {
        return Err(CpceError::Overlap(format!("perturbed subset propensity {pt}")));
    }
    let d = |z: usize, s: usize| tilde.nv.mu[z][s] - truth.mu[z][s];
    let (d1, d0) = match u {
        Stratum::NeverTaker => (d(1, 0), d(0, 0)),
        Stratum::Complier => (d(1, 1), d(0, 0)),
        Stratum::AlwaysTaker => (d(1, 1), d(0, 1)),
    };
    Ok((pt - ps) * d1 / pt + (pt - ps) * d0 / (1.0 - pt))
}

struct Errs {
    ep: f64,
    e1: f64,
    e0: f64,
    d: [[f64; 2]; 2],
    pit: f64,
    p1t: f64,
    p0t: f64,
}

impl Errs {
    fn new(t: &NuisanceValues, w: &NuisanceValues) -> Errs {
        let mut d = [[0.0; 2]; 2];
        for z in 0..2 {
            for s in 0..2 {
                d[z][s] = w.mu[z][s] - t.mu[z][s];
            }
        }
        Errs { ep: w.pi - t.pi, e1: w.p1 - t.p1, e0: w.p0 - t.p0, d, pit: w.pi, p1t: w.p1, p0t: w.p0 }
    }
}

/// `E[N~ | x] - tau E[G~ | x]` with `N = phi1 - phi0`, including third-order terms.
fn numerator_bias(t: &NuisanceValues, w: &NuisanceValues, u: Stratum) -> f64 {
    let Errs { ep, e1, e0, d, pit, p1t, p0t } = Errs::new(t, w);
    let q = (1.0 - p1t) / (1.0 - p0t);
    let (d00, d01, d10, d11) = (d[0][0], d[0][1], d[1][0], d[1][1]);
    match u {
        Stratum::NeverTaker => {
            (1.0 - p1t) / (1.0 - pit) * ep * d00 + (1.0 - p1t) / pit * ep * d10 + q * e0 * d00 - e1 * d00
                + ep * e1 * d00 / pit
                + q * ep * e0 * d00 / (1.0 - pit)
        }
        Stratum::Complier => {
            let et = p1t - p0t;
            let r = p0t / p1t;
            -r * e1 * d11 + e0 * d11 + e1 * d00 - q * e0 * d00
                + et / pit * ep * d11
                + et / (1.0 - pit) * ep * d00
                + ep / pit * (r * e1 * d11 - e1 * d00)
                + ep / (1.0 - pit) * (e0 * d11 - q * e0 * d00)
        }
        Stratum::AlwaysTaker => {
            let r = p0t / p1t;
            r * e1 * d11 - e0 * d11 + p0t / pit * ep * d11 + p0t / (1.0 - pit) * ep * d01
                - r * e1 * ep * d11 / pit
                - ep * e0 * d11 / (1.0 - pit)
        }
    }
}

/// `E[g~^u | x]`.
fn denominator_limit(t: &NuisanceValues, w: &NuisanceValues, u: Stratum) -> f64 {
    let Errs { ep, e1, e0, pit, .. } = Errs::new(t, w);
    match u {
        Stratum::NeverTaker => (1.0 - t.p1) - ep / pit * e1,
        Stratum::Complier => t.p1 + ep / pit * e1 - t.p0 + ep / (1.0 - pit) * e0,
        Stratum::AlwaysTaker => t.p0 - ep / (1.0 - pit) * e0,
    }
}

/// EIF-ratio plug-in bias `E[N~|x] / E[g~|x] - tau^u(x)`.
pub fn bias_eif_closed(truth: &NuisanceValues, tilde: &Tilde, u: Stratum) -> Result<f64> {
    check_overlap(&tilde.nv, u, tilde.eps)?;
    let den = denominator_limit(truth, &tilde.nv, u);
    if !(den > 0.0) {
        return Err(CpceError::Overlap(format!("denominator limit {den} is not positive")));
    }
    Ok(numerator_bias(truth, &tilde.nv, u) / den)
}

/// One-step plug-in bias `[N_b + e_tau (e~ - E[g~|x])] / e~^u`.
pub fn bias_onestep_closed(truth: &NuisanceValues, tilde: &Tilde, u: Stratum) -> Result<f64> {
    check_overlap(&tilde.nv, u, tilde.eps)?;
    let w = &tilde.nv;
    let et = principal_score(w.p1, w.p0, u)?;
    if et < tilde.eps {
        return Err(CpceError::Overlap(format!("perturbed principal score {et} below {}", tilde.eps)));
    }
    let e_tau = tilde.prelim(u) - truth.contrast(u);
    let Errs { ep, e1, e0, pit, .. } = Errs::new(truth, w);
    let c = match u {
        Stratum::NeverTaker => -e1 * truth.pi / pit,
        Stratum::Complier => e1 * truth.pi / pit - e0 * (1.0 - truth.pi) / (1.0 - pit),
        Stratum::AlwaysTaker => e0 * (1.0 - truth.pi) / (1.0 - pit),
    };
    debug_assert!((c - (et - denominator_limit(truth, w, u))).abs() < 1e-9 * (1.0 + ep.abs()));
    Ok((numerator_bias(truth, w, u) + e_tau * c) / et)
}

/// Closed-form bias for a family.
pub fn bias_closed(family: Family, truth: &NuisanceValues, tilde: &Tilde, u: Stratum) -> Result<f64> {
    match family {
        Family::Subset => bias_subset_closed(truth, tilde, u),
        Family::Eif => bias_eif_closed(truth, tilde, u),
        Family::OneStep => bias_onestep_closed(truth, tilde, u),
    }
}

/// Monte-Carlo estimate of a plug-in limit parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub se: f64,
    /// Draws contributing (in-subset draws for the subset family).
    pub n_used: usize,
}

#[derive(Default)]
struct Moments {
    n: usize,
    s: f64,
    ss: f64,
}

impl Moments {
    fn push(&mut self, v: f64) {
        self.n += 1;
        self.s += v;
        self.ss += v * v;
    }

    fn mean(&self) -> f64 {
        self.s / self.n as f64
    }

    fn var(&self) -> f64 {
        let n = self.n as f64;
        ((self.ss - n * self.mean().powi(2)) / (n - 1.0)).max(0.0)
    }
}

/// Plug-in limits of the subset, EIF and one-step families at `x`, from
/// `n_mc` conditional draws shared across the three families.
pub fn plugin_limits_mc(
    dgp: DgpKind,
    noise_sd: f64,
    pert: &Perturbation,
    x: &[f64],
    u: Stratum,
    n_mc: usize,
    seed: u64,
    eps: f64,
) -> Result<[McEstimate; 3]> {
    let truth = dgp.nuisances(x);
    let tilde = pert.apply(&truth, x, eps);
    let w = tilde.nv;
    let pi_s = tilde.pi_s(u)?;
    let prelim = tilde.prelim(u);
    let e_t = principal_score(w.p1, w.p0, u)?;
    if e_t < eps {
        return Err(CpceError::Overlap(format!("perturbed principal score {e_t} below {eps}")));
    }
    let contrast = w.contrast(u);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sub = Moments::default();
    let mut one = Moments::default();
    let (mut sn, mut sg, mut snn, mut sgg, mut sng) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for _ in 0..n_mc {
        let (z, s, y) = draw_obs(dgp, &truth, noise_sd, &mut rng);
        let obs = Obs { y, s, z };
        if u.in_subset(s, z) {
            let sel = match u {
                Stratum::NeverTaker => w.mu(z, 0),
                Stratum::Complier => w.mu(z, z),
                Stratum::AlwaysTaker => w.mu(z, 1),
            };
            sub.push((z as f64 - pi_s) / (pi_s * (1.0 - pi_s)) * (y - sel) + contrast);
        }
        let parts = eif_parts(&obs, &w, u);
        let (n, g) = (parts.diff(), parts.g);
        sn += n;
        sg += g;
        snn += n * n;
        sgg += g * g;
        sng += n * g;
        one.push(prelim + (n - prelim * g) / e_t);
    }
    if sub.n < 2 {
        return Err(CpceError::EmptyCell(format!("fewer than two draws in subset {u}")));
    }
    let m = n_mc as f64;
    let (nb, gb) = (sn / m, sg / m);
    let ratio = nb / gb;
    let var_n = (snn - m * nb * nb) / (m - 1.0);
    let var_g = (sgg - m * gb * gb) / (m - 1.0);
    let cov = (sng - m * nb * gb) / (m - 1.0);
    let var_lin = (var_n + ratio * ratio * var_g - 2.0 * ratio * cov).max(0.0);
    Ok([
        McEstimate { mean: sub.mean(), se: (sub.var() / sub.n as f64).sqrt(), n_used: sub.n },
        McEstimate { mean: ratio, se: (var_lin / m).sqrt() / gb.abs(), n_used: n_mc },
        McEstimate { mean: one.mean(), se: (one.var() / m).sqrt(), n_used: n_mc },
    ])
}

/// Conditional moments at exact nuisances, each paired with its target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IdentificationMc {
    pub tau: f64,
    pub score: f64,
    /// `E[phi | S_u, x]`.
    pub subset: McEstimate,
    /// `E[zeta | x]` for the one-step pseudo-outcome.
    pub onestep: McEstimate,
    /// `E[g | x]`.
    pub g: McEstimate,
    /// `E[phi_1 - phi_0 | x]`, target `score * tau`.
    pub numerator: McEstimate,
}

impl IdentificationMc {
    /// Largest `|estimate - target| / se` over the four moments.
    pub fn max_z(&self) -> f64 {
        [
            (self.subset, self.tau),
            (self.onestep, self.tau),
            (self.g, self.score),
            (self.numerator, self.score * self.tau),
        ]
        .iter()
        .map(|(m, t)| (m.mean - t).abs() / m.se)
        .fold(0.0, f64::max)
    }
}

/// Monte-Carlo check of the identification formulas at `x` with the true
/// nuisances plugged in.
pub fn identification_mc(dgp: DgpKind, x: &[f64], u: Stratum, n_mc: usize, seed: u64) -> Result<IdentificationMc> {
    let truth = dgp.nuisances(x);
    let tau = dgp.tau(x, u);
    let score = principal_score(truth.p1, truth.p0, u)?;
    let pi_s = subset_propensity(truth.pi, truth.p1, truth.p0, u)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sub, mut one, mut g, mut num) = (Moments::default(), Moments::default(), Moments::default(), Moments::default());
    for _ in 0..n_mc {
        let (z, s, y) = draw_obs(dgp, &truth, dgp.default_noise_sd(), &mut rng);
        let obs = Obs { y, s, z };
        if u.in_subset(s, z) {
            let sel = match u {
                Stratum::NeverTaker => truth.mu(z, 0),
                Stratum::Complier => truth.mu(z, z),
                Stratum::AlwaysTaker => truth.mu(z, 1),
            };
            sub.push((z as f64 - pi_s) / (pi_s * (1.0 - pi_s)) * (y - sel) + truth.contrast(u));
        }
        let parts = eif_parts(&obs, &truth, u);
        one.push(tau + (parts.diff() - tau * parts.g) / score);
        g.push(parts.g);
        num.push(parts.diff());
    }
    if sub.n < 2 {
        return Err(CpceError::EmptyCell(format!("fewer than two draws in subset {u}")));
    }
    let est = |m: &Moments| McEstimate { mean: m.mean(), se: (m.var() / m.n as f64).sqrt(), n_used: m.n };
    Ok(IdentificationMc { tau, score, subset: est(&sub), onestep: est(&one), g: est(&g), numerator: est(&num) })
}

pub const FAMILIES: [Family; 3] = [Family::Subset, Family::Eif, Family::OneStep];

/// Plug-in limit of one family at `x`.
pub fn plugin_limit_mc(
    dgp: DgpKind,
    pert: &Perturbation,
    family: Family,
    x: &[f64],
    u: Stratum,
    n_mc: usize,
    seed: u64,
) -> Result<McEstimate> {
    let all = plugin_limits_mc(dgp, dgp.default_noise_sd(), pert, x, u, n_mc, seed, DEFAULT_EPS)?;
    Ok(all[FAMILIES.iter().position(|f| *f == family).expect("family listed")])
}

/// Sweep settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub dgp: DgpKind,
    pub regimes: Vec<Perturbation>,
    pub strata: Vec<Stratum>,
    pub points: Vec<Vec<f64>>,
    pub n_mc: usize,
    pub seed: u64,
    pub eps: f64,
    /// Agreement tolerance in MC standard errors.
    pub tol_se: f64,
    /// Detection threshold in MC standard errors for perturbed regimes.
    pub detect_se: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            dgp: DgpKind::Study1 { scenario: 1 },
            regimes: default_regimes(),
            strata: Stratum::ALL.to_vec(),
            points: default_points(),
            n_mc: 1_000_000,
            seed: 20240601,
            eps: DEFAULT_EPS,
            tol_se: 3.0,
            detect_se: 5.0,
        }
    }
}

/// Five fixed interior points of the unit cube.
pub fn default_points() -> Vec<Vec<f64>> {
    vec![
        vec![0.2, 0.3, 0.4, 0.5],
        vec![0.5, 0.5, 0.5, 0.5],
        vec![0.8, 0.2, 0.6, 0.3],
        vec![0.3, 0.7, 0.2, 0.8],
        vec![0.65, 0.45, 0.85, 0.15],
    ]
}

/// One `(regime, stratum, point, family)` line of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub regime: String,
    pub stratum: Stratum,
    pub point: usize,
    pub family: Family,
    pub closed_bias: f64,
    pub mc_bias: f64,
    pub mc_se: f64,
    /// The family is unbiased under this regime.
    pub protected: bool,
    /// `|mc_bias - closed_bias| < tol_se * mc_se`.
    pub agrees: bool,
    /// `|mc_bias| > detect_se * mc_se`.
    pub detected: bool,
}

impl SweepRow {
    /// Protected rows must have a zero closed form and an undetectable MC bias.
    pub fn protected_pass(&self, tol_se: f64) -> bool {
        self.closed_bias == 0.0 && self.mc_bias.abs() < tol_se * self.mc_se
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub config: SweepConfig,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// Every protected row passes.
    pub fn protected_ok(&self) -> bool {
        self.rows.iter().filter(|r| r.protected).all(|r| r.protected_pass(self.config.tol_se))
    }

    /// Closed forms agree with the MC oracle on every row.
    pub fn agreement_ok(&self) -> bool {
        self.rows.iter().all(|r| r.agrees)
    }

    /// For each unprotected `(regime, family, stratum)`, some point shows a detectable bias.
    pub fn perturbed_detected(&self) -> bool {
        let mut groups: std::collections::BTreeMap<(String, String, String), bool> = Default::default();
        for r in self.rows.iter().filter(|r| !r.protected) {
            let key = (r.regime.clone(), format!("{:?}", r.family), r.stratum.to_string());
            *groups.entry(key).or_insert(false) |= r.detected;
        }
        groups.values().all(|&v| v)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "regime", "stratum", "point", "family", "closed_bias", "mc_bias", "mc_se", "expected", "agrees", "detected",
            "status",
        ])?;
        for r in &self.rows {
            let expected = if r.protected { "pass" } else { "expected-fail" };
            let status = if r.protected {
                if r.protected_pass(self.config.tol_se) { "pass" } else { "FAIL" }
            } else if r.detected {
                "biased"
            } else {
                "undetected"
            };
            w.write_record([
                r.regime.clone(),
                r.stratum.to_string(),
                r.point.to_string(),
                family_name(r.family).to_string(),
                fmt_f64(r.closed_bias),
                fmt_f64(r.mc_bias),
                fmt_f64(r.mc_se),
                expected.to_string(),
                r.agrees.to_string(),
                r.detected.to_string(),
                status.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Human-readable pass/fail summary.
    pub fn summary(&self) -> String {
        let protected = self.rows.iter().filter(|r| r.protected).count();
        let failed = self.rows.iter().filter(|r| r.protected && !r.protected_pass(self.config.tol_se)).count();
        let disagree = self.rows.iter().filter(|r| !r.agrees).count();
        format!(
            "protected checks: {}/{} pass\nclosed form vs MC agreement: {}/{} rows within {} SE\nperturbed regimes detected: {}\n",
            protected - failed,
            protected,
            self.rows.len() - disagree,
            self.rows.len(),
            self.config.tol_se,
            if self.perturbed_detected() { "yes" } else { "no" }
        )
    }
}

pub fn family_name(f: Family) -> &'static str {
    match f {
        Family::Subset => "subset",
        Family::Eif => "eif",
        Family::OneStep => "onestep",
    }
}

/// Closed-form and MC bias for every `(regime, stratum, point, family)`.
/// Draws are shared across regimes (common random numbers).
pub fn robustness_sweep(cfg: &SweepConfig) -> Result<SweepReport> {
    if cfg.n_mc < 2 {
        return Err(CpceError::Config("n_mc must be at least 2".into()));
    }
    let p = cfg.dgp.p();
    if cfg.points.iter().any(|x| x.len() != p) {
        return Err(CpceError::Config(format!("sweep points must have {p} coordinates")));
    }
    let mut tasks = Vec::new();
    for (ri, reg) in cfg.regimes.iter().enumerate() {
        for (ui, &u) in cfg.strata.iter().enumerate() {
            for (pi, x) in cfg.points.iter().enumerate() {
                tasks.push((ri, reg, ui, u, pi, x));
            }
        }
    }
    let noise = cfg.dgp.default_noise_sd();
    let chunks: Vec<Result<Vec<SweepRow>>> = tasks
        .par_iter()
        .map(|&(_, reg, ui, u, pi, x)| {
            let seed = derive_seed(cfg.seed, &[ui as u64, pi as u64]);
            let truth = cfg.dgp.nuisances(x);
            let tilde = reg.apply(&truth, x, cfg.eps);
            let tau = truth.contrast(u);
            let mc = plugin_limits_mc(cfg.dgp, noise, reg, x, u, cfg.n_mc, seed, cfg.eps)?;
            FAMILIES
                .iter()
                .zip(mc)
                .map(|(&family, m)| {
                    let closed = bias_closed(family, &truth, &tilde, u)?;
                    let mc_bias = m.mean - tau;
                    Ok(SweepRow {
                        regime: reg.tag.clone(),
                        stratum: u,
                        point: pi,
                        family,
                        closed_bias: closed,
                        mc_bias,
                        mc_se: m.se,
                        protected: reg.protects(family),
                        agrees: (mc_bias - closed).abs() < cfg.tol_se * m.se,
                        detected: mc_bias.abs() > cfg.detect_se * m.se,
                    })
                })
                .collect()
        })
        .collect();
    let mut rows = Vec::new();
    for c in chunks {
        rows.extend(c?);
    }
    Ok(SweepReport { config: cfg.clone(), rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identification::{pseudo_onestep, pseudo_subset};

    fn truth() -> NuisanceValues {
        NuisanceValues { pi: 0.45, p1: 0.7, p0: 0.25, mu: [[0.3, -0.2], [0.9, 0.6]] }
    }

    /// Exact conditional expectations by enumerating the four observed cells;
    /// every pseudo-outcome is affine in `Y`, so `Y = mu_zs(x)` suffices.
    fn enumerate(t: &NuisanceValues, tl: &Tilde, u: Stratum) -> [f64; 3] {
        let (mut sub_num, mut sub_den, mut n, mut g, mut one) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let pi_s = tl.pi_s(u).unwrap();
        let prelim = tl.prelim(u);
        for z in 0..2u8 {
            for s in 0..2u8 {
                let pz = if z == 1 { t.pi } else { 1.0 - t.pi };
                let ps = if s == 1 { t.p(z) } else { 1.0 - t.p(z) };
                let w = Obs { y: t.mu(z, s), s, z };
                let prob = pz * ps;
                if u.in_subset(s, z) {
                    sub_num += prob * pseudo_subset(&w, &tl.nv, pi_s, u, 0.0, 0).unwrap().value;
                    sub_den += prob;
                }
                let parts = eif_parts(&w, &tl.nv, u);
                n += prob * parts.diff();
                g += prob * parts.g;
                one += prob * pseudo_onestep(&w, &tl.nv, prelim, u, 0.0, 0).unwrap().value;
            }
        }
        [sub_num / sub_den, n / g, one]
    }

    fn perturbations() -> Vec<Perturbation> {
        let mut v = default_regimes();
        v.push(Perturbation {
            tag: "odd".into(),
            pi: -0.07,
            p1: -0.05,
            p0: 0.04,
            mu: [[-0.2, 0.05], [0.15, 0.3]],
            subset_pi: -0.03,
            prelim: -0.2,
            shape: Shape::Wave,
        });
        v
    }

    #[test]
    fn closed_forms_match_exact_enumeration() {
        let t = truth();
        let x = [0.3, 0.6];
        for pert in perturbations() {
            for c in [0.2, 0.5, 1.0] {
                let tl = pert.scaled(c).apply(&t, &x, 0.01);
                for u in Stratum::ALL {
                    let exact = enumerate(&t, &tl, u);
                    let tau = t.contrast(u);
                    for (k, f) in FAMILIES.iter().enumerate() {
                        let closed = bias_closed(*f, &t, &tl, u).unwrap();
                        assert!(
                            (exact[k] - tau - closed).abs() < 1e-12,
                            "{} {u} {:?} c={c}: exact {} closed {closed}",
                            pert.tag,
                            f,
                            exact[k] - tau
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn protected_regimes_give_exact_zero() {
        let t = truth();
        for pert in default_regimes() {
            let tl = pert.apply(&t, &[0.5], 0.01);
            for u in Stratum::ALL {
                for f in FAMILIES {
                    if pert.protects(f) {
                        assert_eq!(bias_closed(f, &t, &tl, u).unwrap().abs(), 0.0, "{} {u} {f:?}", pert.tag);
                    }
                }
            }
        }
    }

    #[test]
    fn subset_hand_example() {
        // pi_S = 0.5 exactly, shifted to 0.55
        let t = NuisanceValues { pi: 0.5, p1: 0.6, p0: 0.4, mu: [[0.0; 2]; 2] };
        let pert = Perturbation { subset_pi: 0.05, mu: [[-0.1, 0.0], [0.0, 0.1]], ..Default::default() };
        let tl = pert.apply(&t, &[0.0], 0.01);
        let b = bias_subset_closed(&t, &tl, Stratum::Complier).unwrap();
        let hand = 0.05 * 0.1 / 0.55 + 0.05 * -0.1 / 0.45;
        assert!((b - hand).abs() < 1e-15);
        assert!((b + 0.0020202).abs() < 1e-6);
    }

    #[test]
    fn frozen_denominator_linearity() {
        // For fixed pi~_S and mu errors, the identity is linear in (pi~_S - pi_S).
        let ps = 0.4;
        let pt = 0.47;
        let f = |shift: f64| shift * 0.1 / pt + shift * -0.05 / (1.0 - pt);
        let base = f(pt - ps);
        for c in [0.25, 0.5, 2.0] {
            assert!((f(c * (pt - ps)) - c * base).abs() < 1e-15);
        }
    }

    #[test]
    fn overlap_errors() {
        let t = truth();
        let tl = Perturbation { p1: -0.5, ..Default::default() }.apply(&t, &[0.0], 0.01);
        assert!(matches!(bias_eif_closed(&t, &tl, Stratum::Complier), Err(CpceError::Overlap(_))));
    }

    #[test]
    fn mc_se_scales_with_root_n() {
        let x = [0.5, 0.5, 0.5, 0.5];
        let pert = all_perturbed();
        let dgp = DgpKind::Study1 { scenario: 1 };
        let a = plugin_limit_mc(dgp, &pert, Family::OneStep, &x, Stratum::Complier, 40_000, 1).unwrap();
        let b = plugin_limit_mc(dgp, &pert, Family::OneStep, &x, Stratum::Complier, 80_000, 2).unwrap();
        let ratio = a.se / b.se;
        assert!((ratio - 2f64.sqrt()).abs() < 0.1, "ratio {ratio}");
    }
}
