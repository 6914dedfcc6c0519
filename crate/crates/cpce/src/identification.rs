//! Identification algebra: principal scores, subset propensities, psi-scores,
//! EIF components and the subset, EIF-ratio and one-step pseudo-outcomes.
//!
//! Everything here is a pure function of one unit's `(Y, S, Z)` and the
//! nuisance values at that unit's covariates.

use serde::{Deserialize, Serialize};

use crate::data::{Obs, Stratum};
use crate::error::{CpceError, Result};

/// Nuisance values at a single covariate point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NuisanceValues {
    /// `P(Z = 1 | x)`.
    pub pi: f64,
    /// `P(S = 1 | Z = 1, x)`.
    pub p1: f64,
    /// `P(S = 1 | Z = 0, x)`.
    pub p0: f64,
    /// `E[Y | Z = z, S = s, x]`, indexed `[z][s]`.
    pub mu: [[f64; 2]; 2],
}

impl NuisanceValues {
    pub fn mu(&self, z: u8, s: u8) -> f64 {
        self.mu[z as usize][s as usize]
    }

    pub fn p(&self, z: u8) -> f64 {
        if z == 1 { self.p1 } else { self.p0 }
    }

    /// `P(Z = a | x)`.
    pub fn arm_prob(&self, a: u8) -> f64 {
        if a == 1 { self.pi } else { 1.0 - self.pi }
    }

    /// Outcome-regression contrast identifying `tau^u(x)`.
    pub fn contrast(&self, u: Stratum) -> f64 {
        match u {
            Stratum::NeverTaker => self.mu[1][0] - self.mu[0][0],
            Stratum::Complier => self.mu[1][1] - self.mu[0][0],
            Stratum::AlwaysTaker => self.mu[1][1] - self.mu[0][1],
        }
    }
}

/// Anything that yields nuisance values at a covariate point.
pub trait NuisanceBundle: Send + Sync {
    fn eval(&self, x: &[f64]) -> NuisanceValues;
}

/// Principal score `e^u` from `(p1, p0)`; errors when `p1 < p0`.
pub fn principal_score(p1: f64, p0: f64, u: Stratum) -> Result<f64> {
    if p1 < p0 {
        return Err(CpceError::Monotonicity { p1, p0 });
    }
    Ok(principal_score_unchecked(p1, p0, u))
}

fn principal_score_unchecked(p1: f64, p0: f64, u: Stratum) -> f64 {
    match u {
        Stratum::NeverTaker => 1.0 - p1,
        Stratum::Complier => p1 - p0,
        Stratum::AlwaysTaker => p0,
    }
}

/// Principal score floored at `eps`; the flag reports whether flooring
/// was needed.
pub fn principal_score_floored(p1: f64, p0: f64, u: Stratum, eps: f64) -> (f64, bool) {
    let e = principal_score_unchecked(p1, p0, u);
    if e < eps { (eps, true) } else { (e, false) }
}

/// Subset propensity `P(Z = 1 | S_u, x)` composed from `(pi, p1, p0)`.
pub fn subset_propensity(pi: f64, p1: f64, p0: f64, u: Stratum) -> Result<f64> {
    let (num, other) = match u {
        Stratum::Complier => (pi * p1, (1.0 - pi) * (1.0 - p0)),
        Stratum::NeverTaker => (pi * (1.0 - p1), (1.0 - pi) * (1.0 - p0)),
        Stratum::AlwaysTaker => (pi * p1, (1.0 - pi) * p0),
    };
    let den = num + other;
    if !(den > 0.0) || !den.is_finite() {
        return Err(CpceError::Overlap(format!("subset {u} has zero probability")));
    }
    Ok(num / den)
}

/// The functions `f(Y, S)` entering psi-scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FKind {
    S,
    OneMinusS,
    YS,
    YOneMinusS,
}

impl FKind {
    pub fn value(self, w: &Obs) -> f64 {
        let s = w.s as f64;
        match self {
            FKind::S => s,
            FKind::OneMinusS => 1.0 - s,
            FKind::YS => w.y * s,
            FKind::YOneMinusS => w.y * (1.0 - s),
        }
    }

    /// `E[f | X = x, Z = a]` implied by the nuisance values.
    pub fn cond_mean(self, a: u8, nv: &NuisanceValues) -> f64 {
        let pa = nv.p(a);
        match self {
            FKind::S => pa,
            FKind::OneMinusS => 1.0 - pa,
            FKind::YS => nv.mu(a, 1) * pa,
            FKind::YOneMinusS => nv.mu(a, 0) * (1.0 - pa),
        }
    }
}

/// Inverse-probability factors `1 / P(Z = a | x)` applied in psi-scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ipw {
    pub w1: f64,
    pub w0: f64,
}

impl Ipw {
    pub fn from_pi(pi: f64) -> Ipw {
        Ipw { w1: 1.0 / pi, w0: 1.0 / (1.0 - pi) }
    }

    fn arm(&self, a: u8) -> f64 {
        if a == 1 { self.w1 } else { self.w0 }
    }

    fn with_arm(&self, a: u8, v: f64) -> Ipw {
        if a == 1 { Ipw { w1: v, ..*self } } else { Ipw { w0: v, ..*self } }
    }
}

fn psi_with(a: u8, f: FKind, w: &Obs, nv: &NuisanceValues, ipw: &Ipw) -> f64 {
    let m = f.cond_mean(a, nv);
    if w.z == a { ipw.arm(a) * (f.value(w) - m) + m } else { m }
}

/// `psi_{a,f}(W) = 1{Z=a} / P(Z=a|X) (f(W) - E[f|X,Z=a]) + E[f|X,Z=a]`.
pub fn psi_score(a: u8, f: FKind, w: &Obs, nv: &NuisanceValues) -> f64 {
    psi_with(a, f, w, nv, &Ipw::from_pi(nv.pi))
}

/// `(phi_{1,u}, phi_{0,u}, g^u)` for one unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EifParts {
    pub phi1: f64,
    pub phi0: f64,
    pub g: f64,
}

impl EifParts {
    pub fn diff(&self) -> f64 {
        self.phi1 - self.phi0
    }
}

fn eif_parts_with(w: &Obs, nv: &NuisanceValues, u: Stratum, ipw: &Ipw) -> EifParts {
    let psi = |a: u8, f: FKind| psi_with(a, f, w, nv, ipw);
    let (p1, p0) = (nv.p1, nv.p0);
    let e = principal_score_unchecked(p1, p0, u);
    let (mu11, mu00) = (nv.mu(1, 1), nv.mu(0, 0));
    match u {
        Stratum::Complier => EifParts {
            phi1: e / p1 * psi(1, FKind::YS) - mu11 * (psi(0, FKind::S) - p0 / p1 * psi(1, FKind::S)),
            phi0: e / (1.0 - p0) * psi(0, FKind::YOneMinusS)
                - mu00 * (psi(1, FKind::OneMinusS) - (1.0 - p1) / (1.0 - p0) * psi(0, FKind::OneMinusS)),
            g: psi(1, FKind::S) - psi(0, FKind::S),
        },
        Stratum::AlwaysTaker => EifParts {
            phi1: e / p1 * psi(1, FKind::YS) + mu11 * (psi(0, FKind::S) - p0 / p1 * psi(1, FKind::S)),
            phi0: psi(0, FKind::YS),
            g: psi(0, FKind::S),
        },
        Stratum::NeverTaker => EifParts {
            phi1: psi(1, FKind::YOneMinusS),
            phi0: e / (1.0 - p0) * psi(0, FKind::YOneMinusS)
                + mu00 * (psi(1, FKind::OneMinusS) - (1.0 - p1) / (1.0 - p0) * psi(0, FKind::OneMinusS)),
            g: psi(1, FKind::OneMinusS),
        },
    }
}

fn check_overlap(nv: &NuisanceValues, eps: f64) -> Result<()> {
    let ok = |v: f64| v >= eps && v <= 1.0 - eps;
    if !ok(nv.pi) || !ok(nv.p1) || !ok(nv.p0) {
        return Err(CpceError::Overlap(format!(
            "pi = {}, p1 = {}, p0 = {} outside [{eps}, {}]",
            nv.pi,
            nv.p1,
            nv.p0,
            1.0 - eps
        )));
    }
    Ok(())
}

/// EIF components without overlap checks (estimation paths, where inputs
/// are already clipped).
pub fn eif_parts(w: &Obs, nv: &NuisanceValues, u: Stratum) -> EifParts {
    eif_parts_with(w, nv, u, &Ipw::from_pi(nv.pi))
}

/// EIF components with overlap checks on `pi`, `p1`, `p0`.
pub fn eif_components(w: &Obs, nv: &NuisanceValues, u: Stratum, eps: f64) -> Result<EifParts> {
    check_overlap(nv, eps)?;
    Ok(eif_parts_with(w, nv, u, &Ipw::from_pi(nv.pi)))
}

/// Which pseudo-outcome family produced a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Subset,
    Eif,
    OneStep,
}

/// A unit's pseudo-outcome, stored in the affine form
/// `value = base + ipw * slope` in the unit's own inverse-probability factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoOutcomeRecord {
    pub value: f64,
    pub in_subset: bool,
    pub stratum: Stratum,
    pub unit_index: usize,
    pub arm: u8,
    pub ipw: f64,
    pub base: f64,
    pub slope: f64,
}

fn record_from<F: Fn(&Ipw) -> f64>(
    eval: F,
    w: &Obs,
    ipw: Ipw,
    u: Stratum,
    in_subset: bool,
    unit_index: usize,
) -> PseudoOutcomeRecord {
    let a = w.z;
    let base = eval(&ipw.with_arm(a, 0.0));
    let slope = eval(&ipw.with_arm(a, 1.0)) - base;
    PseudoOutcomeRecord {
        value: eval(&ipw),
        in_subset,
        stratum: u,
        unit_index,
        arm: a,
        ipw: ipw.arm(a),
        base,
        slope,
    }
}

/// Subset pseudo-outcome with subset propensity `pi_s`; errors unless
/// `pi_s` lies in `[eps, 1 - eps]`.
pub fn pseudo_subset(
    w: &Obs,
    nv: &NuisanceValues,
    pi_s: f64,
    u: Stratum,
    eps: f64,
    unit_index: usize,
) -> Result<PseudoOutcomeRecord> {
    if !(pi_s >= eps && pi_s <= 1.0 - eps) {
        return Err(CpceError::Overlap(format!("subset propensity {pi_s} outside [{eps}, {}]", 1.0 - eps)));
    }
    let selected = match u {
        Stratum::NeverTaker => nv.mu(w.z, 0),
        Stratum::Complier => nv.mu(w.z, w.z),
        Stratum::AlwaysTaker => nv.mu(w.z, 1),
    };
    let contrast = nv.contrast(u);
    let resid = w.y - selected;
    let z = w.z as f64;
    let value = (z - pi_s) / (pi_s * (1.0 - pi_s)) * resid + contrast;
    let (ipw, slope) = if w.z == 1 { (1.0 / pi_s, resid) } else { (1.0 / (1.0 - pi_s), -resid) };
    Ok(PseudoOutcomeRecord {
        value,
        in_subset: u.in_subset(w.s, w.z),
        stratum: u,
        unit_index,
        arm: w.z,
        ipw,
        base: contrast,
        slope,
    })
}

/// One-step value given an explicit principal score `e_u`.
fn onestep_record(w: &Obs, nv: &NuisanceValues, prelim: f64, e_u: f64, u: Stratum, unit_index: usize) -> PseudoOutcomeRecord {
    record_from(
        |ipw| {
            let parts = eif_parts_with(w, nv, u, ipw);
            prelim + (parts.diff() - prelim * parts.g) / e_u
        },
        w,
        Ipw::from_pi(nv.pi),
        u,
        true,
        unit_index,
    )
}

/// One-step pseudo-outcome
/// `prelim + (phi1 - phi0 - prelim * g) / e^u(x)`; errors when `e^u < eps`.
pub fn pseudo_onestep(
    w: &Obs,
    nv: &NuisanceValues,
    prelim: f64,
    u: Stratum,
    eps: f64,
    unit_index: usize,
) -> Result<PseudoOutcomeRecord> {
    check_overlap(nv, eps)?;
    let e = principal_score(nv.p1, nv.p0, u)?;
    if e < eps {
        return Err(CpceError::Overlap(format!("principal score {e} below {eps}")));
    }
    Ok(onestep_record(w, nv, prelim, e, u, unit_index))
}

/// Estimation-path variant: the principal score is floored at `eps` rather
/// than rejected. Returns the record and whether flooring occurred.
pub fn pseudo_onestep_floored(
    w: &Obs,
    nv: &NuisanceValues,
    prelim: f64,
    u: Stratum,
    eps: f64,
    unit_index: usize,
) -> (PseudoOutcomeRecord, bool) {
    let (e, repaired) = principal_score_floored(nv.p1, nv.p0, u, eps);
    (onestep_record(w, nv, prelim, e, u, unit_index), repaired)
}

/// EIF-ratio pseudo-outcome `(phi1 - phi0) / max(m_g, eps)`.
pub fn pseudo_eif_ratio(
    w: &Obs,
    nv: &NuisanceValues,
    m_g: f64,
    u: Stratum,
    eps: f64,
    unit_index: usize,
) -> Result<PseudoOutcomeRecord> {
    let den = m_g.max(eps);
    if !(den >= eps) || !den.is_finite() {
        return Err(CpceError::Overlap(format!("denominator {m_g} unusable")));
    }
    Ok(record_from(
        |ipw| eif_parts_with(w, nv, u, ipw).diff() / den,
        w,
        Ipw::from_pi(nv.pi),
        u,
        true,
        unit_index,
    ))
}

/// Grouping convention for Hajek normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HajekGrouping {
    /// Groups `S_u ∩ {Z=1}` and `S_u ∩ {Z=0}`; out-of-subset records untouched.
    SubsetArm,
    /// Groups `{Z=1}` and `{Z=0}`.
    Arm,
}

impl HajekGrouping {
    pub fn for_family(f: Family) -> HajekGrouping {
        match f {
            Family::Subset => HajekGrouping::SubsetArm,
            Family::Eif | Family::OneStep => HajekGrouping::Arm,
        }
    }
}

/// Divide each record's inverse-probability factor by its group mean and
/// recompute the value.
pub fn hajek_normalize(records: &[PseudoOutcomeRecord], grouping: HajekGrouping) -> Result<Vec<PseudoOutcomeRecord>> {
    let member = |r: &PseudoOutcomeRecord| match grouping {
        HajekGrouping::SubsetArm => r.in_subset,
        HajekGrouping::Arm => true,
    };
    let mut sums = [0.0f64; 2];
    let mut counts = [0usize; 2];
    for r in records.iter().filter(|r| member(r)) {
        sums[r.arm as usize] += r.ipw;
        counts[r.arm as usize] += 1;
    }
    if counts.contains(&0) {
        return Err(CpceError::EmptyCell("a Hajek normalization group is empty".into()));
    }
    let means = [sums[0] / counts[0] as f64, sums[1] / counts[1] as f64];
    Ok(records
        .iter()
        .map(|r| {
            if !member(r) {
                return *r;
            }
            let ipw = r.ipw / means[r.arm as usize];
            PseudoOutcomeRecord { ipw, value: r.base + ipw * r.slope, ..*r }
        })
        .collect())
}
