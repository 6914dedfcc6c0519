//! Data-generating processes with exact nuisance functions.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{SampleTable, Stratum};
use crate::error::{CpceError, Result};
use crate::identification::{NuisanceBundle, NuisanceValues};
use crate::learners::{clip_probability, sigmoid};

/// Which data-generating process to draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum DgpKind {
    Toy,
    Study1 { scenario: u8 },
    Study2,
    Study2NonlinearTau,
    Study3,
    /// Synthetic stand-in for a 20-covariate randomized trial with a binary outcome.
    HotspotSynthetic,
}

impl DgpKind {
    pub fn study1(scenario: u8) -> Result<DgpKind> {
        if (1..=4).contains(&scenario) {
            Ok(DgpKind::Study1 { scenario })
        } else {
            Err(CpceError::Config(format!("study1 scenario must be 1..=4, got {scenario}")))
        }
    }

    /// Number of covariates.
    pub fn p(self) -> usize {
        match self {
            DgpKind::Toy => 1,
            DgpKind::HotspotSynthetic => HOTSPOT_P,
            _ => 4,
        }
    }

    pub fn x_names(self) -> Vec<String> {
        (1..=self.p()).map(|j| format!("x{j}")).collect()
    }

    pub fn default_noise_sd(self) -> f64 {
        match self {
            DgpKind::HotspotSynthetic => 0.0,
            _ => 0.2,
        }
    }

    /// Binary outcomes are drawn as Bernoulli(mu_zs); otherwise Gaussian noise is added.
    pub fn binary_outcome(self) -> bool {
        matches!(self, DgpKind::HotspotSynthetic)
    }

    /// One draw from the covariate law.
    pub fn sample_x<R: Rng + ?Sized>(self, rng: &mut R) -> Vec<f64> {
        match self {
            DgpKind::Toy => vec![rng.random::<f64>() * 2.0 - 1.0],
            DgpKind::HotspotSynthetic => hotspot_x(rng),
            _ => (0..4).map(|_| rng.random::<f64>()).collect(),
        }
    }

    /// Exact nuisance values at `x`.
    pub fn nuisances(self, x: &[f64]) -> NuisanceValues {
        match self {
            DgpKind::Toy => toy(x[0]),
            DgpKind::Study1 { scenario } => study1(scenario, x),
            DgpKind::Study2 => study2(x, false),
            DgpKind::Study2NonlinearTau => study2(x, true),
            DgpKind::Study3 => study3(x),
            DgpKind::HotspotSynthetic => hotspot(x),
        }
    }

    /// True CPCE, i.e. the identifying contrast of the outcome model.
    pub fn tau(self, x: &[f64], u: Stratum) -> f64 {
        self.nuisances(x).contrast(u)
    }
}

impl fmt::Display for DgpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DgpKind::Toy => write!(f, "toy"),
            DgpKind::Study1 { scenario } => write!(f, "study1-s{scenario}"),
            DgpKind::Study2 => write!(f, "study2"),
            DgpKind::Study2NonlinearTau => write!(f, "study2-nonlinear-tau"),
            DgpKind::Study3 => write!(f, "study3"),
            DgpKind::HotspotSynthetic => write!(f, "hotspot-synthetic"),
        }
    }
}

impl FromStr for DgpKind {
    type Err = CpceError;

    /// Parses `toy`, `study1` (scenario 1), `study1-s3`, `study2`, `study2-nonlinear-tau`,
    /// `study3`, `hotspot-synthetic`.
    fn from_str(s: &str) -> Result<DgpKind> {
        match s {
            "toy" => Ok(DgpKind::Toy),
            "study1" => Ok(DgpKind::Study1 { scenario: 1 }),
            "study2" => Ok(DgpKind::Study2),
            "study2-nonlinear-tau" | "study2_nonlinear_tau" => Ok(DgpKind::Study2NonlinearTau),
            "study3" => Ok(DgpKind::Study3),
            "hotspot-synthetic" | "hotspot" => Ok(DgpKind::HotspotSynthetic),
            other => match other.strip_prefix("study1-s") {
                Some(k) => DgpKind::study1(k.parse().map_err(|_| CpceError::Config(format!("bad scenario in {other}")))?),
                None => Err(CpceError::Config(format!("unknown dgp {other}"))),
            },
        }
    }
}

/// Exact nuisances of a DGP as a bundle.
#[derive(Debug, Clone, Copy)]
pub struct Truth(pub DgpKind);

impl NuisanceBundle for Truth {
    fn eval(&self, x: &[f64]) -> NuisanceValues {
        self.0.nuisances(x)
    }
}

/// A dataset request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub kind: DgpKind,
    pub n: usize,
    pub seed: u64,
    /// Defaults to the DGP's own noise level.
    #[serde(default)]
    pub noise_sd: Option<f64>,
}

impl DgpSpec {
    pub fn new(kind: DgpKind, n: usize, seed: u64) -> DgpSpec {
        DgpSpec { kind, n, seed, noise_sd: None }
    }

    pub fn noise(&self) -> f64 {
        self.noise_sd.unwrap_or_else(|| self.kind.default_noise_sd())
    }
}

/// Draw `(Z, S, Y)` given covariates with nuisance values `nv`.
pub fn draw_obs<R: Rng + ?Sized>(kind: DgpKind, nv: &NuisanceValues, noise_sd: f64, rng: &mut R) -> (u8, u8, f64) {
    let z = (rng.random::<f64>() < nv.pi) as u8;
    let s = (rng.random::<f64>() < nv.p(z)) as u8;
    let mu = nv.mu(z, s);
    let y = if kind.binary_outcome() {
        (rng.random::<f64>() < mu) as u8 as f64
    } else {
        let e: f64 = rng.sample(StandardNormal);
        mu + noise_sd * e
    };
    (z, s, y)
}

/// Draw a dataset. Identical specs give identical tables.
pub fn generate(spec: &DgpSpec) -> Result<(SampleTable, Truth)> {
    if spec.n == 0 {
        return Err(CpceError::Config("n must be positive".into()));
    }
    let noise = spec.noise();
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(CpceError::Config(format!("noise_sd must be finite and >= 0, got {noise}")));
    }
    let kind = spec.kind;
    let p = kind.p();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut xs = Vec::with_capacity(spec.n * p);
    let (mut y, mut s, mut z) = (Vec::with_capacity(spec.n), Vec::with_capacity(spec.n), Vec::with_capacity(spec.n));
    for _ in 0..spec.n {
        let x = kind.sample_x(&mut rng);
        let nv = kind.nuisances(&x);
        let (zi, si, yi) = draw_obs(kind, &nv, noise, &mut rng);
        xs.extend_from_slice(&x);
        z.push(zi);
        s.push(si);
        y.push(yi);
    }
    let x = DMatrix::from_row_slice(spec.n, p, &xs);
    let table = SampleTable::new(x, y, s, z)?.with_x_names(kind.x_names())?;
    Ok((table, Truth(kind)))
}

/// `n` draws from the covariate law as a matrix.
pub fn sample_grid(kind: DgpKind, n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = kind.p();
    let mut v = Vec::with_capacity(n * p);
    for _ in 0..n {
        v.extend(kind.sample_x(&mut rng));
    }
    DMatrix::from_row_slice(n, p, &v)
}

fn mu_linear_tau(b: f64, x1: f64) -> [[f64; 2]; 2] {
    // Y = b + 0.5 Z X1 + 0.5 S X1 - 0.5 Z S X1
    let t = 0.5 * x1;
    [[b, b + t], [b + t, b + t]]
}

fn toy_mu(x: f64) -> f64 {
    if x <= -0.5 {
        (x + 2.0).powi(2) / 2.0
    } else if x < 0.0 {
        x / 2.0 + 0.875
    } else if x <= 0.5 {
        -5.0 * (x - 0.2).powi(2) + 1.075
    } else {
        x + 0.125
    }
}

/// `0.65 - 0.2 sign(x)` is read as `P(S = 0 | Z = 0, x)`, so both arms share
/// `P(S = 1 | Z, x) = 0.35 + 0.2 sign(x)` and the (0,0) and (1,1) cells sit on
/// opposite sides of zero.
fn toy(x: f64) -> NuisanceValues {
    let sg = if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 };
    let m = toy_mu(x);
    NuisanceValues {
        pi: 0.5 + 0.25 * sg,
        p1: 0.35 + 0.2 * sg,
        p0: 0.35 + 0.2 * sg,
        mu: [[m, m], [m, m]],
    }
}

fn study1(scenario: u8, x: &[f64]) -> NuisanceValues {
    let scores_linear = scenario <= 2;
    let b_linear = scenario == 1 || scenario == 3;
    let (lp, a) = if scores_linear {
        (-0.4 + 0.4 * (x[0] + x[1] + x[2]), 0.4 * x[0] - 0.4 * x[1] + 0.4 * x[3] + 0.8)
    } else {
        (
            0.5 * (2.0 * PI * x[0] * x[1]).sin() + 0.5 * (x[2] - 0.5).powi(2),
            0.8 + (x[0] - 0.5).powi(2) + 0.6 * (2.0 * PI * x[2] * x[3]).sin(),
        )
    };
    let b = if b_linear {
        x[0] - 0.4 * x[1] + x[2] + 0.5 * x[3]
    } else {
        (2.0 * PI * x[0] * x[1]).sin() + (x[2] - 0.5).powi(2) + (x[3] - 0.5).powi(2)
    };
    NuisanceValues { pi: sigmoid(lp), p1: sigmoid(a), p0: sigmoid(-a), mu: mu_linear_tau(b, x[0]) }
}

fn study2(x: &[f64], nonlinear_tau: bool) -> NuisanceValues {
    let b = (2.0 * PI * x[0]).sin()
        + 0.8 * (1.0 + 3.0 * x[1]).ln()
        + 1.5 * (x[2] - 0.3).max(0.0)
        + (x[3] - 0.5).powi(2);
    let lp = (2.0 * PI * x[0]).sin() + (x[1] - 0.5);
    let l1 = 0.8 + 0.3 * (1.0 + x[0]).ln() + 0.3 * (x[1] - 0.5) - 0.25 * (x[2] - 0.5).powi(2);
    let mu = if nonlinear_tau {
        let (t00, t10, t11) = study2_tau(x);
        let mu11 = b + t10;
        [[b, mu11 - t11], [b + t00, mu11]]
    } else {
        mu_linear_tau(b, x[0])
    };
    NuisanceValues { pi: sigmoid(lp), p1: sigmoid(l1), p0: sigmoid(-l1), mu }
}

/// `(tau00, tau10, tau11)` of the nonlinear-effect variant.
pub fn study2_tau(x: &[f64]) -> (f64, f64, f64) {
    (
        0.5 * (2.0 * PI * x[0]).sin() + 0.3 * (x[1] - 0.5).powi(2),
        0.4 * (x[0] - 0.5).powi(2) + 0.6 * (2.0 * PI * x[1]).cos(),
        -0.5 * (2.0 * PI * x[0]).sin() + 0.5 * (x[2] - 0.5).powi(2),
    )
}

/// Minimum gap between `p1` and `p0` in the Study III construction.
pub const STUDY3_MIN_GAP: f64 = 0.02;
const STUDY3_CLIP: f64 = 0.01;

fn study3(x: &[f64]) -> NuisanceValues {
    let pi = clip_probability(
        sigmoid(3.2 * (2.0 * PI * x[0] * x[1]).sin() + 2.6 * (x[2] - 0.5).powi(2)),
        STUDY3_CLIP,
    );
    let core = 1.2 * (x[0] - 0.5).powi(2) + 0.9 * (2.0 * PI * x[2] * x[3]).sin();
    let p1t = sigmoid(0.8 + core - 0.6 * (pi - 0.5));
    let p0t = sigmoid(-0.8 - core - 1.5 * (pi - 0.5));
    let delta = (p1t - p0t).max(STUDY3_MIN_GAP);
    let m = 0.5 * (p1t + p0t);
    let b = x[0] - 0.4 * x[1] + x[2] + 0.5 * x[3];
    NuisanceValues {
        pi,
        p1: clip_probability(m + delta / 2.0, STUDY3_CLIP),
        p0: clip_probability(m - delta / 2.0, STUDY3_CLIP),
        mu: mu_linear_tau(b, x[0]),
    }
}

const HOTSPOT_P: usize = 20;
const HOTSPOT_BINARY: usize = 12;

fn hotspot_x<R: Rng + ?Sized>(rng: &mut R) -> Vec<f64> {
    let mut x = Vec::with_capacity(HOTSPOT_P);
    for j in 0..HOTSPOT_BINARY {
        let rate = 0.15 + 0.05 * (j % 6) as f64;
        x.push((rng.random::<f64>() < rate) as u8 as f64);
    }
    for _ in HOTSPOT_BINARY..HOTSPOT_P {
        let e: f64 = rng.sample(StandardNormal);
        x.push(e);
    }
    x
}

fn hotspot(x: &[f64]) -> NuisanceValues {
    let c = &x[HOTSPOT_BINARY..];
    let bin = &x[..HOTSPOT_BINARY];
    let l1 = 0.9 + 0.3 * c[0] - 0.4 * bin[0] + 0.2 * bin[1];
    let l0 = -1.8 + 0.2 * c[0] - 0.3 * bin[0];
    let base = -0.2 + 0.4 * bin[2] + 0.3 * bin[3] - 0.25 * c[1] + 0.15 * c[2];
    let p1 = sigmoid(l1);
    let p0 = sigmoid(l0).min(p1);
    NuisanceValues {
        pi: 0.5,
        p1,
        p0,
        mu: [
            [sigmoid(base), sigmoid(base + 0.3)],
            [sigmoid(base - 0.05), sigmoid(base - 0.2 + 0.1 * c[3])],
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_names() {
        assert_eq!("study1-s3".parse::<DgpKind>().unwrap(), DgpKind::Study1 { scenario: 3 });
        assert!("study1-s5".parse::<DgpKind>().is_err());
        assert!("nope".parse::<DgpKind>().is_err());
        for k in [DgpKind::Toy, DgpKind::Study2, DgpKind::Study2NonlinearTau, DgpKind::Study3, DgpKind::HotspotSynthetic] {
            assert_eq!(k.to_string().parse::<DgpKind>().unwrap(), k);
        }
    }

    #[test]
    fn toy_values() {
        let a = toy(0.3);
        assert_eq!((a.pi, a.p1, a.p0), (0.75, 0.55, 0.55));
        let b = toy(-0.3);
        assert_eq!(b.pi, 0.25);
        assert!((b.p1 - 0.15).abs() < 1e-15 && (b.p0 - 0.15).abs() < 1e-15);
        assert!((toy_mu(-0.5) - 1.125).abs() < 1e-15);
        assert!((toy_mu(-0.4999999) - 0.625).abs() < 1e-6);
    }

    #[test]
    fn zero_noise_reproduces_means() {
        let spec = DgpSpec { kind: DgpKind::Study1 { scenario: 2 }, n: 50, seed: 3, noise_sd: Some(0.0) };
        let (t, truth) = generate(&spec).unwrap();
        for i in 0..t.n() {
            let nv = truth.eval(&t.row(i));
            assert_eq!(t.y()[i], nv.mu(t.z()[i], t.s()[i]));
        }
    }

    #[test]
    fn hotspot_is_binary_and_monotone() {
        let (t, truth) = generate(&DgpSpec::new(DgpKind::HotspotSynthetic, 774, 1)).unwrap();
        assert_eq!(t.p(), 20);
        assert!(t.y().iter().all(|&v| v == 0.0 || v == 1.0));
        for i in 0..t.n() {
            let nv = truth.eval(&t.row(i));
            assert!(nv.p1 >= nv.p0);
        }
        t.require_all_cells().unwrap();
    }
}
