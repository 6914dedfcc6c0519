use cpce::data::{Obs, Stratum};
use cpce::identification::{
    eif_parts, principal_score, psi_score, pseudo_eif_ratio, pseudo_onestep, pseudo_subset, subset_propensity, FKind,
    NuisanceValues,
};
use cpce::sim::dgp::draw_obs;
use cpce::sim::DgpKind;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const X: [f64; 4] = [0.3, 0.6, 0.45, 0.7];

struct Acc {
    n: f64,
    s: f64,
    ss: f64,
}

impl Acc {
    fn new() -> Acc {
        Acc { n: 0.0, s: 0.0, ss: 0.0 }
    }
    fn push(&mut self, v: f64) {
        self.n += 1.0;
        self.s += v;
        self.ss += v * v;
    }
    fn mean(&self) -> f64 {
        self.s / self.n
    }
    fn se(&self) -> f64 {
        ((self.ss / self.n - self.mean().powi(2)) / (self.n - 1.0)).sqrt()
    }
    fn within(&self, target: f64, k: f64) -> bool {
        (self.mean() - target).abs() < k * self.se()
    }
}

fn draws(n: usize, seed: u64) -> (NuisanceValues, Vec<Obs>) {
    let dgp = DgpKind::Study1 { scenario: 1 };
    let nv = dgp.nuisances(&X);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let obs = (0..n)
        .map(|_| {
            let (z, s, y) = draw_obs(dgp, &nv, 0.2, &mut rng);
            Obs { y, s, z }
        })
        .collect();
    (nv, obs)
}

#[test]
fn psi_scores_have_model_conditional_means() {
    let (nv, obs) = draws(400_000, 11);
    for a in [0u8, 1] {
        for f in [FKind::S, FKind::OneMinusS, FKind::YS, FKind::YOneMinusS] {
            let mut acc = Acc::new();
            for w in &obs {
                acc.push(psi_score(a, f, w, &nv));
            }
            let target = f.cond_mean(a, &nv);
            assert!(acc.within(target, 4.0), "a={a} {f:?}: {} vs {target}", acc.mean());
        }
    }
}

#[test]
fn eif_denominator_and_numerator_oracles() {
    let (nv, obs) = draws(400_000, 12);
    for u in Stratum::ALL {
        let e = principal_score(nv.p1, nv.p0, u).unwrap();
        let tau = nv.contrast(u);
        let (mut g, mut num) = (Acc::new(), Acc::new());
        for w in &obs {
            let p = eif_parts(w, &nv, u);
            g.push(p.g);
            num.push(p.diff());
        }
        assert!(g.within(e, 4.0), "u={u}: E[g] {} vs {e}", g.mean());
        assert!(num.within(e * tau, 4.0), "u={u}: E[phi1-phi0] {} vs {}", num.mean(), e * tau);
    }
}

#[test]
fn onestep_is_robust_to_a_zero_preliminary() {
    let (nv, obs) = draws(400_000, 13);
    for u in Stratum::ALL {
        let mut acc = Acc::new();
        for (i, w) in obs.iter().enumerate() {
            acc.push(pseudo_onestep(w, &nv, 0.0, u, 0.01, i).unwrap().value);
        }
        assert!(acc.within(nv.contrast(u), 4.0), "u={u}: {} vs {}", acc.mean(), nv.contrast(u));
    }
}

#[test]
fn eif_ratio_with_exact_denominator_is_unbiased() {
    let (nv, obs) = draws(400_000, 14);
    for u in Stratum::ALL {
        let e = principal_score(nv.p1, nv.p0, u).unwrap();
        let mut acc = Acc::new();
        for (i, w) in obs.iter().enumerate() {
            acc.push(pseudo_eif_ratio(w, &nv, e, u, 0.01, i).unwrap().value);
        }
        assert!(acc.within(nv.contrast(u), 4.0), "u={u}: {} vs {}", acc.mean(), nv.contrast(u));
    }
}

#[test]
fn subset_membership_frequency_matches_composed_propensity() {
    let (nv, obs) = draws(400_000, 15);
    for u in Stratum::ALL {
        let pi_s = subset_propensity(nv.pi, nv.p1, nv.p0, u).unwrap();
        let inside: Vec<&Obs> = obs.iter().filter(|w| u.in_subset(w.s, w.z)).collect();
        let k = inside.len() as f64;
        let share = inside.iter().filter(|w| w.z == 1).count() as f64 / k;
        let se = (pi_s * (1.0 - pi_s) / k).sqrt();
        assert!((share - pi_s).abs() < 4.0 * se, "u={u}: {share} vs {pi_s}");
        let mut acc = Acc::new();
        for w in inside {
            acc.push(pseudo_subset(w, &nv, pi_s, u, 0.01, 0).unwrap().value);
        }
        assert!(acc.within(nv.contrast(u), 4.0), "u={u}: {} vs {}", acc.mean(), nv.contrast(u));
    }
}

/// Bayes rule over the joint law of `(Z, stratum)`.
fn brute_force_subset_pi(pi: f64, p1: f64, p0: f64, u: Stratum) -> f64 {
    let shares = [(Stratum::NeverTaker, 1.0 - p1), (Stratum::Complier, p1 - p0), (Stratum::AlwaysTaker, p0)];
    let (mut num, mut den) = (0.0, 0.0);
    for z in [0u8, 1] {
        let pz = if z == 1 { pi } else { 1.0 - pi };
        for (g, share) in shares {
            let s = match g {
                Stratum::NeverTaker => 0,
                Stratum::Complier => z,
                Stratum::AlwaysTaker => 1,
            };
            if u.in_subset(s, z) {
                den += pz * share;
                if z == 1 {
                    num += pz * share;
                }
            }
        }
    }
    num / den
}

proptest! {
    #[test]
    fn principal_scores_partition_unity(p0 in 0.0f64..1.0, d in 0.0f64..1.0) {
        let p1 = p0 + d * (1.0 - p0);
        let e: Vec<f64> = Stratum::ALL.iter().map(|&u| principal_score(p1, p0, u).unwrap()).collect();
        prop_assert!(e.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!((e.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn composed_subset_propensity_is_bayes(pi in 0.01f64..0.99, p0 in 0.01f64..0.9, d in 0.05f64..0.95) {
        let p1 = p0 + d * (0.99 - p0);
        for u in Stratum::ALL {
            let c = subset_propensity(pi, p1, p0, u).unwrap();
            let b = brute_force_subset_pi(pi, p1, p0, u);
            prop_assert!((c - b).abs() < 1e-12, "u={} composed {} brute {}", u, c, b);
        }
    }

    #[test]
    fn residual_free_subset_outcome_is_the_contrast(
        pi in 0.05f64..0.95, p0 in 0.05f64..0.5, mu in prop::array::uniform4(-2.0f64..2.0), z in 0u8..2, s in 0u8..2,
    ) {
        let nv = NuisanceValues { pi, p1: p0 + 0.3, p0, mu: [[mu[0], mu[1]], [mu[2], mu[3]]] };
        for u in Stratum::ALL {
            if !u.in_subset(s, z) {
                continue;
            }
            let pi_s = subset_propensity(pi, nv.p1, p0, u).unwrap();
            let w = Obs { y: nv.mu(z, s), s, z };
            let r = pseudo_subset(&w, &nv, pi_s, u, 1e-6, 0).unwrap();
            prop_assert!((r.value - nv.contrast(u)).abs() < 1e-9);
        }
    }
}
