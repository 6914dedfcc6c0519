//! Simulation designs and the Monte-Carlo benchmark harness.

pub mod bench;
pub mod dgp;

pub use bench::{rmse_eval, run_benchmark, BenchConfig, BenchResult};
pub use dgp::{generate, DgpKind, DgpSpec, Truth};

/// Independent stream seed for a task identified by `parts`.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        // splitmix64 finalizer
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}
