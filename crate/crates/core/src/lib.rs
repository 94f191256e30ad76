//! Double machine learning for partially linear panel models with an
//! endogenous treatment and instruments.
//!
//! The pipeline first-differences a long-format panel, learns the nuisance
//! regressions with block cross-fitting, solves the orthogonal moment in
//! closed form and reports cluster-robust inference together with
//! weak-identification diagnostics (first-stage F, Anderson–Rubin test and
//! confidence set). A two-stage least squares baseline and a Monte Carlo
//! harness are included.

pub mod chisq;
pub mod dml;
pub mod error;
pub mod learners;
pub mod linalg;
pub mod panel;
pub mod report;
pub mod sim;
pub mod tsls;
pub mod weak_iv;

pub use error::{Error, Result};

/// Derive a child seed from a base seed and a small tuple of indices.
///
/// SplitMix64 finaliser applied to a running combination, so each
/// `(base, a, b)` gives an unrelated stream.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(mix(mix(base) ^ a.wrapping_mul(0xD6E8_FEB8_6659_FD93)) ^ b)
}
