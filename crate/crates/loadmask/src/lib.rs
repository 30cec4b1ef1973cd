//! Load-signature masking toolkit for smart-meter privacy experiments.
//!
//! The crate simulates a household behind a lossy battery energy storage
//! system, synthesizes stochastic meter-shaping policies that maximize an
//! adversary's Bayesian detection risk over a finite horizon, executes them
//! in closed loop, and scores the result against an edge-matching load
//! disaggregation attacker.

pub mod adversary;
pub mod error;
pub mod ess;
pub mod experiment;
pub mod household;
pub mod inference;
pub mod runtime;
pub mod synthesis;

pub use error::{Error, Result};

use sha2::{Digest, Sha256};

/// Deterministic seed derivation: folds `salt` words into `base` with a
/// splitmix-style mix, so every stage, grid point and validation day gets an
/// independent, reproducible stream.
pub fn mix_seed(base: u64, salt: &[u64]) -> u64 {
    let mut state = base ^ 0x9E37_79B9_7F4A_7C15;
    for &word in salt {
        state = state.wrapping_add(word).wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        state = z ^ (z >> 31);
    }
    state
}

/// Lowercase hex SHA-256 of `bytes`; used for model/parameter digests and
/// policy-file integrity checks.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        use std::fmt::Write;
        let _ = write!(out, "{b:02x}");
    }
    out
}
