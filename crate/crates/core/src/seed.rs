//! Seed derivation.
//!
//! Every random stream in the crate descends from a single root seed. A child
//! seed is `splitmix64(parent ^ splitmix64(tag))`, where `tag` is a fixed
//! per-subsystem constant (see [`Stream`]) or a row hash. Generators are
//! `ChaCha8Rng::seed_from_u64(child)`.
//!
//! Fourier-feature frequencies use a separately specified generator so they can
//! be re-derived without `rand`: the `i`-th pair of uniforms comes from two
//! consecutive `splitmix64` outputs, mapped to `(0, 1]` as `((x >> 11) + 1) / 2^53`,
//! and turned into two standard normals with Box–Muller
//! (`r = sqrt(-2 ln u1)`, `r cos(2π u2)`, `r sin(2π u2)`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// One step of the SplitMix64 generator applied to `state`.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Subsystem tags for root-seed splitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    TimeFrequencies = 2,
    ClassFrequencies = 3,
    Training = 4,
    Probes = 5,
    Sampling = 6,
    Data = 7,
}

pub fn derive(parent: u64, tag: u64) -> u64 {
    splitmix64(parent ^ splitmix64(tag))
}

pub fn child(root: u64, stream: Stream) -> u64 {
    derive(root, stream as u64)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Hash of a vector's exact bit pattern; used to key per-sample probe streams
/// by content, so results do not depend on row order or thread scheduling.
pub fn hash_values(values: &[f64]) -> u64 {
    values
        .iter()
        .fold(splitmix64(values.len() as u64), |acc, v| {
            splitmix64(acc ^ v.to_bits())
        })
}

/// `n` standard normal draws from the documented SplitMix64 + Box–Muller stream.
pub fn seeded_normals(seed: u64, n: usize) -> Vec<f64> {
    let mut state = seed;
    let mut next_uniform = || {
        let x = splitmix64(state);
        state = state.wrapping_add(GOLDEN);
        ((x >> 11) + 1) as f64 / (1u64 << 53) as f64
    };
    let mut out = Vec::with_capacity(n + 1);
    while out.len() < n {
        let u1 = next_uniform();
        let u2 = next_uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out.push(r * theta.cos());
        out.push(r * theta.sin());
    }
    out.truncate(n);
    out
}
