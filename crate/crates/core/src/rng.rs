//! Counter-based normal draws.
//!
//! Every draw is a pure function of `(seed, path, step, component)`, so a
//! path's randomness does not depend on how many paths are simulated, on
//! batch boundaries or on the thread that simulates it.

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9; // golden ratio
const PHILOX_W1: u32 = 0xBB67_AE85; // sqrt(3) - 1

#[inline]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = u64::from(a) * u64::from(b);
    ((p >> 32) as u32, p as u32)
}

/// Philox4x32 with 10 rounds.
#[inline]
pub fn philox4x32(mut ctr: [u32; 4], mut key: [u32; 2]) -> [u32; 4] {
    for round in 0..10 {
        if round > 0 {
            key[0] = key[0].wrapping_add(PHILOX_W0);
            key[1] = key[1].wrapping_add(PHILOX_W1);
        }
        let (hi0, lo0) = mulhilo(PHILOX_M0, ctr[0]);
        let (hi1, lo1) = mulhilo(PHILOX_M1, ctr[2]);
        ctr = [hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0];
    }
    ctr
}

/// Uniform in `(0, 1]` from 53 random bits.
#[inline]
fn open_unit(hi: u32, lo: u32) -> f64 {
    let bits = ((u64::from(hi) << 32) | u64::from(lo)) >> 11;
    (bits + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal pair for one `(path, step)` cell via Box-Muller.
#[inline]
pub fn normal_pair(seed: u64, path: u64, step: u32) -> [f64; 2] {
    let key = [seed as u32, (seed >> 32) as u32];
    let ctr = [path as u32, (path >> 32) as u32, step, 0];
    let r = philox4x32(ctr, key);
    let u1 = open_unit(r[0], r[1]);
    let u2 = open_unit(r[2], r[3]);
    let radius = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
    [radius * c, radius * s]
}

/// Fills `out` with the draws of one path. Draw `n` is component `n % 2` of
/// the normal pair for step `n / 2`.
pub fn fill_path(seed: u64, path: u64, out: &mut [f64]) {
    for (step, chunk) in out.chunks_mut(2).enumerate() {
        let z = normal_pair(seed, path, step as u32);
        chunk.copy_from_slice(&z[..chunk.len()]);
    }
}
