//! Counter-based randomness.
//!
//! Every random draw of the engine is a pure function of `(seed, node, round)`,
//! computed with the Philox4x32-10 bijection. Node updates can therefore run in
//! any order, or in parallel, and still reproduce the sequential result bit for
//! bit. Two runs that share a seed consume identical sampling sequences, which
//! is what the coupled stability runs rely on.

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

/// Domain tags keep the index stream and derived seeds from colliding.
const DOMAIN_INDEX: u32 = 0x1d5e_0001;
const DOMAIN_DERIVE: u32 = 0x1d5e_0002;

#[inline(always)]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = u64::from(a) * u64::from(b);
    ((p >> 32) as u32, p as u32)
}

/// Philox4x32 with 10 rounds.
pub fn philox4x32(counter: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut c = counter;
    let mut k = key;
    for round in 0..10 {
        if round > 0 {
            k[0] = k[0].wrapping_add(PHILOX_W0);
            k[1] = k[1].wrapping_add(PHILOX_W1);
        }
        let (hi0, lo0) = mulhilo(PHILOX_M0, c[0]);
        let (hi1, lo1) = mulhilo(PHILOX_M1, c[2]);
        c = [hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0];
    }
    c
}

#[inline]
fn split(x: u64) -> [u32; 2] {
    [x as u32, (x >> 32) as u32]
}

#[inline]
fn join(lo: u32, hi: u32) -> u64 {
    u64::from(lo) | (u64::from(hi) << 32)
}

/// 64 random bits keyed on `(seed, node, round)`.
#[inline]
pub fn counter_u64(seed: u64, node: usize, round: usize) -> u64 {
    let r = split(round as u64);
    let out = philox4x32([r[0], r[1], node as u32, DOMAIN_INDEX], split(seed));
    join(out[0], out[1])
}

/// Uniform draw from `0..m` for the given node and round.
#[inline]
pub fn sample_index(seed: u64, node: usize, round: usize, m: usize) -> usize {
    debug_assert!(m > 0);
    ((u128::from(counter_u64(seed, node, round)) * m as u128) >> 64) as usize
}

/// Hierarchical seed derivation, e.g. `(master, cell, replication)`.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().enumerate().fold(master, |acc, (depth, &p)| {
        let p = split(p);
        let out = philox4x32([p[0], p[1], depth as u32, DOMAIN_DERIVE], split(acc));
        join(out[0], out[1])
    })
}
