//! Byte-level mutators shared by every mode. The payload being mutated is
//! a mask stream in the interception modes and a write list in baseline
//! mode; the mutators neither know nor care.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Hard cap on payload growth, enforced after every mutation.
pub const MAX_PAYLOAD_LEN: usize = 1 << 20;

/// Most mutations stacked onto one parent.
pub const MAX_STACK: u32 = 64;

const OP_COUNT: u32 = 7;

/// Applies a uniformly chosen stack of 1..=64 mutations to a copy of
/// `parent` and returns it, clamped to `cap` bytes.
pub fn mutate(parent: &[u8], rng: &mut ChaCha8Rng, cap: usize) -> Vec<u8> {
    let mut m = parent.to_vec();
    let stack = rng.gen_range(1..=MAX_STACK);
    for _ in 0..stack {
        apply_one(&mut m, rng, cap);
    }
    m
}

/// One mutation step; returns the op index so tests can check the
/// selection distribution. Ops needing existing bytes are no-ops on an
/// empty payload, which keeps the distribution honest to measure.
pub(crate) fn apply_one(m: &mut Vec<u8>, rng: &mut ChaCha8Rng, cap: usize) -> u32 {
    let op = rng.gen_range(0..OP_COUNT);
    match op {
        0 => {
            // Flip one bit.
            if !m.is_empty() {
                let bit = rng.gen_range(0..m.len() * 8);
                m[bit / 8] ^= 1 << (bit % 8);
            }
        }
        1 => {
            // Set a random byte to a random value.
            if !m.is_empty() {
                let i = rng.gen_range(0..m.len());
                m[i] = rng.gen();
            }
        }
        2 => {
            // Zero a random byte.
            if !m.is_empty() {
                let i = rng.gen_range(0..m.len());
                m[i] = 0;
            }
        }
        3 => {
            // Duplicate a random chunk to a random insertion point.
            if !m.is_empty() {
                let src = rng.gen_range(0..m.len());
                let max = (m.len() - src).min(64);
                let len = rng.gen_range(1..=max);
                let chunk: Vec<u8> = m[src..src + len].to_vec();
                let dst = rng.gen_range(0..=m.len());
                m.splice(dst..dst, chunk);
                m.truncate(cap);
            }
        }
        4 => {
            // Append zeros.
            let k = rng.gen_range(1..=64usize);
            m.extend(std::iter::repeat(0).take(k));
            m.truncate(cap);
        }
        5 => {
            // Append random bytes.
            let k = rng.gen_range(1..=64usize);
            m.extend((0..k).map(|_| rng.gen::<u8>()));
            m.truncate(cap);
        }
        _ => {
            // Truncate the tail at a random point.
            if !m.is_empty() {
                let keep = rng.gen_range(0..=m.len());
                m.truncate(keep);
            }
        }
    }
    op
}
