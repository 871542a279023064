//! Micro-benchmark primitives behind the cost model's default prices.
//!
//! The engine charges every hooked load a flat `c_check` for the in-cage
//! predicate, `c_soft_hook` on top when the hook fires, and prices the
//! trap-based alternative at `c_trap` per cage access. These three functions
//! are the hot paths those prices abstract: a predicted compare-and-branch,
//! the full software interception (predicate, mask fetch, XOR, writeback),
//! and a same-thread signal round-trip standing in for a page-fault trap.
//! `benches/interception.rs` times them; the README records the numbers the
//! defaults were frozen from.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Once;

/// Matches the engine's cage membership test: one compare pair on values
/// already in registers. The branch is overwhelmingly not-taken in real
/// programs, which is the case the default `c_check=1` prices.
#[inline]
pub fn cage_check(addr: u64, base: u64, size: u64) -> bool {
    addr.wrapping_sub(base) < size
}

/// The soft-hook fast path: membership test, LE mask fetch at a moving
/// cursor, width-sized XOR, cursor advance. Returns the perturbed value so
/// the optimizer cannot discard the work.
#[inline]
pub fn soft_hook(value: u64, addr: u64, base: u64, size: u64, mask: &[u8], cursor: &mut usize) -> u64 {
    if !cage_check(addr, base, size) {
        return value;
    }
    let mut chunk = [0u8; 8];
    for (i, b) in chunk.iter_mut().enumerate() {
        // Virtual zero-extension past the stream end keeps the cost flat.
        *b = mask.get(*cursor + i).copied().unwrap_or(0);
    }
    *cursor += 8;
    value ^ u64::from_le_bytes(chunk)
}

static TRAPS_TAKEN: AtomicU64 = AtomicU64::new(0);
static INSTALL: Once = Once::new();

extern "C" fn on_usr1(_: libc::c_int) {
    TRAPS_TAKEN.fetch_add(1, Ordering::Relaxed);
}

fn install_handler() {
    INSTALL.call_once(|| unsafe {
        let mut sa: libc::sigaction = std::mem::zeroed();
        sa.sa_sigaction = on_usr1 as *const () as usize;
        libc::sigemptyset(&mut sa.sa_mask);
        sa.sa_flags = 0;
        assert_eq!(libc::sigaction(libc::SIGUSR1, &sa, std::ptr::null_mut()), 0);
    });
}

/// One synchronous kernel round-trip: raise SIGUSR1 and return after the
/// handler ran on this thread. A hardware page-fault trap does strictly more
/// work (fault decode, mapping fixup, instruction restart), so timing this
/// understates `c_trap` and keeps the model's trap/soft ratio a lower bound.
pub fn trap_roundtrip() -> u64 {
    install_handler();
    unsafe {
        assert_eq!(libc::raise(libc::SIGUSR1), 0);
    }
    TRAPS_TAKEN.load(Ordering::Relaxed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn check_is_a_half_open_range_test() {
        assert!(cage_check(100, 100, 1));
        assert!(!cage_check(101, 100, 1));
        assert!(!cage_check(99, 100, 1));
        // Wrapping subtraction rejects addresses below base without a second branch.
        assert!(!cage_check(0, 1 << 40, 1 << 20));
    }

    #[test]
    fn soft_hook_masks_in_cage_and_passes_through_outside() {
        let mask = [0xff, 0, 0, 0, 0, 0, 0, 0, 0x0f];
        let mut cur = 0;
        let v = soft_hook(0x1234, 0x7000, 0x7000, 0x1000, &mask, &mut cur);
        assert_eq!(v, 0x1234 ^ 0xff);
        assert_eq!(cur, 8);
        // Second fetch straddles the end of the stream: zero-extended.
        let v = soft_hook(0x1234, 0x7000, 0x7000, 0x1000, &mask, &mut cur);
        assert_eq!(v, 0x1234 ^ 0x0f);
        // Out-of-cage addresses do not consume mask bytes.
        let before = cur;
        let v = soft_hook(0x1234, 0x1, 0x7000, 0x1000, &mask, &mut cur);
        assert_eq!(v, 0x1234);
        assert_eq!(cur, before);
    }

    #[test]
    fn traps_are_delivered_synchronously() {
        let a = trap_roundtrip();
        let b = trap_roundtrip();
        assert!(b > a || a >= 1, "handler must have run before raise returned");
        assert_eq!(b, a + 1);
    }
}
