//! Checks shared between the fault-semantics suite and the acceptance gate.
//!
//! Each check returns `Ok(detail)` on success so callers can print what was
//! actually verified, or `Err(reason)` pinpointing the first violation.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sbx_forge_core::interceptor::Interceptor;
use sbx_forge_core::ir::parse_program;
use sbx_forge_core::targets::build_suite;
use sbx_forge_core::vm::{
    ExecOutcome, ExecResult, Limits, SandboxLayout, Vm, VmConfig, DEFAULT_CAGE_BASE, POISON,
};
use sbx_forge_core::{classify_loads, instrument};

fn traced() -> VmConfig {
    VmConfig { record_edge_trace: true, ..VmConfig::default() }
}

fn rand_bytes(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    let mut v = vec![0u8; n];
    rng.fill(&mut v[..]);
    v
}

/// Instrumentation with an all-zero mask stream must be invisible: same
/// outcome, same edge trace, same final architectural state as the raw
/// program, on every suite target, with and without pruning.
pub fn zero_mask_transparency() -> Result<String, String> {
    let suite = build_suite();
    let layout = SandboxLayout::default();
    let limits = Limits::default();
    let mut compared = 0u32;

    for t in &suite.targets {
        let mut plain_vm = Vm::new(&t.program, layout, traced())
            .map_err(|e| format!("{}: {e}", t.id))?;
        let plain = plain_vm.run(&mut Interceptor::disabled(), &limits);
        let plain_digest = plain_vm.state_digest();

        for prune in [true, false] {
            let inst = instrument(&t.program, prune).map_err(|e| format!("{}: {e}", t.id))?;
            let mut vm = Vm::new(&inst.program, layout, traced())
                .map_err(|e| format!("{}: {e}", t.id))?;
            let hooked = vm.run(&mut Interceptor::zero(), &limits);
            let label = format!("{} (prune={prune})", t.id);
            if hooked.outcome != plain.outcome {
                return Err(format!(
                    "{label}: outcome {} != {}",
                    hooked.outcome.brief(),
                    plain.outcome.brief()
                ));
            }
            if hooked.edge_trace != plain.edge_trace {
                return Err(format!("{label}: edge trace diverged"));
            }
            if vm.state_digest() != plain_digest {
                return Err(format!("{label}: final state digest diverged"));
            }
            compared += 1;
        }
    }
    Ok(format!(
        "{} instrumented runs bitwise-equal to raw runs across {} targets",
        compared,
        suite.targets.len()
    ))
}

/// Two cage cells, read once each. A mask chunk perturbs exactly the load it
/// is consumed by; zero chunks are the identity.
const TWO_CELLS: &str = "\
fn main() {
  b0:
    const r0, 64
    cage_alloc r1, r0
    const r2, 0x41
    store r1, r2, 1
    const r3, 8
    add r4, r1, r3
    const r5, 0x42
    store r4, r5, 1
    fuzz_start
    br go
  go:
    load r6, r1, 1
    load r7, r4, 1
    const r8, 8
    shl r9, r7, r8
    or r10, r9, r6
    ret r10
}
";

fn run_masked(src: &str, mask: &[u8]) -> Result<ExecResult, String> {
    let p = parse_program(src).map_err(|e| e.to_string())?;
    let inst = instrument(&p, true).map_err(|e| e.to_string())?;
    let mut vm = Vm::new(&inst.program, SandboxLayout::default(), VmConfig::default())
        .map_err(|e| e.to_string())?;
    Ok(vm.run(&mut Interceptor::from_bytes(mask), &Limits::default()))
}

fn expect_ret(src: &str, mask: &[u8], want: u64) -> Result<(), String> {
    let r = run_masked(src, mask)?;
    match r.outcome {
        ExecOutcome::Finished { ret: Some(got) } if got == want => Ok(()),
        other => Err(format!(
            "mask {mask:02x?}: expected ret {want:#x}, got {}",
            other.brief()
        )),
    }
}

pub fn xor_localization() -> Result<String, String> {
    // Identity: no mask bytes, and explicit zero chunks.
    expect_ret(TWO_CELLS, &[], 0x4241)?;
    expect_ret(TWO_CELLS, &[0x00, 0x00], 0x4241)?;
    // Perturbing the second chunk leaves the first load untouched.
    expect_ret(TWO_CELLS, &[0x00, 0xFF], 0xBD41)?;
    // A short stream zero-extends: only the first load is perturbed.
    expect_ret(TWO_CELLS, &[0xFF], 0x42BE)?;
    // Both chunks land on their own loads.
    expect_ret(TWO_CELLS, &[0x01, 0x02], 0x4040)?;

    // The cursor advances by the full width even past the stream end.
    let r = run_masked(TWO_CELLS, &[0xFF])?;
    if r.stats.mask_consumed != 2 {
        return Err(format!(
            "expected 2 mask bytes consumed (1 physical + 1 virtual), got {}",
            r.stats.mask_consumed
        ));
    }
    Ok("zero chunks are the identity; chunks perturb only their own load".into())
}

/// One cage cell, read twice. The first masked read writes the mutated value
/// back, so the second read observes it; masking the same cell again XORs on
/// top of the persisted value rather than the original.
const ONE_CELL_TWICE: &str = "\
fn main() {
  b0:
    const r0, 64
    cage_alloc r1, r0
    const r2, 0x41
    store r1, r2, 1
    fuzz_start
    br go
  go:
    load r3, r1, 1
    load r4, r1, 1
    const r5, 8
    shl r6, r4, r5
    or r7, r6, r3
    ret r7
}
";

pub fn xor_persistence() -> Result<String, String> {
    // Masked once: the second (unmasked) read sees the persisted fault.
    expect_ret(ONE_CELL_TWICE, &[0xFF, 0x00], 0xBEBE)?;
    // Masked twice with the same chunk: the second read undoes the first
    // fault instead of observing a consistent value. Persistence, not
    // per-read consistency.
    expect_ret(ONE_CELL_TWICE, &[0xFF, 0xFF], 0x41BE)?;
    // Distinct chunks stack.
    expect_ret(ONE_CELL_TWICE, &[0x01, 0x02], 0x4240)?;
    Ok("faults write back to the cage; refaulting stacks on the persisted value".into())
}

/// The offset of the trusted access is taken from the cage (hooked load), so
/// each execution probes a mask-chosen out-of-bounds offset in [16, 65551]
/// past a 16-byte stack slot.
const TRUSTED_OOB_READ: &str = "\
fn main() {
  frame {
    slot0: 16
  }
  b0:
    const r0, 8
    cage_alloc r1, r0
    const r2, 0
    store r1, r2, 8
    alloca r3, slot0
    fuzz_start
    br go
  go:
    load r4, r1, 8
    const r5, 0xffff
    and r4, r4, r5
    const r6, 16
    or r4, r4, r6
    add r7, r3, r4
    load r8, r7, 1
    ret r8
}
";

const TRUSTED_OOB_WRITE: &str = "\
fn main() {
  frame {
    slot0: 16
  }
  b0:
    const r0, 8
    cage_alloc r1, r0
    const r2, 0
    store r1, r2, 8
    alloca r3, slot0
    fuzz_start
    br go
  go:
    load r4, r1, 8
    const r5, 0xffff
    and r4, r4, r5
    const r6, 16
    or r4, r4, r6
    add r7, r3, r4
    store r7, r2, 1
    ret r2
}
";

/// Trusted out-of-bounds reads poison and continue; trusted out-of-bounds
/// writes crash. `reads` and `writes` are execution counts.
pub fn oracle_asymmetry(reads: u64, writes: u64) -> Result<String, String> {
    // Small cage keeps per-execution resets cheap over 10^5 iterations.
    let layout = SandboxLayout::new(DEFAULT_CAGE_BASE, 4096).map_err(|e| e.to_string())?;
    let limits = Limits::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0x0_5eed);

    let read_p = parse_program(TRUSTED_OOB_READ).map_err(|e| e.to_string())?;
    let inst = instrument(&read_p, true).map_err(|e| e.to_string())?;
    let mut vm = Vm::new(&inst.program, layout, VmConfig::default()).map_err(|e| e.to_string())?;
    vm.arm(&limits).map_err(|e| e.to_string())?;
    let mut tolerated = 0u64;
    for i in 0..reads {
        let bytes = rand_bytes(&mut rng, 8);
        let r = vm.run_one(&mut Interceptor::from_bytes(&bytes), &limits);
        match r.outcome {
            ExecOutcome::Finished { ret: Some(v) } if v == POISON & 0xFF => {}
            other => {
                return Err(format!(
                    "read {i} (mask {bytes:02x?}): expected tolerated poison read, got {}",
                    other.brief()
                ))
            }
        }
        tolerated += r.stats.tolerated_reads;
    }
    if tolerated != reads {
        return Err(format!(
            "expected {reads} tolerated reads, counted {tolerated}"
        ));
    }

    let write_p = parse_program(TRUSTED_OOB_WRITE).map_err(|e| e.to_string())?;
    let inst = instrument(&write_p, true).map_err(|e| e.to_string())?;
    let mut vm = Vm::new(&inst.program, layout, VmConfig::default()).map_err(|e| e.to_string())?;
    vm.arm(&limits).map_err(|e| e.to_string())?;
    let mut crashes = 0u64;
    for i in 0..writes {
        let bytes = rand_bytes(&mut rng, 8);
        let r = vm.run_one(&mut Interceptor::from_bytes(&bytes), &limits);
        match r.outcome.crash() {
            Some(c) if c.kind == sbx_forge_core::CrashKind::OobWrite => crashes += 1,
            _ => {
                return Err(format!(
                    "write {i} (mask {bytes:02x?}): expected oob_write crash, got {}",
                    r.outcome.brief()
                ))
            }
        }
    }
    if crashes != writes {
        return Err(format!("expected {writes} crashes, counted {crashes}"));
    }
    Ok(format!(
        "{reads} randomized trusted OOB reads tolerated (0 crashes), {writes} trusted OOB writes crashed ({writes}/{writes})"
    ))
}

/// Resuming from the armed snapshot must be indistinguishable from running
/// the whole program fresh with the same mask stream, and a second reset must
/// reproduce the first resume exactly.
pub fn snapshot_transparency() -> Result<String, String> {
    let suite = build_suite();
    let layout = SandboxLayout::default();
    let limits = Limits::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5a9);

    for t in &suite.targets {
        let mask = rand_bytes(&mut rng, 48);
        let inst = instrument(&t.program, true).map_err(|e| format!("{}: {e}", t.id))?;

        let mut fresh_vm =
            Vm::new(&inst.program, layout, traced()).map_err(|e| format!("{}: {e}", t.id))?;
        let fresh = fresh_vm.run(&mut Interceptor::from_bytes(&mask), &limits);
        let fresh_digest = fresh_vm.state_digest();

        let mut vm =
            Vm::new(&inst.program, layout, traced()).map_err(|e| format!("{}: {e}", t.id))?;
        vm.arm(&limits).map_err(|e| format!("{}: {e}", t.id))?;
        let first = vm.run_one(&mut Interceptor::from_bytes(&mask), &limits);
        let first_digest = vm.state_digest();
        let second = vm.run_one(&mut Interceptor::from_bytes(&mask), &limits);
        let second_digest = vm.state_digest();

        if fresh.outcome != first.outcome {
            return Err(format!(
                "{}: fresh {} vs resumed {}",
                t.id,
                fresh.outcome.brief(),
                first.outcome.brief()
            ));
        }
        if fresh_digest != first_digest {
            return Err(format!("{}: fresh and resumed final state diverged", t.id));
        }
        if fresh.stats.interceptions != first.stats.interceptions
            || fresh.stats.mask_consumed != first.stats.mask_consumed
        {
            return Err(format!("{}: interception accounting diverged", t.id));
        }
        // The resumed trace is the fresh trace minus the startup prefix.
        let (fa, fb) = (
            fresh.edge_trace.as_ref().ok_or("missing trace")?,
            first.edge_trace.as_ref().ok_or("missing trace")?,
        );
        if !fa.ends_with(fb) {
            return Err(format!("{}: resumed edge trace is not a suffix of the fresh trace", t.id));
        }
        if first.outcome != second.outcome
            || first_digest != second_digest
            || first.coverage != second.coverage
        {
            return Err(format!("{}: second reset did not reproduce the first", t.id));
        }
    }
    Ok(format!(
        "snapshot resume matches fresh execution on all {} targets; resets are idempotent",
        suite.targets.len()
    ))
}

/// Same program, same mask bytes, two fresh machines: identical results.
pub fn double_run_determinism() -> Result<String, String> {
    let suite = build_suite();
    let layout = SandboxLayout::default();
    let limits = Limits::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0xd0);

    for t in &suite.targets {
        let mask = rand_bytes(&mut rng, 64);
        let inst = instrument(&t.program, true).map_err(|e| format!("{}: {e}", t.id))?;
        let run = || -> Result<(ExecResult, u64), String> {
            let mut vm = Vm::new(&inst.program, layout, traced())
                .map_err(|e| format!("{}: {e}", t.id))?;
            let r = vm.run(&mut Interceptor::from_bytes(&mask), &limits);
            let d = vm.state_digest();
            Ok((r, d))
        };
        let (a, da) = run()?;
        let (b, db) = run()?;
        if a.outcome != b.outcome
            || a.stats != b.stats
            || a.coverage != b.coverage
            || a.cov_hash != b.cov_hash
            || a.edge_trace != b.edge_trace
            || da != db
        {
            return Err(format!("{}: two identical runs disagreed", t.id));
        }
    }
    Ok(format!(
        "double runs bitwise-identical on all {} targets",
        suite.targets.len()
    ))
}

/// With pruning disabled every load is hooked, so the interception log shows
/// every load that received a cage address. None of them may be a load the
/// classifier called Uninteresting. Returns (records checked, executions).
pub fn uninteresting_never_sees_cage(execs_per_target: usize) -> Result<String, String> {
    let suite = build_suite();
    let layout = SandboxLayout::default();
    let limits = Limits::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0xca9e);
    let mut records = 0u64;
    let mut execs = 0u64;

    for t in &suite.targets {
        let classified = classify_loads(&t.program);
        let inst = instrument(&t.program, false).map_err(|e| format!("{}: {e}", t.id))?;
        // Site ids index `inst.sites`; match classifications by load site.
        let class_of = |site_id: u32| {
            let site = inst.sites[site_id as usize].site;
            classified
                .iter()
                .find(|li| li.site == site)
                .map(|li| li.class)
        };
        let mut vm =
            Vm::new(&inst.program, layout, VmConfig::default()).map_err(|e| format!("{}: {e}", t.id))?;
        vm.arm(&limits).map_err(|e| format!("{}: {e}", t.id))?;
        for _ in 0..execs_per_target {
            let n = rng.gen_range(0..48);
            let bytes = rand_bytes(&mut rng, n);
            let mut intc = Interceptor::from_bytes(&bytes).with_log();
            vm.run_one(&mut intc, &limits);
            execs += 1;
            for rec in intc.records() {
                records += 1;
                match class_of(rec.site) {
                    Some(class) if !class.is_uninteresting() => {}
                    Some(class) => {
                        return Err(format!(
                            "{}: load {} classified {} received cage address {:#x}",
                            t.id,
                            inst.sites[rec.site as usize].site,
                            class.reason_str(),
                            rec.addr
                        ))
                    }
                    None => return Err(format!("{}: unknown site id {}", t.id, rec.site)),
                }
            }
        }
    }
    Ok(format!(
        "{records} cage interceptions across {execs} unpruned executions, all at Interesting loads"
    ))
}
