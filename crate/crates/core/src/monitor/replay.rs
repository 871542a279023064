//! Crash reproduction from persisted artifacts.
//!
//! A crash directory is self-describing: `repro.meta` pins the mode,
//! snapshot setting, layout, and step limit the finding campaign used, so
//! replay rebuilds the exact execution environment and demands the exact
//! same report, address and width included. Anything less would let a
//! flaky finding masquerade as reproducible.

use std::fs;
use std::path::{Path, PathBuf};

use crate::instrument::instrument;
use crate::interceptor::Interceptor;
use crate::ir::Program;
use crate::util::KvLines;
use crate::vm::{
    CrashReport, Limits, SandboxLayout, SnapshotError, Vm, VmConfig, VmError,
};

use super::{apply_writes, decode_writes, Mode};

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad artifact: {0}")]
    Parse(String),
    #[error(transparent)]
    Vm(#[from] VmError),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error("unknown seed `{0}`")]
    UnknownSeed(String),
    #[error("input no longer crashes: {0}")]
    NoCrash(String),
    #[error("crash mismatch:\nexpected {expected}\n     got {got}")]
    Mismatch { expected: String, got: String },
}

/// Replays one persisted crash directory. `lookup` maps a seed id to its
/// program (the embedded suite, or seeds loaded from disk). Returns the
/// reproduced report, which equals the persisted one field for field.
pub fn replay_crash<F>(dir: &Path, lookup: F) -> Result<CrashReport, ReplayError>
where
    F: Fn(&str) -> Option<Program>,
{
    let expected = CrashReport::parse(&fs::read_to_string(dir.join("report.txt"))?)
        .map_err(ReplayError::Parse)?;
    let meta = KvLines::parse(&fs::read_to_string(dir.join("repro.meta"))?)
        .map_err(ReplayError::Parse)?;
    let input = fs::read(dir.join("repro.mask"))?;

    let want = |k: &str| {
        meta.get(k)
            .ok_or_else(|| ReplayError::Parse(format!("repro.meta missing key `{k}`")))
    };
    let seed_id = want("seed")?;
    let mode = Mode::parse(want("mode")?)
        .ok_or_else(|| ReplayError::Parse("bad mode in repro.meta".into()))?;
    let use_snapshot = want("use_snapshot")? == "1";
    let hex = |s: &str| u64::from_str_radix(s.trim_start_matches("0x"), 16);
    let layout = SandboxLayout {
        cage_base: hex(want("cage_base")?)
            .map_err(|_| ReplayError::Parse("bad cage_base".into()))?,
        cage_size: hex(want("cage_size")?)
            .map_err(|_| ReplayError::Parse("bad cage_size".into()))?,
    };
    let limits = Limits {
        max_steps: want("max_steps")?
            .parse()
            .map_err(|_| ReplayError::Parse("bad max_steps".into()))?,
        ..Limits::default()
    };

    let program = lookup(seed_id).ok_or_else(|| ReplayError::UnknownSeed(seed_id.into()))?;
    let vm_cfg = VmConfig { honor_fuzz_start: use_snapshot, ..VmConfig::default() };
    let mut vm = if mode.intercepts() {
        let inst = instrument(&program, mode.prune()).map_err(VmError::from)?;
        Vm::new(&inst.program, layout, vm_cfg)?
    } else {
        Vm::new(&program, layout, vm_cfg)?
    };
    vm.arm(&limits)?;

    let r = if mode.intercepts() {
        vm.run_one(&mut Interceptor::from_bytes(&input), &limits)
    } else {
        vm.reset();
        apply_writes(vm.cage_mut(), &decode_writes(&input));
        vm.resume(&mut Interceptor::disabled(), &limits)
    };

    match r.outcome.crash() {
        Some(got) if *got == expected => Ok(expected),
        Some(got) => Err(ReplayError::Mismatch {
            expected: expected.render().replace('\n', " "),
            got: got.render().replace('\n', " "),
        }),
        None => Err(ReplayError::NoCrash(r.outcome.brief())),
    }
}

/// Crash directories of a run, sorted by path for stable iteration order.
pub fn crash_dirs(run_dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let root = run_dir.join("crashes");
    let mut out = Vec::new();
    if !root.exists() {
        return Ok(out);
    }
    for seed_entry in fs::read_dir(&root)? {
        let seed_dir = seed_entry?.path();
        if !seed_dir.is_dir() {
            continue;
        }
        for crash_entry in fs::read_dir(&seed_dir)? {
            let dir = crash_entry?.path();
            if dir.is_dir() {
                out.push(dir);
            }
        }
    }
    out.sort();
    Ok(out)
}
