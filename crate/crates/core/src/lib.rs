//! Engine for fault-injection fuzzing across a software-fault-isolation
//! boundary.
//!
//! The crate models a trusted runtime that shares an address space with an
//! untrusted, in-process "cage". Programs are written in a small register IR
//! ([`ir`]), every load that may read cage memory is located and hooked by the
//! [`instrument`] pass, and the [`vm`] executes the result under a shadow-state
//! sanitizer that crashes on trusted-domain memory corruption while tolerating
//! trusted-domain over-reads. The [`interceptor`] perturbs hooked cage loads
//! with XOR bitmasks drawn from a byte stream, and the [`monitor`] runs
//! coverage-guided campaigns that mutate those streams. A shipped [`targets`]
//! suite provides benign programs plus seeded boundary bugs with frozen
//! trigger masks.

pub mod instrument;
pub mod interceptor;
pub mod ir;
pub mod monitor;
pub mod targets;
pub mod util;
pub mod vm;

pub use instrument::{classify_loads, instrument, InstrumentedProgram, LoadClass, PruneStats};
pub use interceptor::{Interceptor, InterceptionRecord, MaskStream};
pub use ir::{edges_of, parse_program, print_program, validate, EdgeId, Program};
pub use monitor::{
    run_baseline, run_campaign, simulate_interception_cost, Budget, CampaignConfig,
    CampaignResult, CostModel, Mode, Seed,
};
pub use targets::{build_suite, verify_triggers, SeededBug, Suite};
pub use vm::{
    execute, snapshot_at_fuzz_start, CrashKind, CrashReport, ExecOutcome, ExecResult, Limits,
    SandboxLayout, Snapshot, Vm,
};
