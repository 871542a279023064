//! Sandbox-aware interpreter with a shadow-state crash oracle.
//!
//! Execution is a pure function of (program, layout, config, mask stream):
//! no wall-clock, no ambient randomness, no host pointers. The oracle is
//! deliberately asymmetric. Reads that escape live trusted allocations
//! return a poison value and execution continues; writes that escape them
//! stop the run with a [`CrashReport`]. Accesses inside the cage never
//! fault: the cage is attacker-territory and corrupting it is the fuzzer's
//! job, not a finding.
//!
//! A program may contain one `fuzz_start` marker. Before it retires, hooked
//! cage loads are counted but consume no mask bytes; afterwards each hooked
//! cage load draws a width-matched XOR chunk from the interceptor. [`Vm::arm`]
//! executes the startup phase once and snapshots the full machine state so a
//! campaign can reset in microseconds instead of re-running startup.

pub mod mem;
pub(crate) mod prog;

pub use mem::{
    CageMem, ConfigError, Region, RegionKind, SandboxLayout, TrustedMem, DEFAULT_CAGE_BASE,
    DEFAULT_CAGE_SIZE,
};

use std::sync::Arc;

use crate::interceptor::Interceptor;
use crate::ir::{self, EdgeId, Program};
use crate::util::Fnv64;
use mem::ByteClass;
use prog::{ExecProgram, XInstr, NONE};

/// Value returned by tolerated out-of-bounds reads, masked to access width.
pub const POISON: u64 = 0x5150_5150_5150_5150;
/// Per-byte poison used when a memcopy source byte is unreadable.
pub const POISON_BYTE: u8 = 0x50;

#[inline]
fn width_mask(width: u8) -> u64 {
    if width >= 8 {
        u64::MAX
    } else {
        (1u64 << (8 * width)) - 1
    }
}

#[derive(Debug, Clone)]
pub struct VmConfig {
    /// Reference-table capacity; `table_put` past it crashes, `table_get`
    /// poisons.
    pub table_capacity: u32,
    /// When false, mask consumption starts at entry even if the program has
    /// a `fuzz_start` (the no-deferral ablation).
    pub honor_fuzz_start: bool,
    pub record_edge_trace: bool,
    pub record_instr_trace: bool,
}

impl Default for VmConfig {
    fn default() -> Self {
        VmConfig {
            table_capacity: 64,
            honor_fuzz_start: true,
            record_edge_trace: false,
            record_instr_trace: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Limits {
    pub max_steps: u64,
    pub max_call_depth: u32,
    /// Largest single trusted allocation (heap or frame slot); bigger
    /// requests end the run instead of faulting the host.
    pub max_trusted_alloc: u64,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            max_steps: 10_000_000,
            max_call_depth: 512,
            max_trusted_alloc: 16 << 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CrashKind {
    OobWrite,
    UafWrite,
    UndefinedSwitch,
    TableIndexOob,
}

impl CrashKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CrashKind::OobWrite => "oob_write",
            CrashKind::UafWrite => "uaf_write",
            CrashKind::UndefinedSwitch => "undefined_switch",
            CrashKind::TableIndexOob => "table_index_oob",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "oob_write" => CrashKind::OobWrite,
            "uaf_write" => CrashKind::UafWrite,
            "undefined_switch" => CrashKind::UndefinedSwitch,
            "table_index_oob" => CrashKind::TableIndexOob,
            _ => return None,
        })
    }
}

impl std::fmt::Display for CrashKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where and how a run died. Coordinates are original (pre-instrumentation)
/// instruction indices, so reports are identical with pruning on, off, or
/// hooks absent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrashReport {
    pub kind: CrashKind,
    pub function: String,
    pub block: String,
    pub instr: u32,
    pub address: Option<u64>,
    pub width: Option<u8>,
}

impl CrashReport {
    /// Deduplication key: crash kind plus static program site.
    pub fn key(&self) -> String {
        format!("{}@{}.{}.{}", self.kind, self.function, self.block, self.instr)
    }

    pub fn render(&self) -> String {
        let mut kv = crate::util::KvLines::new();
        kv.push("kind", self.kind.as_str());
        kv.push("function", &self.function);
        kv.push("block", &self.block);
        kv.push("instr", &self.instr.to_string());
        if let Some(a) = self.address {
            kv.push("address", &format!("{a:#x}"));
        }
        if let Some(w) = self.width {
            kv.push("width", &w.to_string());
        }
        kv.render()
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let kv = crate::util::KvLines::parse(text)?;
        let want = |k: &str| kv.get(k).ok_or_else(|| format!("missing key `{k}`"));
        let kind = CrashKind::parse(want("kind")?).ok_or("bad crash kind")?;
        let instr: u32 = want("instr")?.parse().map_err(|_| "bad instr index")?;
        let address = match kv.get("address") {
            Some(s) => Some(
                u64::from_str_radix(s.trim_start_matches("0x"), 16)
                    .map_err(|_| "bad address")?,
            ),
            None => None,
        };
        let width = match kv.get("width") {
            Some(s) => Some(s.parse::<u8>().map_err(|_| "bad width")?),
            None => None,
        };
        Ok(CrashReport {
            kind,
            function: want("function")?.to_string(),
            block: want("block")?.to_string(),
            instr,
            address,
            width,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LimitKind {
    Steps,
    CallDepth,
    TrustedAlloc,
    CageExhausted,
}

impl LimitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LimitKind::Steps => "steps",
            LimitKind::CallDepth => "call_depth",
            LimitKind::TrustedAlloc => "trusted_alloc",
            LimitKind::CageExhausted => "cage_exhausted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExecOutcome {
    Finished { ret: Option<u64> },
    Crash(CrashReport),
    LimitExceeded(LimitKind),
}

impl ExecOutcome {
    pub fn crash(&self) -> Option<&CrashReport> {
        match self {
            ExecOutcome::Crash(c) => Some(c),
            _ => None,
        }
    }

    pub fn is_crash(&self) -> bool {
        matches!(self, ExecOutcome::Crash(_))
    }

    pub fn brief(&self) -> String {
        match self {
            ExecOutcome::Finished { ret: Some(v) } => format!("finished ret={v:#x}"),
            ExecOutcome::Finished { ret: None } => "finished".into(),
            ExecOutcome::Crash(c) => format!("crash {}", c.key()),
            ExecOutcome::LimitExceeded(k) => format!("limit {}", k.as_str()),
        }
    }
}

/// Per-execution event counters (deltas, not lifetime totals).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExecStats {
    pub steps: u64,
    pub hook_checks: u64,
    pub interceptions: u64,
    pub startup_interceptions: u64,
    pub startup_mask_bytes: u64,
    pub cage_loads: u64,
    pub cage_stores: u64,
    pub tolerated_reads: u64,
    pub invalid_frees: u64,
    pub mask_consumed: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Counters {
    steps: u64,
    hook_checks: u64,
    interceptions: u64,
    startup_interceptions: u64,
    startup_mask_bytes: u64,
    cage_loads: u64,
    cage_stores: u64,
    tolerated_reads: u64,
    invalid_frees: u64,
}

impl Counters {
    fn delta(end: &Counters, start: &Counters) -> ExecStats {
        ExecStats {
            steps: end.steps - start.steps,
            hook_checks: end.hook_checks - start.hook_checks,
            interceptions: end.interceptions - start.interceptions,
            startup_interceptions: end.startup_interceptions - start.startup_interceptions,
            startup_mask_bytes: end.startup_mask_bytes - start.startup_mask_bytes,
            cage_loads: end.cage_loads - start.cage_loads,
            cage_stores: end.cage_stores - start.cage_stores,
            tolerated_reads: end.tolerated_reads - start.tolerated_reads,
            invalid_frees: end.invalid_frees - start.invalid_frees,
            mask_consumed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExecResult {
    pub outcome: ExecOutcome,
    pub stats: ExecStats,
    /// (edge, hit count), sorted by edge id. Startup edges are excluded on
    /// the snapshot path because resets clear per-run coverage.
    pub coverage: Vec<(EdgeId, u32)>,
    /// FNV over the sorted (edge, count) pairs.
    pub cov_hash: u64,
    pub edge_trace: Option<Vec<EdgeId>>,
    pub instr_trace: Option<Vec<String>>,
}

/// What the startup phase (entry to `fuzz_start`) did.
#[derive(Debug, Clone, Copy, Default)]
pub struct StartupInfo {
    pub steps: u64,
    /// Hooked cage loads that retired before `fuzz_start`.
    pub interceptions: u64,
    /// Mask bytes those loads would have consumed without deferral.
    pub mask_bytes: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum VmError {
    #[error(transparent)]
    Validate(#[from] ir::ValidateError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, thiserror::Error)]
pub enum SnapshotError {
    #[error(transparent)]
    Vm(#[from] VmError),
    #[error("fuzz_start unreachable: startup ended with {0}")]
    Unreachable(String),
}

#[derive(Debug, Clone)]
struct Frame {
    func: u32,
    block: u32,
    ip: u32,
    regs: Vec<u64>,
    /// Base address per frame slot, killed on return.
    slots: Vec<u64>,
    ret_dst: u32,
    ret_edge: u32,
}

#[derive(Debug, Clone)]
struct VmSnap {
    frames: Vec<Frame>,
    table: Vec<u64>,
    counters: Counters,
    mask_active: bool,
    fuzz_start_seen: bool,
}

/// Deep state copy; heavier than the journaled reset but independent of it.
#[derive(Debug, Clone)]
pub struct Snapshot {
    cage: CageMem,
    trusted: TrustedMem,
    inner: VmSnap,
    global_bases: Vec<u64>,
}

enum Stop {
    Done,
    AtFuzzStart,
}

enum LoopExit {
    Outcome(ExecOutcome),
    FuzzStart,
}

pub struct Vm {
    prog: Arc<ExecProgram>,
    layout: SandboxLayout,
    cfg: VmConfig,
    cage: CageMem,
    trusted: TrustedMem,
    global_bases: Vec<u64>,
    table: Vec<u64>,
    frames: Vec<Frame>,
    mask_active: bool,
    fuzz_start_seen: bool,
    counters: Counters,
    edge_count: Vec<u32>,
    touched: Vec<u32>,
    edge_trace: Vec<EdgeId>,
    instr_trace: Vec<String>,
    snap: Option<VmSnap>,
}

impl Vm {
    pub fn new(p: &Program, layout: SandboxLayout, cfg: VmConfig) -> Result<Vm, VmError> {
        if cfg.table_capacity == 0 {
            return Err(ConfigError::ZeroTableCapacity.into());
        }
        SandboxLayout::new(layout.cage_base, layout.cage_size)?;
        let prog = Arc::new(ExecProgram::compile(p)?);
        let n_edges = prog.n_edges as usize;
        let mut vm = Vm {
            prog,
            layout,
            cfg,
            cage: CageMem::new(layout),
            trusted: TrustedMem::new(),
            global_bases: Vec::new(),
            table: Vec::new(),
            frames: Vec::new(),
            mask_active: false,
            fuzz_start_seen: false,
            counters: Counters::default(),
            edge_count: vec![0; n_edges],
            touched: Vec::new(),
            edge_trace: Vec::new(),
            instr_trace: Vec::new(),
            snap: None,
        };
        vm.boot();
        Ok(vm)
    }

    pub fn n_edges(&self) -> u32 {
        self.prog.n_edges
    }

    pub fn layout(&self) -> SandboxLayout {
        self.layout
    }

    pub fn cage(&self) -> &CageMem {
        &self.cage
    }

    /// Direct cage access for the baseline's corruption-write API.
    pub fn cage_mut(&mut self) -> &mut CageMem {
        &mut self.cage
    }

    /// Fresh machine: globals laid out, entry frame pushed, no snapshot.
    fn boot(&mut self) {
        self.cage = CageMem::new(self.layout);
        self.trusted = TrustedMem::new();
        self.global_bases = self
            .prog
            .globals
            .iter()
            .map(|(_, init)| self.trusted.alloc_init(RegionKind::Global, init))
            .collect::<Vec<_>>();
        self.table = vec![0; self.cfg.table_capacity as usize];
        self.frames.clear();
        self.push_entry_frame();
        self.mask_active = !(self.cfg.honor_fuzz_start && self.prog.has_fuzz_start);
        self.fuzz_start_seen = false;
        self.counters = Counters::default();
        self.snap = None;
        self.clear_cov();
    }

    fn push_entry_frame(&mut self) {
        let entry = self.prog.entry;
        let f = &self.prog.fns[entry as usize];
        let regs = vec![0u64; f.nregs as usize];
        let slots: Vec<u64> = f
            .frame
            .iter()
            .map(|&sz| self.trusted.alloc(RegionKind::Stack, sz))
            .collect();
        self.frames.push(Frame {
            func: entry,
            block: 0,
            ip: 0,
            regs,
            slots,
            ret_dst: NONE,
            ret_edge: NONE,
        });
    }

    fn clear_cov(&mut self) {
        for &e in &self.touched {
            self.edge_count[e as usize] = 0;
        }
        self.touched.clear();
        self.edge_trace.clear();
        self.instr_trace.clear();
    }

    /// One-shot run from a fresh boot.
    pub fn run(&mut self, intc: &mut Interceptor, limits: &Limits) -> ExecResult {
        self.boot();
        self.resume(intc, limits)
    }

    /// Runs startup with interception off and freezes the reset point there.
    /// Programs without `fuzz_start` (or with deferral disabled) arm at boot,
    /// so the whole run is fuzzed.
    pub fn arm(&mut self, limits: &Limits) -> Result<StartupInfo, SnapshotError> {
        self.boot();
        if self.prog.has_fuzz_start && self.cfg.honor_fuzz_start {
            let mut quiet = Interceptor::disabled();
            match self.exec_loop(&mut quiet, limits, Stop::AtFuzzStart) {
                LoopExit::FuzzStart => {}
                LoopExit::Outcome(o) => return Err(SnapshotError::Unreachable(o.brief())),
            }
        }
        self.cage.arm();
        self.trusted.arm();
        self.snap = Some(VmSnap {
            frames: self.frames.clone(),
            table: self.table.clone(),
            counters: self.counters,
            mask_active: self.mask_active,
            fuzz_start_seen: self.fuzz_start_seen,
        });
        Ok(StartupInfo {
            steps: self.counters.steps,
            interceptions: self.counters.startup_interceptions,
            mask_bytes: self.counters.startup_mask_bytes,
        })
    }

    pub fn armed(&self) -> bool {
        self.snap.is_some()
    }

    /// Journaled rollback to the armed point. Clears per-run coverage.
    pub fn reset(&mut self) {
        let snap = self.snap.as_ref().expect("reset before arm");
        self.cage.reset();
        self.trusted.reset();
        self.frames.clone_from(&snap.frames);
        self.table.copy_from_slice(&snap.table);
        self.counters = snap.counters;
        self.mask_active = snap.mask_active;
        self.fuzz_start_seen = snap.fuzz_start_seen;
        self.clear_cov();
    }

    /// Campaign hot path: rollback, then execute one input to completion.
    pub fn run_one(&mut self, intc: &mut Interceptor, limits: &Limits) -> ExecResult {
        self.reset();
        self.resume(intc, limits)
    }

    /// Continues from the current machine position to completion.
    pub fn resume(&mut self, intc: &mut Interceptor, limits: &Limits) -> ExecResult {
        assert!(!self.frames.is_empty(), "resume on a finished machine");
        let c0 = self.counters;
        let consumed0 = intc.consumed();
        let outcome = match self.exec_loop(intc, limits, Stop::Done) {
            LoopExit::Outcome(o) => o,
            LoopExit::FuzzStart => unreachable!(),
        };
        let mut coverage: Vec<(EdgeId, u32)> = self
            .touched
            .iter()
            .map(|&e| (EdgeId(e), self.edge_count[e as usize]))
            .collect();
        coverage.sort_unstable_by_key(|p| p.0 .0);
        let mut h = Fnv64::new();
        for (e, n) in &coverage {
            h.write_u64(e.0 as u64);
            h.write_u64(*n as u64);
        }
        let mut stats = Counters::delta(&self.counters, &c0);
        stats.mask_consumed = intc.consumed() - consumed0;
        ExecResult {
            outcome,
            stats,
            coverage,
            cov_hash: h.finish(),
            edge_trace: self
                .cfg
                .record_edge_trace
                .then(|| std::mem::take(&mut self.edge_trace)),
            instr_trace: self
                .cfg
                .record_instr_trace
                .then(|| std::mem::take(&mut self.instr_trace)),
        }
    }

    /// Deep copy of the full machine state (memory, table, frames, phase).
    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            cage: self.cage.clone(),
            trusted: self.trusted.clone(),
            inner: VmSnap {
                frames: self.frames.clone(),
                table: self.table.clone(),
                counters: self.counters,
                mask_active: self.mask_active,
                fuzz_start_seen: self.fuzz_start_seen,
            },
            global_bases: self.global_bases.clone(),
        }
    }

    pub fn restore(&mut self, s: &Snapshot) {
        self.cage = s.cage.clone();
        self.trusted = s.trusted.clone();
        self.frames = s.inner.frames.clone();
        self.table = s.inner.table.clone();
        self.counters = s.inner.counters;
        self.mask_active = s.inner.mask_active;
        self.fuzz_start_seen = s.inner.fuzz_start_seen;
        self.global_bases = s.global_bases.clone();
        self.clear_cov();
    }

    /// FNV digest of architectural state: memories, table, frames. Event
    /// counters and interception bookkeeping are observability, not state,
    /// and are excluded.
    pub fn state_digest(&self) -> u64 {
        let mut h = Fnv64::new();
        self.cage.digest(&mut h);
        self.trusted.digest(&mut h);
        for &t in &self.table {
            h.write_u64(t);
        }
        h.write_u64(self.frames.len() as u64);
        for fr in &self.frames {
            h.write_u64(fr.func as u64);
            h.write_u64(fr.block as u64);
            h.write_u64(fr.ip as u64);
            for &r in &fr.regs {
                h.write_u64(r);
            }
            for &s in &fr.slots {
                h.write_u64(s);
            }
        }
        h.write_u64(self.fuzz_start_seen as u64);
        h.finish()
    }

    // ---- interpreter ----

    #[inline]
    fn reg(&self, r: u32) -> u64 {
        self.frames.last().unwrap().regs[r as usize]
    }

    #[inline]
    fn set_reg(&mut self, r: u32, v: u64) {
        self.frames.last_mut().unwrap().regs[r as usize] = v;
    }

    #[inline]
    fn advance(&mut self) {
        self.frames.last_mut().unwrap().ip += 1;
    }

    #[inline]
    fn jump(&mut self, block: u32) {
        let fr = self.frames.last_mut().unwrap();
        fr.block = block;
        fr.ip = 0;
    }

    #[inline]
    fn edge(&mut self, id: u32) {
        let c = &mut self.edge_count[id as usize];
        if *c == 0 {
            self.touched.push(id);
        }
        *c = c.saturating_add(1);
        if self.cfg.record_edge_trace {
            self.edge_trace.push(EdgeId(id));
        }
    }

    fn crash_here(&self, kind: CrashKind, address: Option<u64>, width: Option<u8>) -> CrashReport {
        let fr = self.frames.last().unwrap();
        let f = &self.prog.fns[fr.func as usize];
        CrashReport {
            kind,
            function: f.name.clone(),
            block: f.labels[fr.block as usize].clone(),
            instr: f.blocks[fr.block as usize].orig_idx[fr.ip as usize],
            address,
            width,
        }
    }

    fn mem_load(&mut self, addr: u64, width: u8) -> u64 {
        if self.cage.contains(addr) {
            self.counters.cage_loads += 1;
            if let Some(v) = self.cage.read_fast(addr, width) {
                return v;
            }
            self.counters.tolerated_reads += 1;
            return POISON & width_mask(width);
        }
        if let Some(v) = self.trusted.read(addr, width) {
            return v;
        }
        self.counters.tolerated_reads += 1;
        POISON & width_mask(width)
    }

    fn mem_store(&mut self, addr: u64, val: u64, width: u8) -> Result<(), CrashKind> {
        if self.cage.contains(addr) {
            self.counters.cage_stores += 1;
            if self.cage.write_fast(addr, val, width) {
                return Ok(());
            }
            // Straddles the cage end: the escaping byte is a trusted-domain
            // write.
            for i in 0..width as u64 {
                let a = addr.wrapping_add(i);
                if !self.cage.contains(a) {
                    return Err(kind_of(self.trusted.classify_byte(a)));
                }
                self.cage.write_byte(a, (val >> (8 * i)) as u8);
            }
            unreachable!("straddling store had no escaping byte");
        }
        self.trusted.write(addr, val, width).map_err(kind_of)
    }

    fn read_byte_any(&mut self, addr: u64) -> Option<u8> {
        if let Some(b) = self.cage.read_byte(addr) {
            return Some(b);
        }
        self.trusted.read_byte(addr)
    }

    fn trace(&mut self, detail: String) {
        let fr = self.frames.last().unwrap();
        let f = &self.prog.fns[fr.func as usize];
        let line = format!(
            "{}:{}:{} {}",
            f.name, f.labels[fr.block as usize], f.blocks[fr.block as usize].orig_idx[fr.ip as usize], detail
        );
        self.instr_trace.push(line);
    }

    fn exec_loop(&mut self, intc: &mut Interceptor, limits: &Limits, stop: Stop) -> LoopExit {
        use ExecOutcome::*;
        let prog = Arc::clone(&self.prog);
        loop {
            let fr = self.frames.last().unwrap();
            let f = &prog.fns[fr.func as usize];
            let blk = &f.blocks[fr.block as usize];
            let ins = &blk.instrs[fr.ip as usize];
            self.counters.steps += 1;
            if self.counters.steps > limits.max_steps {
                return LoopExit::Outcome(LimitExceeded(LimitKind::Steps));
            }
            match ins {
                XInstr::Const { dst, imm } => {
                    if self.cfg.record_instr_trace {
                        self.trace(format!("const {imm:#x}"));
                    }
                    self.set_reg(*dst, *imm);
                    self.advance();
                }
                XInstr::Bin { op, dst, a, b } => {
                    use ir::BinOp::*;
                    let (x, y) = (self.reg(*a), self.reg(*b));
                    let v = match op {
                        Add => x.wrapping_add(y),
                        Sub => x.wrapping_sub(y),
                        Mul => x.wrapping_mul(y),
                        And => x & y,
                        Or => x | y,
                        Xor => x ^ y,
                        Shl => x << (y & 63),
                        Shr => x >> (y & 63),
                    };
                    if self.cfg.record_instr_trace {
                        self.trace(op.mnemonic().to_string());
                    }
                    self.set_reg(*dst, v);
                    self.advance();
                }
                XInstr::Cmp { op, dst, a, b } => {
                    use ir::CmpOp::*;
                    let (x, y) = (self.reg(*a), self.reg(*b));
                    let v = match op {
                        Eq => x == y,
                        Ne => x != y,
                        Ult => x < y,
                        Ule => x <= y,
                        Slt => (x as i64) < (y as i64),
                        Sle => (x as i64) <= (y as i64),
                    } as u64;
                    if self.cfg.record_instr_trace {
                        self.trace(format!("cmp {}", op.mnemonic()));
                    }
                    self.set_reg(*dst, v);
                    self.advance();
                }
                XInstr::Alloca { dst, slot } => {
                    let base = self.frames.last().unwrap().slots[*slot as usize];
                    if self.cfg.record_instr_trace {
                        self.trace(format!("alloca slot{slot}"));
                    }
                    self.set_reg(*dst, base);
                    self.advance();
                }
                XInstr::GlobalAddr { dst, global } => {
                    let base = self.global_bases[*global as usize];
                    if self.cfg.record_instr_trace {
                        self.trace("global_addr".to_string());
                    }
                    self.set_reg(*dst, base);
                    self.advance();
                }
                XInstr::HeapAlloc { dst, size } => {
                    let sz = self.reg(*size);
                    if sz > limits.max_trusted_alloc {
                        return LoopExit::Outcome(LimitExceeded(LimitKind::TrustedAlloc));
                    }
                    let base = self.trusted.alloc(RegionKind::Heap, sz);
                    if self.cfg.record_instr_trace {
                        self.trace(format!("heap_alloc {sz:#x}"));
                    }
                    self.set_reg(*dst, base);
                    self.advance();
                }
                XInstr::CageAlloc { dst, size } => {
                    let sz = self.reg(*size);
                    let Some(base) = self.cage.alloc(sz) else {
                        return LoopExit::Outcome(LimitExceeded(LimitKind::CageExhausted));
                    };
                    if self.cfg.record_instr_trace {
                        self.trace(format!("cage_alloc {sz:#x}"));
                    }
                    self.set_reg(*dst, base);
                    self.advance();
                }
                XInstr::Load { dst, addr, width } => {
                    let a = self.reg(*addr);
                    if self.cfg.record_instr_trace {
                        self.trace(format!("load a={a:#x} w={width}"));
                    }
                    let v = self.mem_load(a, *width);
                    self.set_reg(*dst, v);
                    self.advance();
                }
                XInstr::Store { addr, val, width } => {
                    let (a, v) = (self.reg(*addr), self.reg(*val));
                    if self.cfg.record_instr_trace {
                        self.trace(format!("store a={a:#x} w={width}"));
                    }
                    match self.mem_store(a, v, *width) {
                        Ok(()) => self.advance(),
                        Err(kind) => {
                            return LoopExit::Outcome(Crash(self.crash_here(
                                kind,
                                Some(a),
                                Some(*width),
                            )))
                        }
                    }
                }
                XInstr::MemCopy { dst, src, len } => {
                    let (d, s, n) = (self.reg(*dst), self.reg(*src), self.reg(*len));
                    if self.cfg.record_instr_trace {
                        self.trace(format!("memcopy d={d:#x} s={s:#x} n={n:#x}"));
                    }
                    // Copy work is charged against the step budget up front.
                    let remaining = limits.max_steps - self.counters.steps;
                    if n > remaining {
                        self.counters.steps = limits.max_steps;
                        return LoopExit::Outcome(LimitExceeded(LimitKind::Steps));
                    }
                    self.counters.steps += n;
                    if self.cage.contains(s) {
                        self.counters.cage_loads += 1;
                    }
                    if self.cage.contains(d) {
                        self.counters.cage_stores += 1;
                    }
                    let mut poisoned_src = false;
                    let mut fault: Option<(CrashKind, u64)> = None;
                    for i in 0..n {
                        let sb = s.wrapping_add(i);
                        let db = d.wrapping_add(i);
                        let byte = match self.read_byte_any(sb) {
                            Some(b) => b,
                            None => {
                                poisoned_src = true;
                                POISON_BYTE
                            }
                        };
                        if self.cage.write_byte(db, byte) {
                            continue;
                        }
                        if let Err(class) = self.trusted.write_byte(db, byte) {
                            fault = Some((kind_of(class), db));
                            break;
                        }
                    }
                    if poisoned_src {
                        self.counters.tolerated_reads += 1;
                    }
                    match fault {
                        None => self.advance(),
                        Some((kind, at)) => {
                            return LoopExit::Outcome(Crash(self.crash_here(
                                kind,
                                Some(at),
                                Some(1),
                            )))
                        }
                    }
                }
                XInstr::TablePut { idx, val } => {
                    let (i, v) = (self.reg(*idx), self.reg(*val));
                    if self.cfg.record_instr_trace {
                        self.trace(format!("table_put {i}"));
                    }
                    if i >= self.table.len() as u64 {
                        return LoopExit::Outcome(Crash(self.crash_here(
                            CrashKind::TableIndexOob,
                            None,
                            None,
                        )));
                    }
                    self.table[i as usize] = v;
                    self.advance();
                }
                XInstr::TableGet { dst, idx } => {
                    let i = self.reg(*idx);
                    if self.cfg.record_instr_trace {
                        self.trace(format!("table_get {i}"));
                    }
                    let v = if i < self.table.len() as u64 {
                        self.table[i as usize]
                    } else {
                        self.counters.tolerated_reads += 1;
                        POISON
                    };
                    self.set_reg(*dst, v);
                    self.advance();
                }
                XInstr::Free { addr } => {
                    let a = self.reg(*addr);
                    if self.cfg.record_instr_trace {
                        self.trace(format!("free a={a:#x}"));
                    }
                    if self.cage.contains(a) || !self.trusted.kill(a, RegionKind::Heap) {
                        self.counters.invalid_frees += 1;
                    }
                    self.advance();
                }
                XInstr::Switch { val, cases, default, edge_base } => {
                    let v = self.reg(*val);
                    if self.cfg.record_instr_trace {
                        self.trace(format!("switch {v}"));
                    }
                    let hit = cases.iter().position(|(k, _)| *k == v);
                    match hit {
                        Some(i) => {
                            let (_, target) = cases[i];
                            self.edge(edge_base + i as u32);
                            self.jump(target);
                        }
                        None if *default != NONE => {
                            self.edge(edge_base + cases.len() as u32);
                            self.jump(*default);
                        }
                        None => {
                            return LoopExit::Outcome(Crash(self.crash_here(
                                CrashKind::UndefinedSwitch,
                                None,
                                None,
                            )))
                        }
                    }
                }
                XInstr::Br { target, edge } => {
                    if self.cfg.record_instr_trace {
                        self.trace("br".to_string());
                    }
                    self.edge(*edge);
                    self.jump(*target);
                }
                XInstr::BrIf { cond, then_to, else_to, edge_base } => {
                    let c = self.reg(*cond) != 0;
                    if self.cfg.record_instr_trace {
                        self.trace(format!("br_if {}", c as u8));
                    }
                    if c {
                        self.edge(*edge_base);
                        self.jump(*then_to);
                    } else {
                        self.edge(*edge_base + 1);
                        self.jump(*else_to);
                    }
                }
                XInstr::Call { dst, callee, args, call_edge, ret_edge } => {
                    if self.frames.len() as u32 >= limits.max_call_depth {
                        return LoopExit::Outcome(LimitExceeded(LimitKind::CallDepth));
                    }
                    let target = &prog.fns[*callee as usize];
                    if self.cfg.record_instr_trace {
                        self.trace(format!("call {}", target.name));
                    }
                    for &sz in target.frame.iter() {
                        if sz > limits.max_trusted_alloc {
                            return LoopExit::Outcome(LimitExceeded(LimitKind::TrustedAlloc));
                        }
                    }
                    let mut regs = vec![0u64; target.nregs as usize];
                    for (i, &a) in args.iter().enumerate() {
                        regs[i] = self.reg(a);
                    }
                    let slots: Vec<u64> = target
                        .frame
                        .iter()
                        .map(|&sz| self.trusted.alloc(RegionKind::Stack, sz))
                        .collect();
                    self.edge(*call_edge);
                    self.frames.push(Frame {
                        func: *callee,
                        block: 0,
                        ip: 0,
                        regs,
                        slots,
                        ret_dst: *dst,
                        ret_edge: *ret_edge,
                    });
                }
                XInstr::Ret { val } => {
                    if self.cfg.record_instr_trace {
                        self.trace("ret".to_string());
                    }
                    let v = if *val == NONE { None } else { Some(self.reg(*val)) };
                    let done = self.frames.pop().unwrap();
                    for &slot in &done.slots {
                        self.trusted.kill_slot(slot);
                    }
                    if done.ret_edge != NONE {
                        self.edge(done.ret_edge);
                    }
                    match self.frames.last_mut() {
                        None => return LoopExit::Outcome(Finished { ret: v }),
                        Some(caller) => {
                            if done.ret_dst != NONE {
                                // A valueless ret into a value-expecting call
                                // yields 0.
                                caller.regs[done.ret_dst as usize] = v.unwrap_or(0);
                            }
                            caller.ip += 1;
                        }
                    }
                }
                XInstr::FuzzStart => {
                    if self.cfg.record_instr_trace {
                        self.trace("fuzz_start".to_string());
                    }
                    self.fuzz_start_seen = true;
                    self.mask_active = true;
                    self.advance();
                    if matches!(stop, Stop::AtFuzzStart) {
                        return LoopExit::FuzzStart;
                    }
                }
                XInstr::Halt => {
                    if self.cfg.record_instr_trace {
                        self.trace("halt".to_string());
                    }
                    return LoopExit::Outcome(Finished { ret: None });
                }
                XInstr::Hook { site, addr, width } => {
                    let a = self.reg(*addr);
                    self.counters.hook_checks += 1;
                    if self.cage.contains(a) {
                        if self.prog.has_fuzz_start && !self.fuzz_start_seen {
                            self.counters.startup_interceptions += 1;
                            self.counters.startup_mask_bytes += *width as u64;
                        }
                        if self.mask_active && intc.enabled() {
                            self.counters.interceptions += 1;
                            if self.cfg.record_instr_trace {
                                self.trace(format!("hook site={site} a={a:#x} w={width}"));
                            }
                            intc.intercept_load(*site, a, *width, &mut self.cage);
                        }
                    }
                    self.advance();
                }
            }
        }
    }
}

fn kind_of(class: ByteClass) -> CrashKind {
    match class {
        ByteClass::Dead => CrashKind::UafWrite,
        // A write escaping its own region is out-of-bounds even if the
        // escaping byte happens to land in some other mapping.
        ByteClass::Gap | ByteClass::Live(..) => CrashKind::OobWrite,
    }
}

/// Validates, boots a fresh machine, and runs `p` once.
pub fn execute(
    p: &Program,
    layout: SandboxLayout,
    cfg: VmConfig,
    intc: &mut Interceptor,
    limits: &Limits,
) -> Result<ExecResult, VmError> {
    let mut vm = Vm::new(p, layout, cfg)?;
    Ok(vm.run(intc, limits))
}

/// Boots, executes startup with interception off, and returns the machine
/// armed at `fuzz_start` (or at entry when the program has none).
pub fn snapshot_at_fuzz_start(
    p: &Program,
    layout: SandboxLayout,
    cfg: VmConfig,
    limits: &Limits,
) -> Result<(Vm, StartupInfo), SnapshotError> {
    let mut vm = Vm::new(p, layout, cfg)?;
    let info = vm.arm(limits)?;
    Ok((vm, info))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instrument::instrument;
    use crate::ir::parse_program;

    fn run_src(src: &str) -> ExecResult {
        let p = parse_program(src).unwrap();
        execute(
            &p,
            SandboxLayout::default(),
            VmConfig::default(),
            &mut Interceptor::disabled(),
            &Limits::default(),
        )
        .unwrap()
    }

    #[test]
    fn arithmetic_and_return() {
        let r = run_src(
            "fn main() {\n  b0:\n    const r0, 6\n    const r1, 7\n    mul r2, r0, r1\n    ret r2\n}\n",
        );
        assert_eq!(r.outcome, ExecOutcome::Finished { ret: Some(42) });
    }

    #[test]
    fn cage_roundtrip_and_counters() {
        let r = run_src(
            "fn main() {\n  b0:\n    const r0, 64\n    cage_alloc r1, r0\n    const r2, 0xabcd\n    store r1, r2, 4\n    load r3, r1, 4\n    ret r3\n}\n",
        );
        assert_eq!(r.outcome, ExecOutcome::Finished { ret: Some(0xabcd) });
        assert_eq!(r.stats.cage_loads, 1);
        assert_eq!(r.stats.cage_stores, 1);
        assert_eq!(r.stats.tolerated_reads, 0);
    }

    #[test]
    fn trusted_oob_read_poisons_and_continues() {
        let r = run_src(
            "fn main() {\n  frame {\n    slot0: 8\n  }\n  b0:\n    alloca r0, slot0\n    const r1, 64\n    add r2, r0, r1\n    load r3, r2, 4\n    ret r3\n}\n",
        );
        assert_eq!(
            r.outcome,
            ExecOutcome::Finished { ret: Some(POISON & 0xffff_ffff) }
        );
        assert_eq!(r.stats.tolerated_reads, 1);
    }

    #[test]
    fn trusted_oob_write_crashes() {
        let r = run_src(
            "fn main() {\n  frame {\n    slot0: 8\n  }\n  b0:\n    alloca r0, slot0\n    const r1, 64\n    add r2, r0, r1\n    store r2, r1, 4\n    halt\n}\n",
        );
        let c = r.outcome.crash().expect("oob write must crash");
        assert_eq!(c.kind, CrashKind::OobWrite);
        assert_eq!(c.function, "main");
        assert_eq!(c.block, "b0");
        assert_eq!(c.instr, 3);
        assert_eq!(c.width, Some(4));
    }

    #[test]
    fn uaf_write_classified() {
        let r = run_src(
            "fn main() {\n  b0:\n    const r0, 32\n    heap_alloc r1, r0\n    free r1\n    store r1, r0, 8\n    halt\n}\n",
        );
        assert_eq!(r.outcome.crash().unwrap().kind, CrashKind::UafWrite);
    }

    #[test]
    fn defaultless_switch_crashes_table_ops_split() {
        let r = run_src(
            "fn main() {\n  b0:\n    const r0, 9\n    switch r0, [0: b1, 1: b1]\n  b1:\n    halt\n}\n",
        );
        assert_eq!(r.outcome.crash().unwrap().kind, CrashKind::UndefinedSwitch);

        let r = run_src(
            "fn main() {\n  b0:\n    const r0, 100\n    table_get r1, r0\n    const r2, 1\n    table_put r0, r2\n    halt\n}\n",
        );
        let c = r.outcome.crash().unwrap();
        assert_eq!(c.kind, CrashKind::TableIndexOob);
        assert_eq!(r.stats.tolerated_reads, 1);
    }

    #[test]
    fn call_ret_and_edges() {
        let src = "fn add1(params=1) {\n  b0:\n    const r1, 1\n    add r2, r0, r1\n    ret r2\n}\n\nfn main() {\n  b0:\n    const r0, 41\n    call r1, add1(r0)\n    ret r1\n}\n";
        let r = run_src(src);
        assert_eq!(r.outcome, ExecOutcome::Finished { ret: Some(42) });
        // call + ret edges both covered exactly once
        assert_eq!(r.coverage.len(), 2);
        assert!(r.coverage.iter().all(|&(_, n)| n == 1));
    }

    #[test]
    fn step_limit_and_call_depth() {
        let p = parse_program("fn main() {\n  b0:\n    br b0\n}\n").unwrap();
        let r = execute(
            &p,
            SandboxLayout::default(),
            VmConfig::default(),
            &mut Interceptor::disabled(),
            &Limits { max_steps: 1000, ..Limits::default() },
        )
        .unwrap();
        assert_eq!(r.outcome, ExecOutcome::LimitExceeded(LimitKind::Steps));

        let p = parse_program(
            "fn main() {\n  b0:\n    call down()\n    halt\n}\n\nfn down() {\n  b0:\n    call down()\n    ret\n}\n",
        )
        .unwrap();
        let r = execute(
            &p,
            SandboxLayout::default(),
            VmConfig::default(),
            &mut Interceptor::disabled(),
            &Limits::default(),
        )
        .unwrap();
        assert_eq!(r.outcome, ExecOutcome::LimitExceeded(LimitKind::CallDepth));
    }

    #[test]
    fn memcopy_poison_source_and_oob_dest() {
        // Source straddles past a heap region: poisoned bytes, tolerated.
        let r = run_src(
            "fn main() {\n  b0:\n    const r0, 8\n    heap_alloc r1, r0\n    const r2, 64\n    cage_alloc r3, r2\n    const r4, 16\n    memcopy r3, r1, r4\n    load r5, r3, 8\n    add r6, r3, r0\n    load r7, r6, 8\n    ret r7\n}\n",
        );
        let poison8 = u64::from_le_bytes([POISON_BYTE; 8]);
        assert_eq!(r.outcome, ExecOutcome::Finished { ret: Some(poison8) });
        assert_eq!(r.stats.tolerated_reads, 1);

        // Destination overruns a heap region: crash at the first bad byte.
        let r = run_src(
            "fn main() {\n  b0:\n    const r0, 8\n    heap_alloc r1, r0\n    const r2, 64\n    cage_alloc r3, r2\n    const r4, 16\n    memcopy r1, r3, r4\n    halt\n}\n",
        );
        let c = r.outcome.crash().unwrap();
        assert_eq!(c.kind, CrashKind::OobWrite);
        assert_eq!(c.width, Some(1));
    }

    const HOOKED: &str = "fn main() {\n  b0:\n    const r0, 64\n    cage_alloc r1, r0\n    const r2, 5\n    store r1, r2, 4\n    load r3, r1, 4\n    fuzz_start\n    load r4, r1, 4\n    ret r4\n}\n";

    #[test]
    fn masks_defer_until_fuzz_start() {
        let p = parse_program(HOOKED).unwrap();
        let inst = instrument(&p, true).unwrap();
        let mut intc = Interceptor::from_bytes(&[0xFF, 0x00, 0x00, 0x00]);
        let r = execute(
            &inst.program,
            SandboxLayout::default(),
            VmConfig::default(),
            &mut intc,
            &Limits::default(),
        )
        .unwrap();
        // Pre-start load untouched; post-start load xored with 0xFF.
        assert_eq!(r.outcome, ExecOutcome::Finished { ret: Some(5 ^ 0xFF) });
        assert_eq!(r.stats.hook_checks, 2);
        assert_eq!(r.stats.startup_interceptions, 1);
        assert_eq!(r.stats.interceptions, 1);
        assert_eq!(r.stats.mask_consumed, 4);
    }

    #[test]
    fn snapshot_resume_matches_straight_run() {
        let p = parse_program(HOOKED).unwrap();
        let inst = instrument(&p, true).unwrap();
        let layout = SandboxLayout::default();
        let limits = Limits::default();
        let mask = [0x5A, 0x00, 0x01, 0x00];

        let mut straight = Vm::new(&inst.program, layout, VmConfig::default()).unwrap();
        let a = straight.run(&mut Interceptor::from_bytes(&mask), &limits);

        let (mut vm, info) = snapshot_at_fuzz_start(
            &inst.program,
            layout,
            VmConfig::default(),
            &limits,
        )
        .unwrap();
        assert_eq!(info.interceptions, 1);
        assert_eq!(info.mask_bytes, 4);
        let b = vm.run_one(&mut Interceptor::from_bytes(&mask), &limits);
        let b2 = vm.run_one(&mut Interceptor::from_bytes(&mask), &limits);

        assert_eq!(a.outcome, b.outcome);
        assert_eq!(b.outcome, b2.outcome);
        assert_eq!(b.cov_hash, b2.cov_hash);
        assert_eq!(straight.state_digest(), vm.state_digest());
    }

    #[test]
    fn deep_snapshot_agrees_with_journal_reset() {
        let p = parse_program(HOOKED).unwrap();
        let inst = instrument(&p, true).unwrap();
        let limits = Limits::default();
        let (mut vm, _) = snapshot_at_fuzz_start(
            &inst.program,
            SandboxLayout::default(),
            VmConfig::default(),
            &limits,
        )
        .unwrap();
        let deep = vm.snapshot();
        let mask = [0x77, 0x12, 0x00, 0xF0];
        let via_journal = vm.run_one(&mut Interceptor::from_bytes(&mask), &limits);
        let digest_journal = vm.state_digest();
        vm.restore(&deep);
        let via_deep = vm.resume(&mut Interceptor::from_bytes(&mask), &limits);
        assert_eq!(via_journal.outcome, via_deep.outcome);
        assert_eq!(via_journal.cov_hash, via_deep.cov_hash);
        assert_eq!(digest_journal, vm.state_digest());
    }

    #[test]
    fn crash_report_roundtrip() {
        let c = CrashReport {
            kind: CrashKind::UafWrite,
            function: "main".into(),
            block: "b3".into(),
            instr: 7,
            address: Some(0x1000_0000_0040),
            width: Some(8),
        };
        let back = CrashReport::parse(&c.render()).unwrap();
        assert_eq!(c, back);
        assert_eq!(c.key(), "uaf_write@main.b3.7");
    }
}
