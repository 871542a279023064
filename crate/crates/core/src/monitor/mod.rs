//! Campaign orchestration: scheduling, mutation, novelty, crash triage,
//! and artifact persistence.
//!
//! A campaign is a pure function of (seed programs, config). Workers are
//! independent fuzzing loops over the same seed set, distinguished only by
//! their rng stream (`rng_seed + worker index`); the coordinator merges
//! their findings append-only in worker order, so a run with an execution
//! budget is bit-reproducible at any worker count. Wall-clock budgets
//! trade that away for convenience and say so in their artifact metadata.

mod baseline;
mod corpus;
mod cost;
mod coverage;
mod mutate;
mod persist;
mod replay;

pub use baseline::{apply_writes, decode_writes, encode_writes, CageWrite, WRITE_RECORD_LEN};
pub use corpus::{Corpus, TestCase};
pub use cost::{simulate_interception_cost, CostModel, CostReport};
pub use coverage::CoverageMap;
pub use mutate::{mutate, MAX_PAYLOAD_LEN, MAX_STACK};
pub use replay::{crash_dirs, replay_crash, ReplayError};

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::instrument::instrument;
use crate::interceptor::Interceptor;
use crate::ir::Program;
use crate::targets::{SeededBug, Target};
use crate::vm::{
    ConfigError, CrashReport, ExecOutcome, ExecResult, Limits, SandboxLayout, SnapshotError,
    StartupInfo, Vm, VmConfig, VmError,
};

/// What varies between the evaluated configurations. Modes differ in
/// exactly one dimension each: `Baseline` swaps load interception for raw
/// cage writes, `Nocov` drops coverage feedback, `Noprune` hooks every
/// load including proven-trusted ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Mode {
    Sbxbrk,
    Baseline,
    Nocov,
    Noprune,
}

pub const MODES: [Mode; 4] = [Mode::Sbxbrk, Mode::Baseline, Mode::Nocov, Mode::Noprune];

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Sbxbrk => "sbxbrk",
            Mode::Baseline => "baseline",
            Mode::Nocov => "nocov",
            Mode::Noprune => "noprune",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "sbxbrk" => Mode::Sbxbrk,
            "baseline" => Mode::Baseline,
            "nocov" => Mode::Nocov,
            "noprune" => Mode::Noprune,
            _ => return None,
        })
    }

    /// Whether proven-trusted loads are left unhooked.
    pub fn prune(self) -> bool {
        !matches!(self, Mode::Noprune)
    }

    /// Whether novel coverage admits inputs to the corpus.
    pub fn coverage_guided(self) -> bool {
        !matches!(self, Mode::Nocov)
    }

    /// Whether payloads are mask streams (vs. baseline write lists).
    pub fn intercepts(self) -> bool {
        !matches!(self, Mode::Baseline)
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Stop condition. Execution budgets are reproducible; time budgets are
/// not, since the execution count then depends on host speed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Budget {
    Execs(u64),
    Seconds(u64),
}

impl Budget {
    /// Inverse of `Display`: `execs:N` or `secs:N`.
    pub fn parse(s: &str) -> Option<Self> {
        let (kind, n) = s.split_once(':')?;
        let n = n.parse().ok()?;
        match kind {
            "execs" => Some(Budget::Execs(n)),
            "secs" => Some(Budget::Seconds(n)),
            _ => None,
        }
    }
}

impl std::fmt::Display for Budget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Budget::Execs(n) => write!(f, "execs:{n}"),
            Budget::Seconds(n) => write!(f, "secs:{n}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CampaignConfig {
    pub mode: Mode,
    pub budget: Budget,
    pub workers: u32,
    pub rng_seed: u64,
    pub layout: SandboxLayout,
    pub limits: Limits,
    /// Arm the reset point at `fuzz_start` (the delayed-interception
    /// snapshot). Off, arming happens at entry and masks apply from the
    /// first hooked load of startup: the no-deferral ablation.
    pub use_snapshot: bool,
    /// Upper bound on payload length after mutation.
    pub mask_len_cap: usize,
    /// Fold edge hit counts into magnitude buckets instead of pure
    /// edge-set novelty.
    pub bucketed_counts: bool,
    /// When set, findings are persisted under this directory.
    pub out: Option<PathBuf>,
    /// Print a progress line to stderr roughly once per second.
    pub progress: bool,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            mode: Mode::Sbxbrk,
            budget: Budget::Execs(100_000),
            workers: 1,
            rng_seed: 0,
            layout: SandboxLayout::default(),
            limits: Limits::default(),
            use_snapshot: true,
            mask_len_cap: MAX_PAYLOAD_LEN,
            bucketed_counts: false,
            out: None,
            progress: false,
        }
    }
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.workers == 0 {
            return Err(ConfigError::ZeroWorkers);
        }
        if self.mask_len_cap == 0 {
            return Err(ConfigError::ZeroMaskCap);
        }
        SandboxLayout::new(self.layout.cage_base, self.layout.cage_size)?;
        Ok(())
    }
}

/// A fuzzing target: a parsed program plus the id used for artifact paths
/// and crash attribution.
#[derive(Debug, Clone)]
pub struct Seed {
    pub id: String,
    pub program: Program,
}

impl Seed {
    pub fn new(id: impl Into<String>, program: Program) -> Self {
        Seed { id: id.into(), program }
    }
}

impl From<&Target> for Seed {
    fn from(t: &Target) -> Self {
        Seed { id: t.id.clone(), program: t.program.clone() }
    }
}

/// A deduplicated crash with the exact input that produced it.
#[derive(Debug, Clone)]
pub struct CrashRecord {
    pub seed_id: String,
    pub report: CrashReport,
    /// Mask stream, or encoded write list in baseline mode.
    pub input: Vec<u8>,
    /// Finding worker's execution count when this crash first occurred.
    pub execs_at: u64,
    pub worker: u32,
}

impl CrashRecord {
    /// Campaign-wide dedup key. The static site alone is not unique across
    /// seeds (two programs may both crash at `main.b0.1`), so the seed id
    /// is part of the key.
    pub fn key(&self) -> String {
        format!("{}/{}", self.seed_id, self.report.key())
    }
}

/// One merged corpus entry. `parent` is an index into the finding
/// worker's local corpus sequence, recorded for provenance only.
#[derive(Debug, Clone)]
pub struct CorpusEntry {
    pub seed_id: String,
    pub payload: Vec<u8>,
    pub parent: Option<u32>,
    pub execs_at: u64,
    pub worker: u32,
    pub cov_hash: u64,
}

/// Startup phase cost of one seed, measured while arming.
#[derive(Debug, Clone)]
pub struct SeedStartup {
    pub seed_id: String,
    pub info: StartupInfo,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CampaignStats {
    pub executions: u64,
    /// Crashing executions, duplicates included.
    pub crashes_total: u64,
    pub crashes_unique: u64,
    pub corpus_entries: u64,
    pub interceptions: u64,
    pub tolerated_reads: u64,
    pub wall_secs: f64,
    pub execs_per_sec: f64,
}

#[derive(Debug)]
pub struct CampaignResult {
    pub mode: Mode,
    pub budget: Budget,
    pub workers: u32,
    pub rng_seed: u64,
    pub stats: CampaignStats,
    /// Unique crashes in merge order (worker index, then discovery order).
    pub crashes: Vec<CrashRecord>,
    pub corpus: Vec<CorpusEntry>,
    /// Per-seed startup cost, in seed order.
    pub startup: Vec<SeedStartup>,
    /// Crash key (see [`CrashRecord::key`]) to `execs_at` of first find.
    pub found: BTreeMap<String, u64>,
}

impl CampaignResult {
    /// Did any crash match the planted bug (same seed, kind, and site)?
    pub fn found_bug(&self, bug: &SeededBug) -> bool {
        self.crashes
            .iter()
            .any(|c| c.seed_id == bug.id && bug.matches(&c.report))
    }

    pub fn render_summary(&self) -> String {
        let mut kv = crate::util::KvLines::new();
        kv.push("mode", self.mode);
        kv.push("budget", self.budget);
        kv.push("workers", self.workers);
        kv.push("rng_seed", self.rng_seed);
        kv.push("executions", self.stats.executions);
        kv.push("crashes_total", self.stats.crashes_total);
        kv.push("crashes_unique", self.stats.crashes_unique);
        kv.push("corpus_entries", self.stats.corpus_entries);
        kv.push("interceptions", self.stats.interceptions);
        kv.push("tolerated_reads", self.stats.tolerated_reads);
        kv.push("wall_secs", format!("{:.3}", self.stats.wall_secs));
        kv.push("execs_per_sec", format!("{:.1}", self.stats.execs_per_sec));
        for (i, c) in self.crashes.iter().enumerate() {
            kv.push(
                &format!("crash.{i}"),
                format!("{} execs_at={} worker={}", c.key(), c.execs_at, c.worker),
            );
        }
        kv.render()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CampaignError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Vm(#[from] VmError),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("no seeds supplied")]
    NoSeeds,
    #[error("duplicate seed id `{0}`")]
    DuplicateSeed(String),
}

/// Runs one campaign over `seeds` and returns the merged result. Persists
/// artifacts when the config names an output directory.
pub fn run_campaign(seeds: &[Seed], cfg: &CampaignConfig) -> Result<CampaignResult, CampaignError> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(CampaignError::NoSeeds);
    }
    let mut ids = BTreeSet::new();
    for s in seeds {
        if !ids.insert(s.id.as_str()) {
            return Err(CampaignError::DuplicateSeed(s.id.clone()));
        }
    }

    let quotas = build_quotas(cfg);
    let progress = cfg.progress.then(|| Arc::new(Progress::default()));
    let stop = AtomicBool::new(false);
    let t0 = Instant::now();

    let mut reports: Vec<Result<WorkerReport, CampaignError>> = Vec::new();
    std::thread::scope(|scope| {
        let ticker = progress.as_ref().map(|p| {
            let p = Arc::clone(p);
            let stop = &stop;
            scope.spawn(move || ticker_loop(&p, stop, t0))
        });
        let handles: Vec<_> = quotas
            .iter()
            .enumerate()
            .map(|(w, &quota)| {
                let progress = progress.clone();
                scope.spawn(move || run_worker(seeds, cfg, w as u32, quota, progress))
            })
            .collect();
        for h in handles {
            reports.push(h.join().expect("worker thread panicked"));
        }
        stop.store(true, Ordering::Relaxed);
        if let Some(t) = ticker {
            t.join().expect("ticker thread panicked");
        }
    });

    // Append-only merge in worker order keeps the result independent of
    // thread scheduling.
    let mut stats = CampaignStats::default();
    let mut crashes = Vec::new();
    let mut corpus = Vec::new();
    let mut found = BTreeMap::new();
    let mut seen = BTreeSet::new();
    let mut startup = Vec::new();
    for (w, rep) in reports.into_iter().enumerate() {
        let rep = rep?;
        if w == 0 {
            startup = rep.startup;
        }
        stats.executions += rep.executions;
        stats.crashes_total += rep.crash_events;
        stats.interceptions += rep.interceptions;
        stats.tolerated_reads += rep.tolerated_reads;
        for c in rep.crashes {
            if seen.insert(c.key()) {
                found.insert(c.key(), c.execs_at);
                crashes.push(c);
            }
        }
        corpus.extend(rep.corpus);
    }
    stats.crashes_unique = crashes.len() as u64;
    stats.corpus_entries = corpus.len() as u64;
    stats.wall_secs = t0.elapsed().as_secs_f64();
    stats.execs_per_sec = if stats.wall_secs > 0.0 {
        stats.executions as f64 / stats.wall_secs
    } else {
        0.0
    };

    let result = CampaignResult {
        mode: cfg.mode,
        budget: cfg.budget,
        workers: cfg.workers,
        rng_seed: cfg.rng_seed,
        stats,
        crashes,
        corpus,
        startup,
        found,
    };
    if let Some(dir) = &cfg.out {
        persist::persist_result(dir, cfg, &result)?;
    }
    Ok(result)
}

/// Convenience wrapper: same campaign with the mode forced to baseline.
pub fn run_baseline(seeds: &[Seed], cfg: &CampaignConfig) -> Result<CampaignResult, CampaignError> {
    let cfg = CampaignConfig { mode: Mode::Baseline, ..cfg.clone() };
    run_campaign(seeds, &cfg)
}

// ---- worker engine ----

#[derive(Debug, Clone, Copy)]
enum Quota {
    Execs(u64),
    Until(Instant),
}

impl Quota {
    fn exhausted(&self, execs: u64) -> bool {
        match self {
            Quota::Execs(n) => execs >= *n,
            Quota::Until(deadline) => Instant::now() >= *deadline,
        }
    }
}

fn build_quotas(cfg: &CampaignConfig) -> Vec<Quota> {
    match cfg.budget {
        Budget::Execs(total) => {
            let w = cfg.workers as u64;
            (0..w)
                .map(|i| Quota::Execs(total / w + u64::from(i < total % w)))
                .collect()
        }
        Budget::Seconds(s) => {
            let deadline = Instant::now() + Duration::from_secs(s);
            vec![Quota::Until(deadline); cfg.workers as usize]
        }
    }
}

#[derive(Default)]
struct Progress {
    execs: AtomicU64,
    crashes: AtomicU64,
    corpus: AtomicU64,
}

fn ticker_loop(p: &Progress, stop: &AtomicBool, t0: Instant) {
    let mut last = Instant::now();
    while !stop.load(Ordering::Relaxed) {
        std::thread::sleep(Duration::from_millis(100));
        if last.elapsed() < Duration::from_secs(1) {
            continue;
        }
        last = Instant::now();
        let execs = p.execs.load(Ordering::Relaxed);
        let secs = t0.elapsed().as_secs_f64();
        eprintln!(
            "execs={execs} crashes={} corpus={} execs_per_sec={:.0}",
            p.crashes.load(Ordering::Relaxed),
            p.corpus.load(Ordering::Relaxed),
            if secs > 0.0 { execs as f64 / secs } else { 0.0 },
        );
    }
}

struct SeedRig {
    vm: Vm,
    cov: CoverageMap,
}

fn build_rig(
    seed: &Seed,
    cfg: &CampaignConfig,
) -> Result<(SeedRig, StartupInfo), CampaignError> {
    let vm_cfg = VmConfig { honor_fuzz_start: cfg.use_snapshot, ..VmConfig::default() };
    let mut vm = if cfg.mode.intercepts() {
        let inst = instrument(&seed.program, cfg.mode.prune()).map_err(VmError::from)?;
        Vm::new(&inst.program, cfg.layout, vm_cfg)?
    } else {
        // Baseline corrupts memory from outside; the program runs unhooked.
        Vm::new(&seed.program, cfg.layout, vm_cfg)?
    };
    let info = vm.arm(&cfg.limits)?;
    let cov = CoverageMap::new(vm.n_edges() as usize, cfg.bucketed_counts);
    Ok((SeedRig { vm, cov }, info))
}

fn execute_payload(rig: &mut SeedRig, mode: Mode, payload: &[u8], limits: &Limits) -> ExecResult {
    if mode.intercepts() {
        rig.vm.run_one(&mut Interceptor::from_bytes(payload), limits)
    } else {
        rig.vm.reset();
        apply_writes(rig.vm.cage_mut(), &decode_writes(payload));
        rig.vm.resume(&mut Interceptor::disabled(), limits)
    }
}

struct WorkerReport {
    executions: u64,
    crash_events: u64,
    crashes: Vec<CrashRecord>,
    corpus: Vec<CorpusEntry>,
    startup: Vec<SeedStartup>,
    interceptions: u64,
    tolerated_reads: u64,
}

fn run_worker(
    seeds: &[Seed],
    cfg: &CampaignConfig,
    worker: u32,
    quota: Quota,
    progress: Option<Arc<Progress>>,
) -> Result<WorkerReport, CampaignError> {
    let mut rigs = Vec::with_capacity(seeds.len());
    let mut startup = Vec::with_capacity(seeds.len());
    for seed in seeds {
        let (rig, info) = build_rig(seed, cfg)?;
        rigs.push(rig);
        startup.push(SeedStartup { seed_id: seed.id.clone(), info });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed.wrapping_add(worker as u64));
    let mut corpus = Corpus::default();
    let mut rep = WorkerReport {
        executions: 0,
        crash_events: 0,
        crashes: Vec::new(),
        corpus: Vec::new(),
        startup,
        interceptions: 0,
        tolerated_reads: 0,
    };
    let mut seen_keys: BTreeSet<String> = BTreeSet::new();
    let bump = |rep: &mut WorkerReport, r: &ExecResult| {
        rep.executions += 1;
        rep.interceptions += r.stats.interceptions;
        rep.tolerated_reads += r.stats.tolerated_reads;
        if let Some(p) = &progress {
            p.execs.fetch_add(1, Ordering::Relaxed);
        }
    };

    // The initial corpus is every seed with an empty payload: a dormant run
    // that seeds the virgin map. These executions count against the budget.
    for (seed_idx, seed) in seeds.iter().enumerate() {
        if quota.exhausted(rep.executions) {
            break;
        }
        let r = execute_payload(&mut rigs[seed_idx], cfg.mode, &[], &cfg.limits);
        bump(&mut rep, &r);
        if cfg.mode.coverage_guided() {
            rigs[seed_idx].cov.observe(&r.coverage);
        }
        if let Some(report) = r.outcome.crash() {
            rep.crash_events += 1;
            record_crash(&mut rep, &mut seen_keys, seed, report, &[], worker, &progress);
        }
        corpus.push(TestCase {
            seed_idx,
            payload: Vec::new(),
            parent: None,
            execs_at: rep.executions,
            cov_hash: r.cov_hash,
        });
        rep.corpus.push(CorpusEntry {
            seed_id: seed.id.clone(),
            payload: Vec::new(),
            parent: None,
            execs_at: rep.executions,
            worker,
            cov_hash: r.cov_hash,
        });
        if let Some(p) = &progress {
            p.corpus.fetch_add(1, Ordering::Relaxed);
        }
    }

    while !quota.exhausted(rep.executions) && !corpus.is_empty() {
        let (parent_idx, parent) = corpus.pick(&mut rng);
        let seed_idx = parent.seed_idx;
        let child = mutate(&parent.payload, &mut rng, cfg.mask_len_cap);
        let r = execute_payload(&mut rigs[seed_idx], cfg.mode, &child, &cfg.limits);
        bump(&mut rep, &r);
        match &r.outcome {
            ExecOutcome::Crash(report) => {
                rep.crash_events += 1;
                record_crash(
                    &mut rep,
                    &mut seen_keys,
                    &seeds[seed_idx],
                    report,
                    &child,
                    worker,
                    &progress,
                );
            }
            ExecOutcome::Finished { .. } => {
                if cfg.mode.coverage_guided() && rigs[seed_idx].cov.observe(&r.coverage) {
                    corpus.push(TestCase {
                        seed_idx,
                        payload: child.clone(),
                        parent: Some(parent_idx),
                        execs_at: rep.executions,
                        cov_hash: r.cov_hash,
                    });
                    rep.corpus.push(CorpusEntry {
                        seed_id: seeds[seed_idx].id.clone(),
                        payload: child,
                        parent: Some(parent_idx),
                        execs_at: rep.executions,
                        worker,
                        cov_hash: r.cov_hash,
                    });
                    if let Some(p) = &progress {
                        p.corpus.fetch_add(1, Ordering::Relaxed);
                    }
                }
            }
            // Runaway inputs are counted but never retained: a corpus of
            // step-limit hangs would poison the mutation pool.
            ExecOutcome::LimitExceeded(_) => {}
        }
    }
    Ok(rep)
}

#[allow(clippy::too_many_arguments)]
fn record_crash(
    rep: &mut WorkerReport,
    seen: &mut BTreeSet<String>,
    seed: &Seed,
    report: &CrashReport,
    input: &[u8],
    worker: u32,
    progress: &Option<Arc<Progress>>,
) {
    let record = CrashRecord {
        seed_id: seed.id.clone(),
        report: report.clone(),
        input: input.to_vec(),
        execs_at: rep.executions,
        worker,
    };
    if seen.insert(record.key()) {
        rep.crashes.push(record);
        if let Some(p) = progress {
            p.crashes.fetch_add(1, Ordering::Relaxed);
        }
    }
}
