//! `sbx-forge`: batch front end over the core engine.
//!
//! Exit codes are a CI contract: 0 means the command succeeded with nothing
//! to report, 1 means findings are present (crashes found or reproduced),
//! 2 means the invocation or its inputs were unusable. A campaign config
//! can come from flags or a key=value file; the file wins on conflict so a
//! checked-in config stays authoritative no matter how the job is launched.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};

use sbx_forge_core::monitor::{
    crash_dirs, replay_crash, simulate_interception_cost, Budget, CampaignConfig, CostModel, Mode,
    Seed,
};
use sbx_forge_core::targets::build_suite;
use sbx_forge_core::util::KvLines;
use sbx_forge_core::vm::{Limits, SandboxLayout, DEFAULT_CAGE_BASE, DEFAULT_CAGE_SIZE};
use sbx_forge_core::{
    classify_loads, edges_of, instrument, parse_program, print_program, run_campaign,
    snapshot_at_fuzz_start, verify_triggers, Program,
};

#[derive(Parser)]
#[command(name = "sbx-forge", version, about = "Fault-injection fuzzer for SFI trust boundaries")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Classify loads and insert interception hooks into one target.
    Instrument(InstrumentArgs),
    /// Run a fuzzing campaign over a seed directory or the embedded suite.
    Fuzz(FuzzArgs),
    /// Re-execute persisted crashes and demand identical reports.
    Replay(ReplayArgs),
    /// Check that every embedded target is dormant and every trigger fires.
    VerifySuite,
    /// Price soft-hook interception against trap-based interception.
    BenchInterception(BenchArgs),
    /// Static and startup statistics for a seed set.
    Stats(StatsArgs),
}

#[derive(Args)]
struct InstrumentArgs {
    /// Target program (.sir).
    file: PathBuf,
    /// Hook every load, including proven-trusted ones.
    #[arg(long)]
    no_prune: bool,
    /// Print the classification report instead of the program.
    #[arg(long)]
    stats: bool,
    /// Write the instrumented program here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[command(group(ArgGroup::new("budget").args(["budget_execs", "budget_secs"])))]
struct FuzzArgs {
    /// Campaign mode: sbxbrk | baseline | nocov | noprune.
    #[arg(long, default_value = "sbxbrk")]
    mode: String,
    /// Directory of .sir seeds; defaults to the embedded suite.
    #[arg(long)]
    seeds: Option<PathBuf>,
    /// Output directory; falls back to $SBXFORGE_OUT, else no persistence.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Stop after this many executions.
    #[arg(long)]
    budget_execs: Option<u64>,
    /// Stop after this many seconds (not reproducible across hosts).
    #[arg(long)]
    budget_secs: Option<u64>,
    #[arg(long, default_value_t = 1)]
    workers: u32,
    #[arg(long, default_value_t = 0)]
    rng_seed: u64,
    /// Cage size in bytes.
    #[arg(long, default_value_t = DEFAULT_CAGE_SIZE)]
    cage_size: u64,
    /// Per-execution step limit.
    #[arg(long, default_value_t = Limits::default().max_steps)]
    max_steps: u64,
    /// Largest single trusted allocation; bounds per-execution alloc and
    /// copy work when masked values feed size computations.
    #[arg(long, default_value_t = Limits::default().max_trusted_alloc)]
    max_trusted_alloc: u64,
    /// Disable the fuzz_start snapshot (the delayed-fork-point ablation).
    #[arg(long)]
    no_snapshot: bool,
    /// Bucket edge hit counts instead of pure edge-set novelty.
    #[arg(long)]
    bucketed: bool,
    /// Suppress the once-per-second progress line on stderr.
    #[arg(long)]
    quiet: bool,
    /// key=value config file; its entries override the flags above.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    /// A run directory, one crash directory, or a file inside one.
    path: PathBuf,
    /// Directory of .sir seeds; defaults to the embedded suite.
    #[arg(long)]
    seeds: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 1)]
    c_check: u64,
    #[arg(long, default_value_t = 10)]
    c_soft: u64,
    #[arg(long, default_value_t = 1000)]
    c_trap: u64,
    /// Directory of .sir seeds; defaults to the embedded suite.
    #[arg(long)]
    seeds: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    /// Directory of .sir seeds; defaults to the embedded suite.
    #[arg(long)]
    seeds: Option<PathBuf>,
}

/// Did the command surface findings (exit 1) or run clean (exit 0)?
enum Flow {
    Clean,
    Findings,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(Flow::Clean) => ExitCode::SUCCESS,
        Ok(Flow::Findings) => ExitCode::from(1),
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Cmd) -> Result<Flow, String> {
    match cmd {
        Cmd::Instrument(a) => cmd_instrument(a),
        Cmd::Fuzz(a) => cmd_fuzz(a),
        Cmd::Replay(a) => cmd_replay(a),
        Cmd::VerifySuite => cmd_verify_suite(),
        Cmd::BenchInterception(a) => cmd_bench(a),
        Cmd::Stats(a) => cmd_stats(a),
    }
}

// ---- seed loading ----

fn load_seeds(dir: Option<&Path>) -> Result<Vec<Seed>, String> {
    let Some(dir) = dir else {
        return Ok(build_suite().targets.iter().map(Seed::from).collect());
    };
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| format!("cannot read seed directory {}: {e}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "sir"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(format!("no .sir files in {}", dir.display()));
    }
    let mut seeds = Vec::with_capacity(files.len());
    for f in files {
        let id = f
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| format!("bad seed file name {}", f.display()))?
            .to_string();
        seeds.push(Seed::new(id, parse_target(&f)?));
    }
    Ok(seeds)
}

fn parse_target(path: &Path) -> Result<Program, String> {
    let src = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    parse_program(&src).map_err(|e| format!("{}: {e}", path.display()))
}

// ---- instrument ----

fn cmd_instrument(a: InstrumentArgs) -> Result<Flow, String> {
    let program = parse_target(&a.file)?;
    let inst = instrument(&program, !a.no_prune).map_err(|e| e.to_string())?;
    let text = if a.stats {
        let classified = classify_loads(&program);
        let names: Vec<String> = program.functions.iter().map(|f| f.name.clone()).collect();
        inst.render_stats(&classified, &names)
    } else {
        print_program(&inst.program)
    };
    match &a.out {
        Some(p) => sbx_forge_core::util::atomic_write(p, text.as_bytes())
            .map_err(|e| format!("cannot write {}: {e}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(Flow::Clean)
}

// ---- fuzz ----

fn cmd_fuzz(a: FuzzArgs) -> Result<Flow, String> {
    let file = match &a.config {
        Some(p) => KvLines::parse(
            &std::fs::read_to_string(p)
                .map_err(|e| format!("cannot read config {}: {e}", p.display()))?,
        )
        .map_err(|e| format!("{}: {e}", p.display()))?,
        None => KvLines::new(),
    };
    // The file wins on every key it names; flags cover the rest.
    let get = |key: &str| file.get(key);
    let parse_num = |key: &str, v: &str| -> Result<u64, String> {
        v.parse().map_err(|_| format!("config key `{key}`: bad number `{v}`"))
    };

    let mode_str = get("mode").unwrap_or(&a.mode);
    let mode =
        Mode::parse(mode_str).ok_or_else(|| format!("unknown mode `{mode_str}`"))?;
    let budget = match get("budget") {
        Some(v) => Budget::parse(v).ok_or_else(|| format!("bad budget `{v}` (execs:N or secs:N)"))?,
        None => match (a.budget_execs, a.budget_secs) {
            (Some(n), None) => Budget::Execs(n),
            (None, Some(s)) => Budget::Seconds(s),
            (None, None) => {
                return Err("a budget is required: --budget-execs, --budget-secs, or budget= in the config file".into())
            }
            (Some(_), Some(_)) => unreachable!("clap group forbids both"),
        },
    };
    let workers = match get("workers") {
        Some(v) => parse_num("workers", v)? as u32,
        None => a.workers,
    };
    let rng_seed = match get("rng_seed") {
        Some(v) => parse_num("rng_seed", v)?,
        None => a.rng_seed,
    };
    let cage_size = match get("cage_size") {
        Some(v) => parse_num("cage_size", v)?,
        None => a.cage_size,
    };
    let max_steps = match get("max_steps") {
        Some(v) => parse_num("max_steps", v)?,
        None => a.max_steps,
    };
    let max_trusted_alloc = match get("max_trusted_alloc") {
        Some(v) => parse_num("max_trusted_alloc", v)?,
        None => a.max_trusted_alloc,
    };
    let use_snapshot = match get("use_snapshot") {
        Some(v) => v == "1",
        None => !a.no_snapshot,
    };
    let bucketed = match get("bucketed") {
        Some(v) => v == "1",
        None => a.bucketed,
    };
    let seeds_dir: Option<PathBuf> = match get("seeds") {
        Some(v) => Some(PathBuf::from(v)),
        None => a.seeds.clone(),
    };
    let out: Option<PathBuf> = match get("out") {
        Some(v) => Some(PathBuf::from(v)),
        None => a
            .out
            .clone()
            .or_else(|| std::env::var_os("SBXFORGE_OUT").map(PathBuf::from)),
    };

    let layout = SandboxLayout::new(DEFAULT_CAGE_BASE, cage_size).map_err(|e| e.to_string())?;
    let cfg = CampaignConfig {
        mode,
        budget,
        workers,
        rng_seed,
        layout,
        limits: Limits { max_steps, max_trusted_alloc, ..Limits::default() },
        use_snapshot,
        bucketed_counts: bucketed,
        out,
        progress: !a.quiet,
        ..CampaignConfig::default()
    };

    let seeds = load_seeds(seeds_dir.as_deref())?;
    let result = run_campaign(&seeds, &cfg).map_err(|e| e.to_string())?;
    print!("{}", result.render_summary());
    if result.stats.crashes_unique > 0 {
        Ok(Flow::Findings)
    } else {
        Ok(Flow::Clean)
    }
}

// ---- replay ----

fn cmd_replay(a: ReplayArgs) -> Result<Flow, String> {
    let seeds = load_seeds(a.seeds.as_deref())?;
    let lookup = |id: &str| {
        seeds
            .iter()
            .find(|s| s.id == id)
            .map(|s| s.program.clone())
    };

    let dirs = resolve_crash_dirs(&a.path)?;
    if dirs.is_empty() {
        println!("no crashes under {}", a.path.display());
        return Ok(Flow::Clean);
    }
    let mut failures = 0usize;
    for d in &dirs {
        match replay_crash(d, lookup) {
            Ok(report) => println!("ok {} ({})", report.key(), d.display()),
            Err(e) => {
                failures += 1;
                eprintln!("fail {}: {e}", d.display());
            }
        }
    }
    if failures > 0 {
        Err(format!("{failures} of {} crashes did not reproduce", dirs.len()))
    } else {
        // Reproduced crashes are findings, per the CI exit-code contract.
        Ok(Flow::Findings)
    }
}

/// Accepts a run directory, a single crash directory, or any path inside a
/// crash directory (e.g. the `.../repro` stem or `repro.mask` itself).
fn resolve_crash_dirs(path: &Path) -> Result<Vec<PathBuf>, String> {
    if path.join("crashes").is_dir() {
        return crash_dirs(path).map_err(|e| format!("{}: {e}", path.display()));
    }
    if path.join("report.txt").is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if let Some(parent) = path.parent() {
        if parent.join("report.txt").is_file() {
            return Ok(vec![parent.to_path_buf()]);
        }
    }
    Err(format!("{}: not a run directory or crash directory", path.display()))
}

// ---- verify-suite ----

fn cmd_verify_suite() -> Result<Flow, String> {
    let suite = build_suite();
    verify_triggers(&suite).map_err(|e| e.to_string())?;
    println!(
        "suite ok: {} targets, {} seeded bugs, all triggers reproduce",
        suite.targets.len(),
        suite.seeded().count()
    );
    Ok(Flow::Clean)
}

// ---- bench-interception ----

fn cmd_bench(a: BenchArgs) -> Result<Flow, String> {
    let model = CostModel { c_check: a.c_check, c_soft_hook: a.c_soft, c_trap: a.c_trap };
    let seeds = load_seeds(a.seeds.as_deref())?;
    let report = simulate_interception_cost(&seeds, &model, &Limits::default())
        .map_err(|e| e.to_string())?;
    print!("{}", report.render());
    if report.degenerate {
        eprintln!("warning: seed set performs no cage accesses; the ratio is meaningless");
    }
    Ok(Flow::Clean)
}

// ---- stats ----

fn cmd_stats(a: StatsArgs) -> Result<Flow, String> {
    let seeds = load_seeds(a.seeds.as_deref())?;
    let mut total_loads = 0u64;
    let mut total_pruned = 0u64;
    for s in &seeds {
        let inst = instrument(&s.program, true).map_err(|e| format!("{}: {e}", s.id))?;
        let (vm, info) = snapshot_at_fuzz_start(
            &inst.program,
            SandboxLayout::default(),
            Default::default(),
            &Limits::default(),
        )
        .map_err(|e| format!("{}: {e}", s.id))?;
        let mut kv = KvLines::new();
        kv.push("seed", &s.id);
        kv.push("functions", s.program.functions.len());
        kv.push("edges", edges_of(&s.program).len());
        kv.push("loads", inst.stats.total);
        kv.push("pruned", inst.stats.pruned);
        kv.push("hooked", inst.stats.instrumented);
        kv.push("startup_steps", info.steps);
        kv.push("startup_interceptions", info.interceptions);
        kv.push("startup_mask_bytes", info.mask_bytes);
        print!("{}\n", kv.render());
        total_loads += inst.stats.total;
        total_pruned += inst.stats.pruned;
        drop(vm);
    }
    let mut kv = KvLines::new();
    kv.push("seeds", seeds.len());
    kv.push("loads", total_loads);
    kv.push("pruned", total_pruned);
    kv.push(
        "pruned_fraction",
        format!(
            "{:.3}",
            if total_loads == 0 { 0.0 } else { total_pruned as f64 / total_loads as f64 }
        ),
    );
    print!("{}", kv.render());
    Ok(Flow::Clean)
}
