//! The bundled target suite.
//!
//! Thirteen benign seeds cover the instruction set and the common memory
//! shapes; seven more carry seeded trust-boundary bugs with known triggers.
//! Sources live under `targets/` at the workspace root and are compiled in,
//! so the suite needs no filesystem at run time. `verify_triggers` replays
//! every known trigger and is the regression gate for the whole corpus.

use crate::instrument::instrument;
use crate::interceptor::Interceptor;
use crate::ir::{parse_program, Program};
use crate::vm::{CrashKind, CrashReport, Limits, SandboxLayout, Vm, VmConfig};

macro_rules! sir {
    ($name:literal) => {
        (
            $name,
            include_str!(concat!(
                env!("CARGO_MANIFEST_DIR"),
                "/../../targets/",
                $name,
                ".sir"
            )),
        )
    };
}

macro_rules! trig {
    ($name:literal) => {
        (
            $name,
            include_bytes!(concat!(
                env!("CARGO_MANIFEST_DIR"),
                "/../../targets/triggers/",
                $name,
                ".mask"
            )) as &'static [u8],
        )
    };
}

const MANIFEST: &str = include_str!(concat!(
    env!("CARGO_MANIFEST_DIR"),
    "/../../targets/manifest.txt"
));

const SOURCES: &[(&str, &str)] = &[
    sir!("arith_mix"),
    sir!("bit_ops"),
    sir!("cmp_ladder"),
    sir!("loop_sum"),
    sir!("global_counter"),
    sir!("stack_slots"),
    sir!("string_copy"),
    sir!("table_roundtrip"),
    sir!("alloc_churn"),
    sir!("cage_rw"),
    sir!("memcopy_blocks"),
    sir!("switch_dispatch"),
    sir!("call_tree"),
    sir!("unknown_enum"),
    sir!("table_index_unsanitized"),
    sir!("read_shadowed_write"),
    sir!("double_fetch_sort"),
    sir!("stringify_len_overflow"),
    sir!("int_overflow_alloc"),
    sir!("startup_heavy"),
];

const TRIGGERS: &[(&str, &'static [u8])] = &[
    trig!("unknown_enum"),
    trig!("table_index_unsanitized"),
    trig!("read_shadowed_write"),
    trig!("double_fetch_sort"),
    trig!("stringify_len_overflow"),
    trig!("int_overflow_alloc"),
    trig!("startup_heavy"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BugClass {
    DoubleFetch,
    TableIndex,
    UnknownEnum,
    IntOverflowAlloc,
    ReadShadowedWrite,
    LengthDoubleFetch,
}

impl BugClass {
    pub fn as_str(self) -> &'static str {
        match self {
            BugClass::DoubleFetch => "double_fetch",
            BugClass::TableIndex => "table_index",
            BugClass::UnknownEnum => "unknown_enum",
            BugClass::IntOverflowAlloc => "int_overflow_alloc",
            BugClass::ReadShadowedWrite => "read_shadowed_write",
            BugClass::LengthDoubleFetch => "length_double_fetch",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "double_fetch" => BugClass::DoubleFetch,
            "table_index" => BugClass::TableIndex,
            "unknown_enum" => BugClass::UnknownEnum,
            "int_overflow_alloc" => BugClass::IntOverflowAlloc,
            "read_shadowed_write" => BugClass::ReadShadowedWrite,
            "length_double_fetch" => BugClass::LengthDoubleFetch,
            _ => return None,
        })
    }

    /// Classes where the exploit window is a change between two fetches of
    /// the same field. These are structurally out of reach for input models
    /// that fix cage memory once per execution.
    pub fn is_double_fetch(self) -> bool {
        matches!(self, BugClass::DoubleFetch | BugClass::LengthDoubleFetch)
    }
}

impl std::fmt::Display for BugClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A planted bug: what it is, where it must crash, and one mask that gets
/// there from the bundled seed state.
#[derive(Debug, Clone)]
pub struct SeededBug {
    pub id: String,
    pub class: BugClass,
    pub kind: CrashKind,
    pub function: String,
    pub block: String,
    pub instr: u32,
    pub trigger: Vec<u8>,
}

impl SeededBug {
    pub fn site(&self) -> String {
        format!("{}.{}.{}", self.function, self.block, self.instr)
    }

    /// Dedup key of the expected crash, comparable with `CrashReport::key`.
    pub fn key(&self) -> String {
        format!("{}@{}", self.kind, self.site())
    }

    pub fn matches(&self, r: &CrashReport) -> bool {
        r.kind == self.kind
            && r.function == self.function
            && r.block == self.block
            && r.instr == self.instr
    }
}

#[derive(Debug, Clone)]
pub struct Target {
    pub id: String,
    pub source: &'static str,
    pub program: Program,
    pub bug: Option<SeededBug>,
}

#[derive(Debug, Clone)]
pub struct Suite {
    pub targets: Vec<Target>,
}

impl Suite {
    pub fn get(&self, id: &str) -> Option<&Target> {
        self.targets.iter().find(|t| t.id == id)
    }

    pub fn benign(&self) -> impl Iterator<Item = &Target> {
        self.targets.iter().filter(|t| t.bug.is_none())
    }

    pub fn seeded(&self) -> impl Iterator<Item = &Target> {
        self.targets.iter().filter(|t| t.bug.is_some())
    }

    /// The six campaign bugs. `startup_heavy` also carries a bug but exists
    /// for the snapshot ablation, so it is not part of this set.
    pub fn campaign_bugs(&self) -> Vec<&Target> {
        self.seeded().filter(|t| t.id != "startup_heavy").collect()
    }
}

/// Builds the embedded suite. Panics if the compiled-in sources, manifest,
/// or triggers are inconsistent; `verify_triggers` plus the crate tests keep
/// that impossible to ship.
pub fn build_suite() -> Suite {
    let mut targets: Vec<Target> = SOURCES
        .iter()
        .map(|&(id, source)| {
            let program = parse_program(source)
                .unwrap_or_else(|e| panic!("embedded target `{id}` does not parse: {e}"));
            Target {
                id: id.to_string(),
                source,
                program,
                bug: None,
            }
        })
        .collect();

    for (lineno, line) in MANIFEST.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        assert!(
            cols.len() == 5,
            "manifest line {}: expected 5 columns, got {}",
            lineno + 1,
            cols.len()
        );
        let (id, class, kind, site, trigger) = (cols[0], cols[1], cols[2], cols[3], cols[4]);
        let target = targets
            .iter_mut()
            .find(|t| t.id == id)
            .unwrap_or_else(|| panic!("manifest names unknown target `{id}`"));
        if class == "benign" {
            continue;
        }
        let class = BugClass::parse(class)
            .unwrap_or_else(|| panic!("manifest: unknown bug class `{class}`"));
        let kind = CrashKind::parse(kind)
            .unwrap_or_else(|| panic!("manifest: unknown crash kind `{kind}`"));
        let mut site_parts = site.split('.');
        let (function, block, instr) = (
            site_parts.next().unwrap_or_default(),
            site_parts.next().unwrap_or_default(),
            site_parts.next().unwrap_or_default(),
        );
        let instr: u32 = instr
            .parse()
            .unwrap_or_else(|_| panic!("manifest: bad site `{site}`"));
        let trig_name = trigger
            .strip_prefix("triggers/")
            .and_then(|s| s.strip_suffix(".mask"))
            .unwrap_or_else(|| panic!("manifest: bad trigger path `{trigger}`"));
        let bytes = TRIGGERS
            .iter()
            .find(|(n, _)| *n == trig_name)
            .unwrap_or_else(|| panic!("trigger `{trig_name}` not embedded"))
            .1;
        target.bug = Some(SeededBug {
            id: id.to_string(),
            class,
            kind,
            function: function.to_string(),
            block: block.to_string(),
            instr,
            trigger: bytes.to_vec(),
        });
    }

    let suite = Suite { targets };
    assert!(
        suite.benign().count() >= 12,
        "suite must keep at least 12 benign seeds"
    );
    assert!(
        suite.campaign_bugs().len() == 6,
        "suite must carry exactly 6 campaign bugs"
    );
    suite
}

/// One trigger that stopped reproducing, with what happened instead.
#[derive(Debug)]
pub struct TriggerRegression {
    pub failures: Vec<String>,
}

impl std::fmt::Display for TriggerRegression {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{} trigger regression(s):", self.failures.len())?;
        for line in &self.failures {
            writeln!(f, "  {line}")?;
        }
        Ok(())
    }
}

impl std::error::Error for TriggerRegression {}

/// Replays the whole suite: zero mask must finish cleanly on every target
/// (dormancy), and each known trigger must land exactly on its registered
/// crash kind and site (reachability).
pub fn verify_triggers(suite: &Suite) -> Result<(), TriggerRegression> {
    let limits = Limits::default();
    let mut failures = Vec::new();

    for t in &suite.targets {
        let ins = match instrument(&t.program, true) {
            Ok(ins) => ins,
            Err(e) => {
                failures.push(format!("{}: does not instrument: {e}", t.id));
                continue;
            }
        };
        let mut vm = match Vm::new(&ins.program, SandboxLayout::default(), VmConfig::default()) {
            Ok(vm) => vm,
            Err(e) => {
                failures.push(format!("{}: vm rejects program: {e}", t.id));
                continue;
            }
        };
        if let Err(e) = vm.arm(&limits) {
            failures.push(format!("{}: cannot arm snapshot: {e}", t.id));
            continue;
        }

        let quiet = vm.run_one(&mut Interceptor::zero(), &limits);
        if !matches!(quiet.outcome, crate::vm::ExecOutcome::Finished { .. }) {
            failures.push(format!(
                "{}: dormancy broken, zero mask gives {}",
                t.id,
                quiet.outcome.brief()
            ));
            continue;
        }

        let Some(bug) = &t.bug else { continue };
        let got = vm.run_one(&mut Interceptor::from_bytes(&bug.trigger), &limits);
        match got.outcome.crash() {
            Some(r) if bug.matches(r) => {}
            Some(r) => failures.push(format!(
                "{}: trigger hit {} at {}.{}.{}, expected {} at {}",
                t.id, r.kind, r.function, r.block, r.instr, bug.kind, bug.site()
            )),
            None => failures.push(format!(
                "{}: trigger did not crash: {}",
                t.id,
                got.outcome.brief()
            )),
        }
    }

    if failures.is_empty() {
        Ok(())
    } else {
        Err(TriggerRegression { failures })
    }
}
