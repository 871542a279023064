//! Load classification and hook insertion.
//!
//! Every `load` either provably reads trusted memory or might read the cage.
//! The classifier is an intraprocedural may-analysis over reaching
//! definitions: starting from the address register it walks backward through
//! `add`/`sub` with constant offsets and across block joins, and only if
//! every reachable source is an `alloca`, `global_addr`, or `heap_alloc`
//! result is the load provably trusted. Everything else (cage_alloc results,
//! table reads, parameters, loaded values, non-constant arithmetic, call
//! results) stays a candidate and gets a `hook` inserted in front of it.
//!
//! Classification is sound for pruning, not complete: a hooked load may
//! still never see a cage address at runtime. The VM's interception counters
//! cross-check the other direction (no pruned load ever receives one).

use crate::ir::{validate, BinOp, Function, Instr, Program, Reg, ValidateError};

/// Location of a load in pre-instrumentation coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LoadSite {
    pub func: usize,
    pub block: usize,
    pub instr: usize,
}

impl std::fmt::Display for LoadSite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}:{}", self.func, self.block, self.instr)
    }
}

/// Why a load was proven to stay in the trusted domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ProvenKind {
    Stack,
    Global,
    TrustedHeap,
}

impl ProvenKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProvenKind::Stack => "proven_stack",
            ProvenKind::Global => "proven_global",
            ProvenKind::TrustedHeap => "proven_trusted_heap",
        }
    }
}

/// Classification of one load. `Uninteresting` is only constructible with a
/// proof; unproven loads are `Interesting` by definition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadClass {
    Uninteresting(ProvenKind),
    Interesting,
}

impl LoadClass {
    pub fn is_uninteresting(self) -> bool {
        matches!(self, LoadClass::Uninteresting(_))
    }

    pub fn reason_str(self) -> &'static str {
        match self {
            LoadClass::Uninteresting(k) => k.as_str(),
            LoadClass::Interesting => "unproven",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadInfo {
    pub site: LoadSite,
    pub width: u8,
    pub class: LoadClass,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PruneStats {
    pub total: u64,
    pub pruned: u64,
    pub instrumented: u64,
}

/// Hooked load site, indexed by the hook's site id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SiteInfo {
    pub site: LoadSite,
    pub width: u8,
}

/// A program with hooks inserted, plus the site table mapping hook ids back
/// to pre-instrumentation load sites.
#[derive(Debug, Clone)]
pub struct InstrumentedProgram {
    pub program: Program,
    pub sites: Vec<SiteInfo>,
    pub stats: PruneStats,
}

/// Classifies every load in program order. Requires a valid program; hooks
/// already present are ignored (loads keep pre-instrumentation coordinates).
pub fn classify_loads(p: &Program) -> Vec<LoadInfo> {
    let mut out = Vec::new();
    for (fi, f) in p.functions.iter().enumerate() {
        let rd = ReachingDefs::compute(f);
        for (bi, b) in f.blocks.iter().enumerate() {
            let mut orig = 0usize;
            for (real, instr) in b.instrs.iter().enumerate() {
                if let Instr::Load { addr, width, .. } = instr {
                    let class = rd.classify_addr(*addr, bi, real);
                    out.push(LoadInfo {
                        site: LoadSite { func: fi, block: bi, instr: orig },
                        width: *width,
                        class,
                    });
                }
                if !matches!(instr, Instr::Hook { .. }) {
                    orig += 1;
                }
            }
        }
    }
    out
}

/// Validates `p`, strips any existing hooks, classifies loads, and inserts a
/// `hook site, addr, width` in front of every candidate. With `prune` off,
/// every load is hooked regardless of classification. Site ids run in
/// program order. Idempotent: re-instrumenting an instrumented program
/// yields the same result.
pub fn instrument(p: &Program, prune: bool) -> Result<InstrumentedProgram, ValidateError> {
    validate(p)?;
    let mut bare = p.clone();
    for f in &mut bare.functions {
        for b in &mut f.blocks {
            b.instrs.retain(|i| !matches!(i, Instr::Hook { .. }));
        }
    }
    let infos = classify_loads(&bare);
    let mut by_site: std::collections::HashMap<LoadSite, LoadClass> = infos
        .iter()
        .map(|i| (i.site, i.class))
        .collect();

    let mut sites = Vec::new();
    let mut stats = PruneStats { total: infos.len() as u64, ..Default::default() };
    let mut out = bare.clone();
    for (fi, f) in out.functions.iter_mut().enumerate() {
        for (bi, b) in f.blocks.iter_mut().enumerate() {
            let mut rewritten = Vec::with_capacity(b.instrs.len());
            for (ii, instr) in b.instrs.drain(..).enumerate() {
                if let Instr::Load { addr, width, .. } = instr {
                    let site = LoadSite { func: fi, block: bi, instr: ii };
                    let class = by_site.remove(&site).expect("classified above");
                    if !prune || !class.is_uninteresting() {
                        rewritten.push(Instr::Hook {
                            site: sites.len() as u32,
                            addr,
                            width,
                        });
                        sites.push(SiteInfo { site, width });
                        stats.instrumented += 1;
                    } else {
                        stats.pruned += 1;
                    }
                }
                rewritten.push(instr);
            }
            b.instrs = rewritten;
        }
    }
    Ok(InstrumentedProgram { program: out, sites, stats })
}

impl InstrumentedProgram {
    /// Wraps a program without inserting hooks. Stats carry the load count
    /// with zero pruned and zero instrumented.
    pub fn passthrough(p: &Program) -> Result<Self, ValidateError> {
        validate(p)?;
        Ok(InstrumentedProgram {
            stats: PruneStats { total: p.load_count(), ..Default::default() },
            sites: Vec::new(),
            program: p.clone(),
        })
    }

    /// Classification report lines for the stats artifact, in site order.
    pub fn render_stats(&self, classified: &[LoadInfo], fn_names: &[String]) -> String {
        let mut s = String::new();
        s.push_str(&format!("total={}\n", self.stats.total));
        s.push_str(&format!("pruned={}\n", self.stats.pruned));
        s.push_str(&format!("instrumented={}\n", self.stats.instrumented));
        for info in classified {
            let class = if info.class.is_uninteresting() {
                "uninteresting"
            } else {
                "interesting"
            };
            s.push_str(&format!(
                "site {}:{}:{} load w{} {} {}\n",
                fn_names[info.site.func],
                info.site.block,
                info.site.instr,
                info.width,
                class,
                info.class.reason_str()
            ));
        }
        s
    }
}

// ---- reaching definitions ----

/// One definition point of a register: a (block, instr) pair or a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Def {
    Param,
    At { block: usize, instr: usize },
}

struct ReachingDefs<'a> {
    f: &'a Function,
    /// All defs in the function, in program order.
    defs: Vec<(Reg, Def)>,
    /// def-bitset live at entry of each block.
    ins: Vec<Vec<u64>>,
    words: usize,
}

impl<'a> ReachingDefs<'a> {
    fn compute(f: &'a Function) -> Self {
        let mut defs: Vec<(Reg, Def)> = (0..f.params)
            .map(|r| (Reg(r), Def::Param))
            .collect();
        for (bi, b) in f.blocks.iter().enumerate() {
            for (ii, instr) in b.instrs.iter().enumerate() {
                if let Some(d) = instr.def() {
                    defs.push((d, Def::At { block: bi, instr: ii }));
                }
            }
        }
        let words = defs.len().div_ceil(64);
        let nblocks = f.blocks.len();

        // gen/kill per block over the def universe.
        let mut gen = vec![vec![0u64; words]; nblocks];
        let mut kill = vec![vec![0u64; words]; nblocks];
        for (bi, b) in f.blocks.iter().enumerate() {
            // Last def per register wins within a block.
            let mut last: std::collections::HashMap<Reg, usize> = Default::default();
            for (ii, instr) in b.instrs.iter().enumerate() {
                if let Some(d) = instr.def() {
                    let di = defs
                        .iter()
                        .position(|&(r, def)| r == d && def == (Def::At { block: bi, instr: ii }))
                        .unwrap();
                    last.insert(d, di);
                }
            }
            for (&reg, &di) in &last {
                gen[bi][di / 64] |= 1 << (di % 64);
                for (dj, &(r, _)) in defs.iter().enumerate() {
                    if r == reg && dj != di {
                        kill[bi][dj / 64] |= 1 << (dj % 64);
                    }
                }
            }
        }

        let label_idx: std::collections::HashMap<&str, usize> = f
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| (b.label.as_str(), i))
            .collect();
        let mut preds: Vec<Vec<usize>> = vec![Vec::new(); nblocks];
        for (bi, b) in f.blocks.iter().enumerate() {
            for succ in b.instrs.last().into_iter().flat_map(|i| i.successors()) {
                preds[label_idx[succ]].push(bi);
            }
        }

        let mut entry_in = vec![0u64; words];
        for di in 0..f.params as usize {
            entry_in[di / 64] |= 1 << (di % 64);
        }
        let mut ins = vec![vec![0u64; words]; nblocks];
        ins[0] = entry_in;
        let mut changed = true;
        while changed {
            changed = false;
            for bi in 0..nblocks {
                let mut merged = ins[bi].clone();
                for &p in &preds[bi] {
                    for w in 0..words {
                        let out = (ins[p][w] & !kill[p][w]) | gen[p][w];
                        merged[w] |= out;
                    }
                }
                if merged != ins[bi] {
                    ins[bi] = merged;
                    changed = true;
                }
            }
        }
        ReachingDefs { f, defs, ins, words }
    }

    /// Definitions of `reg` reaching the program point just before
    /// (block, instr).
    fn defs_at(&self, reg: Reg, block: usize, instr: usize) -> Vec<usize> {
        // Nearest in-block def wins.
        for ii in (0..instr).rev() {
            if self.f.blocks[block].instrs[ii].def() == Some(reg) {
                return vec![self
                    .defs
                    .iter()
                    .position(|&(r, d)| r == reg && d == (Def::At { block, instr: ii }))
                    .unwrap()];
            }
        }
        let mut out = Vec::new();
        for w in 0..self.words {
            let mut bits = self.ins[block][w];
            while bits != 0 {
                let bit = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                let di = w * 64 + bit;
                if self.defs[di].0 == reg {
                    out.push(di);
                }
            }
        }
        out
    }

    /// True when every reaching definition of `reg` at the point is `const`.
    fn all_const(&self, reg: Reg, block: usize, instr: usize) -> bool {
        let ds = self.defs_at(reg, block, instr);
        !ds.is_empty()
            && ds.iter().all(|&di| match self.defs[di].1 {
                Def::Param => false,
                Def::At { block, instr } => {
                    matches!(self.f.blocks[block].instrs[instr], Instr::Const { .. })
                }
            })
    }

    fn classify_addr(&self, addr: Reg, block: usize, instr: usize) -> LoadClass {
        let mut kinds = KindSet::default();
        let mut visiting = Vec::new();
        if self.walk(addr, block, instr, &mut visiting, &mut kinds) {
            match kinds.pick() {
                Some(k) => LoadClass::Uninteresting(k),
                // Every reaching path cycled without hitting a source; treat
                // as unproven rather than vacuously trusted.
                None => LoadClass::Interesting,
            }
        } else {
            LoadClass::Interesting
        }
    }

    /// Returns false as soon as any reachable source fails to prove trusted.
    /// Cycles (`p = p + c` in a loop) are resolved optimistically: a
    /// definition currently being traced contributes nothing new.
    fn walk(
        &self,
        reg: Reg,
        block: usize,
        instr: usize,
        visiting: &mut Vec<usize>,
        kinds: &mut KindSet,
    ) -> bool {
        let ds = self.defs_at(reg, block, instr);
        if ds.is_empty() {
            return false;
        }
        for di in ds {
            if visiting.contains(&di) {
                continue;
            }
            visiting.push(di);
            let ok = match self.defs[di].1 {
                Def::Param => false,
                Def::At { block: db, instr: dii } => match &self.f.blocks[db].instrs[dii] {
                    Instr::Alloca { .. } => {
                        kinds.add(ProvenKind::Stack);
                        true
                    }
                    Instr::GlobalAddr { .. } => {
                        kinds.add(ProvenKind::Global);
                        true
                    }
                    Instr::HeapAlloc { .. } => {
                        kinds.add(ProvenKind::TrustedHeap);
                        true
                    }
                    Instr::Bin { op: BinOp::Add, a, b, .. } => {
                        if self.all_const(*b, db, dii) {
                            self.walk(*a, db, dii, visiting, kinds)
                        } else if self.all_const(*a, db, dii) {
                            self.walk(*b, db, dii, visiting, kinds)
                        } else {
                            false
                        }
                    }
                    Instr::Bin { op: BinOp::Sub, a, b, .. } => {
                        self.all_const(*b, db, dii) && self.walk(*a, db, dii, visiting, kinds)
                    }
                    _ => false,
                },
            };
            visiting.pop();
            if !ok {
                return false;
            }
        }
        true
    }
}

/// Set of proven source kinds seen on a walk. Mixed provenance is still
/// proven; the reported reason picks the strongest ordering Stack, Global,
/// TrustedHeap for determinism.
#[derive(Default)]
struct KindSet {
    stack: bool,
    global: bool,
    heap: bool,
}

impl KindSet {
    fn add(&mut self, k: ProvenKind) {
        match k {
            ProvenKind::Stack => self.stack = true,
            ProvenKind::Global => self.global = true,
            ProvenKind::TrustedHeap => self.heap = true,
        }
    }

    fn pick(&self) -> Option<ProvenKind> {
        if self.stack {
            Some(ProvenKind::Stack)
        } else if self.global {
            Some(ProvenKind::Global)
        } else if self.heap {
            Some(ProvenKind::TrustedHeap)
        } else {
            None
        }
    }
}
