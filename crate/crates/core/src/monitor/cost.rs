//! Abstract cost accounting for the two interception strategies.
//!
//! Soft hooks pay a per-check predicate on every hooked load plus a small
//! in-process detour when the address is in-cage. The trap alternative
//! (protecting the cage and fielding signals) pays a kernel round-trip on
//! every cage access, loads and stores alike, whether or not the fuzzer
//! cares about that access. The simulator replays seeds with interception
//! active everywhere and prices both strategies from the same event stream.

use crate::interceptor::Interceptor;
use crate::vm::{execute, ConfigError, ExecStats, Limits, SandboxLayout, VmConfig};

use super::{CampaignError, Seed};

/// Unit prices in abstract cycles. Defaults reflect the measured shape of
/// the tradeoff: a predicted-not-taken compare-and-branch per check, a
/// cheap in-process detour per interception, and a four-digit kernel
/// round-trip per trap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostModel {
    pub c_check: u64,
    pub c_soft_hook: u64,
    pub c_trap: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel { c_check: 1, c_soft_hook: 10, c_trap: 1000 }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.c_check == 0 || self.c_soft_hook == 0 || self.c_trap == 0 {
            return Err(ConfigError::NonPositiveCost);
        }
        Ok(())
    }

    pub fn soft_cost(&self, s: &ExecStats) -> u64 {
        self.c_check * s.hook_checks + self.c_soft_hook * s.interceptions
    }

    pub fn trap_cost(&self, s: &ExecStats) -> u64 {
        self.c_trap * (s.cage_loads + s.cage_stores)
    }
}

/// Aggregated price of running the seed set once under each strategy.
#[derive(Debug, Clone)]
pub struct CostReport {
    pub seeds: u64,
    pub hook_checks: u64,
    pub interceptions: u64,
    pub cage_loads: u64,
    pub cage_stores: u64,
    pub soft_cost: u64,
    pub trap_cost: u64,
    /// trap_cost / soft_cost; meaningless when degenerate.
    pub ratio: f64,
    /// True when the seeds performed no cage accesses at all, so the trap
    /// side priced nothing and the comparison says nothing.
    pub degenerate: bool,
}

impl CostReport {
    pub fn render(&self) -> String {
        let mut kv = crate::util::KvLines::new();
        kv.push("seeds", &self.seeds.to_string());
        kv.push("hook_checks", &self.hook_checks.to_string());
        kv.push("interceptions", &self.interceptions.to_string());
        kv.push("cage_loads", &self.cage_loads.to_string());
        kv.push("cage_stores", &self.cage_stores.to_string());
        kv.push("soft_cost", &self.soft_cost.to_string());
        kv.push("trap_cost", &self.trap_cost.to_string());
        kv.push("degenerate", if self.degenerate { "1" } else { "0" });
        kv.push("trap/soft", &format!("{:.2}", self.ratio));
        kv.render()
    }
}

/// Replays every seed once with hooks on every load, deferral disabled, and
/// a zero mask, then prices the recorded events under `model`. The zero
/// mask keeps behaviour identical to an unfuzzed run while still exercising
/// the full interception path, so the counts are the honest per-execution
/// overhead of each strategy.
pub fn simulate_interception_cost(
    seeds: &[Seed],
    model: &CostModel,
    limits: &Limits,
) -> Result<CostReport, CampaignError> {
    model.validate()?;
    let cfg = VmConfig { honor_fuzz_start: false, ..VmConfig::default() };
    let mut total = ExecStats::default();
    for seed in seeds {
        let inst = crate::instrument::instrument(&seed.program, true)
            .map_err(crate::vm::VmError::from)?;
        let mut zero = Interceptor::zero();
        let r = execute(&inst.program, SandboxLayout::default(), cfg.clone(), &mut zero, limits)?;
        total.hook_checks += r.stats.hook_checks;
        total.interceptions += r.stats.interceptions;
        total.cage_loads += r.stats.cage_loads;
        total.cage_stores += r.stats.cage_stores;
    }
    let soft = model.soft_cost(&total);
    let trap = model.trap_cost(&total);
    let cage_events = total.cage_loads + total.cage_stores;
    Ok(CostReport {
        seeds: seeds.len() as u64,
        hook_checks: total.hook_checks,
        interceptions: total.interceptions,
        cage_loads: total.cage_loads,
        cage_stores: total.cage_stores,
        soft_cost: soft,
        trap_cost: trap,
        ratio: if soft == 0 { 0.0 } else { trap as f64 / soft as f64 },
        degenerate: cage_events == 0,
    })
}
