//! On-disk artifact layout for a campaign run.
//!
//! ```text
//! <out>/summary.txt
//! <out>/crashes/<seed>/<kind@fn.block.instr>/report.txt
//!                                            repro.mask
//!                                            repro.meta
//! <out>/corpus/<seed>/c000000.mask
//!                     c000000.meta
//! ```
//!
//! `repro.mask` holds the raw payload regardless of mode; the meta file's
//! `input=` key says whether those bytes are a mask stream or a baseline
//! write list. Every file is written atomically, so a run directory is
//! never observed half-written.

use std::io;
use std::path::Path;

use crate::util::{atomic_write, KvLines};

use super::{CampaignConfig, CampaignResult};

pub(super) fn persist_result(
    dir: &Path,
    cfg: &CampaignConfig,
    result: &CampaignResult,
) -> io::Result<()> {
    for c in &result.crashes {
        let cdir = dir
            .join("crashes")
            .join(&c.seed_id)
            .join(c.report.key());
        atomic_write(&cdir.join("report.txt"), c.report.render().as_bytes())?;
        atomic_write(&cdir.join("repro.mask"), &c.input)?;
        let mut meta = KvLines::new();
        meta.push("seed", &c.seed_id);
        meta.push("mode", cfg.mode);
        meta.push("input", if cfg.mode.intercepts() { "mask" } else { "writes" });
        meta.push("use_snapshot", if cfg.use_snapshot { "1" } else { "0" });
        meta.push("cage_base", format!("{:#x}", cfg.layout.cage_base));
        meta.push("cage_size", format!("{:#x}", cfg.layout.cage_size));
        meta.push("max_steps", cfg.limits.max_steps);
        meta.push("execs_at", c.execs_at);
        meta.push("worker", c.worker);
        atomic_write(&cdir.join("repro.meta"), meta.render().as_bytes())?;
    }

    let mut per_seed: std::collections::BTreeMap<&str, u32> = Default::default();
    for e in &result.corpus {
        let n = per_seed.entry(e.seed_id.as_str()).or_insert(0);
        let stem = format!("c{:06}", *n);
        *n += 1;
        let sdir = dir.join("corpus").join(&e.seed_id);
        atomic_write(&sdir.join(format!("{stem}.mask")), &e.payload)?;
        let mut meta = KvLines::new();
        meta.push("seed", &e.seed_id);
        meta.push("worker", e.worker);
        match e.parent {
            Some(p) => meta.push("parent", p),
            None => meta.push("parent", "-"),
        }
        meta.push("execs_at", e.execs_at);
        meta.push("cov_hash", format!("{:#018x}", e.cov_hash));
        atomic_write(&sdir.join(format!("{stem}.meta")), meta.render().as_bytes())?;
    }

    atomic_write(&dir.join("summary.txt"), result.render_summary().as_bytes())
}
