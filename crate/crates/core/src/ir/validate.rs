//! Structural validation. Anything the VM would otherwise have to guard
//! per-step is rejected here: dangling names, malformed blocks, bad widths,
//! and registers read on a path where no definition precedes them.

use super::{Function, Instr, Program, Reg};
use std::collections::HashMap;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ValidateError {
    #[error("entry function `{0}` not defined")]
    NoEntry(String),
    #[error("entry function `{0}` must take no params")]
    EntryHasParams(String),
    #[error("duplicate function `{0}`")]
    DuplicateFunction(String),
    #[error("duplicate global `{0}`")]
    DuplicateGlobal(String),
    #[error("fn {func}: duplicate label `{label}`")]
    DuplicateLabel { func: String, label: String },
    #[error("fn {func}: has no blocks")]
    NoBlocks { func: String },
    #[error("fn {func}, block {label}: empty block")]
    EmptyBlock { func: String, label: String },
    #[error("fn {func}, block {label}: does not end in a terminator")]
    MissingTerminator { func: String, label: String },
    #[error("fn {func}, block {label}, instr {instr}: terminator before end of block")]
    EarlyTerminator { func: String, label: String, instr: usize },
    #[error("fn {func}, block {label}: unresolved branch target `{target}`")]
    UnresolvedTarget { func: String, label: String, target: String },
    #[error("fn {func}: unresolved callee `{callee}`")]
    UnresolvedCallee { func: String, callee: String },
    #[error("fn {func}: call to `{callee}` passes {got} args, expected {expected}")]
    ArityMismatch { func: String, callee: String, expected: u32, got: usize },
    #[error("fn {func}: unresolved global `{name}`")]
    UnresolvedGlobal { func: String, name: String },
    #[error("fn {func}: slot{slot} not declared in frame")]
    BadSlot { func: String, slot: u32 },
    #[error("fn {func}, block {label}, instr {instr}: illegal width {width}")]
    IllegalWidth { func: String, label: String, instr: usize, width: u8 },
    #[error("fn {func}, block {label}: duplicate switch case {value}")]
    DuplicateCase { func: String, label: String, value: u64 },
    #[error("fuzz_start appears in both `{first}` and `{second}`; at most one per program")]
    MultipleFuzzStart { first: String, second: String },
    #[error("fn {func}, block {label}, instr {instr}: {reg} may be read before assignment")]
    UseBeforeDef { func: String, label: String, instr: usize, reg: Reg },
}

/// Checks the whole program. The VM, instrumenter, and edge enumeration all
/// assume a validated program.
pub fn validate(p: &Program) -> Result<(), ValidateError> {
    let mut fn_params: HashMap<&str, u32> = HashMap::new();
    for f in &p.functions {
        if fn_params.insert(&f.name, f.params).is_some() {
            return Err(ValidateError::DuplicateFunction(f.name.clone()));
        }
    }
    let mut global_names: Vec<&str> = Vec::new();
    for g in &p.globals {
        if global_names.contains(&g.name.as_str()) {
            return Err(ValidateError::DuplicateGlobal(g.name.clone()));
        }
        global_names.push(&g.name);
    }
    let entry = p
        .function(&p.entry)
        .ok_or_else(|| ValidateError::NoEntry(p.entry.clone()))?;
    if entry.params != 0 {
        return Err(ValidateError::EntryHasParams(p.entry.clone()));
    }

    let mut fuzz_start_in: Option<&str> = None;
    for f in &p.functions {
        validate_fn(f, &fn_params, &global_names)?;
        let has_fs = f
            .blocks
            .iter()
            .flat_map(|b| &b.instrs)
            .any(|i| matches!(i, Instr::FuzzStart));
        if has_fs {
            match fuzz_start_in {
                None => fuzz_start_in = Some(&f.name),
                Some(first) => {
                    return Err(ValidateError::MultipleFuzzStart {
                        first: first.to_string(),
                        second: f.name.clone(),
                    })
                }
            }
        }
        definite_assignment(f)?;
    }
    Ok(())
}

fn validate_fn(
    f: &Function,
    fn_params: &HashMap<&str, u32>,
    globals: &[&str],
) -> Result<(), ValidateError> {
    if f.blocks.is_empty() {
        return Err(ValidateError::NoBlocks { func: f.name.clone() });
    }
    let mut labels: Vec<&str> = Vec::new();
    for b in &f.blocks {
        if labels.contains(&b.label.as_str()) {
            return Err(ValidateError::DuplicateLabel {
                func: f.name.clone(),
                label: b.label.clone(),
            });
        }
        labels.push(&b.label);
    }
    for b in &f.blocks {
        if b.instrs.is_empty() {
            return Err(ValidateError::EmptyBlock {
                func: f.name.clone(),
                label: b.label.clone(),
            });
        }
        for (i, instr) in b.instrs.iter().enumerate() {
            let last = i + 1 == b.instrs.len();
            if instr.is_terminator() && !last {
                return Err(ValidateError::EarlyTerminator {
                    func: f.name.clone(),
                    label: b.label.clone(),
                    instr: i,
                });
            }
            if last && !instr.is_terminator() {
                return Err(ValidateError::MissingTerminator {
                    func: f.name.clone(),
                    label: b.label.clone(),
                });
            }
            match instr {
                Instr::Load { width, .. } | Instr::Store { width, .. } | Instr::Hook { width, .. } => {
                    if !super::width_ok(*width) {
                        return Err(ValidateError::IllegalWidth {
                            func: f.name.clone(),
                            label: b.label.clone(),
                            instr: i,
                            width: *width,
                        });
                    }
                }
                Instr::Alloca { slot, .. } => {
                    if *slot as usize >= f.frame.len() {
                        return Err(ValidateError::BadSlot {
                            func: f.name.clone(),
                            slot: *slot,
                        });
                    }
                }
                Instr::GlobalAddr { name, .. } => {
                    if !globals.contains(&name.as_str()) {
                        return Err(ValidateError::UnresolvedGlobal {
                            func: f.name.clone(),
                            name: name.clone(),
                        });
                    }
                }
                Instr::Call { callee, args, .. } => match fn_params.get(callee.as_str()) {
                    None => {
                        return Err(ValidateError::UnresolvedCallee {
                            func: f.name.clone(),
                            callee: callee.clone(),
                        })
                    }
                    Some(&params) => {
                        if args.len() != params as usize {
                            return Err(ValidateError::ArityMismatch {
                                func: f.name.clone(),
                                callee: callee.clone(),
                                expected: params,
                                got: args.len(),
                            });
                        }
                    }
                },
                Instr::Switch { cases, .. } => {
                    for (j, (v, _)) in cases.iter().enumerate() {
                        if cases[..j].iter().any(|(w, _)| w == v) {
                            return Err(ValidateError::DuplicateCase {
                                func: f.name.clone(),
                                label: b.label.clone(),
                                value: *v,
                            });
                        }
                    }
                }
                _ => {}
            }
            for succ in instr.successors() {
                if !labels.contains(&succ) {
                    return Err(ValidateError::UnresolvedTarget {
                        func: f.name.clone(),
                        label: b.label.clone(),
                        target: succ.to_string(),
                    });
                }
            }
        }
    }
    Ok(())
}

/// Forward must-analysis of assigned registers: a register may only be read
/// when every CFG path from function entry assigns it first. Entry starts
/// with the params; other blocks start from the intersection over
/// predecessors. Blocks unreachable from entry are vacuously fine.
fn definite_assignment(f: &Function) -> Result<(), ValidateError> {
    let nregs = max_reg(f) + 1;
    let nblocks = f.blocks.len();
    let label_idx: HashMap<&str, usize> = f
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

    // Bitsets, one word per 64 registers. `top` = all-assigned (the lattice
    // top for intersection, used for not-yet-visited predecessors).
    let words = nregs.div_ceil(64);
    let top = vec![u64::MAX; words];
    let mut entry_in = vec![0u64; words];
    for r in 0..f.params as usize {
        entry_in[r / 64] |= 1 << (r % 64);
    }
    let mut ins: Vec<Vec<u64>> = vec![top.clone(); nblocks];
    ins[0] = entry_in;

    let mut changed = true;
    while changed {
        changed = false;
        for bi in 0..nblocks {
            if bi != 0 {
                let mut merged = top.clone();
                for &p in &preds[bi] {
                    let out = block_out(&f.blocks[p].instrs, &ins[p], words);
                    for w in 0..words {
                        merged[w] &= out[w];
                    }
                }
                if preds[bi].is_empty() {
                    merged = top.clone();
                }
                if merged != ins[bi] {
                    ins[bi] = merged;
                    changed = true;
                }
            }
        }
    }

    let mut uses = Vec::new();
    for (bi, b) in f.blocks.iter().enumerate() {
        let mut assigned = ins[bi].clone();
        for (ii, instr) in b.instrs.iter().enumerate() {
            uses.clear();
            instr.uses(&mut uses);
            for &r in &uses {
                let (w, bit) = (r.0 as usize / 64, r.0 as usize % 64);
                if assigned[w] & (1 << bit) == 0 {
                    return Err(ValidateError::UseBeforeDef {
                        func: f.name.clone(),
                        label: b.label.clone(),
                        instr: ii,
                        reg: r,
                    });
                }
            }
            if let Some(d) = instr.def() {
                assigned[d.0 as usize / 64] |= 1 << (d.0 as usize % 64);
            }
        }
    }
    Ok(())
}

fn block_out(instrs: &[Instr], block_in: &[u64], words: usize) -> Vec<u64> {
    let mut out = block_in.to_vec();
    out.resize(words, 0);
    for instr in instrs {
        if let Some(d) = instr.def() {
            out[d.0 as usize / 64] |= 1 << (d.0 as usize % 64);
        }
    }
    out
}

fn max_reg(f: &Function) -> usize {
    let mut m = f.params.saturating_sub(1) as usize;
    let mut uses = Vec::new();
    for b in &f.blocks {
        for i in &b.instrs {
            uses.clear();
            i.uses(&mut uses);
            if let Some(d) = i.def() {
                uses.push(d);
            }
            for r in &uses {
                m = m.max(r.0 as usize);
            }
        }
    }
    m
}
