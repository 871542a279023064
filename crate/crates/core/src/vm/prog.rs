//! Executable form of a program: names resolved to dense indices, edge ids
//! precomputed, hook sites flattened.
//!
//! Interpretation never touches strings. Each instruction carries its
//! original (pre-instrumentation) index so crash reports and traces stay
//! stable whether or not hooks are present.

use crate::ir::{self, BinOp, CmpOp, Instr, Program};

/// Sentinel for "no destination register" / "no edge".
pub(crate) const NONE: u32 = u32::MAX;

#[derive(Debug, Clone)]
pub(crate) enum XInstr {
    Const { dst: u32, imm: u64 },
    Bin { op: BinOp, dst: u32, a: u32, b: u32 },
    Cmp { op: CmpOp, dst: u32, a: u32, b: u32 },
    Alloca { dst: u32, slot: u32 },
    GlobalAddr { dst: u32, global: u32 },
    HeapAlloc { dst: u32, size: u32 },
    CageAlloc { dst: u32, size: u32 },
    Load { dst: u32, addr: u32, width: u8 },
    Store { addr: u32, val: u32, width: u8 },
    MemCopy { dst: u32, src: u32, len: u32 },
    TablePut { idx: u32, val: u32 },
    TableGet { dst: u32, idx: u32 },
    Free { addr: u32 },
    Switch { val: u32, cases: Box<[(u64, u32)]>, default: u32, edge_base: u32 },
    Br { target: u32, edge: u32 },
    BrIf { cond: u32, then_to: u32, else_to: u32, edge_base: u32 },
    Call { dst: u32, callee: u32, args: Box<[u32]>, call_edge: u32, ret_edge: u32 },
    Ret { val: u32 },
    FuzzStart,
    Halt,
    Hook { site: u32, addr: u32, width: u8 },
}

#[derive(Debug, Clone)]
pub(crate) struct XBlock {
    pub instrs: Box<[XInstr]>,
    /// Original instruction index (hooks excluded) per slot.
    pub orig_idx: Box<[u32]>,
}

#[derive(Debug, Clone)]
pub(crate) struct XFn {
    pub name: String,
    pub nregs: u32,
    pub frame: Box<[u64]>,
    pub blocks: Vec<XBlock>,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone)]
pub(crate) struct ExecProgram {
    pub fns: Vec<XFn>,
    pub entry: u32,
    pub globals: Vec<(String, Vec<u8>)>,
    pub n_edges: u32,
    pub has_fuzz_start: bool,
}

impl ExecProgram {
    /// Lowers a validated program. Edge ids are assigned in the same
    /// program-order walk as [`ir::edges_of`].
    pub fn compile(p: &Program) -> Result<ExecProgram, ir::ValidateError> {
        ir::validate(p)?;
        let fn_idx = |name: &str| -> u32 { p.function_index(name).unwrap() as u32 };
        let glob_idx = |name: &str| -> u32 {
            p.globals.iter().position(|g| g.name == name).unwrap() as u32
        };

        let mut next_edge = 0u32;
        let mut tick = |n: u32| -> u32 {
            let at = next_edge;
            next_edge += n;
            at
        };
        let mut has_fuzz_start = false;

        let mut fns = Vec::with_capacity(p.functions.len());
        for f in &p.functions {
            let block_idx = |label: &str| -> u32 {
                f.blocks.iter().position(|b| b.label == label).unwrap() as u32
            };
            let mut max_reg = f.params.saturating_sub(1);
            let mut blocks = Vec::with_capacity(f.blocks.len());
            for b in &f.blocks {
                let mut instrs = Vec::with_capacity(b.instrs.len());
                let mut orig_idx = Vec::with_capacity(b.instrs.len());
                let mut orig = 0u32;
                for ins in &b.instrs {
                    let mut regs = Vec::new();
                    ins.uses(&mut regs);
                    if let Some(d) = ins.def() {
                        regs.push(d);
                    }
                    for r in regs {
                        max_reg = max_reg.max(r.0);
                    }
                    let x = match ins {
                        Instr::Const { dst, imm } => XInstr::Const { dst: dst.0, imm: *imm },
                        Instr::Bin { op, dst, a, b } => {
                            XInstr::Bin { op: *op, dst: dst.0, a: a.0, b: b.0 }
                        }
                        Instr::Cmp { op, dst, a, b } => {
                            XInstr::Cmp { op: *op, dst: dst.0, a: a.0, b: b.0 }
                        }
                        Instr::Alloca { dst, slot } => XInstr::Alloca { dst: dst.0, slot: *slot },
                        Instr::GlobalAddr { dst, name } => {
                            XInstr::GlobalAddr { dst: dst.0, global: glob_idx(name) }
                        }
                        Instr::HeapAlloc { dst, size } => {
                            XInstr::HeapAlloc { dst: dst.0, size: size.0 }
                        }
                        Instr::CageAlloc { dst, size } => {
                            XInstr::CageAlloc { dst: dst.0, size: size.0 }
                        }
                        Instr::Load { dst, addr, width } => {
                            XInstr::Load { dst: dst.0, addr: addr.0, width: *width }
                        }
                        Instr::Store { addr, val, width } => {
                            XInstr::Store { addr: addr.0, val: val.0, width: *width }
                        }
                        Instr::MemCopy { dst, src, len } => {
                            XInstr::MemCopy { dst: dst.0, src: src.0, len: len.0 }
                        }
                        Instr::TablePut { idx, val } => {
                            XInstr::TablePut { idx: idx.0, val: val.0 }
                        }
                        Instr::TableGet { dst, idx } => {
                            XInstr::TableGet { dst: dst.0, idx: idx.0 }
                        }
                        Instr::Free { addr } => XInstr::Free { addr: addr.0 },
                        Instr::Switch { val, cases, default } => {
                            let n = cases.len() as u32 + default.is_some() as u32;
                            let edge_base = tick(n);
                            XInstr::Switch {
                                val: val.0,
                                cases: cases
                                    .iter()
                                    .map(|(k, l)| (*k, block_idx(l)))
                                    .collect(),
                                default: default.as_deref().map_or(NONE, block_idx),
                                edge_base,
                            }
                        }
                        Instr::Br { target } => {
                            XInstr::Br { target: block_idx(target), edge: tick(1) }
                        }
                        Instr::BrIf { cond, then_to, else_to } => XInstr::BrIf {
                            cond: cond.0,
                            then_to: block_idx(then_to),
                            else_to: block_idx(else_to),
                            edge_base: tick(2),
                        },
                        Instr::Call { dst, callee, args } => {
                            let edge_base = tick(2);
                            XInstr::Call {
                                dst: dst.map_or(NONE, |r| r.0),
                                callee: fn_idx(callee),
                                args: args.iter().map(|r| r.0).collect(),
                                call_edge: edge_base,
                                ret_edge: edge_base + 1,
                            }
                        }
                        Instr::Ret { val } => XInstr::Ret { val: val.map_or(NONE, |r| r.0) },
                        Instr::FuzzStart => {
                            has_fuzz_start = true;
                            XInstr::FuzzStart
                        }
                        Instr::Halt => XInstr::Halt,
                        Instr::Hook { site, addr, width } => {
                            XInstr::Hook { site: *site, addr: addr.0, width: *width }
                        }
                    };
                    let is_hook = matches!(ins, Instr::Hook { .. });
                    instrs.push(x);
                    orig_idx.push(orig);
                    if !is_hook {
                        orig += 1;
                    }
                }
                blocks.push(XBlock {
                    instrs: instrs.into_boxed_slice(),
                    orig_idx: orig_idx.into_boxed_slice(),
                });
            }
            fns.push(XFn {
                name: f.name.clone(),
                nregs: max_reg + 1,
                frame: f.frame.clone().into_boxed_slice(),
                blocks,
                labels: f.blocks.iter().map(|b| b.label.clone()).collect(),
            });
        }

        Ok(ExecProgram {
            fns,
            entry: fn_idx(&p.entry),
            globals: p.globals.iter().map(|g| (g.name.clone(), g.init.clone())).collect(),
            n_edges: next_edge,
            has_fuzz_start,
        })
    }
}
