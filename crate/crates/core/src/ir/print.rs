//! Canonical text form. `parse(print(p)) == p` for every valid program, and
//! printing a parsed canonical file reproduces it byte for byte.

use super::{Instr, Program};
use std::fmt::Write;

/// Renders a program in canonical form: decimal immediates, explicit
/// `params=N`, two-space block indent, four-space instruction indent, and an
/// `entry` directive only when the entry is not `main`.
pub fn print_program(p: &Program) -> String {
    let mut out = String::new();
    if p.entry != super::DEFAULT_ENTRY {
        let _ = writeln!(out, "entry {}", p.entry);
        out.push('\n');
    }
    for g in &p.globals {
        let bytes: Vec<String> = g.init.iter().map(|b| b.to_string()).collect();
        let _ = writeln!(out, "global {} [{}]", g.name, bytes.join(","));
    }
    if !p.globals.is_empty() {
        out.push('\n');
    }
    for (i, f) in p.functions.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, "fn {}(params={}) {{", f.name, f.params);
        if !f.frame.is_empty() {
            out.push_str("  frame {\n");
            for (k, size) in f.frame.iter().enumerate() {
                let _ = writeln!(out, "    slot{k}: {size}");
            }
            out.push_str("  }\n");
        }
        for b in &f.blocks {
            let _ = writeln!(out, "  {}:", b.label);
            for instr in &b.instrs {
                let _ = writeln!(out, "    {}", render_instr(instr));
            }
        }
        out.push_str("}\n");
    }
    out
}

fn render_instr(i: &Instr) -> String {
    match i {
        Instr::Const { dst, imm } => format!("const {dst}, {imm}"),
        Instr::Bin { op, dst, a, b } => format!("{} {dst}, {a}, {b}", op.mnemonic()),
        Instr::Cmp { op, dst, a, b } => format!("cmp {dst}, {a}, {b}, {}", op.mnemonic()),
        Instr::Alloca { dst, slot } => format!("alloca {dst}, slot{slot}"),
        Instr::GlobalAddr { dst, name } => format!("global_addr {dst}, {name}"),
        Instr::HeapAlloc { dst, size } => format!("heap_alloc {dst}, {size}"),
        Instr::CageAlloc { dst, size } => format!("cage_alloc {dst}, {size}"),
        Instr::Load { dst, addr, width } => format!("load {dst}, {addr}, {width}"),
        Instr::Store { addr, val, width } => format!("store {addr}, {val}, {width}"),
        Instr::MemCopy { dst, src, len } => format!("memcopy {dst}, {src}, {len}"),
        Instr::TablePut { idx, val } => format!("table_put {idx}, {val}"),
        Instr::TableGet { dst, idx } => format!("table_get {dst}, {idx}"),
        Instr::Free { addr } => format!("free {addr}"),
        Instr::Switch { val, cases, default } => {
            let body: Vec<String> = cases.iter().map(|(k, l)| format!("{k}: {l}")).collect();
            match default {
                Some(d) => format!("switch {val}, [{}], default {d}", body.join(", ")),
                None => format!("switch {val}, [{}]", body.join(", ")),
            }
        }
        Instr::Br { target } => format!("br {target}"),
        Instr::BrIf { cond, then_to, else_to } => format!("br_if {cond}, {then_to}, {else_to}"),
        Instr::Call { dst, callee, args } => {
            let args: Vec<String> = args.iter().map(|r| r.to_string()).collect();
            match dst {
                Some(d) => format!("call {d}, {callee}({})", args.join(", ")),
                None => format!("call {callee}({})", args.join(", ")),
            }
        }
        Instr::Ret { val: Some(v) } => format!("ret {v}"),
        Instr::Ret { val: None } => "ret".to_string(),
        Instr::FuzzStart => "fuzz_start".to_string(),
        Instr::Halt => "halt".to_string(),
        Instr::Hook { site, addr, width } => format!("hook {site}, {addr}, {width}"),
    }
}
