//! Register-based mini-IR for boundary-fuzzing targets.
//!
//! Programs are a list of byte-array globals and functions; functions hold
//! labelled basic blocks over virtual registers. Memory is untyped: `load` and
//! `store` move little-endian values of width 1, 2, 4, or 8 between registers
//! and a split address space (trusted stack slots, trusted heap, globals, and
//! the untrusted cage). `hook` is a pseudo-instruction inserted by the
//! instrumenter in front of a load; it has no architectural effect beyond
//! giving the VM an interception point.

mod edges;
mod parse;
mod print;
mod validate;

pub use edges::{edges_of, Edge, EdgeId, EdgeKind, RET_BLOCK};
pub use parse::{parse_program, ParseError};
pub use print::print_program;
pub use validate::{validate, ValidateError};

/// Virtual register. Functions may use any indices; `r0..rN-1` carry the N
/// call arguments on entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Reg(pub u32);

impl std::fmt::Display for Reg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    And,
    Or,
    Xor,
    Shl,
    Shr,
}

impl BinOp {
    pub fn mnemonic(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::And => "and",
            BinOp::Or => "or",
            BinOp::Xor => "xor",
            BinOp::Shl => "shl",
            BinOp::Shr => "shr",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CmpOp {
    Eq,
    Ne,
    Ult,
    Ule,
    Slt,
    Sle,
}

impl CmpOp {
    pub fn mnemonic(self) -> &'static str {
        match self {
            CmpOp::Eq => "eq",
            CmpOp::Ne => "ne",
            CmpOp::Ult => "ult",
            CmpOp::Ule => "ule",
            CmpOp::Slt => "slt",
            CmpOp::Sle => "sle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Instr {
    /// `const rD, imm` with a 64-bit immediate.
    Const { dst: Reg, imm: u64 },
    /// `op rD, rA, rB`; all arithmetic wraps at 64 bits, shifts mask to 6 bits.
    Bin { op: BinOp, dst: Reg, a: Reg, b: Reg },
    /// `cmp rD, rA, rB, pred`; writes 0 or 1.
    Cmp { op: CmpOp, dst: Reg, a: Reg, b: Reg },
    /// `alloca rD, slotK`: address of the current frame's slot K.
    Alloca { dst: Reg, slot: u32 },
    /// `global_addr rD, name`.
    GlobalAddr { dst: Reg, name: String },
    /// `heap_alloc rD, rSize`: trusted-heap allocation.
    HeapAlloc { dst: Reg, size: Reg },
    /// `cage_alloc rD, rSize`: bump allocation inside the cage.
    CageAlloc { dst: Reg, size: Reg },
    /// `load rD, rAddr, width`.
    Load { dst: Reg, addr: Reg, width: u8 },
    /// `store rAddr, rVal, width`.
    Store { addr: Reg, val: Reg, width: u8 },
    /// `memcopy rDst, rSrc, rLen`: forward byte copy.
    MemCopy { dst: Reg, src: Reg, len: Reg },
    /// `table_put rIdx, rVal`: reference-table write, bounds-crashing.
    TablePut { idx: Reg, val: Reg },
    /// `table_get rD, rIdx`: reference-table read, poisoning out of bounds.
    TableGet { dst: Reg, idx: Reg },
    /// `free rAddr`: releases a trusted-heap allocation.
    Free { addr: Reg },
    /// `switch rV, [k: label, ...], default label` (default optional; a
    /// defaultless switch with no matching case crashes at runtime).
    Switch {
        val: Reg,
        cases: Vec<(u64, String)>,
        default: Option<String>,
    },
    /// `br label`.
    Br { target: String },
    /// `br_if rC, then_label, else_label`.
    BrIf {
        cond: Reg,
        then_to: String,
        else_to: String,
    },
    /// `call rD, f(args...)` or `call f(args...)`.
    Call {
        dst: Option<Reg>,
        callee: String,
        args: Vec<Reg>,
    },
    /// `ret rV` or `ret`.
    Ret { val: Option<Reg> },
    /// `fuzz_start`: snapshot point; mask consumption begins after this
    /// retires. At most one per program.
    FuzzStart,
    /// `halt`: stop the program without a return value.
    Halt,
    /// `hook site, rAddr, width`: interception point for the load that
    /// immediately follows. Inserted by the instrumenter.
    Hook { site: u32, addr: Reg, width: u8 },
}

impl Instr {
    pub fn is_terminator(&self) -> bool {
        matches!(
            self,
            Instr::Switch { .. }
                | Instr::Br { .. }
                | Instr::BrIf { .. }
                | Instr::Ret { .. }
                | Instr::Halt
        )
    }

    /// Register written by this instruction, if any.
    pub fn def(&self) -> Option<Reg> {
        match self {
            Instr::Const { dst, .. }
            | Instr::Bin { dst, .. }
            | Instr::Cmp { dst, .. }
            | Instr::Alloca { dst, .. }
            | Instr::GlobalAddr { dst, .. }
            | Instr::HeapAlloc { dst, .. }
            | Instr::CageAlloc { dst, .. }
            | Instr::Load { dst, .. }
            | Instr::TableGet { dst, .. } => Some(*dst),
            Instr::Call { dst, .. } => *dst,
            _ => None,
        }
    }

    /// Appends the registers read by this instruction to `out`.
    pub fn uses(&self, out: &mut Vec<Reg>) {
        match self {
            Instr::Const { .. }
            | Instr::Alloca { .. }
            | Instr::GlobalAddr { .. }
            | Instr::FuzzStart
            | Instr::Halt
            | Instr::Br { .. } => {}
            Instr::Bin { a, b, .. } | Instr::Cmp { a, b, .. } => out.extend([*a, *b]),
            Instr::HeapAlloc { size, .. } | Instr::CageAlloc { size, .. } => out.push(*size),
            Instr::Load { addr, .. } => out.push(*addr),
            Instr::Store { addr, val, .. } => out.extend([*addr, *val]),
            Instr::MemCopy { dst, src, len } => out.extend([*dst, *src, *len]),
            Instr::TablePut { idx, val } => out.extend([*idx, *val]),
            Instr::TableGet { idx, .. } => out.push(*idx),
            Instr::Free { addr } => out.push(*addr),
            Instr::Switch { val, .. } => out.push(*val),
            Instr::BrIf { cond, .. } => out.push(*cond),
            Instr::Call { args, .. } => out.extend(args.iter().copied()),
            Instr::Ret { val } => out.extend(val.iter().copied()),
            Instr::Hook { addr, .. } => out.push(*addr),
        }
    }

    /// Successor labels of a terminator, in edge-enumeration order.
    pub fn successors(&self) -> Vec<&str> {
        match self {
            Instr::Br { target } => vec![target.as_str()],
            Instr::BrIf {
                then_to, else_to, ..
            } => vec![then_to.as_str(), else_to.as_str()],
            Instr::Switch { cases, default, .. } => {
                let mut s: Vec<&str> = cases.iter().map(|(_, l)| l.as_str()).collect();
                if let Some(d) = default {
                    s.push(d.as_str());
                }
                s
            }
            _ => Vec::new(),
        }
    }

    pub fn mnemonic(&self) -> &'static str {
        match self {
            Instr::Const { .. } => "const",
            Instr::Bin { op, .. } => op.mnemonic(),
            Instr::Cmp { .. } => "cmp",
            Instr::Alloca { .. } => "alloca",
            Instr::GlobalAddr { .. } => "global_addr",
            Instr::HeapAlloc { .. } => "heap_alloc",
            Instr::CageAlloc { .. } => "cage_alloc",
            Instr::Load { .. } => "load",
            Instr::Store { .. } => "store",
            Instr::MemCopy { .. } => "memcopy",
            Instr::TablePut { .. } => "table_put",
            Instr::TableGet { .. } => "table_get",
            Instr::Free { .. } => "free",
            Instr::Switch { .. } => "switch",
            Instr::Br { .. } => "br",
            Instr::BrIf { .. } => "br_if",
            Instr::Call { .. } => "call",
            Instr::Ret { .. } => "ret",
            Instr::FuzzStart => "fuzz_start",
            Instr::Halt => "halt",
            Instr::Hook { .. } => "hook",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub label: String,
    pub instrs: Vec<Instr>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Function {
    pub name: String,
    pub params: u32,
    /// Frame slot sizes in bytes; slot K is referenced as `slotK`.
    pub frame: Vec<u64>,
    pub blocks: Vec<Block>,
}

impl Function {
    pub fn block_index(&self, label: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.label == label)
    }
}

/// Byte-array global in the trusted domain. Size equals the initializer
/// length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Global {
    pub name: String,
    pub init: Vec<u8>,
}

impl Global {
    pub fn size(&self) -> u64 {
        self.init.len() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    /// Entry function name; `main` unless overridden by an `entry` directive.
    pub entry: String,
    pub globals: Vec<Global>,
    pub functions: Vec<Function>,
}

impl Program {
    pub fn function(&self, name: &str) -> Option<&Function> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn function_index(&self, name: &str) -> Option<usize> {
        self.functions.iter().position(|f| f.name == name)
    }

    /// Total number of `load` instructions.
    pub fn load_count(&self) -> u64 {
        self.functions
            .iter()
            .flat_map(|f| &f.blocks)
            .flat_map(|b| &b.instrs)
            .filter(|i| matches!(i, Instr::Load { .. }))
            .count() as u64
    }
}

pub const DEFAULT_ENTRY: &str = "main";

/// Legal access widths for load/store/hook.
pub fn width_ok(w: u8) -> bool {
    matches!(w, 1 | 2 | 4 | 8)
}
