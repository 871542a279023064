//! Dense, deterministic control-flow edge enumeration.
//!
//! Coverage uses exact edge identities, not hashed tuples, so ids must be
//! stable for a given program: functions, blocks, and instructions are walked
//! in program order. Within a block, each call contributes a call edge and a
//! return edge (in that order) at its instruction position, and the
//! terminator contributes one edge per successor, in successor order.

use super::{Instr, Program};

/// Dense edge index; the id space is exactly `0..edges_of(p).len()`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EdgeId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    /// Terminator transfer between two blocks of one function.
    Branch,
    /// Call site to callee entry block.
    Call,
    /// Callee return back to the calling block.
    Ret,
}

/// Pseudo block index for the source of a return edge: `ret` may retire in
/// any block of the callee.
pub const RET_BLOCK: usize = usize::MAX;

/// Edge endpoints are (function index, block index).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub id: EdgeId,
    pub kind: EdgeKind,
    pub from: (usize, usize),
    pub to: (usize, usize),
}

/// Enumerates every control-flow edge of a validated program.
pub fn edges_of(p: &Program) -> Vec<Edge> {
    let mut edges = Vec::new();
    let push = |kind, from, to, edges: &mut Vec<Edge>| {
        let id = EdgeId(edges.len() as u32);
        edges.push(Edge { id, kind, from, to });
    };
    for (fi, f) in p.functions.iter().enumerate() {
        for (bi, b) in f.blocks.iter().enumerate() {
            for instr in &b.instrs {
                if let Instr::Call { callee, .. } = instr {
                    let ci = p.function_index(callee).expect("validated program");
                    push(EdgeKind::Call, (fi, bi), (ci, 0), &mut edges);
                    push(EdgeKind::Ret, (ci, RET_BLOCK), (fi, bi), &mut edges);
                }
                for succ in instr.successors() {
                    let si = f.block_index(succ).expect("validated program");
                    push(EdgeKind::Branch, (fi, bi), (fi, si), &mut edges);
                }
            }
        }
    }
    edges
}
