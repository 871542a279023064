//! Per-seed novelty tracking over exact edge identities.

use crate::ir::EdgeId;

/// Virgin map over a program's dense edge id space.
///
/// With `bucketed` off (the default) an edge is novel exactly once: the
/// first execution that takes it. With it on, hit counts are first folded
/// into power-of-two buckets and an execution is novel when it sets a
/// bucket bit not seen before on that edge, so "loop ran 9 times" can be
/// distinguished from "loop ran twice".
#[derive(Debug, Clone)]
pub struct CoverageMap {
    virgin: Box<[u8]>,
    bucketed: bool,
    seen_edges: usize,
}

/// AFL-style hit count folding: one bit per magnitude class.
fn bucket_bit(hits: u32) -> u8 {
    match hits {
        0 => 0,
        1 => 1 << 0,
        2 => 1 << 1,
        3 => 1 << 2,
        4..=7 => 1 << 3,
        8..=15 => 1 << 4,
        16..=31 => 1 << 5,
        32..=127 => 1 << 6,
        _ => 1 << 7,
    }
}

impl CoverageMap {
    pub fn new(n_edges: usize, bucketed: bool) -> Self {
        CoverageMap {
            virgin: vec![0; n_edges].into_boxed_slice(),
            bucketed,
            seen_edges: 0,
        }
    }

    /// Folds one execution's coverage in; true iff anything was new.
    pub fn observe(&mut self, coverage: &[(EdgeId, u32)]) -> bool {
        let mut novel = false;
        for &(EdgeId(id), hits) in coverage {
            if hits == 0 {
                continue;
            }
            let cell = &mut self.virgin[id as usize];
            let bit = if self.bucketed { bucket_bit(hits) } else { 1 };
            if *cell & bit != bit {
                if *cell == 0 {
                    self.seen_edges += 1;
                }
                *cell |= bit;
                novel = true;
            }
        }
        novel
    }

    /// Distinct edges hit at least once so far.
    pub fn seen_edges(&self) -> usize {
        self.seen_edges
    }

    pub fn len(&self) -> usize {
        self.virgin.len()
    }

    pub fn is_empty(&self) -> bool {
        self.virgin.is_empty()
    }
}
