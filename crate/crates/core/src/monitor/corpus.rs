//! In-memory corpus with the scheduling policy used by every worker.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// One retained input. `payload` is mode-dependent: a mask stream under
/// interception, a write list under baseline.
#[derive(Debug, Clone)]
pub struct TestCase {
    /// Index into the campaign's seed list.
    pub seed_idx: usize,
    pub payload: Vec<u8>,
    /// Local corpus index of the parent, None for the initial entries.
    pub parent: Option<u32>,
    /// Worker-local execution count when this entry was admitted.
    pub execs_at: u64,
    /// Coverage hash of the admitting execution, for provenance.
    pub cov_hash: u64,
}

/// FIFO corpus with a bias toward the newest entry: half the picks take
/// the most recent addition, the other half round-robin through the whole
/// corpus. Recent finds get mutated promptly without starving old seeds.
#[derive(Debug, Default)]
pub struct Corpus {
    entries: Vec<TestCase>,
    cursor: usize,
}

impl Corpus {
    pub fn push(&mut self, case: TestCase) {
        self.entries.push(case);
    }

    /// Returns the chosen entry and its corpus index (the child's parent).
    pub fn pick(&mut self, rng: &mut ChaCha8Rng) -> (u32, &TestCase) {
        debug_assert!(!self.entries.is_empty());
        if self.entries.len() > 1 && rng.gen_bool(0.5) {
            let last = self.entries.len() - 1;
            return (last as u32, &self.entries[last]);
        }
        let at = self.cursor % self.entries.len();
        self.cursor = self.cursor.wrapping_add(1);
        (at as u32, &self.entries[at])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[TestCase] {
        &self.entries
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn case(seed_idx: usize) -> TestCase {
        TestCase {
            seed_idx,
            payload: Vec::new(),
            parent: None,
            execs_at: 0,
            cov_hash: 0,
        }
    }

    #[test]
    fn cursor_cycles_all_entries() {
        let mut c = Corpus::default();
        for i in 0..5 {
            c.push(case(i));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut seen = [0u32; 5];
        for _ in 0..10_000 {
            let (idx, case) = c.pick(&mut rng);
            assert_eq!(idx as usize, case.seed_idx, "index must address the entry");
            seen[case.seed_idx] += 1;
        }
        for (i, &n) in seen.iter().enumerate() {
            assert!(n > 500, "entry {i} starved: picked {n} times");
        }
        // The newest entry absorbs the favored half on top of its
        // round-robin share.
        assert!(seen[4] > 4_000, "newest not favored: {seen:?}");
    }

    #[test]
    fn single_entry_always_picked() {
        let mut c = Corpus::default();
        c.push(case(3));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let (idx, case) = c.pick(&mut rng);
            assert_eq!((idx, case.seed_idx), (0, 3));
        }
    }
}
