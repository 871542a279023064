//! Split address space: one flat untrusted cage plus shadow-tracked trusted
//! regions (heap allocations, frame slots, globals).
//!
//! The shadow state is the crash oracle's ground truth. Every trusted
//! allocation is recorded with its bounds and stays recorded after death, so
//! a write can be classified as out-of-bounds (no region) or use-after-free
//! (dead region). The cage has no shadow: cage bytes are attacker-controlled
//! data, and any in-cage access succeeds.
//!
//! Both sides support an armed snapshot with journaled rollback: arming
//! captures a pristine copy once, later writes mark dirty pages (cage) or
//! dirty regions (trusted), and reset restores only what changed. This keeps
//! per-execution restore cost proportional to the bytes a run actually
//! touched.

use std::collections::BTreeMap;

/// Fixed carve-out for trusted regions; the cage must not overlap it.
pub const TRUSTED_HEAP_BASE: u64 = 0x1000_0000_0000;
pub const TRUSTED_STACK_BASE: u64 = 0x2000_0000_0000;
pub const TRUSTED_GLOBAL_BASE: u64 = 0x3000_0000_0000;
pub const TRUSTED_RESERVATION_END: u64 = 0x4000_0000_0000;

/// Gap kept between trusted regions so one-past-the-end accesses never land
/// in a neighbouring live allocation.
const REGION_GAP: u64 = 64;
const PAGE: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("cage_size {0:#x} too small (min 4096)")]
    CageTooSmall(u64),
    #[error("cage_base {0:#x} must be 16-byte aligned")]
    CageUnaligned(u64),
    #[error("cage range overflows the address space")]
    CageOverflow,
    #[error("cage [{base:#x}, {end:#x}) overlaps the trusted reservation")]
    CageOverlapsTrusted { base: u64, end: u64 },
    #[error("cost model values must be positive")]
    NonPositiveCost,
    #[error("table capacity must be nonzero")]
    ZeroTableCapacity,
    #[error("worker count must be at least 1")]
    ZeroWorkers,
    #[error("mask length cap must be nonzero")]
    ZeroMaskCap,
}

/// Placement of the in-process sandbox.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SandboxLayout {
    pub cage_base: u64,
    pub cage_size: u64,
}

pub const DEFAULT_CAGE_BASE: u64 = 0x7000_0000_0000;
pub const DEFAULT_CAGE_SIZE: u64 = 1 << 20;

impl SandboxLayout {
    pub fn new(cage_base: u64, cage_size: u64) -> Result<Self, ConfigError> {
        if cage_size < 4096 {
            return Err(ConfigError::CageTooSmall(cage_size));
        }
        if cage_base % 16 != 0 {
            return Err(ConfigError::CageUnaligned(cage_base));
        }
        let end = cage_base
            .checked_add(cage_size)
            .ok_or(ConfigError::CageOverflow)?;
        if cage_base < TRUSTED_RESERVATION_END && end > TRUSTED_HEAP_BASE {
            return Err(ConfigError::CageOverlapsTrusted { base: cage_base, end });
        }
        Ok(SandboxLayout { cage_base, cage_size })
    }

    #[inline]
    pub fn contains(&self, addr: u64) -> bool {
        addr.wrapping_sub(self.cage_base) < self.cage_size
    }

    pub fn end(&self) -> u64 {
        self.cage_base + self.cage_size
    }
}

impl Default for SandboxLayout {
    fn default() -> Self {
        SandboxLayout::new(DEFAULT_CAGE_BASE, DEFAULT_CAGE_SIZE).unwrap()
    }
}

// ---- cage ----

/// Flat untrusted memory with page-granular dirty tracking.
#[derive(Debug, Clone)]
pub struct CageMem {
    base: u64,
    bytes: Vec<u8>,
    bump: u64,
    armed: bool,
    pristine: Vec<u8>,
    pristine_bump: u64,
    page_dirty: Vec<bool>,
    dirty_pages: Vec<u32>,
}

impl CageMem {
    pub fn new(layout: SandboxLayout) -> Self {
        let n = layout.cage_size as usize;
        CageMem {
            base: layout.cage_base,
            bytes: vec![0; n],
            bump: 0,
            armed: false,
            pristine: Vec::new(),
            pristine_bump: 0,
            page_dirty: vec![false; n.div_ceil(PAGE)],
            dirty_pages: Vec::new(),
        }
    }

    #[inline]
    pub fn contains(&self, addr: u64) -> bool {
        addr.wrapping_sub(self.base) < self.bytes.len() as u64
    }

    pub fn base(&self) -> u64 {
        self.base
    }

    pub fn size(&self) -> u64 {
        self.bytes.len() as u64
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// Bump allocation, 16-byte aligned. None when the cage is exhausted.
    pub fn alloc(&mut self, size: u64) -> Option<u64> {
        let at = (self.bump + 15) & !15;
        let end = at.checked_add(size)?;
        if end > self.bytes.len() as u64 {
            return None;
        }
        self.bump = end;
        Some(self.base + at)
    }

    #[inline]
    fn mark(&mut self, off: usize, len: usize) {
        if !self.armed || len == 0 {
            return;
        }
        let first = off / PAGE;
        let last = (off + len - 1) / PAGE;
        for p in first..=last {
            if !self.page_dirty[p] {
                self.page_dirty[p] = true;
                self.dirty_pages.push(p as u32);
            }
        }
    }

    #[inline]
    pub fn read_byte(&self, addr: u64) -> Option<u8> {
        self.bytes.get(addr.wrapping_sub(self.base) as usize).copied()
    }

    #[inline]
    pub fn write_byte(&mut self, addr: u64, b: u8) -> bool {
        let off = addr.wrapping_sub(self.base);
        if off < self.bytes.len() as u64 {
            self.mark(off as usize, 1);
            self.bytes[off as usize] = b;
            true
        } else {
            false
        }
    }

    /// Little-endian read; bytes of the range beyond the cage end read as 0.
    pub fn read_clamped(&self, addr: u64, width: u8) -> u64 {
        let mut v = 0u64;
        for i in 0..width as u64 {
            let b = self.read_byte(addr.wrapping_add(i)).unwrap_or(0);
            v |= (b as u64) << (8 * i);
        }
        v
    }

    /// Little-endian write; bytes of the range beyond the cage end are
    /// dropped. Only the interceptor and the corruption write API use this;
    /// program stores go through the VM's oracle instead.
    pub fn write_clamped(&mut self, addr: u64, val: u64, width: u8) {
        for i in 0..width as u64 {
            self.write_byte(addr.wrapping_add(i), (val >> (8 * i)) as u8);
        }
    }

    /// Whole range in-cage fast path.
    #[inline]
    pub fn read_fast(&self, addr: u64, width: u8) -> Option<u64> {
        let off = addr.wrapping_sub(self.base) as usize;
        let end = off.checked_add(width as usize)?;
        let chunk = self.bytes.get(off..end)?;
        let mut v = 0u64;
        for (i, &b) in chunk.iter().enumerate() {
            v |= (b as u64) << (8 * i);
        }
        Some(v)
    }

    #[inline]
    pub fn write_fast(&mut self, addr: u64, val: u64, width: u8) -> bool {
        let off = addr.wrapping_sub(self.base) as usize;
        let Some(end) = off.checked_add(width as usize) else {
            return false;
        };
        if end > self.bytes.len() {
            return false;
        }
        self.mark(off, width as usize);
        for i in 0..width as usize {
            self.bytes[off + i] = (val >> (8 * i)) as u8;
        }
        true
    }

    pub fn arm(&mut self) {
        self.pristine = self.bytes.clone();
        self.pristine_bump = self.bump;
        self.armed = true;
        self.clear_dirty();
    }

    pub fn reset(&mut self) {
        debug_assert!(self.armed);
        for &p in &self.dirty_pages {
            let at = p as usize * PAGE;
            let end = (at + PAGE).min(self.bytes.len());
            self.bytes[at..end].copy_from_slice(&self.pristine[at..end]);
            self.page_dirty[p as usize] = false;
        }
        self.dirty_pages.clear();
        self.bump = self.pristine_bump;
    }

    fn clear_dirty(&mut self) {
        for &p in &self.dirty_pages {
            self.page_dirty[p as usize] = false;
        }
        self.dirty_pages.clear();
    }

    pub fn digest(&self, h: &mut crate::util::Fnv64) {
        h.write(&self.bytes);
        h.write_u64(self.bump);
    }
}

// ---- trusted regions ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionKind {
    Heap,
    Stack,
    Global,
}

#[derive(Debug, Clone)]
pub struct Region {
    pub base: u64,
    pub kind: RegionKind,
    pub live: bool,
    pub bytes: Vec<u8>,
    dirty: bool,
}

impl Region {
    pub fn size(&self) -> u64 {
        self.bytes.len() as u64
    }
}

/// Classification of a single trusted-domain byte address.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ByteClass {
    /// Inside a live region: (region index, offset).
    Live(u32, u64),
    /// Inside a recorded but dead region: use-after-free territory.
    Dead,
    /// No region ever covered this address.
    Gap,
}

#[derive(Debug, Clone, Default)]
struct TrustedJournal {
    n_regions: u32,
    heap_bump: u64,
    stack_bump: u64,
    saved_bytes: Vec<(u32, Vec<u8>)>,
    killed: Vec<u32>,
}

/// Trusted-domain memory: heap, stack slots, and globals, with full shadow
/// bookkeeping.
#[derive(Debug, Clone)]
pub struct TrustedMem {
    regions: Vec<Region>,
    index: BTreeMap<u64, u32>,
    heap_bump: u64,
    stack_bump: u64,
    global_bump: u64,
    armed: bool,
    journal: TrustedJournal,
    last_hit: u32,
}

impl TrustedMem {
    pub fn new() -> Self {
        TrustedMem {
            regions: Vec::new(),
            index: BTreeMap::new(),
            heap_bump: TRUSTED_HEAP_BASE,
            stack_bump: TRUSTED_STACK_BASE,
            global_bump: TRUSTED_GLOBAL_BASE,
            armed: false,
            journal: TrustedJournal::default(),
            last_hit: u32::MAX,
        }
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    /// Allocates a region with a guard gap. Bases are never reused, so dead
    /// regions keep their identity for UAF classification.
    pub fn alloc(&mut self, kind: RegionKind, size: u64) -> u64 {
        let bump = match kind {
            RegionKind::Heap => &mut self.heap_bump,
            RegionKind::Stack => &mut self.stack_bump,
            RegionKind::Global => &mut self.global_bump,
        };
        let base = (*bump + 15) & !15;
        *bump = base + size + REGION_GAP;
        let id = self.regions.len() as u32;
        self.regions.push(Region {
            base,
            kind,
            live: true,
            bytes: vec![0; size as usize],
            dirty: false,
        });
        self.index.insert(base, id);
        base
    }

    pub fn alloc_init(&mut self, kind: RegionKind, init: &[u8]) -> u64 {
        let base = self.alloc(kind, init.len() as u64);
        let id = *self.index.get(&base).unwrap();
        self.regions[id as usize].bytes.copy_from_slice(init);
        base
    }

    /// Marks a region dead. Returns false if `base` is not the exact base of
    /// a live region of the given kind.
    pub fn kill(&mut self, base: u64, kind: RegionKind) -> bool {
        let Some(&id) = self.index.get(&base) else {
            return false;
        };
        let r = &mut self.regions[id as usize];
        if !r.live || r.kind != kind {
            return false;
        }
        r.live = false;
        if self.armed && id < self.journal.n_regions {
            self.journal.killed.push(id);
        }
        true
    }

    /// Kills a stack region unconditionally (frame pop).
    pub fn kill_slot(&mut self, base: u64) {
        let killed = self.kill(base, RegionKind::Stack);
        debug_assert!(killed);
    }

    fn region_of(&mut self, addr: u64) -> Option<u32> {
        if self.last_hit != u32::MAX {
            let r = &self.regions[self.last_hit as usize];
            if addr.wrapping_sub(r.base) < r.size() {
                return Some(self.last_hit);
            }
        }
        let (_, &id) = self.index.range(..=addr).next_back()?;
        let r = &self.regions[id as usize];
        if addr.wrapping_sub(r.base) < r.size() {
            self.last_hit = id;
            Some(id)
        } else {
            None
        }
    }

    pub fn classify_byte(&mut self, addr: u64) -> ByteClass {
        match self.region_of(addr) {
            Some(id) => {
                let r = &self.regions[id as usize];
                if r.live {
                    ByteClass::Live(id, addr - r.base)
                } else {
                    ByteClass::Dead
                }
            }
            None => ByteClass::Gap,
        }
    }

    /// Whole-range read; None unless [addr, addr+width) sits in one live
    /// region.
    pub fn read(&mut self, addr: u64, width: u8) -> Option<u64> {
        let id = self.region_of(addr)?;
        let r = &self.regions[id as usize];
        if !r.live {
            return None;
        }
        let off = (addr - r.base) as usize;
        let chunk = r.bytes.get(off..off + width as usize)?;
        let mut v = 0u64;
        for (i, &b) in chunk.iter().enumerate() {
            v |= (b as u64) << (8 * i);
        }
        Some(v)
    }

    pub fn read_byte(&mut self, addr: u64) -> Option<u8> {
        match self.classify_byte(addr) {
            ByteClass::Live(id, off) => Some(self.regions[id as usize].bytes[off as usize]),
            _ => None,
        }
    }

    fn touch(&mut self, id: u32) {
        if self.armed && !self.regions[id as usize].dirty {
            self.regions[id as usize].dirty = true;
            if id < self.journal.n_regions {
                self.journal
                    .saved_bytes
                    .push((id, self.regions[id as usize].bytes.clone()));
            }
        }
    }

    /// Whole-range write; Err(classification of the first bad byte) if any
    /// byte of the range leaves live-region bounds.
    pub fn write(&mut self, addr: u64, val: u64, width: u8) -> Result<(), ByteClass> {
        match self.region_of(addr) {
            Some(id) if self.regions[id as usize].live => {
                let base = self.regions[id as usize].base;
                let off = (addr - base) as usize;
                if off + width as usize <= self.regions[id as usize].bytes.len() {
                    self.touch(id);
                    let r = &mut self.regions[id as usize];
                    for i in 0..width as usize {
                        r.bytes[off + i] = (val >> (8 * i)) as u8;
                    }
                    Ok(())
                } else {
                    // Range escapes the region: first bad byte is right past
                    // the end.
                    Err(self.classify_byte(base + self.regions[id as usize].size()))
                }
            }
            Some(_) => Err(ByteClass::Dead),
            None => Err(ByteClass::Gap),
        }
    }

    pub fn write_byte(&mut self, addr: u64, b: u8) -> Result<(), ByteClass> {
        match self.classify_byte(addr) {
            ByteClass::Live(id, off) => {
                self.touch(id);
                self.regions[id as usize].bytes[off as usize] = b;
                Ok(())
            }
            bad => Err(bad),
        }
    }

    pub fn arm(&mut self) {
        self.armed = true;
        self.journal = TrustedJournal {
            n_regions: self.regions.len() as u32,
            heap_bump: self.heap_bump,
            stack_bump: self.stack_bump,
            saved_bytes: Vec::new(),
            killed: Vec::new(),
        };
        for r in &mut self.regions {
            r.dirty = false;
        }
    }

    pub fn reset(&mut self) {
        debug_assert!(self.armed);
        let journal = std::mem::take(&mut self.journal);
        for (id, bytes) in &journal.saved_bytes {
            let r = &mut self.regions[*id as usize];
            r.bytes.copy_from_slice(bytes);
            r.dirty = false;
        }
        for &id in &journal.killed {
            self.regions[id as usize].live = true;
        }
        for r in &self.regions[journal.n_regions as usize..] {
            self.index.remove(&r.base);
        }
        self.regions.truncate(journal.n_regions as usize);
        self.heap_bump = journal.heap_bump;
        self.stack_bump = journal.stack_bump;
        self.last_hit = u32::MAX;
        self.journal = TrustedJournal {
            n_regions: journal.n_regions,
            heap_bump: journal.heap_bump,
            stack_bump: journal.stack_bump,
            saved_bytes: Vec::new(),
            killed: Vec::new(),
        };
    }

    pub fn digest(&self, h: &mut crate::util::Fnv64) {
        h.write_u64(self.regions.len() as u64);
        for r in &self.regions {
            h.write_u64(r.base);
            h.write_u64(r.live as u64);
            h.write(&r.bytes);
        }
        h.write_u64(self.heap_bump);
        h.write_u64(self.stack_bump);
        h.write_u64(self.global_bump);
    }
}

impl Default for TrustedMem {
    fn default() -> Self {
        Self::new()
    }
}
