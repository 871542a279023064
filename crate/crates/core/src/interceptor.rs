//! Fault injection at hooked cage loads.
//!
//! The interceptor owns a byte stream of XOR bitmasks. Each intercepted load
//! consumes one chunk matching the load width (little-endian; reads past the
//! end of the stream yield zero bytes while the cursor keeps advancing), XORs
//! it into the loaded value, and writes the result back to cage memory before
//! the load retires. Faults are therefore localized (zero mask bits leave
//! bits unchanged, a zero chunk is the identity) and persistent (a later
//! load of the same address sees the mutated value unless faulted again).

use crate::vm::CageMem;

/// Positioned view over mask bytes. The cursor is virtual: it advances by
/// the full chunk width even past the end of the physical bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskStream {
    bytes: Vec<u8>,
    pos: u64,
}

impl MaskStream {
    pub fn new(bytes: Vec<u8>) -> Self {
        MaskStream { bytes, pos: 0 }
    }

    pub fn empty() -> Self {
        Self::new(Vec::new())
    }

    /// Next chunk as a little-endian value of `width` bytes, zero-extended
    /// past the end of the stream.
    pub fn next_mask(&mut self, width: u8) -> u64 {
        debug_assert!(crate::ir::width_ok(width));
        let mut v = 0u64;
        for i in 0..width as u64 {
            let b = usize::try_from(self.pos + i)
                .ok()
                .and_then(|idx| self.bytes.get(idx).copied())
                .unwrap_or(0);
            v |= (b as u64) << (8 * i);
        }
        self.pos += width as u64;
        v
    }

    /// Bytes consumed so far, including virtual zero bytes.
    pub fn consumed(&self) -> u64 {
        self.pos
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn reset(&mut self) {
        self.pos = 0;
    }
}

/// One interception: `(site, addr, width, original, mask, mutated, offset)`
/// where `offset` is the stream cursor before the chunk was consumed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InterceptionRecord {
    pub site: u32,
    pub addr: u64,
    pub width: u8,
    pub original: u64,
    pub mask: u64,
    pub mutated: u64,
    pub offset: u64,
}

impl InterceptionRecord {
    /// Log line, fixed field order.
    pub fn render(&self) -> String {
        format!(
            "site={} addr={:#x} width={} orig={:#x} mask={:#x} mut={:#x} offset={}",
            self.site, self.addr, self.width, self.original, self.mask, self.mutated, self.offset
        )
    }
}

/// Mask-driven load interceptor. A disabled interceptor (baseline mode)
/// never consumes stream bytes or touches memory.
#[derive(Debug, Clone)]
pub struct Interceptor {
    stream: MaskStream,
    enabled: bool,
    log: bool,
    records: Vec<InterceptionRecord>,
}

impl Interceptor {
    pub fn new(stream: MaskStream) -> Self {
        Interceptor { stream, enabled: true, log: false, records: Vec::new() }
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        Self::new(MaskStream::new(bytes.to_vec()))
    }

    /// No-fault interceptor: hooks are counted by the VM but nothing is
    /// consumed or mutated.
    pub fn disabled() -> Self {
        let mut i = Self::new(MaskStream::empty());
        i.enabled = false;
        i
    }

    pub fn zero() -> Self {
        Self::new(MaskStream::empty())
    }

    pub fn with_log(mut self) -> Self {
        self.log = true;
        self
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn consumed(&self) -> u64 {
        self.stream.consumed()
    }

    pub fn records(&self) -> &[InterceptionRecord] {
        &self.records
    }

    /// Applies the next mask chunk to the cage bytes at `addr`. The caller
    /// guarantees `addr` is inside the cage; bytes of a chunk that straddle
    /// the cage end participate in the mask arithmetic but are not written
    /// back (the interceptor never writes outside the cage).
    pub fn intercept_load(&mut self, site: u32, addr: u64, width: u8, cage: &mut CageMem) {
        debug_assert!(self.enabled);
        let offset = self.stream.consumed();
        let mask = self.stream.next_mask(width);
        if mask == 0 && !self.log {
            return;
        }
        let original = cage.read_clamped(addr, width);
        let mutated = original ^ mask;
        if mask != 0 {
            cage.write_clamped(addr, mutated, width);
        }
        if self.log {
            self.records.push(InterceptionRecord {
                site,
                addr,
                width,
                original,
                mask,
                mutated,
                offset,
            });
        }
    }
}
