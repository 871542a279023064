//! Baseline corruption mode: instead of intercepting trusted loads, the
//! fuzzer scribbles raw bytes into the cage before resuming the target, the
//! way a memory-corruption baseline without data-flow knowledge would.

use crate::vm::CageMem;

/// Size of one encoded write record.
pub const WRITE_RECORD_LEN: usize = 13;

/// One decoded cage write: `[u32 LE offset][u8 width code][u64 LE value]`.
/// The width code's low two bits select 1, 2, 4, or 8 bytes; the offset is
/// reduced modulo the cage size at apply time so every record lands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CageWrite {
    pub offset: u32,
    pub width: u8,
    pub value: u64,
}

/// Decodes a payload into write records. A trailing partial record is
/// ignored: mutators produce arbitrary lengths and every prefix of a valid
/// payload must stay valid.
pub fn decode_writes(payload: &[u8]) -> Vec<CageWrite> {
    payload
        .chunks_exact(WRITE_RECORD_LEN)
        .map(|rec| CageWrite {
            offset: u32::from_le_bytes(rec[0..4].try_into().expect("4-byte chunk")),
            width: 1 << (rec[4] & 3),
            value: u64::from_le_bytes(rec[5..13].try_into().expect("8-byte chunk")),
        })
        .collect()
}

/// Inverse of [`decode_writes`] for canonical widths. Used by replay
/// tooling and tests; campaign payloads are mutated directly in encoded
/// form.
pub fn encode_writes(writes: &[CageWrite]) -> Vec<u8> {
    let mut out = Vec::with_capacity(writes.len() * WRITE_RECORD_LEN);
    for w in writes {
        debug_assert!(matches!(w.width, 1 | 2 | 4 | 8));
        out.extend_from_slice(&w.offset.to_le_bytes());
        out.push(w.width.trailing_zeros() as u8);
        out.extend_from_slice(&w.value.to_le_bytes());
    }
    out
}

/// Applies decoded writes to the cage. Offsets wrap modulo the cage size;
/// writes straddling the cage end are clamped, matching how the
/// interceptor treats ranges that run off the end.
pub fn apply_writes(cage: &mut CageMem, writes: &[CageWrite]) {
    let size = cage.size();
    for w in writes {
        let addr = cage.base() + (w.offset as u64 % size);
        cage.write_clamped(addr, w.value, w.width);
    }
}
