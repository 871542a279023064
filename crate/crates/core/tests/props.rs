//! Property tests over the format and algorithm invariants the engine's
//! determinism rests on: parser/printer fixpoint, mask chunking, the
//! baseline write-record codec, mutation bounds, and report round-trips.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sbx_forge_core::interceptor::MaskStream;
use sbx_forge_core::monitor::{decode_writes, encode_writes, mutate, CageWrite, MAX_PAYLOAD_LEN};
use sbx_forge_core::targets::build_suite;
use sbx_forge_core::util::KvLines;
use sbx_forge_core::vm::{CrashKind, CrashReport};
use sbx_forge_core::{parse_program, print_program};

#[test]
fn suite_sources_reach_a_print_parse_fixpoint() {
    for t in &build_suite().targets {
        let once = print_program(&t.program);
        let again = print_program(&parse_program(&once).unwrap());
        assert_eq!(once, again, "{} printer output is not a fixpoint", t.id);
    }
}

// ---- generated-program round-trip ----

#[derive(Debug, Clone)]
enum GenOp {
    Const(u64),
    Bin(&'static str, usize, usize),
    Cmp(&'static str, usize, usize),
}

fn gen_op(defined: usize) -> impl Strategy<Value = GenOp> {
    let bin = prop::sample::select(vec!["add", "sub", "mul", "xor", "and", "or", "shl", "shr"]);
    let pred = prop::sample::select(vec!["eq", "ne", "ult", "ule"]);
    prop_oneof![
        any::<u64>().prop_map(GenOp::Const),
        (bin, 0..defined, 0..defined).prop_map(|(op, a, b)| GenOp::Bin(op, a, b)),
        (pred, 0..defined, 0..defined).prop_map(|(p, a, b)| GenOp::Cmp(p, a, b)),
    ]
}

fn render(ops: &[GenOp]) -> String {
    let mut src = String::from("fn main() {\n  b0:\n    const r0, 0\n");
    for (i, op) in ops.iter().enumerate() {
        let d = i + 1;
        match op {
            GenOp::Const(v) => src.push_str(&format!("    const r{d}, {v}\n")),
            GenOp::Bin(op, a, b) => src.push_str(&format!("    {op} r{d}, r{a}, r{b}\n")),
            GenOp::Cmp(p, a, b) => src.push_str(&format!("    cmp r{d}, r{a}, r{b}, {p}\n")),
        }
    }
    src.push_str(&format!("    ret r{}\n}}\n", ops.len()));
    src
}

fn linear_program() -> impl Strategy<Value = String> {
    // Ops only reference earlier registers, so every program is valid.
    prop::collection::vec(prop::num::u8::ANY, 1..24).prop_flat_map(|seed| {
        let mut strategies: Vec<BoxedStrategy<GenOp>> = Vec::new();
        for i in 0..seed.len() {
            strategies.push(gen_op(i + 1).boxed());
        }
        strategies
    })
    .prop_map(|ops| render(&ops))
}

proptest! {
    #[test]
    fn generated_programs_round_trip(src in linear_program()) {
        let p1 = parse_program(&src).expect("generated source must parse");
        let text = print_program(&p1);
        let p2 = parse_program(&text).expect("printed source must parse");
        prop_assert_eq!(text, print_program(&p2));
    }

    // ---- mask chunking ----

    #[test]
    fn mask_chunks_are_le_zero_extended_and_cursor_always_advances(
        bytes in prop::collection::vec(any::<u8>(), 0..64),
        widths in prop::collection::vec(prop::sample::select(vec![1u8, 2, 4, 8]), 0..32),
    ) {
        let mut s = MaskStream::new(bytes.clone());
        let mut pos = 0u64;
        for w in widths {
            let got = s.next_mask(w);
            let mut want = 0u64;
            for i in 0..w as u64 {
                let b = bytes.get((pos + i) as usize).copied().unwrap_or(0);
                want |= (b as u64) << (8 * i);
            }
            pos += w as u64;
            prop_assert_eq!(got, want);
            prop_assert_eq!(s.consumed(), pos);
        }
    }

    // ---- baseline write-record codec ----

    #[test]
    fn write_records_round_trip(
        writes in prop::collection::vec(
            (any::<u32>(), prop::sample::select(vec![1u8, 2, 4, 8]), any::<u64>())
                .prop_map(|(offset, width, value)| CageWrite { offset, width, value }),
            0..16,
        ),
        junk in prop::collection::vec(any::<u8>(), 0..13),
    ) {
        let mut encoded = encode_writes(&writes);
        prop_assert_eq!(decode_writes(&encoded), writes.clone());
        // A trailing partial record never changes the decoded prefix.
        encoded.extend_from_slice(&junk[..junk.len().min(12)]);
        prop_assert_eq!(decode_writes(&encoded), writes);
    }

    // ---- mutation bounds and determinism ----

    #[test]
    fn mutation_respects_the_cap_and_its_rng_seed(
        parent in prop::collection::vec(any::<u8>(), 0..256),
        cap in 1usize..512,
        seed in any::<u64>(),
    ) {
        let child = mutate(&parent, &mut ChaCha8Rng::seed_from_u64(seed), cap);
        prop_assert!(child.len() <= cap.max(parent.len()));
        prop_assert!(child.len() <= MAX_PAYLOAD_LEN.max(parent.len()));
        let again = mutate(&parent, &mut ChaCha8Rng::seed_from_u64(seed), cap);
        prop_assert_eq!(child, again);
    }

    // ---- crash report round-trip ----

    #[test]
    fn crash_reports_round_trip(
        kind_ix in 0usize..4,
        function in "[a-z][a-z0-9_]{0,11}",
        block in "[a-z][a-z0-9_]{0,11}",
        instr in any::<u32>(),
        address in prop::option::of(any::<u64>()),
        width in prop::option::of(prop::sample::select(vec![1u8, 2, 4, 8])),
    ) {
        let kind = [
            CrashKind::OobWrite,
            CrashKind::UafWrite,
            CrashKind::UndefinedSwitch,
            CrashKind::TableIndexOob,
        ][kind_ix];
        let report = CrashReport { kind, function, block, instr, address, width };
        let parsed = CrashReport::parse(&report.render()).unwrap();
        prop_assert_eq!(parsed, report);
    }

    // ---- kv format round-trip ----

    #[test]
    fn kv_lines_round_trip(
        entries in prop::collection::btree_map(
            "[a-z][a-z0-9_.]{0,15}",
            "[ -<>-~]{0,24}",
            0..12,
        ),
    ) {
        let mut kv = KvLines::new();
        for (k, v) in &entries {
            kv.push(k, v);
        }
        let parsed = KvLines::parse(&kv.render()).unwrap();
        for (k, v) in &entries {
            prop_assert_eq!(parsed.get(k), Some(v.trim()));
        }
    }
}
