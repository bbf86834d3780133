mod common;

use std::collections::BTreeSet;

use fufi_core::analysis::{dominator_tree, FunctionAnalyses, DEFAULT_TRIP_COUNT};
use fufi_core::corpus::{generate, generate_inputs, Features, GenSpec};
use fufi_core::fission::{identify_regions, outline_region, FissionConfig};
use fufi_core::fusion::compress::{compress_params, max_matching, type_compatible};
use fufi_core::fusion::tag::{decode, encode};
use fufi_core::interp::{Limits, Program};
use fufi_core::ir::{parse_module, print_module, validate, Function, Param, Type, FUNCTION_ALIGN};
use fufi_core::pipeline::{obfuscate, Mode, ObfuscationConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_spec(seed: u64, n: usize, blocks: usize) -> GenSpec {
    GenSpec { seed, n_functions: n, max_blocks: blocks, features: Features::all() }
}

fn ty() -> impl Strategy<Value = Type> {
    proptest::sample::select(common::PARAM_TYPES.to_vec())
}

fn mode() -> impl Strategy<Value = Mode> {
    proptest::sample::select(Mode::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dominators_match_deletion_oracle(seed in any::<u64>(), n in 1usize..14) {
        let m = common::random_cfg(&mut ChaCha8Rng::seed_from_u64(seed), n);
        let f = &m.functions[0];
        prop_assert_eq!(dominator_tree(f).parent, common::brute_idom(f));
    }

    #[test]
    fn regions_match_oracle(seed in any::<u64>(), n in 2usize..9) {
        let m = common::random_cfg(&mut ChaCha8Rng::seed_from_u64(seed), n);
        let f = &m.functions[0];
        let an = FunctionAnalyses::new(f, DEFAULT_TRIP_COUNT);
        let got: Vec<Vec<String>> =
            identify_regions(f, &an, &FissionConfig::default()).into_iter().map(|r| r.members).collect();
        prop_assert_eq!(got, common::oracle_regions(f, &an.freq, DEFAULT_TRIP_COUNT, 2));
    }

    #[test]
    fn selected_regions_are_disjoint(seed in any::<u64>(), n in 2usize..14) {
        let m = common::random_cfg(&mut ChaCha8Rng::seed_from_u64(seed), n);
        let f = &m.functions[0];
        let an = FunctionAnalyses::new(f, DEFAULT_TRIP_COUNT);
        let mut seen = BTreeSet::new();
        for r in identify_regions(f, &an, &FissionConfig::default()) {
            prop_assert!(r.members.len() >= 2);
            prop_assert_ne!(&r.head, &f.blocks[0].label);
            for b in r.members {
                prop_assert!(seen.insert(b));
            }
        }
    }

    #[test]
    fn tag_round_trip(k in 0i64..(1 << 40), ctrl in any::<bool>()) {
        let addr = k * FUNCTION_ALIGN;
        prop_assert_eq!(decode(encode(addr, ctrl)), Some((addr, ctrl)));
        prop_assert_eq!(decode(addr), None);
    }

    #[test]
    fn matching_is_maximum(l in proptest::collection::vec(ty(), 0..7), r in proptest::collection::vec(ty(), 0..7)) {
        let got = max_matching(&l, &r);
        prop_assert_eq!(got.len(), common::brute_matching(&l, &r));
        for w in got.windows(2) {
            prop_assert!(w[0].0 < w[1].0 && w[0].1 < w[1].1);
        }
        for &(i, j) in &got {
            prop_assert!(type_compatible(l[i], r[j]).is_some());
        }
    }

    #[test]
    fn compression_keeps_every_parameter(l in proptest::collection::vec(ty(), 0..7), r in proptest::collection::vec(ty(), 0..7)) {
        let params = |ts: &[Type]| ts.iter().enumerate().map(|(i, &t)| Param::new(format!("p{i}"), t)).collect();
        let (fl, fr) = (Function::new("l", params(&l), Type::I64), Function::new("r", params(&r), Type::I64));
        let p = compress_params(&fl, &fr).unwrap();
        prop_assert_eq!(p.merged_params.len(), l.len() + r.len() - common::brute_matching(&l, &r));
        for (side, ts) in [(false, &l), (true, &r)] {
            for (i, &t) in ts.iter().enumerate() {
                let slot = p.merged_params[p.position(side, i)];
                prop_assert_eq!(type_compatible(t, slot.ty), Some(slot.ty));
            }
        }
    }

    #[test]
    fn outlining_accounts_for_every_block(seed in any::<u64>()) {
        let m = generate(&small_spec(seed, 4, 12));
        for f in m.functions.iter().filter(|f| !f.external) {
            let an = FunctionAnalyses::new(f, DEFAULT_TRIP_COUNT);
            let Some(r) = identify_regions(f, &an, &FissionConfig::default()).into_iter().next() else { continue };
            let o = outline_region(f, &r, "outlined").unwrap();
            let kept = o.rem_func.blocks.len() - o.inserted.rem_blocks.len();
            let moved = o.sep_func.blocks.len() - o.inserted.sep_blocks.len();
            prop_assert_eq!(kept + moved, f.blocks.len());
            prop_assert_eq!(moved, r.members.len());
            for b in &r.members {
                prop_assert!(o.sep_func.block(b).is_some() && o.rem_func.block(b).is_none());
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn generated_programs_are_valid(seed in any::<u64>(), n in 1usize..9, blocks in 3usize..16) {
        let m = generate(&small_spec(seed, n, blocks));
        prop_assert!(validate(&m).is_empty());
        let text = print_module(&m);
        prop_assert_eq!(parse_module(&text).unwrap(), m.clone());
        let p = Program::new(&m).unwrap();
        for args in generate_inputs(&m, "main", 5, seed) {
            let r = p.run("main", &args, Limits::default()).unwrap();
            prop_assert!(r.trap.is_none(), "{:?}", r.trap);
        }
    }

    #[test]
    fn obfuscation_preserves_behavior(seed in any::<u64>(), mode in mode(), obf_seed in any::<u64>(), n in 2usize..8) {
        let m = generate(&small_spec(seed, n, 10));
        let o = obfuscate(&m, &ObfuscationConfig::new(mode, obf_seed)).unwrap();
        prop_assert!(validate(&o.module).is_empty());
        let (a, b) = (Program::new(&m).unwrap(), Program::new(&o.module).unwrap());
        for args in generate_inputs(&m, "main", 8, seed) {
            let want = a.run("main", &args, Limits::default()).unwrap();
            let got = b.run("main", &args, Limits::default()).unwrap();
            prop_assert!(got.same_behavior(&want), "{mode} {:?}: {:?} vs {:?}", args, got, want);
        }
    }

    #[test]
    fn obfuscation_is_deterministic(seed in any::<u64>(), mode in mode(), obf_seed in any::<u64>()) {
        let m = generate(&small_spec(seed, 5, 10));
        let cfg = ObfuscationConfig::new(mode, obf_seed);
        prop_assert_eq!(print_module(&obfuscate(&m, &cfg).unwrap().module), print_module(&obfuscate(&m, &cfg).unwrap().module));
    }
}
