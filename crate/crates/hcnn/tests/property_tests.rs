//! Property tests for the backend and packing invariants.

use hcnn::costmodel::{decompose_rotation, KeySet};
use hcnn::heslot::{HeCtx, HeParams, Mode, OpClass, RotTag};
use hcnn::layout::{self, GapConfig, Packing};
use hcnn::oracle::Tensor;
use proptest::prelude::*;

fn small_ctx(mode: Mode) -> HeCtx {
    let mut p = HeParams::set_hyp();
    p.slot_count = 64;
    HeCtx::new(p, mode)
}

proptest! {
    #[test]
    fn crot_roundtrip(values in proptest::collection::vec(-1.0f64..1.0, 64), r in -200i64..200) {
        let ctx = small_ctx(Mode::Full);
        let ct = ctx.encrypt(&values, 3);
        let back = ctx.crot(&ctx.crot(&ct, r, RotTag::Other), -r, RotTag::Other);
        prop_assert_eq!(ctx.decrypt(&back).unwrap(), ctx.decrypt(&ct).unwrap());
    }

    #[test]
    fn prot_roundtrip(values in proptest::collection::vec(-1.0f64..1.0, 64), r in -200i64..200) {
        let ctx = small_ctx(Mode::Full);
        let pt = ctx.encode(&values, 3);
        let back = ctx.prot(&ctx.prot(&pt, r), -r);
        prop_assert_eq!(back.values().unwrap(), pt.values().unwrap());
    }

    #[test]
    fn mul_then_rescale_matches_plain_product(
        xs in proptest::collection::vec(-10.0f64..10.0, 64),
        ys in proptest::collection::vec(-10.0f64..10.0, 64),
    ) {
        let ctx = small_ctx(Mode::Full);
        let ct = ctx.encrypt(&xs, 4);
        let pt = ctx.encode(&ys, 4);
        let out = ctx.rescale(&ctx.mul_pt(&ct, &pt).unwrap()).unwrap();
        let vals = ctx.decrypt(&out).unwrap();
        for i in 0..64 {
            prop_assert_eq!(vals[i], xs[i] * ys[i]);
        }
    }

    #[test]
    fn pack_unpack_roundtrip_pi_ca(
        seed in 0u64..1000,
        logm in 0usize..2,
        logd in 0usize..2,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let m = 1 << logm;
        let d = 1 << logd;
        let c = 8;
        let w = 8;
        let mut p = HeParams::set_hyp();
        p.slot_count = 8192;
        let ctx = HeCtx::new(p, Mode::Full);
        let t = Tensor::chw(c, w, w, (0..c*w*w).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let packing = Packing::pi_ca(8192, c, w, w, GapConfig::new(m, d));
        let packed = layout::pack(&ctx, &t, &packing, 6).unwrap();
        let back = layout::unpack(&ctx, &packed).unwrap();
        prop_assert_eq!(t, back);
    }

    #[test]
    fn pack_unpack_roundtrip_pi_ra(
        seed in 0u64..1000,
        logm in 0usize..2,
        logd in 0usize..2,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let m = 1 << logm;
        let d = 1 << logd;
        let c = 8;
        let w = 8;
        let mut p = HeParams::set_hyp();
        p.slot_count = 8192;
        let ctx = HeCtx::new(p, Mode::Full);
        let t = Tensor::chw(c, w, w, (0..c*w*w).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let packing = Packing::pi_ra(8192, c, w, w, GapConfig::new(m, d));
        let packed = layout::pack(&ctx, &t, &packing, 6).unwrap();
        let back = layout::unpack(&ctx, &packed).unwrap();
        prop_assert_eq!(t, back);
    }

    #[test]
    fn decompose_composes_back(amount in -40000i64..40000) {
        let keys = KeySet::default_policy(32768, &[(64, 1), (128, 2)]);
        let parts = decompose_rotation(amount, &keys).unwrap();
        let sum: i64 = parts.iter().sum();
        prop_assert_eq!(sum.rem_euclid(32768), amount.rem_euclid(32768));
        if amount.rem_euclid(32768) != 0 {
            prop_assert!(!parts.is_empty());
        }
    }

    #[test]
    fn trace_and_full_replay_identical_ledgers(
        ops in proptest::collection::vec(0u8..5, 1..30),
    ) {
        let run = |mode: Mode| {
            let ctx = small_ctx(mode);
            let mut ct = ctx.encrypt(&[1.0; 64], 6);
            let pt = ctx.encode(&[0.5; 64], 6);
            for &op in &ops {
                match op {
                    0 => ct = ctx.add_ct(&ct, &ct).unwrap(),
                    1 => {
                        if ct.level() > 0 {
                            let pt = ctx.encode(&[0.5; 64], ct.level());
                            ct = ctx.rescale(&ctx.mul_pt(&ct, &pt).unwrap()).unwrap();
                        }
                    }
                    2 => ct = ctx.crot(&ct, 7, RotTag::RaS),
                    3 => ct = ctx.bootstrap(&ct),
                    _ => ct = ctx.crot(&ct, -3, RotTag::IrGap),
                }
            }
            let _ = pt;
            ctx.ledger()
        };
        let full = run(Mode::Full);
        let trace = run(Mode::Trace);
        for op in OpClass::ALL {
            prop_assert_eq!(full.count(op), trace.count(op));
        }
        prop_assert_eq!(full.rotation_log, trace.rotation_log);
    }

    #[test]
    fn level_never_escapes_bounds(ops in proptest::collection::vec(0u8..4, 1..40)) {
        let ctx = small_ctx(Mode::Trace);
        let max = ctx.params.max_level;
        let mut ct = ctx.encrypt_trace(ctx.params.usable_level);
        for &op in &ops {
            match op {
                0 => {
                    if ct.level() > 0 {
                        let pt = ctx.encode(&[], ct.level());
                        ct = ctx.rescale(&ctx.mul_pt(&ct, &pt).unwrap()).unwrap();
                    }
                }
                1 => ct = ctx.bootstrap(&ct),
                2 => ct = ctx.crot(&ct, 5, RotTag::Other),
                _ => {
                    if ct.level() > 1 {
                        ct = ctx.level_down(&ct, ct.level() - 1).unwrap();
                    }
                }
            }
            prop_assert!(ct.level() <= max);
        }
    }
}
