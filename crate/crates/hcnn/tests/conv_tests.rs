//! Convolution correctness against the plain oracle, and ledger agreement
//! with the closed-form cost model.

use hcnn::costmodel::{conv_cost, ConvAlgo, TagCounts};
use hcnn::hconv::{self, ConvLayerSpec, LayerWeights, WeightLayout};
use hcnn::heslot::{HeCtx, HeParams, Mode, OpClass, RotTag};
use hcnn::layout::{self, GapConfig, Packing};
use hcnn::oracle::{self, ConvKernel, Tensor};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn ctx_full(slots: usize) -> HeCtx {
    let mut p = HeParams::set_hyp();
    p.slot_count = slots;
    HeCtx::new(p, Mode::Full)
}

fn rand_tensor(rng: &mut StdRng, c: usize, h: usize, w: usize) -> Tensor {
    Tensor::chw(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn rand_kernel(rng: &mut StdRng, c_o: usize, c_i: usize, f: usize) -> ConvKernel {
    ConvKernel::new(
        c_o,
        c_i,
        f,
        (0..c_o * c_i * f * f).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
}

fn tag_counts(ctx: &HeCtx) -> TagCounts {
    let led = ctx.ledger();
    TagCounts {
        slide: led.counts_by_tag(RotTag::Slide),
        ras: led.counts_by_tag(RotTag::RaS),
        ras_g: led.counts_by_tag(RotTag::RaSGap),
        ir: led.counts_by_tag(RotTag::Ir),
        ir_g: led.counts_by_tag(RotTag::IrGap),
    }
}

// ---------------------------------------------------------------------------
// SISO
// ---------------------------------------------------------------------------

#[test]
fn siso_identity_kernel_is_identity() {
    let ctx = ctx_full(16);
    let mut k = vec![0.0; 9];
    k[4] = 1.0; // center tap
    let w = LayerWeights::standard(ConvKernel::new(1, 1, 3, k));
    let spec = ConvLayerSpec::new(1, 1, 4, 3, 1, GapConfig::new(1, 1), GapConfig::new(1, 1), ConvAlgo::CaConv);
    let img: Vec<f64> = (1..=16).map(|i| i as f64).collect();
    let ct = ctx.encrypt(&img, 6);
    let out = hconv::siso(&ctx, &ct, &w, &spec).unwrap();
    let vals = ctx.decrypt(&out).unwrap();
    assert_eq!(&vals[..16], &img[..]);
    let led = ctx.ledger();
    assert_eq!(led.counts_by_tag(RotTag::Slide), 8);
    assert_eq!(led.count(OpClass::MulPt), 9);
    assert_eq!(led.count(OpClass::AddCt), 8);
    assert_eq!(led.count(OpClass::Rescale), 1);
}

#[test]
fn siso_stride2_leaves_gapped_grid() {
    // 4x4 image, f=3, s=2: valid outputs at even positions, gap slots zero.
    let ctx = ctx_full(16);
    let mut rng = StdRng::seed_from_u64(5);
    let img = rand_tensor(&mut rng, 1, 4, 4);
    let k = rand_kernel(&mut rng, 1, 1, 3);
    let w = LayerWeights::standard(k.clone());
    let spec = ConvLayerSpec::new(1, 1, 4, 3, 2, GapConfig::new(1, 1), GapConfig::new(1, 1), ConvAlgo::CaConv);
    let ct = ctx.encrypt(&img.data, 6);
    let out = hconv::siso(&ctx, &ct, &w, &spec).unwrap();
    let vals = ctx.decrypt(&out).unwrap();
    let expect = oracle::conv2d_ref(&img, &k, 2, 1).unwrap();
    for y in 0..2 {
        for x in 0..2 {
            assert!((vals[(2 * y) * 4 + 2 * x] - expect.at3(0, y, x)).abs() < 1e-12);
        }
    }
    // gap positions hold zero (odd rows/cols)
    for y in 0..4 {
        for x in 0..4 {
            if y % 2 == 1 || x % 2 == 1 {
                assert_eq!(vals[y * 4 + x], 0.0, "slot ({y},{x})");
            }
        }
    }
}

#[test]
fn siso_matches_oracle_on_random_8x8() {
    let ctx = ctx_full(64);
    let mut rng = StdRng::seed_from_u64(7);
    let img = rand_tensor(&mut rng, 1, 8, 8);
    let k = rand_kernel(&mut rng, 1, 1, 3);
    let w = LayerWeights::standard(k.clone());
    let spec = ConvLayerSpec::new(1, 1, 8, 3, 1, GapConfig::new(1, 1), GapConfig::new(1, 1), ConvAlgo::CaConv);
    let ct = ctx.encrypt(&img.data, 6);
    let out = hconv::siso(&ctx, &ct, &w, &spec).unwrap();
    let vals = ctx.decrypt(&out).unwrap();
    let expect = oracle::conv2d_ref(&img, &k, 1, 1).unwrap();
    for y in 0..8 {
        for x in 0..8 {
            assert!((vals[y * 8 + x] - expect.at3(0, y, x)).abs() < 1e-9);
        }
    }
}

#[test]
fn reordered_siso_is_bitwise_equal() {
    let mut rng = StdRng::seed_from_u64(11);
    let img = rand_tensor(&mut rng, 1, 8, 8);
    let k = rand_kernel(&mut rng, 1, 1, 3);
    let spec = ConvLayerSpec::new(1, 1, 8, 3, 1, GapConfig::new(1, 1), GapConfig::new(1, 1), ConvAlgo::CaConv);

    let ctx1 = ctx_full(64);
    let ct = ctx1.encrypt(&img.data, 6);
    let w = LayerWeights::standard(k.clone());
    let a = hconv::siso(&ctx1, &ct, &w, &spec).unwrap();

    let ctx2 = ctx_full(64);
    let ct = ctx2.encrypt(&img.data, 6);
    let w2 = LayerWeights::new(k, None, WeightLayout::InverseRotated);
    let b = hconv::siso_reordered(&ctx2, &ct, &w2, &spec).unwrap();

    assert_eq!(ctx1.decrypt(&a).unwrap(), ctx2.decrypt(&b).unwrap());
    // identical op counts, rotations merely reordered
    assert_eq!(
        ctx1.ledger().counts_by_tag(RotTag::Slide),
        ctx2.ledger().counts_by_tag(RotTag::Slide)
    );
}

// ---------------------------------------------------------------------------
// RaS
// ---------------------------------------------------------------------------

#[test]
fn ras_sums_groups() {
    let ctx = ctx_full(16);
    let vals: Vec<f64> = (1..=16).map(|i| i as f64).collect();
    let ct = ctx.encrypt(&vals, 6);
    let out = hconv::ras(&ctx, &ct, 4, 4, RotTag::RaS).unwrap();
    let v = ctx.decrypt(&out).unwrap();
    // block 0 holds the blockwise sums 1+5+9+13, ...
    assert_eq!(&v[..4], &[28.0, 32.0, 36.0, 40.0]);
    let led = ctx.ledger();
    assert_eq!(led.count(OpClass::CRot), 2);
    // groups=1 is free
    let out1 = hconv::ras(&ctx, &ct, 1, 4, RotTag::RaS).unwrap();
    assert_eq!(ctx.decrypt(&out1).unwrap(), vals_padded(&vals, 16));
    assert_eq!(ctx.ledger().count(OpClass::CRot), 2);
}

fn vals_padded(v: &[f64], n: usize) -> Vec<f64> {
    let mut out = v.to_vec();
    out.resize(n, 0.0);
    out
}

#[test]
fn ras_log_count_for_power_of_two_groups() {
    let ctx = ctx_full(64);
    let ct = ctx.encrypt(&[1.0; 64], 6);
    for groups in [2usize, 4, 8, 16] {
        ctx.reset_ledger();
        let _ = hconv::ras(&ctx, &ct, groups, 64 / groups, RotTag::RaS).unwrap();
        assert_eq!(ctx.ledger().count(OpClass::CRot) as u32, groups.trailing_zeros());
    }
    assert!(hconv::ras(&ctx, &ct, 3, 4, RotTag::RaS).is_err());
}

// ---------------------------------------------------------------------------
// CAConv / RAConv
// ---------------------------------------------------------------------------

fn run_ca(
    seed: u64,
    c: usize,
    w: usize,
    f: usize,
    gap: GapConfig,
) -> (HeCtx, Tensor, ConvKernel, hcnn::layout::PackedTensor, ConvLayerSpec) {
    let ctx = ctx_full(32768);
    let mut rng = StdRng::seed_from_u64(seed);
    let img = rand_tensor(&mut rng, c, w, w);
    let k = rand_kernel(&mut rng, c, c, f);
    let spec = ConvLayerSpec::new(c, c, w, f, 1, gap, gap, ConvAlgo::CaConv);
    let packing = Packing::pi_ca(32768, c, w, w, gap);
    let packed = layout::pack(&ctx, &img, &packing, 6).unwrap();
    (ctx, img, k, packed, spec)
}

#[test]
fn caconv_matches_oracle_and_formula() {
    for (seed, c, w, gap) in [
        (1u64, 4usize, 8usize, GapConfig::new(1, 1)),
        (2, 8, 8, GapConfig::new(2, 2)),
        (3, 8, 8, GapConfig::new(2, 4)),
        (4, 16, 8, GapConfig::new(4, 2)),
    ] {
        let (ctx, img, k, packed, spec) = run_ca(seed, c, w, 3, gap);
        let weights = LayerWeights::standard(k.clone());
        let out = hconv::caconv(&ctx, &packed, &weights, &spec).unwrap();
        assert_eq!(out.packing.kind, hcnn::layout::FormatKind::PiRa);
        let decoded = layout::unpack(&ctx, &out).unwrap();
        let expect = oracle::conv2d_ref(&img, &k, 1, 1).unwrap();
        let err = decoded.max_abs_diff(&expect);
        assert!(err < 1e-9, "c={c} gap=({},{}) err={err}", gap.m, gap.d);

        let counts = tag_counts(&ctx);
        let cn = packed.packing.planes;
        let expect_counts = conv_cost(ConvAlgo::CaConv, 3, cn, gap.m, gap.d);
        assert_eq!(counts, expect_counts, "c={c} gap=({},{})", gap.m, gap.d);
    }
}

#[test]
fn raconv_variants_match_oracle_and_are_bitwise_equal() {
    for (seed, c, w, gap) in [
        (21u64, 4usize, 8usize, GapConfig::new(1, 1)),
        (22, 8, 8, GapConfig::new(2, 2)),
        (23, 8, 8, GapConfig::new(1, 4)),
    ] {
        let mut rng = StdRng::seed_from_u64(seed);
        let img = rand_tensor(&mut rng, c, w, w);
        let k = rand_kernel(&mut rng, c, c, 3);
        let spec = ConvLayerSpec::new(c, c, w, 3, 1, gap, gap, ConvAlgo::RaConvReorder);
        let packing = Packing::pi_ra(32768, c, w, w, gap);
        let expect = oracle::conv2d_ref(&img, &k, 1, 1).unwrap();

        let run = |naive: bool| {
            let ctx = ctx_full(32768);
            let packed = layout::pack(&ctx, &img, &packing, 6).unwrap();
            let w2 = LayerWeights::new(k.clone(), None, WeightLayout::InverseRotated);
            let out = hconv::raconv(&ctx, &packed, &w2, &spec, naive).unwrap();
            assert_eq!(out.packing.kind, hcnn::layout::FormatKind::PiCa);
            let decoded = layout::unpack(&ctx, &out).unwrap();
            (ctx, decoded)
        };
        let (ctx_r, dec_r) = run(false);
        let (ctx_n, dec_n) = run(true);
        assert!(dec_r.max_abs_diff(&expect) < 1e-9);
        // bitwise equality under the fixed summation order
        assert_eq!(dec_r.data, dec_n.data);

        let n_i = c / gap.d;
        let reorder = tag_counts(&ctx_r);
        let naive = tag_counts(&ctx_n);
        let cn = Packing::pi_ca(32768, c, w, w, gap).planes;
        assert_eq!(reorder, conv_cost(ConvAlgo::RaConvReorder, 3, cn, gap.m, gap.d));
        assert_eq!(naive, conv_cost(ConvAlgo::RaConvNaive, 3, cn, gap.m, gap.d));
        assert_eq!(reorder.slide, 8);
        assert_eq!(naive.slide, 8 * n_i as u64);
    }
}

#[test]
fn ca_then_ra_block_matches_oracle() {
    // full residual-style conv pair including a squaring nonlinearity
    let c = 8;
    let w = 8;
    let gap = GapConfig::new(2, 2);
    let ctx = ctx_full(32768);
    let mut rng = StdRng::seed_from_u64(31);
    let img = rand_tensor(&mut rng, c, w, w);
    let k1 = rand_kernel(&mut rng, c, c, 3);
    let k2 = rand_kernel(&mut rng, c, c, 3);
    let spec = ConvLayerSpec::new(c, c, w, 3, 1, gap, gap, ConvAlgo::CaConv);
    let packing = Packing::pi_ca(32768, c, w, w, gap);
    let packed = layout::pack(&ctx, &img, &packing, 6).unwrap();

    let ra = hconv::caconv(&ctx, &packed, &LayerWeights::standard(k1.clone()), &spec).unwrap();
    let squared = hcnn::layout::PackedTensor {
        cts: ra
            .cts
            .iter()
            .map(|c| hconv::square_activation(&ctx, c).unwrap())
            .collect(),
        packing: ra.packing,
    };
    let w2 = LayerWeights::new(k2.clone(), None, WeightLayout::InverseRotated);
    let out = hconv::raconv(&ctx, &squared, &w2, &spec, false).unwrap();
    let decoded = layout::unpack(&ctx, &out).unwrap();

    let o1 = oracle::conv2d_ref(&img, &k1, 1, 1).unwrap();
    let o2 = oracle::square_ref(&o1);
    let expect = oracle::conv2d_ref(&o2, &k2, 1, 1).unwrap();
    assert!(decoded.max_abs_diff(&expect) < 1e-9);
}

#[test]
fn fused_block_equals_unfused_and_bounds_working_set() {
    let c = 16;
    let w = 8;
    let gap = GapConfig::new(2, 2);
    let mut rng = StdRng::seed_from_u64(41);
    let img = rand_tensor(&mut rng, c, w, w);
    let k1 = rand_kernel(&mut rng, c, c, 3);
    let k2 = rand_kernel(&mut rng, c, c, 3);
    let spec = ConvLayerSpec::new(c, c, w, 3, 1, gap, gap, ConvAlgo::CaConv);
    let packing = Packing::pi_ca(32768, c, w, w, gap);

    // unfused
    let ctx_a = ctx_full(32768);
    let packed = layout::pack(&ctx_a, &img, &packing, 6).unwrap();
    let ra = hconv::caconv(&ctx_a, &packed, &LayerWeights::standard(k1.clone()), &spec).unwrap();
    let squared = hcnn::layout::PackedTensor {
        cts: ra
            .cts
            .iter()
            .map(|c| hconv::square_activation(&ctx_a, c).unwrap())
            .collect(),
        packing: ra.packing,
    };
    let w2a = LayerWeights::new(k2.clone(), None, WeightLayout::InverseRotated);
    let unfused = hconv::raconv(&ctx_a, &squared, &w2a, &spec, false).unwrap();

    // fused
    let ctx_b = ctx_full(32768);
    let packed_b = layout::pack(&ctx_b, &img, &packing, 6).unwrap();
    let w1b = LayerWeights::standard(k1.clone());
    let w2b = LayerWeights::new(k2.clone(), None, WeightLayout::InverseRotated);
    let fused = hconv::fused_block(&ctx_b, &packed_b, &w1b, &w2b, &spec, &spec).unwrap();

    let a = layout::unpack(&ctx_a, &unfused).unwrap();
    let b = layout::unpack(&ctx_b, &fused.tensor).unwrap();
    assert_eq!(a.data, b.data);
    assert_eq!(
        ctx_a.ledger().count(OpClass::CRot),
        ctx_b.ledger().count(OpClass::CRot)
    );
    let n_ca = packing.ct_count();
    assert!(fused.peak_intermediates <= n_ca * 9 + 4);
}

// ---------------------------------------------------------------------------
// MP-Conv baseline
// ---------------------------------------------------------------------------

#[test]
fn mp_conv_matches_oracle_and_formula() {
    for (seed, c, w, gap) in [
        (51u64, 4usize, 8usize, GapConfig::new(1, 2)),
        (52, 8, 8, GapConfig::new(4, 2)),
        (53, 4, 8, GapConfig::new(4, 4)),
    ] {
        let ctx = ctx_full(32768);
        let mut rng = StdRng::seed_from_u64(seed);
        let img = rand_tensor(&mut rng, c, w, w);
        let k = rand_kernel(&mut rng, c, c, 3);
        let spec = ConvLayerSpec::new(c, c, w, 3, 1, gap, gap, ConvAlgo::MpConvLc);
        let packed = layout::multiplexed_pack(&ctx, &img, gap.m, gap.d, 6).unwrap();
        let weights = LayerWeights::standard(k.clone());
        let out = hconv::mp_conv_lc(&ctx, &packed, &weights, &spec).unwrap();
        let decoded = layout::unpack(&ctx, &out).unwrap();
        let expect = oracle::conv2d_ref(&img, &k, 1, 1).unwrap();
        let err = decoded.max_abs_diff(&expect);
        assert!(err < 1e-9, "c={c} gap=({},{}) err={err}", gap.m, gap.d);

        let counts = tag_counts(&ctx);
        let cn = packed.packing.planes;
        assert_eq!(counts, conv_cost(ConvAlgo::MpConvLc, 3, cn, gap.m, gap.d));
    }
}

#[test]
fn mp_conv_pointwise_no_rotation() {
    // 1x1 image, f=1, single channel: one MulPt, no rotation
    let ctx = ctx_full(16);
    let img = Tensor::chw(1, 1, 1, vec![2.5]);
    let k = ConvKernel::new(1, 1, 1, vec![3.0]);
    let spec = ConvLayerSpec::new(1, 1, 1, 1, 1, GapConfig::new(1, 1), GapConfig::new(1, 1), ConvAlgo::MpConvLc);
    let packed = layout::multiplexed_pack(&ctx, &img, 1, 1, 6).unwrap();
    let out = hconv::mp_conv_lc(&ctx, &packed, &LayerWeights::standard(k), &spec).unwrap();
    let v = ctx.decrypt(&out.cts[0]).unwrap();
    assert!((v[0] - 7.5).abs() < 1e-12);
    let led = ctx.ledger();
    assert_eq!(led.count(OpClass::CRot), 0);
    assert_eq!(led.count(OpClass::MulPt), 2); // filter + gather mask
}

// ---------------------------------------------------------------------------
// ir / formats
// ---------------------------------------------------------------------------

#[test]
fn ir_identity_is_free() {
    let ctx = ctx_full(32768);
    let p = Packing::pi_ra(32768, 8, 8, 8, GapConfig::new(2, 2));
    let ct = ctx.encrypt(&[1.0; 64], 6);
    let out = hconv::ir(&ctx, &ct, &p, &p).unwrap();
    assert_eq!(ctx.ledger().count(OpClass::CRot), 0);
    assert_eq!(ctx.decrypt(&out).unwrap(), ctx.decrypt(&ct).unwrap());
}

#[test]
fn ir_gap_swap_costs_log_m() {
    let ctx = ctx_full(32768);
    let gap = GapConfig::new(2, 2);
    let from = Packing::pi_ra(32768, 2, 8, 8, gap);
    let to = Packing::pi_ca(32768, 2, 8, 8, gap);
    let mut rng = StdRng::seed_from_u64(61);
    let img = rand_tensor(&mut rng, 2, 8, 8);
    let packed = layout::pack(&ctx, &img, &from, 6).unwrap();
    let out_ct = hconv::ir(&ctx, &packed.cts[0], &from, &to).unwrap();
    assert_eq!(ctx.ledger().counts_by_tag(RotTag::IrGap), 1); // log2(m) = 1
    let out = hcnn::layout::PackedTensor {
        cts: vec![out_ct],
        packing: to,
    };
    let decoded = layout::unpack(&ctx, &out).unwrap();
    for ch in 0..2 {
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(decoded.at3(ch, y, x), img.at3(ch, y, x));
            }
        }
    }
}

// ---------------------------------------------------------------------------
// PRCR
// ---------------------------------------------------------------------------

#[test]
fn prcr_equals_standard_path() {
    // pointwise layer, the setting of the fragment-reuse figure
    let c = 2;
    let w = 8;
    let gap = GapConfig::new(1, 1);
    let mut rng = StdRng::seed_from_u64(71);
    let img = rand_tensor(&mut rng, c, w, w);
    let k = rand_kernel(&mut rng, c, c, 1);
    let spec = ConvLayerSpec::new(c, c, w, 1, 1, gap, gap, ConvAlgo::CaConv);
    let packing = Packing::pi_ca(32768, c, w, w, gap);

    let run = |layout_kind: WeightLayout| {
        let ctx = ctx_full(32768);
        let packed = layout::pack(&ctx, &img, &packing, 6).unwrap();
        let weights = LayerWeights::new(k.clone(), None, layout_kind);
        let out = hconv::apply_prcr_weights(&ctx, &packed, &weights, &spec).unwrap();
        let dec = layout::unpack(&ctx, &out).unwrap();
        (ctx, dec)
    };
    let (ctx_std, dec_std) = run(WeightLayout::Prcr { segments: 1 });
    let (ctx_prcr, dec_prcr) = run(WeightLayout::Prcr { segments: 2 });
    assert!(dec_std.max_abs_diff(&dec_prcr) < 1e-9);
    assert_eq!(ctx_std.ledger().count(OpClass::PRot), 0);
    assert!(ctx_prcr.ledger().count(OpClass::PRot) > 0);
    // rotation ledgers agree: PRCR only adds plaintext rotations
    assert_eq!(
        ctx_std.ledger().count(OpClass::CRot),
        ctx_prcr.ledger().count(OpClass::CRot)
    );
}

#[test]
fn prcr_f3_layer_matches_standard() {
    // 3x3 layer at ImageNet stage-1 scale (reduced channels for test time)
    let c = 8;
    let w = 56;
    let gap = GapConfig::new(1, 1);
    let mut rng = StdRng::seed_from_u64(73);
    let img = rand_tensor(&mut rng, c, w, w);
    let k = rand_kernel(&mut rng, c, c, 3);
    let spec = ConvLayerSpec::new(c, c, w, 3, 1, gap, gap, ConvAlgo::CaConv);
    let packing = Packing::pi_ca(32768, c, w, w, gap);
    let expect = oracle::conv2d_ref(&img, &k, 1, 1).unwrap();

    let run = |segments: usize| {
        let ctx = ctx_full(32768);
        let packed = layout::pack(&ctx, &img, &packing, 6).unwrap();
        let weights = LayerWeights::new(k.clone(), None, WeightLayout::Prcr { segments });
        let out = hconv::apply_prcr_weights(&ctx, &packed, &weights, &spec).unwrap();
        layout::unpack(&ctx, &out).unwrap()
    };
    let std_out = run(1);
    let prcr_out = run(8);
    assert!(std_out.max_abs_diff(&expect) < 1e-9);
    assert!(prcr_out.max_abs_diff(&std_out) < 1e-9);

    // weight plaintext slots shrink by the segment count
    let w8 = LayerWeights::new(k.clone(), None, WeightLayout::Prcr { segments: 8 });
    let w1 = LayerWeights::new(k.clone(), None, WeightLayout::Standard);
    assert_eq!(w1.plaintext_slots(w, w), 8 * w8.plaintext_slots(w, w));
}

// ---------------------------------------------------------------------------
// square
// ---------------------------------------------------------------------------

#[test]
fn square_activation_costs_one_level() {
    let ctx = ctx_full(16);
    let ct = ctx.encrypt(&[0.0, 1.0, 2.0, -3.0], 6);
    let sq = hconv::square_activation(&ctx, &ct).unwrap();
    assert_eq!(&ctx.decrypt(&sq).unwrap()[..4], &[0.0, 1.0, 4.0, 9.0]);
    assert_eq!(sq.level(), 5);
    let led = ctx.ledger();
    assert_eq!(led.count(OpClass::MulCt), 1);
    assert_eq!(led.count(OpClass::Rescale), 1);
    let zero = ctx.encrypt(&[0.0; 4], 6);
    let z = hconv::square_activation(&ctx, &zero).unwrap();
    assert!(ctx.decrypt(&z).unwrap().iter().all(|&v| v == 0.0));
}
