//! End-to-end network runs: rotation/bootstrap accounting in trace mode and
//! oracle equivalence in full mode.

use hcnn::costmodel::{network_cost, Arch, GapPlan, PackingStyle};
use hcnn::heslot::{HeCtx, HeParams, Mode};
use hcnn::network::{build_network, run_inference, NetWeights};
use hcnn::oracle::Tensor;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn trace_counts(arch: Arch, plan_name: &str, style: PackingStyle) -> (u64, u64, u64, u64, u64) {
    let ctx = HeCtx::new(HeParams::set_hyp(), Mode::Trace);
    let plan = GapPlan::named(arch, plan_name).unwrap();
    let spec = build_network(arch, plan, style, 32768).unwrap();
    let weights = NetWeights::random(&spec, 7);
    let (c, h, w) = match arch {
        Arch::ResNet18 => (3, 224, 224),
        _ => (3, 32, 32),
    };
    let input = Tensor::zeros(vec![c, h, w]);
    let out = run_inference(&ctx, &spec, &weights, &input, None).unwrap();
    (
        out.report.slide,
        out.report.ras,
        out.report.ir,
        out.report.conv_total,
        out.report.boots,
    )
}

#[test]
fn resnet20_optimal_trace_counts() {
    let (slide, ras, ir, total, boots) =
        trace_counts(Arch::ResNet20, "optimal", PackingStyle::Hybrid);
    assert_eq!((slide, ras, ir, total, boots), (152, 580, 187, 919, 10));
}

#[test]
fn resnet20_minrot_trace_counts() {
    let (slide, ras, ir, total, boots) =
        trace_counts(Arch::ResNet20, "minrot", PackingStyle::Hybrid);
    assert_eq!((slide, ras, ir, total, boots), (240, 407, 142, 789, 15));
}

#[test]
fn resnet20_baseline_trace_counts() {
    let (slide, ras, ir, total, boots) =
        trace_counts(Arch::ResNet20, "baseline", PackingStyle::MpBaseline);
    assert_eq!((slide, ras, ir, total, boots), (152, 924, 800, 1876, 10));
}

#[test]
fn resnet18_trace_counts() {
    let (slide, ras, ir, total, boots) =
        trace_counts(Arch::ResNet18, "optimal", PackingStyle::Hybrid);
    assert_eq!((slide, ras, ir, total, boots), (1024, 4512, 1823, 7359, 65));

    let (slide, ras, ir, total, boots) =
        trace_counts(Arch::ResNet18, "minboot", PackingStyle::Hybrid);
    assert_eq!((slide, ras, ir, total, boots), (536, 17920, 9544, 28000, 38));

    let (slide, ras, ir, total, boots) =
        trace_counts(Arch::ResNet18, "baseline", PackingStyle::MpBaseline);
    assert_eq!((slide, ras, ir, total, boots), (536, 32384, 4669, 37589, 38));
}

#[test]
fn trace_matches_closed_form_for_all_rows() {
    for (arch, name, style) in [
        (Arch::ResNet20, "optimal", PackingStyle::Hybrid),
        (Arch::ResNet20, "minrot", PackingStyle::Hybrid),
        (Arch::ResNet20, "baseline", PackingStyle::MpBaseline),
        (Arch::ResNet18, "optimal", PackingStyle::Hybrid),
        (Arch::ResNet18, "minboot", PackingStyle::Hybrid),
        (Arch::ResNet18, "baseline", PackingStyle::MpBaseline),
    ] {
        let (slide, ras, ir, total, boots) = trace_counts(arch, name, style);
        let plan = GapPlan::named(arch, name).unwrap();
        let cost = network_cost(arch, &plan, style, 32768);
        assert_eq!(
            (slide, ras, ir, total, boots),
            (cost.slide, cost.ras, cost.ir, cost.total, cost.boots),
            "{} {}",
            arch.name(),
            name
        );
    }
}

#[test]
fn resnet20_block_levels_and_no_exhaustion() {
    let ctx = HeCtx::new(HeParams::set_hyp(), Mode::Trace);
    let plan = GapPlan::named(Arch::ResNet20, "optimal").unwrap();
    let spec = build_network(Arch::ResNet20, plan, PackingStyle::Hybrid, 32768).unwrap();
    let weights = NetWeights::random(&spec, 7);
    let input = Tensor::zeros(vec![3, 32, 32]);
    let out = run_inference(&ctx, &spec, &weights, &input, None).unwrap();
    assert_eq!(out.block_levels.len(), 9);
    for &(lin, lout) in &out.block_levels {
        assert_eq!(lin - lout, 6, "block consumed {} levels", lin - lout);
    }
}

#[test]
fn resnet20_full_mode_matches_oracle() {
    let ctx = HeCtx::new(HeParams::set_hyp(), Mode::Full);
    let plan = GapPlan::named(Arch::ResNet20, "optimal").unwrap();
    let spec = build_network(Arch::ResNet20, plan, PackingStyle::Hybrid, 32768).unwrap();
    let weights = NetWeights::random(&spec, 42);
    let mut rng = StdRng::seed_from_u64(1234);
    let input = Tensor::chw(
        3,
        32,
        32,
        (0..3 * 1024).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    );
    let out = run_inference(&ctx, &spec, &weights, &input, None).unwrap();
    let err = out.report.max_logit_err.unwrap();
    assert!(err < 1e-4, "logit error {err}");
    let rel = out.report.max_block_rel_err.unwrap();
    assert!(rel < 1e-6, "per-block relative error {rel}");
    // identical ledger to the trace run
    let (slide, ras, ir, total, boots) =
        trace_counts(Arch::ResNet20, "optimal", PackingStyle::Hybrid);
    assert_eq!(
        (out.report.slide, out.report.ras, out.report.ir, out.report.conv_total, out.report.boots),
        (slide, ras, ir, total, boots)
    );
}

#[test]
fn resnet18_slice_full_mode_matches_oracle() {
    // reduced-depth slice: im2col head + stage 1 + stage 2, full values
    let ctx = HeCtx::new(HeParams::set_hyp(), Mode::Full);
    let plan = GapPlan::named(Arch::ResNet18, "optimal").unwrap();
    let spec = build_network(Arch::ResNet18, plan, PackingStyle::Hybrid, 32768).unwrap();
    let weights = NetWeights::random(&spec, 77);
    let mut rng = StdRng::seed_from_u64(4321);
    let input = Tensor::chw(
        3,
        224,
        224,
        (0..3 * 224 * 224).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    );
    let out = run_inference(&ctx, &spec, &weights, &input, Some(2)).unwrap();
    assert_eq!(out.per_block_rel_err.len(), 4);
    let rel = out.report.max_block_rel_err.unwrap();
    assert!(rel < 1e-6, "per-block relative error {rel}");
}
