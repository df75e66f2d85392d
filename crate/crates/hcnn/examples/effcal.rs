// effective-rotation calibration
use hcnn::costmodel::{effective_rotations, slide_geometries, Arch, GapPlan, KeySet, PackingStyle};
use hcnn::heslot::{HeCtx, HeParams, Mode};
use hcnn::network::{build_network, run_inference, NetWeights};
use hcnn::oracle::Tensor;

fn main() {
    let rows = [
        (Arch::ResNet20, "optimal", PackingStyle::Hybrid, 1002u64, 919u64),
        (Arch::ResNet20, "minrot", PackingStyle::Hybrid, 881, 789),
        (Arch::ResNet18, "baseline", PackingStyle::MpBaseline, 43672, 37589),
        (Arch::ResNet18, "minboot", PackingStyle::Hybrid, 30072, 28000),
        (Arch::ResNet18, "optimal", PackingStyle::Hybrid, 9095, 7359),
    ];
    for (arch, name, style, target, raw) in rows {
        let ctx = HeCtx::new(HeParams::set_hyp(), Mode::Trace);
        let plan = GapPlan::named(arch, name).unwrap();
        let spec = build_network(arch, plan.clone(), style, 32768).unwrap();
        let weights = NetWeights::random(&spec, 7);
        let (c, h, w) = match arch { Arch::ResNet18 => (3, 224, 224), _ => (3, 32, 32) };
        let input = Tensor::zeros(vec![c, h, w]);
        let _ = run_inference(&ctx, &spec, &weights, &input, None).unwrap();
        let keys = KeySet::default_policy(32768, &slide_geometries(arch, &plan));
        let led = ctx.ledger();
        let eff = effective_rotations(&led.rotation_log, &keys);
        let lo = (target as f64 * 0.95) as u64;
        let hi = (target as f64 * 1.05) as u64;
        let ok = eff >= lo && eff <= hi;
        println!(
            "{:9} {:9} raw {:6} eff {:6} target {:6} ({}..{}) {} keys={}",
            arch.name(), name, raw, eff, target, lo, hi, if ok {"OK"} else {"XX"}, keys.key_objects
        );
    }
}
