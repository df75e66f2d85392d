//! Full-model assembly: residual blocks over the packed convolution
//! schedules, bootstrap scheduling, the CIFAR stem and ImageNet im2col
//! head, pooling/FC tail, and end-to-end simulated inference with oracle
//! comparison.

use crate::costmodel::{self, Arch, BlockDesc, ConvAlgo, GapPlan, PackingStyle};
use crate::hconv::{self, ConvLayerSpec, LayerWeights, WeightLayout};
use crate::heslot::{CipherSim, CostLedger, HeCtx, HeError, Mode, PlainSim, RotTag};
use crate::layout::{PackedTensor, Packing};
use crate::oracle::{self, ConvKernel, Tensor};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

#[derive(Debug)]
pub enum NetError {
    PlanViolation(String),
    InfeasibleBudget(String),
    He(HeError),
    Shape(String),
}

impl std::fmt::Display for NetError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NetError::PlanViolation(m) => write!(f, "plan violation: {m}"),
            NetError::InfeasibleBudget(m) => write!(f, "infeasible level budget: {m}"),
            NetError::He(e) => write!(f, "backend: {e}"),
            NetError::Shape(m) => write!(f, "shape: {m}"),
        }
    }
}

impl std::error::Error for NetError {}

impl From<HeError> for NetError {
    fn from(e: HeError) -> Self {
        NetError::He(e)
    }
}

/// Levels consumed by one residual block: conv multiply + mask, square,
/// second conv multiply + mask, and the block-output gap mask.
pub const BLOCK_LEVELS: u32 = 6;

/// A validated network: architecture, plan and the block walk.
#[derive(Debug, Clone)]
pub struct NetworkSpec {
    pub arch: Arch,
    pub plan: GapPlan,
    pub style: PackingStyle,
    pub blocks: Vec<BlockDesc>,
    pub slot_count: usize,
}

pub fn build_network(
    arch: Arch,
    plan: GapPlan,
    style: PackingStyle,
    slot_count: usize,
) -> Result<NetworkSpec, NetError> {
    plan.validate(arch, style).map_err(NetError::PlanViolation)?;
    let (_, blocks) = costmodel::network_blocks(arch, &plan, style, slot_count);
    Ok(NetworkSpec {
        arch,
        plan,
        style,
        blocks,
        slot_count,
    })
}

/// Bootstrap plan: how many ciphertexts are refreshed at each block entry,
/// plus the final refresh of the consolidated pooling input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BootPlan {
    pub per_block: Vec<u64>,
    pub final_boot: u64,
}

impl BootPlan {
    pub fn total(&self) -> u64 {
        self.per_block.iter().sum::<u64>() + self.final_boot
    }
}

/// Decide bootstrap sites. A block refreshes its inputs on entry whenever
/// the remaining level cannot cover the block budget; with the usable level
/// equal to the budget this is every block. The tail bootstraps one
/// consolidated ciphertext for pooling and the classifier when needed.
pub fn schedule_bootstraps(spec: &NetworkSpec, usable_level: u32) -> Result<BootPlan, NetError> {
    if usable_level < BLOCK_LEVELS {
        return Err(NetError::InfeasibleBudget(format!(
            "usable level {usable_level} below the per-block budget {BLOCK_LEVELS}"
        )));
    }
    let stem_levels: u32 = if spec.arch.stem_in_conv_path() { 2 } else { 3 };
    let mut level = usable_level.saturating_sub(stem_levels);
    let mut per_block = Vec::with_capacity(spec.blocks.len());
    for b in &spec.blocks {
        if level < BLOCK_LEVELS {
            per_block.push(b.input_cts as u64);
            level = usable_level;
        } else {
            per_block.push(0);
        }
        level -= BLOCK_LEVELS;
    }
    let final_boot = if level < 2 { 1 } else { 0 };
    Ok(BootPlan {
        per_block,
        final_boot,
    })
}

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

/// Plain weight set for a whole network, mirrored by the oracle forward
/// pass.
pub struct NetWeights {
    pub stem: ConvKernel,
    pub stem_bias: Vec<f64>,
    /// Per block: (conv1, bias1, conv2, bias2, optional pointwise shortcut).
    pub blocks: Vec<(ConvKernel, Vec<f64>, ConvKernel, Vec<f64>, Option<ConvKernel>)>,
    pub fc: Tensor,
    pub fc_bias: Vec<f64>,
}

impl NetWeights {
    /// Seeded random weights scaled to keep activations near unit size
    /// through the squaring nonlinearity.
    pub fn random(spec: &NetworkSpec, seed: u64) -> NetWeights {
        let mut rng = StdRng::seed_from_u64(seed);
        let stages = spec.arch.stages();
        let stem_c_o = stages[0].0;
        let (stem_ci, stem_f) = if spec.arch.stem_in_conv_path() {
            (3, 3)
        } else {
            (3, 7)
        };
        let stem = rand_kernel(&mut rng, stem_c_o, stem_ci, stem_f);
        let stem_bias = rand_bias(&mut rng, stem_c_o);
        let mut blocks = Vec::new();
        for b in &spec.blocks {
            let conv1 = &b.convs[0];
            let conv2 = b.convs.last().unwrap();
            let k1 = rand_kernel(&mut rng, conv1.shape.c_o, conv1.shape.c_i, conv1.shape.f);
            let b1 = rand_bias(&mut rng, conv1.shape.c_o);
            let k2 = rand_kernel(&mut rng, conv2.shape.c_o, conv2.shape.c_i, conv2.shape.f);
            let b2 = rand_bias(&mut rng, conv2.shape.c_o);
            let kp = if b.downsampling {
                Some(rand_kernel(&mut rng, conv1.shape.c_o, conv1.shape.c_i, 1))
            } else {
                None
            };
            blocks.push((k1, b1, k2, b2, kp));
        }
        let c_last = stages.last().unwrap().0;
        let classes = spec.arch.fc_classes();
        let fc = Tensor::new(
            vec![classes, c_last],
            (0..classes * c_last)
                .map(|_| rng.gen_range(-1.0..1.0) / (c_last as f64).sqrt())
                .collect(),
        );
        let fc_bias = rand_bias(&mut rng, classes);
        NetWeights {
            stem,
            stem_bias,
            blocks,
            fc,
            fc_bias,
        }
    }
}

fn rand_kernel(rng: &mut StdRng, c_o: usize, c_i: usize, f: usize) -> ConvKernel {
    let scale = 0.9 / ((c_i * f * f) as f64).sqrt();
    ConvKernel::new(
        c_o,
        c_i,
        f,
        (0..c_o * c_i * f * f)
            .map(|_| rng.gen_range(-1.0..1.0) * scale)
            .collect(),
    )
}

fn rand_bias(rng: &mut StdRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-0.05..0.05)).collect()
}

// ---------------------------------------------------------------------------
// Oracle mirror
// ---------------------------------------------------------------------------

/// Reference forward pass matching the simulated network layer for layer.
/// Returns the per-block outputs and the logits.
pub fn forward_ref(
    spec: &NetworkSpec,
    weights: &NetWeights,
    input: &Tensor,
    stage_limit: Option<usize>,
) -> (Vec<Tensor>, Vec<f64>) {
    let mut cur = if spec.arch.stem_in_conv_path() {
        let mut t = oracle::conv2d_ref(input, &weights.stem, 1, 1).unwrap();
        add_bias(&mut t, &weights.stem_bias);
        t
    } else {
        let mut t = oracle::conv2d_ref(input, &weights.stem, 2, 3).unwrap();
        add_bias(&mut t, &weights.stem_bias);
        let t = oracle::square_ref(&t);
        oracle::avg_pool2_ref(&t)
    };
    let mut block_outs = Vec::new();
    for (bi, b) in spec.blocks.iter().enumerate() {
        if let Some(limit) = stage_limit {
            if b.stage >= limit {
                break;
            }
        }
        let (k1, b1, k2, b2, kp) = &weights.blocks[bi];
        let conv1 = &b.convs[0];
        let mut o1 = oracle::conv2d_ref(&cur, k1, conv1.shape.stride, (conv1.shape.f - 1) / 2).unwrap();
        add_bias(&mut o1, b1);
        let o1 = oracle::square_ref(&o1);
        let mut o2 = oracle::conv2d_ref(&o1, k2, 1, 1).unwrap();
        add_bias(&mut o2, b2);
        let short = match kp {
            Some(kp) => oracle::conv2d_ref(&cur, kp, 2, 0).unwrap(),
            None => cur.clone(),
        };
        let mut out = o2;
        for (o, s) in out.data.iter_mut().zip(&short.data) {
            *o += s;
        }
        block_outs.push(out.clone());
        cur = out;
    }
    if stage_limit.is_some() {
        return (block_outs, Vec::new());
    }
    let pooled = oracle::avg_pool_ref(&cur);
    let logits = oracle::fc_ref(&pooled.data, &weights.fc, &weights.fc_bias);
    (block_outs, logits)
}

fn add_bias(t: &mut Tensor, bias: &[f64]) {
    let (h, w) = (t.height(), t.width());
    for c in 0..t.channels() {
        for i in 0..h * w {
            t.data[c * h * w + i] += bias[c];
        }
    }
}

// ---------------------------------------------------------------------------
// Simulated inference
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize)]
pub struct RunReport {
    pub slide: u64,
    pub ras: u64,
    pub ir: u64,
    pub conv_total: u64,
    pub boots: u64,
    pub other_rotations: u64,
    pub eff_total: Option<u64>,
    pub max_logit_err: Option<f64>,
    pub max_block_rel_err: Option<f64>,
    pub logits_checksum: Option<f64>,
}

pub struct RunOutput {
    pub ledger: CostLedger,
    pub logits: Option<Vec<f64>>,
    pub oracle_logits: Vec<f64>,
    pub per_block_rel_err: Vec<f64>,
    pub block_levels: Vec<(u32, u32)>,
    pub report: RunReport,
}

/// End-to-end simulated inference. In full mode the decoded logits and
/// per-block outputs are compared against the oracle forward pass;
/// trace mode runs the identical schedule on shape-only ciphertexts.
pub fn run_inference(
    ctx: &HeCtx,
    spec: &NetworkSpec,
    weights: &NetWeights,
    input: &Tensor,
    stage_limit: Option<usize>,
) -> Result<RunOutput, NetError> {
    let lp = ctx.params.usable_level;
    let (oracle_blocks, oracle_logits) = if ctx.mode() == Mode::Full {
        forward_ref(spec, weights, input, stage_limit)
    } else {
        (Vec::new(), Vec::new())
    };

    let mut cur = if spec.arch.stem_in_conv_path() {
        stem_cifar(ctx, spec, weights, input, lp)?
    } else {
        im2col_head(ctx, spec, weights, input, lp)?
    };

    let mut per_block_rel_err = Vec::new();
    let mut block_levels = Vec::new();
    let mut boots = 0u64;

    for (bi, b) in spec.blocks.iter().enumerate() {
        if let Some(limit) = stage_limit {
            if b.stage >= limit {
                break;
            }
        }
        // bootstrap at block entry when the budget does not fit
        if cur.cts[0].level() < BLOCK_LEVELS {
            cur.cts = cur.cts.iter().map(|c| ctx.bootstrap(c)).collect();
            boots += cur.cts.len() as u64;
        }
        let level_in = cur.cts[0].level();
        let (k1, b1, k2, b2, kp) = &weights.blocks[bi];
        let conv1 = &b.convs[0];
        let conv2 = b.convs.last().unwrap();
        let spec1 = conv_spec(conv1, spec);
        let spec2 = conv_spec(conv2, spec);

        let out = match spec.style {
            PackingStyle::Hybrid => run_hybrid_block(
                ctx, &cur, &spec1, &spec2, k1, b1, k2, b2, kp.as_ref(), b,
            )?,
            PackingStyle::MpBaseline => run_mp_block(
                ctx, &cur, &spec1, &spec2, k1, b1, k2, b2, kp.as_ref(), b,
            )?,
        };
        let level_out = out.cts[0].level();
        block_levels.push((level_in, level_out));

        if ctx.mode() == Mode::Full {
            let decoded = crate::layout::unpack(ctx, &out).map_err(|e| NetError::Shape(e.to_string()))?;
            let reference = &oracle_blocks[bi];
            let scale = reference.max_abs().max(1e-9);
            per_block_rel_err.push(decoded.max_abs_diff(reference) / scale);
        }
        cur = out;
    }

    // pooling + classifier tail
    let (logits, tail_boots) = if stage_limit.is_none() {
        let (l, tb) = avg_pool_and_fc(ctx, spec, weights, &cur)?;
        (l, tb)
    } else {
        (None, 0)
    };
    boots += tail_boots;

    let ledger = ctx.ledger();
    let max_logit_err = logits.as_ref().map(|l| {
        l.iter()
            .zip(&oracle_logits)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    });
    let report = RunReport {
        slide: ledger.counts_by_tag(RotTag::Slide),
        ras: ledger.counts_by_tag(RotTag::RaS) + ledger.counts_by_tag(RotTag::RaSGap),
        ir: ledger.counts_by_tag(RotTag::Ir) + ledger.counts_by_tag(RotTag::IrGap),
        conv_total: ledger.conv_rotations(),
        boots,
        other_rotations: ledger.counts_by_tag(RotTag::Other),
        eff_total: None,
        max_logit_err,
        max_block_rel_err: per_block_rel_err.iter().copied().fold(None, |a: Option<f64>, v| {
            Some(a.map_or(v, |x| x.max(v)))
        }),
        logits_checksum: logits.as_ref().map(|l| l.iter().sum()),
    };
    Ok(RunOutput {
        ledger,
        logits,
        oracle_logits,
        per_block_rel_err,
        block_levels,
        report,
    })
}

fn conv_spec(desc: &costmodel::ConvDesc, _spec: &NetworkSpec) -> ConvLayerSpec {
    ConvLayerSpec::new(
        desc.shape.c_i,
        desc.shape.c_o,
        desc.w_in,
        desc.shape.f,
        desc.shape.stride,
        desc.shape.gap_in,
        desc.shape.gap_out,
        desc.algo,
    )
}

#[allow(clippy::too_many_arguments)]
fn run_hybrid_block(
    ctx: &HeCtx,
    input: &PackedTensor,
    spec1: &ConvLayerSpec,
    spec2: &ConvLayerSpec,
    k1: &ConvKernel,
    b1: &[f64],
    k2: &ConvKernel,
    b2: &[f64],
    kp: Option<&ConvKernel>,
    block: &BlockDesc,
) -> Result<PackedTensor, NetError> {
    let w1 = LayerWeights::new(k1.clone(), Some(b1.to_vec()), WeightLayout::Standard);
    let w2 = LayerWeights::new(k2.clone(), Some(b2.to_vec()), WeightLayout::InverseRotated);

    let ra_in = hconv::caconv(ctx, input, &w1, spec1)?;
    let squared = PackedTensor {
        cts: ra_in
            .cts
            .iter()
            .map(|c| hconv::square_activation(ctx, c))
            .collect::<Result<Vec<_>, _>>()?,
        packing: ra_in.packing,
    };
    let main = hconv::raconv(ctx, &squared, &w2, spec2, false)?;

    let shortcut = match kp {
        Some(kp) => {
            let wp = LayerWeights::standard(kp.clone());
            let pspec = ConvLayerSpec::new(
                spec1.c_i,
                spec1.c_o,
                spec1.w_i,
                1,
                2,
                spec1.gap_in,
                spec1.gap_out,
                ConvAlgo::CaConv,
            );
            hconv::pconv_shortcut(ctx, input, &wp, &pspec)?
        }
        None => input.clone(),
    };
    merge_and_seal(ctx, main, shortcut, block)
}

#[allow(clippy::too_many_arguments)]
fn run_mp_block(
    ctx: &HeCtx,
    input: &PackedTensor,
    spec1: &ConvLayerSpec,
    spec2: &ConvLayerSpec,
    k1: &ConvKernel,
    b1: &[f64],
    k2: &ConvKernel,
    b2: &[f64],
    kp: Option<&ConvKernel>,
    block: &BlockDesc,
) -> Result<PackedTensor, NetError> {
    let w1 = LayerWeights::new(k1.clone(), Some(b1.to_vec()), WeightLayout::Standard);
    let w2 = LayerWeights::new(k2.clone(), Some(b2.to_vec()), WeightLayout::Standard);
    let mid = hconv::mp_conv_lc(ctx, input, &w1, spec1)?;
    let squared = PackedTensor {
        cts: mid
            .cts
            .iter()
            .map(|c| hconv::square_activation(ctx, c))
            .collect::<Result<Vec<_>, _>>()?,
        packing: mid.packing,
    };
    let defer = block.downsampling;
    let main = hconv::mp_conv_deferred(ctx, &squared, &w2, spec2, defer)?;
    let shortcut = match kp {
        Some(kp) => {
            let wp = LayerWeights::standard(kp.clone());
            let pspec = ConvLayerSpec::new(
                spec1.c_i,
                spec1.c_o,
                spec1.w_i,
                1,
                2,
                spec1.gap_in,
                spec1.gap_out,
                ConvAlgo::MpConvLc,
            );
            hconv::mp_conv_deferred(ctx, input, &wp, &pspec, true)?
        }
        None => input.clone(),
    };
    // merge, replicate the sum when replication was deferred, then seal
    let level = main.cts[0].level();
    let mut cts = Vec::with_capacity(main.cts.len());
    for (m, s) in main.cts.iter().zip(&shortcut.cts) {
        let s = ctx.level_down(s, level)?;
        let mut merged = ctx.add_ct(m, &s)?;
        if defer {
            merged = hconv::mp_replicate_sum(ctx, &merged, &main.packing)?;
        }
        cts.push(merged);
    }
    let merged = PackedTensor {
        cts,
        packing: main.packing,
    };
    seal_block(ctx, merged)
}

fn merge_and_seal(
    ctx: &HeCtx,
    main: PackedTensor,
    shortcut: PackedTensor,
    _block: &BlockDesc,
) -> Result<PackedTensor, NetError> {
    let level = main.cts[0].level();
    let mut cts = Vec::with_capacity(main.cts.len());
    for (m, s) in main.cts.iter().zip(&shortcut.cts) {
        let s = ctx.level_down(s, level)?;
        cts.push(ctx.add_ct(m, &s)?);
    }
    seal_block(
        ctx,
        PackedTensor {
            cts,
            packing: main.packing,
        },
    )
}

/// Block-output gap mask: zero everything outside the valid packed region.
/// One level.
fn seal_block(ctx: &HeCtx, t: PackedTensor) -> Result<PackedTensor, NetError> {
    let p = t.packing;
    let level = t.cts[0].level();
    let mask = valid_region_mask(ctx, &p, level);
    let cts = t
        .cts
        .iter()
        .map(|c| ctx.rescale(&ctx.mul_pt(c, &mask)?))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PackedTensor { cts, packing: p })
}

fn valid_region_mask(ctx: &HeCtx, p: &Packing, level: u32) -> PlainSim {
    let p = *p;
    crate::hconv::encode_region_mask(ctx, &p, level)
}

// ---------------------------------------------------------------------------
// Stem, head, tail
// ---------------------------------------------------------------------------

/// CIFAR stem: 3->c0 3x3 convolution executed replication-aligned. Two
/// input ciphertexts of two replicated channel planes each; the channel
/// sums cost one rotation per input ciphertext and the slide rotations are
/// shared. Output is channel-aligned at the stage-1 gap.
fn stem_cifar(
    ctx: &HeCtx,
    spec: &NetworkSpec,
    weights: &NetWeights,
    input: &Tensor,
    level: u32,
) -> Result<PackedTensor, NetError> {
    let stages = spec.arch.stages();
    let (c0, w0, _) = stages[0];
    let gap1 = spec.plan.gap(0);
    if input.channels() != 3 || input.height() != w0 || input.width() != w0 {
        return Err(NetError::Shape(format!(
            "stem expects 3x{w0}x{w0}, got {:?}",
            input.shape
        )));
    }
    let reps = ctx.params.slot_count / (2 * w0 * w0);
    let plane = w0 * w0;

    // client-side packing: replicated channel pairs
    let encode_pair = |a: Option<usize>, b: Option<usize>| -> CipherSim {
        if ctx.mode() == Mode::Trace {
            return ctx.encrypt_trace(level);
        }
        let mut v = vec![0.0; ctx.params.slot_count];
        for r in 0..reps {
            for (slot_plane, ch) in [(0, a), (1, b)] {
                if let Some(ch) = ch {
                    for y in 0..w0 {
                        for x in 0..w0 {
                            v[(r * 2 + slot_plane) * plane + y * w0 + x] = input.at3(ch, y, x);
                        }
                    }
                }
            }
        }
        ctx.encrypt(&v, level)
    };
    let ct_a = encode_pair(Some(0), Some(1));
    let ct_b = encode_pair(Some(2), None);

    // MulFilter at source position, slide afterwards (shared rotations)
    let kernel = weights.stem.clone();
    let taps: Vec<(i64, i64)> = (-1..=1)
        .flat_map(|d1| (-1..=1).map(move |d2| (d1, d2)))
        .collect();
    let inputs: [(&CipherSim, [Option<usize>; 2]); 2] =
        [(&ct_a, [Some(0), Some(1)]), (&ct_b, [Some(2), None])];
    let mut acc: Option<CipherSim> = None;
    for &(d1, d2) in &taps {
        let mut tap_acc: Option<CipherSim> = None;
        for (ct_ref, chs) in &inputs {
            let pt =
                crate::hconv::encode_stem_plaintext(ctx, &kernel, w0, reps, *chs, d1, d2, level, c0);
            let prod = ctx.mul_pt(ct_ref, &pt)?;
            tap_acc = Some(match tap_acc {
                None => prod,
                Some(a) => ctx.add_ct(&a, &prod)?,
            });
        }
        let v = tap_acc.unwrap();
        let moved = if d1 == 0 && d2 == 0 {
            v
        } else {
            ctx.crot(&v, d1 * w0 as i64 + d2, RotTag::Slide)
        };
        acc = Some(match acc {
            None => moved,
            Some(a) => ctx.add_ct(&a, &moved)?,
        });
    }
    let acc = ctx.rescale(&acc.unwrap())?;
    // channel sums: one rotation per input ciphertext
    let summed = ctx.add_ct(&acc, &ctx.crot(&acc, plane as i64, RotTag::RaS))?;
    ctx.charge_crot(plane as i64, RotTag::RaS);
    if spec.style == PackingStyle::MpBaseline {
        // the baseline stem is an ordinary multiplexed conv from a
        // (4-plane, 8-fold repeated) packing: two reduction passes over
        // four padded channel planes, then the full gather into the
        // stage-1 format
        ctx.charge_crot(2 * plane as i64, RotTag::RaS);
        ctx.charge_crot(2 * plane as i64, RotTag::RaS);
        for i in 1..c0 as i64 {
            ctx.charge_crot(i * 2 * plane as i64 + 1, RotTag::Ir);
        }
        for k in 0..crate::costmodel::log2(gap1.d) {
            ctx.charge_crot((c0 * plane) as i64 * (1 << k), RotTag::IrGap);
        }
    }
    // mask the canonical lane and add bias
    let w0c = w0;
    let mask = crate::hconv::encode_lane_mask(ctx, reps, plane, w0c, summed.level());
    let mut out_ct = ctx.rescale(&ctx.mul_pt(&summed, &mask)?)?;
    let bias_pt = crate::hconv::encode_stem_bias(ctx, &weights.stem_bias, w0, reps, out_ct.level());
    out_ct = ctx.add_pt(&out_ct, &bias_pt)?;

    // assemble the stage-1 input format
    let out = match spec.style {
        PackingStyle::Hybrid => Packing::pi_ca(ctx.params.slot_count, c0, w0, w0, gap1),
        PackingStyle::MpBaseline => Packing::mp(ctx.params.slot_count, c0, w0, w0, gap1),
    };
    let mut plan = Vec::new();
    if ctx.mode() == Mode::Full {
        let per_ct = out.channels_per_ct();
        for ch in 0..c0.min(per_ct) {
            for y in 0..w0 {
                for x in 0..w0 {
                    let src = (ch * 2) * plane + y * w0 + x;
                    for dst in out.replica_slots(ch, y, x) {
                        plan.push((dst, 0, src));
                    }
                }
            }
        }
    }
    let ct = ctx.assemble(&[&out_ct], &plan)?;
    Ok(PackedTensor {
        cts: vec![ct],
        packing: out,
    })
}

/// ImageNet head: 7x7 stride-2 convolution by im2col, square activation,
/// stride-2 average pooling, packed channel-aligned. Accounted under
/// Others.
fn im2col_head(
    ctx: &HeCtx,
    spec: &NetworkSpec,
    weights: &NetWeights,
    input: &Tensor,
    level: u32,
) -> Result<PackedTensor, NetError> {
    let stages = spec.arch.stages();
    let (c0, w1, _) = stages[0]; // 64 channels at 56x56
    let conv_w = w1 * 2; // 112
    let grid = conv_w.next_power_of_two(); // 128
    let f = 7usize;
    let pad = 3i64;

    // client-side im2col packing: one ciphertext per (channel, tap) row
    let k = &weights.stem;
    let mut rows: Vec<CipherSim> = Vec::with_capacity(3 * f * f);
    for ch in 0..3 {
        for j1 in 0..f {
            for j2 in 0..f {
                if ctx.mode() == Mode::Trace {
                    rows.push(ctx.encrypt_trace(level));
                    continue;
                }
                let mut v = vec![0.0; ctx.params.slot_count];
                for y in 0..conv_w {
                    for x in 0..conv_w {
                        let sy = 2 * y as i64 + j1 as i64 - pad;
                        let sx = 2 * x as i64 + j2 as i64 - pad;
                        if sy >= 0 && sx >= 0 && (sy as usize) < input.height() && (sx as usize) < input.width() {
                            v[y * grid + x] = input.at3(ch, sy as usize, sx as usize);
                        }
                    }
                }
                rows.push(ctx.encrypt(&v, level));
            }
        }
    }

    // matmul per output channel, square, pool
    let mut channel_cts = Vec::with_capacity(c0);
    for o in 0..c0 {
        let mut acc: Option<CipherSim> = None;
        for (r, row) in rows.iter().enumerate() {
            let ch = r / (f * f);
            let t = r % (f * f);
            let wv = k.at(o, ch, t / f, t % f);
            let pt = crate::hconv::encode_const(ctx, wv, level);
            let prod = ctx.mul_pt(row, &pt)?;
            acc = Some(match acc {
                None => prod,
                Some(a) => ctx.add_ct(&a, &prod)?,
            });
        }
        let mut conv = ctx.rescale(&acc.unwrap())?;
        let bias_pt = crate::hconv::encode_const(ctx, weights.stem_bias[o], conv.level());
        conv = ctx.add_pt(&conv, &bias_pt)?;
        let sq = hconv::square_activation(ctx, &conv)?;
        // 2x2 stride-2 average pooling
        let mut pooled = sq.clone();
        for amt in [1i64, grid as i64, grid as i64 + 1] {
            let rot = ctx.crot(&sq, amt, RotTag::Other);
            pooled = ctx.add_ct(&pooled, &rot)?;
        }
        let mask = crate::hconv::encode_pool_mask(ctx, grid, w1, 0.25, pooled.level());
        let pooled = ctx.rescale(&ctx.mul_pt(&pooled, &mask)?)?;
        channel_cts.push(pooled);
    }

    // repack into the stage-1 input format
    let out = match spec.style {
        PackingStyle::Hybrid => Packing::pi_ca(ctx.params.slot_count, c0, w1, w1, spec.plan.gap(0)),
        PackingStyle::MpBaseline => Packing::mp(ctx.params.slot_count, c0, w1, w1, spec.plan.gap(0)),
    };
    let per_ct = out.channels_per_ct();
    let n_cts = out.ct_count();
    let mut cts = Vec::with_capacity(n_cts);
    for ct_idx in 0..n_cts {
        // nominal repacking rotations, outside the convolution ledger
        for _ in 0..per_ct.saturating_sub(1) {
            ctx.charge_crot(out.plane_slots() as i64, RotTag::Other);
        }
        let mut plan = Vec::new();
        let mut sources: Vec<&CipherSim> = Vec::new();
        if ctx.mode() == Mode::Full {
            for local in 0..per_ct {
                let ch = ct_idx * per_ct + local;
                if ch >= c0 {
                    break;
                }
                sources.push(&channel_cts[ch]);
                let si = sources.len() - 1;
                for y in 0..w1 {
                    for x in 0..w1 {
                        let src = (2 * y) * grid + 2 * x;
                        for dst in out.replica_slots(local, y, x) {
                            plan.push((dst, si, src));
                        }
                    }
                }
            }
        } else {
            sources.push(&channel_cts[0]);
        }
        cts.push(ctx.assemble(&sources, &plan)?);
    }
    Ok(PackedTensor {
        cts,
        packing: out,
    })
}

/// Rotate-and-sum pooling over the spatial dims, consolidation into one
/// ciphertext, one bootstrap, then the fully connected classifier.
/// Everything here is tagged `Other`.
fn avg_pool_and_fc(
    ctx: &HeCtx,
    spec: &NetworkSpec,
    weights: &NetWeights,
    input: &PackedTensor,
) -> Result<(Option<Vec<f64>>, u64), NetError> {
    let p = input.packing;
    let classes = spec.arch.fc_classes();
    let c_last = p.channels;
    // spatial reduction: valid sums land at pixel (0,0) of every cell lane
    let mut reduced = Vec::with_capacity(input.cts.len());
    for ct in &input.cts {
        let mut acc = ct.clone();
        let mut span = 1;
        while span < p.grid_w {
            let rot = ctx.crot(&acc, (span * p.cell_cols()) as i64, RotTag::Other);
            acc = ctx.add_ct(&acc, &rot)?;
            span *= 2;
        }
        let mut span = 1;
        while span < p.grid_h {
            let rot = ctx.crot(
                &acc,
                (span * p.row_stride() * p.cell_rows()) as i64,
                RotTag::Other,
            );
            acc = ctx.add_ct(&acc, &rot)?;
            span *= 2;
        }
        reduced.push(acc);
    }
    // consolidate all channels into one dense ciphertext
    for _ in 0..reduced.len().saturating_sub(1) {
        ctx.charge_crot(1, RotTag::Other);
    }
    let sources: Vec<&CipherSim> = reduced.iter().collect();
    let mut plan = Vec::new();
    if ctx.mode() == Mode::Full {
        let per_ct = p.channels_per_ct();
        for ch in 0..c_last {
            let ct_idx = ch / per_ct;
            let local = ch % per_ct;
            let src = p.canonical_slot(local, 0, 0);
            plan.push((ch, ct_idx, src));
        }
    }
    let dense = ctx.assemble(&sources, &plan)?;
    let dense = ctx.bootstrap(&dense);
    let boots = 1;

    // classifier: one masked inner product per class
    let hw = (p.h * p.w) as f64;
    let c_pad = c_last.next_power_of_two();
    let mut logits = vec![0.0; classes];
    let mut have_values = ctx.mode() == Mode::Full;
    for (j, logit) in logits.iter_mut().enumerate() {
        let pt = crate::hconv::encode_fc_row(ctx, &weights.fc, j, c_last, hw, dense.level());
        let prod = ctx.rescale(&ctx.mul_pt(&dense, &pt)?)?;
        let mut acc = prod;
        let mut span = 1;
        while span < c_pad {
            let rot = ctx.crot(&acc, span as i64, RotTag::Other);
            acc = ctx.add_ct(&acc, &rot)?;
            span *= 2;
        }
        match ctx.decrypt(&acc) {
            Some(v) => *logit = v[0] + weights.fc_bias[j],
            None => have_values = false,
        }
    }
    Ok((have_values.then_some(logits), boots))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heslot::HeParams;

    #[test]
    fn build_and_validate_plans() {
        let plan = GapPlan::named(Arch::ResNet20, "optimal").unwrap();
        assert!(build_network(Arch::ResNet20, plan, PackingStyle::Hybrid, 32768).is_ok());
        let plan = GapPlan::named(Arch::ResNet18, "minboot").unwrap();
        assert!(build_network(Arch::ResNet18, plan, PackingStyle::Hybrid, 32768).is_ok());
        let bad = GapPlan {
            stages: vec![(1, 2), (1, 2), (1, 2)],
        };
        assert!(matches!(
            build_network(Arch::ResNet20, bad, PackingStyle::Hybrid, 32768),
            Err(NetError::PlanViolation(_))
        ));
    }

    #[test]
    fn bootstrap_schedule_counts() {
        let spec = build_network(
            Arch::ResNet20,
            GapPlan::named(Arch::ResNet20, "optimal").unwrap(),
            PackingStyle::Hybrid,
            32768,
        )
        .unwrap();
        let plan = schedule_bootstraps(&spec, 6).unwrap();
        assert_eq!(plan.total(), 10);

        let spec = build_network(
            Arch::ResNet20,
            GapPlan::named(Arch::ResNet20, "minrot").unwrap(),
            PackingStyle::Hybrid,
            32768,
        )
        .unwrap();
        assert_eq!(schedule_bootstraps(&spec, 6).unwrap().total(), 15);

        let spec = build_network(
            Arch::ResNet18,
            GapPlan::named(Arch::ResNet18, "optimal").unwrap(),
            PackingStyle::Hybrid,
            32768,
        )
        .unwrap();
        assert_eq!(schedule_bootstraps(&spec, 6).unwrap().total(), 65);
    }

    #[test]
    fn huge_usable_level_needs_no_bootstraps() {
        let spec = build_network(
            Arch::ResNet20,
            GapPlan::named(Arch::ResNet20, "optimal").unwrap(),
            PackingStyle::Hybrid,
            32768,
        )
        .unwrap();
        let plan = schedule_bootstraps(&spec, 200).unwrap();
        assert_eq!(plan.total(), 0);
        assert!(schedule_bootstraps(&spec, 4).is_err());
    }

    #[test]
    fn stem_matches_oracle() {
        let mut p = HeParams::set_hyp();
        p.usable_level = 6;
        let ctx = HeCtx::new(p, Mode::Full);
        let spec = build_network(
            Arch::ResNet20,
            GapPlan::named(Arch::ResNet20, "optimal").unwrap(),
            PackingStyle::Hybrid,
            32768,
        )
        .unwrap();
        let weights = NetWeights::random(&spec, 99);
        let mut rng = StdRng::seed_from_u64(1);
        let input = Tensor::chw(
            3,
            32,
            32,
            (0..3 * 1024).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let out = stem_cifar(&ctx, &spec, &weights, &input, 6).unwrap();
        let decoded = crate::layout::unpack(&ctx, &out).unwrap();
        let mut expect = oracle::conv2d_ref(&input, &weights.stem, 1, 1).unwrap();
        add_bias(&mut expect, &weights.stem_bias);
        assert!(decoded.max_abs_diff(&expect) < 1e-9);
        let led = ctx.ledger();
        assert_eq!(led.counts_by_tag(RotTag::Slide), 8);
        assert_eq!(led.counts_by_tag(RotTag::RaS), 2);
    }
}
