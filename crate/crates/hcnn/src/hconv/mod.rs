//! Encrypted convolution algorithms over packed tensors: SISO, the
//! multiplexed-packing baseline, channel-aligned and replication-aligned
//! convolutions with 2D gap packing, the fused residual block, and PRCR
//! weight reuse.
//!
//! Every schedule meters the ledger exactly as the closed forms in
//! [`crate::costmodel`] predict; functional correctness is checked against
//! [`crate::oracle`].

mod engine;
mod weights;

pub use weights::{LayerWeights, WeightLayout};

use crate::costmodel::{conv_cost_shape, log2, ConvAlgo, ConvShape};
use crate::heslot::{CipherSim, HeCtx, HeError, RotTag};
use crate::layout::{GapConfig, PackedTensor, Packing};

/// Parameters of one convolution layer.
#[derive(Debug, Clone, Copy)]
pub struct ConvLayerSpec {
    pub c_i: usize,
    pub c_o: usize,
    pub w_i: usize,
    pub w_o: usize,
    pub f: usize,
    pub stride: usize,
    pub pad: usize,
    pub gap_in: GapConfig,
    pub gap_out: GapConfig,
    pub algo: ConvAlgo,
}

impl ConvLayerSpec {
    pub fn new(
        c_i: usize,
        c_o: usize,
        w_i: usize,
        f: usize,
        stride: usize,
        gap_in: GapConfig,
        gap_out: GapConfig,
        algo: ConvAlgo,
    ) -> Self {
        assert!(f % 2 == 1, "filter width must be odd");
        ConvLayerSpec {
            c_i,
            c_o,
            w_i,
            w_o: w_i / stride,
            f,
            stride,
            pad: (f - 1) / 2,
            gap_in,
            gap_out,
            algo,
        }
    }

    pub fn shape(&self, slot_count: usize) -> ConvShape {
        let in_pack = Packing::pi_ca(slot_count, self.c_i, self.w_i, self.w_i, self.gap_in);
        let out_pack = Packing::pi_ca(slot_count, self.c_o, self.w_o, self.w_o, self.gap_out);
        ConvShape {
            c_i: self.c_i,
            c_o: self.c_o,
            f: self.f,
            stride: self.stride,
            gap_in: self.gap_in,
            gap_out: self.gap_out,
            cn_in: in_pack.planes,
            cn_out: out_pack.planes,
            n_in: in_pack.ct_count(),
            n_ca_out: out_pack.ct_count(),
        }
    }
}

/// Square activation: 1 MulCt + 1 Rescale, one level.
pub fn square_activation(ctx: &HeCtx, ct: &CipherSim) -> Result<CipherSim, HeError> {
    let sq = ctx.mul_ct(ct, ct)?;
    ctx.rescale(&sq)
}

/// Rotate-and-sum over `groups` blocks of `stride_slots`, leaving the group
/// sum in block 0 (and, when the blocks tile the whole ciphertext, in every
/// block). `groups` must be a power of two.
pub fn ras(
    ctx: &HeCtx,
    ct: &CipherSim,
    groups: usize,
    stride_slots: usize,
    tag: RotTag,
) -> Result<CipherSim, HeError> {
    if !groups.is_power_of_two() {
        return Err(HeError::InvalidParams(format!(
            "rotate-and-sum group count {groups} is not a power of two"
        )));
    }
    let mut acc = ct.clone();
    let mut span = 1;
    while span < groups {
        let rotated = ctx.crot(&acc, (span * stride_slots) as i64, tag);
        acc = ctx.add_ct(&acc, &rotated)?;
        span *= 2;
    }
    Ok(acc)
}

/// Single-input single-output channel convolution on a bare row-major
/// image: f^2-1 Slide rotations, f^2 filter plaintexts, one rescale.
/// Stride 2 leaves valid outputs on the even pixel grid.
pub fn siso(
    ctx: &HeCtx,
    ct: &CipherSim,
    weights: &LayerWeights,
    spec: &ConvLayerSpec,
) -> Result<CipherSim, HeError> {
    let geo = Packing::image(spec.w_i, spec.w_i);
    engine::siso_forward(ctx, std::slice::from_ref(ct), weights, spec, &geo, 0)
}

/// Reordered SISO: multiply first with inversely rotated filter plaintexts,
/// slide afterwards. Mathematically identical to [`siso`] with matching
/// summation order, so outputs are bitwise equal.
pub fn siso_reordered(
    ctx: &HeCtx,
    ct: &CipherSim,
    weights: &LayerWeights,
    spec: &ConvLayerSpec,
) -> Result<CipherSim, HeError> {
    let geo = Packing::image(spec.w_i, spec.w_i);
    engine::siso_reordered(ctx, std::slice::from_ref(ct), weights, spec, &geo, 0)
}

/// Channel-aligned convolution: consumes a channel-aligned tensor, returns
/// replication-aligned intermediates (one ciphertext per group of `d_out`
/// output channels). Image realignment needs no gather rotations; gap
/// maintenance is metered under IR_g.
pub fn caconv(
    ctx: &HeCtx,
    input: &PackedTensor,
    weights: &LayerWeights,
    spec: &ConvLayerSpec,
) -> Result<PackedTensor, HeError> {
    engine::caconv(ctx, input, weights, spec)
}

/// Replication-aligned convolution: consumes replication-aligned
/// intermediates, returns a channel-aligned tensor. The reordered variant
/// shares the slide rotations across all inputs.
pub fn raconv(
    ctx: &HeCtx,
    input: &PackedTensor,
    weights: &LayerWeights,
    spec: &ConvLayerSpec,
    naive: bool,
) -> Result<PackedTensor, HeError> {
    engine::raconv(ctx, input, weights, spec, naive, None)
}

/// Multiplexed-packing baseline convolution: fixed format in and out, with
/// the full mask-and-rotate image-realignment pass.
pub fn mp_conv_lc(
    ctx: &HeCtx,
    input: &PackedTensor,
    weights: &LayerWeights,
    spec: &ConvLayerSpec,
) -> Result<PackedTensor, HeError> {
    engine::mp_conv(ctx, input, weights, spec, false)
}

/// Fused channel-aligned + square + replication-aligned residual block
/// (Algorithm-style forwarding). Returns the block output and the peak
/// number of live intermediate ciphertexts observed.
pub struct FusedOutput {
    pub tensor: PackedTensor,
    pub peak_intermediates: usize,
    pub peak_total: usize,
}

pub fn fused_block(
    ctx: &HeCtx,
    input: &PackedTensor,
    w_ca: &LayerWeights,
    w_ra: &LayerWeights,
    spec_ca: &ConvLayerSpec,
    spec_ra: &ConvLayerSpec,
) -> Result<FusedOutput, HeError> {
    engine::fused_block(ctx, input, w_ca, w_ra, spec_ca, spec_ra)
}

/// Gap-structure transition of one ciphertext between formats that differ
/// only in their gap arrangement. Identity transitions are free; a 2D-gap
/// swap costs log2(m) gap rotations; repacking into the multiplexed
/// baseline format costs the full gather.
pub fn ir(
    ctx: &HeCtx,
    ct: &CipherSim,
    from: &Packing,
    to: &Packing,
) -> Result<CipherSim, HeError> {
    if from == to {
        return Ok(ct.clone());
    }
    if from.gap == to.gap && from.grid_h == to.grid_h && from.grid_w == to.grid_w {
        // 2D gap swap between the channel-aligned and replication-aligned
        // roles of the same cell.
        for k in 0..log2(from.gap.m) {
            ctx.charge_crot(1 << k, RotTag::IrGap);
        }
        let plan = engine::swap_plan(from, to);
        return ctx.assemble(&[ct], &plan);
    }
    if to.kind == crate::layout::FormatKind::Mp {
        let ch = to.channels_per_ct();
        for i in 1..ch {
            ctx.charge_crot(engine::mp_gather_amount(to, i), RotTag::Ir);
        }
        for k in 0..log2(to.gap.d) {
            ctx.charge_crot((to.planes * to.plane_slots() * (1 << k)) as i64, RotTag::IrGap);
        }
        let plan = engine::repack_plan(from, to);
        return ctx.assemble(&[ct], &plan);
    }
    Err(HeError::InvalidParams(format!(
        "unsupported format transition {:?} -> {:?}",
        from.kind, to.kind
    )))
}

/// PRCR weight application: multiply `|S|` times with rotations of one
/// fragment-sized weight plaintext. Numerically equal to the standard
/// full-plaintext application; weight storage shrinks by the segment count.
pub fn apply_prcr_weights(
    ctx: &HeCtx,
    input: &PackedTensor,
    weights: &LayerWeights,
    spec: &ConvLayerSpec,
) -> Result<PackedTensor, HeError> {
    assert!(matches!(weights.layout(), WeightLayout::Prcr { .. }));
    engine::caconv(ctx, input, weights, spec)
}

/// Closed-form cost of a layer, for ledger cross-checks.
pub fn expected_cost(ctx: &HeCtx, spec: &ConvLayerSpec) -> crate::costmodel::TagCounts {
    conv_cost_shape(spec.algo, &spec.shape(ctx.params.slot_count))
}

/// Multiplexed-packing convolution with optionally deferred output
/// replication (downsampling blocks replicate the merged shortcut sum).
pub fn mp_conv_deferred(
    ctx: &HeCtx,
    input: &PackedTensor,
    weights: &LayerWeights,
    spec: &ConvLayerSpec,
    defer_replication: bool,
) -> Result<PackedTensor, HeError> {
    engine::mp_conv(ctx, input, weights, spec, defer_replication)
}

/// Replicate a gathered multiplexed tuple across its outer repetition
/// blocks (the deferred tail of [`mp_conv_deferred`]).
pub fn mp_replicate_sum(
    ctx: &HeCtx,
    ct: &CipherSim,
    packing: &Packing,
) -> Result<CipherSim, HeError> {
    engine::mp_replicate(ctx, ct, packing)
}

/// Pointwise stride-2 shortcut convolution: channel-aligned in and out.
pub fn pconv_shortcut(
    ctx: &HeCtx,
    input: &PackedTensor,
    weights: &LayerWeights,
    spec: &ConvLayerSpec,
) -> Result<PackedTensor, HeError> {
    engine::pconv_shortcut(ctx, input, weights, spec)
}

// ---------------------------------------------------------------------------
// Plaintext builders shared with the network layer
// ---------------------------------------------------------------------------

use crate::heslot::PlainSim;
use crate::oracle::{ConvKernel, Tensor};

/// All-ones mask over the valid packed region of a format (used to seal a
/// block output).
pub fn encode_region_mask(ctx: &HeCtx, p: &Packing, level: u32) -> PlainSim {
    engine::region_mask(ctx, p, level)
}

/// Stem filter plaintext at source position for one tap and one replicated
/// channel-pair ciphertext.
#[allow(clippy::too_many_arguments)]
pub fn encode_stem_plaintext(
    ctx: &HeCtx,
    kernel: &ConvKernel,
    w0: usize,
    reps: usize,
    chs: [Option<usize>; 2],
    d1: i64,
    d2: i64,
    level: u32,
    c_o: usize,
) -> PlainSim {
    let k = kernel.clone();
    let plane = w0 * w0;
    engine::encode_by(ctx, level, move |slot| {
        let pair = slot / (2 * plane);
        if pair >= reps || pair >= c_o {
            return 0.0;
        }
        let q = slot / plane % 2;
        let ch = match chs[q] {
            Some(c) => c,
            None => return 0.0,
        };
        let y = (slot % plane) / w0;
        let x = slot % w0;
        let ty = y as i64 - d1;
        let tx = x as i64 - d2;
        if ty < 0 || tx < 0 || ty >= w0 as i64 || tx >= w0 as i64 {
            return 0.0;
        }
        k.at(pair, ch, (1 + d1) as usize, (1 + d2) as usize)
    })
}

/// Mask for the summed stem lane: plane 0 of each replicated pair.
pub fn encode_lane_mask(ctx: &HeCtx, reps: usize, plane: usize, w0: usize, level: u32) -> PlainSim {
    engine::encode_by(ctx, level, move |slot| {
        let pair = slot / (2 * plane);
        if pair >= reps || slot / plane % 2 != 0 {
            return 0.0;
        }
        let y = (slot % plane) / w0;
        let x = slot % w0;
        if y < w0 && x < w0 {
            1.0
        } else {
            0.0
        }
    })
}

/// Per-output-channel stem bias on the summed lane.
pub fn encode_stem_bias(
    ctx: &HeCtx,
    bias: &[f64],
    w0: usize,
    reps: usize,
    level: u32,
) -> PlainSim {
    let bias = bias.to_vec();
    let plane = w0 * w0;
    engine::encode_by(ctx, level, move |slot| {
        let pair = slot / (2 * plane);
        if pair >= reps || pair >= bias.len() || slot / plane % 2 != 0 {
            return 0.0;
        }
        bias[pair]
    })
}

/// Constant plaintext.
pub fn encode_const(ctx: &HeCtx, v: f64, level: u32) -> PlainSim {
    engine::encode_by(ctx, level, move |_| v)
}

/// Stride-2 pooling mask with folding scale at the surviving pixels.
pub fn encode_pool_mask(ctx: &HeCtx, grid: usize, w_out: usize, scale: f64, level: u32) -> PlainSim {
    engine::encode_by(ctx, level, move |slot| {
        let y = slot / grid;
        let x = slot % grid;
        if y % 2 == 0 && x % 2 == 0 && y / 2 < w_out && x / 2 < w_out && y < grid {
            scale
        } else {
            0.0
        }
    })
}

/// One classifier row over the dense pooled channel vector, with the
/// pooling average folded in.
pub fn encode_fc_row(
    ctx: &HeCtx,
    fc: &Tensor,
    row: usize,
    c_last: usize,
    hw: f64,
    level: u32,
) -> PlainSim {
    let weights: Vec<f64> = (0..c_last).map(|c| fc.data[row * c_last + c] / hw).collect();
    engine::encode_by(ctx, level, move |slot| {
        if slot < weights.len() {
            weights[slot]
        } else {
            0.0
        }
    })
}
