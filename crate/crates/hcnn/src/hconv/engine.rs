//! Convolution schedule internals: slide/reduce/mask phases, filter
//! plaintext construction, format maintenance and working-set tracking.

use super::weights::LayerWeights;
use super::ConvLayerSpec;
use crate::costmodel::log2;
use crate::heslot::{CipherSim, HeCtx, HeError, Mode, PlainSim, RotTag};
use crate::layout::{FormatKind, PackedTensor, Packing};

type Result<T> = std::result::Result<T, HeError>;

/// Encode a plaintext from a slot-indexed fill function; skips evaluation
/// in trace mode.
pub(crate) fn encode_by(ctx: &HeCtx, level: u32, fill: impl Fn(usize) -> f64) -> PlainSim {
    match ctx.mode() {
        Mode::Trace => ctx.encode(&[], level),
        Mode::Full => {
            let vals: Vec<f64> = (0..ctx.params.slot_count).map(fill).collect();
            ctx.encode(&vals, level)
        }
    }
}

/// Cell-aware slot coordinates.
#[derive(Debug, Clone, Copy)]
struct Coord {
    plane: usize,
    y: usize,
    x: usize,
    row: usize,
    col: usize,
}

fn decompose(p: &Packing, slot: usize) -> Option<Coord> {
    let plane_slots = p.plane_slots();
    let plane = slot / plane_slots;
    if plane >= p.planes * if p.kind == FormatKind::Mp { p.gap.d } else { 1 } {
        return None;
    }
    let in_plane = slot % plane_slots;
    let row_len = p.row_stride();
    let phys_row = in_plane / row_len;
    let phys_col = in_plane % row_len;
    let rows = p.cell_rows();
    let cols = p.cell_cols();
    Some(Coord {
        plane,
        y: phys_row / rows,
        x: phys_col / cols,
        row: phys_row % rows,
        col: phys_col % cols,
    })
}

/// Slide rotation amount for tap offset (d1, d2): whole image rows move by
/// `cell_rows` physical rows, columns by `cell_cols` slots.
pub(crate) fn slide_amount(p: &Packing, d1: i64, d2: i64) -> i64 {
    let row = (p.row_stride() * p.cell_rows()) as i64;
    let col = p.cell_cols() as i64;
    d1 * row + d2 * col
}

fn tap_offsets(f: usize) -> Vec<(i64, i64)> {
    let c = (f as i64 - 1) / 2;
    let mut v = Vec::with_capacity(f * f);
    for j1 in 0..f as i64 {
        for j2 in 0..f as i64 {
            v.push((j1 - c, j2 - c));
        }
    }
    v
}

/// Segment index of a logical image row under PRCR (segments = 1 outside
/// PRCR, making this 0).
fn segment_of(y: usize, h: usize, segments: usize) -> usize {
    if segments <= 1 {
        0
    } else {
        y / (h / segments)
    }
}

// ---------------------------------------------------------------------------
// Filter plaintext builders
// ---------------------------------------------------------------------------

/// Weights for the forward (slide-then-multiply) order at output position:
/// slot holds the filter element for the output pixel living there, reading
/// the rotated input.
#[allow(clippy::too_many_arguments)]
fn ca_tap_plaintext(
    ctx: &HeCtx,
    w: &LayerWeights,
    spec: &ConvLayerSpec,
    pack: &Packing,
    pass: usize,
    d1: i64,
    d2: i64,
    ct_idx: usize,
    level: u32,
) -> PlainSim {
    let p = *pack;
    let spec = *spec;
    let seg = w.segments();
    let kernel = w.kernel();
    let group_of: Vec<usize> = (0..seg.max(1)).map(|s| w.group_of(pass, s)).collect();
    encode_by(ctx, level, move |slot| {
        let c = match decompose(&p, slot) {
            Some(c) => c,
            None => return 0.0,
        };
        // output pixel validity on the input grid
        if c.y % spec.stride != 0 || c.x % spec.stride != 0 {
            return 0.0;
        }
        if c.y / spec.stride >= spec.w_o || c.x / spec.stride >= spec.w_o {
            return 0.0;
        }
        // source pixel validity (borders zeroed here)
        let sy = c.y as i64 + d1;
        let sx = c.x as i64 + d2;
        if sy < 0 || sx < 0 || sy >= spec.w_i as i64 || sx >= spec.w_i as i64 {
            return 0.0;
        }
        let (ch, o) = match p.kind {
            FormatKind::PiCa | FormatKind::Image => {
                let ch = (ct_idx * p.planes + c.plane) * p.gap.m + c.col;
                let s = segment_of(c.y, p.h, seg);
                let o = group_of[s.min(group_of.len() - 1)] * p.gap.d + c.row;
                (ch, o)
            }
            FormatKind::Mp => {
                // plane index includes the outer replica block
                let rep = c.plane / p.planes;
                let plane = c.plane % p.planes;
                let g = p.cell_cols();
                let t = c.row * g + c.col;
                let ch = (ct_idx * p.planes + plane) * p.gap.m + t;
                let o = pass * p.gap.d + rep;
                (ch, o)
            }
            FormatKind::PiRa => unreachable!("forward taps read channel-aligned inputs"),
        };
        if ch >= spec.c_i || o >= spec.c_o {
            return 0.0;
        }
        let cc = (spec.f - 1) as i64 / 2;
        kernel.at(o, ch, (cc + d1) as usize, (cc + d2) as usize)
    })
}

/// Weights for the multiply-then-slide order at source position: the
/// inversely rotated plaintexts of the reordered schedules. Entry at slot s
/// equals the forward entry at slot s + r.
#[allow(clippy::too_many_arguments)]
fn ra_tap_plaintext(
    ctx: &HeCtx,
    w: &LayerWeights,
    spec: &ConvLayerSpec,
    pack: &Packing,
    out_pack: &Packing,
    out_ct: usize,
    d1: i64,
    d2: i64,
    in_ct: usize,
    level: u32,
) -> PlainSim {
    let p = *pack;
    let op = *out_pack;
    let spec = *spec;
    let kernel = w.kernel();
    encode_by(ctx, level, move |slot| {
        let c = match decompose(&p, slot) {
            Some(c) => c,
            None => return 0.0,
        };
        // source pixel must be a real pixel
        if c.y >= spec.w_i || c.x >= spec.w_i {
            return 0.0;
        }
        // target output pixel after the slide
        let ty = c.y as i64 - d1;
        let tx = c.x as i64 - d2;
        if ty < 0 || tx < 0 || ty >= spec.w_o as i64 || tx >= spec.w_o as i64 {
            return 0.0;
        }
        // replication-aligned input: channel indexed by cell row
        let ch = in_ct * p.gap.d + c.row;
        // channel-aligned output: channel indexed by (plane, cell col)
        let o = (out_ct * op.planes + c.plane) * op.gap.m + c.col;
        if ch >= spec.c_i || o >= spec.c_o {
            return 0.0;
        }
        let cc = (spec.f - 1) as i64 / 2;
        kernel.at(o, ch, (cc + d1) as usize, (cc + d2) as usize)
    })
}

// ---------------------------------------------------------------------------
// Reduction and masking phases
// ---------------------------------------------------------------------------

fn reduce(ctx: &HeCtx, acc: &CipherSim, steps: u64, stride: i64, tag: RotTag) -> Result<CipherSim> {
    let mut acc = acc.clone();
    for k in 0..steps {
        let rot = ctx.crot(&acc, stride * (1 << k), tag);
        acc = ctx.add_ct(&acc, &rot)?;
    }
    Ok(acc)
}

/// Valid-region mask of a channel-aligned pass accumulation: plane 0, all
/// cell rows, cell column 0, stride-aligned pixels.
fn ca_pass_mask(ctx: &HeCtx, pack: &Packing, spec: &ConvLayerSpec, level: u32) -> PlainSim {
    let p = *pack;
    let spec = *spec;
    encode_by(ctx, level, move |slot| {
        let c = match decompose(&p, slot) {
            Some(c) => c,
            None => return 0.0,
        };
        if c.plane != 0 || c.col != 0 {
            return 0.0;
        }
        if c.y % spec.stride != 0 || c.x % spec.stride != 0 {
            return 0.0;
        }
        if c.y / spec.stride >= spec.w_o || c.x / spec.stride >= spec.w_o {
            return 0.0;
        }
        1.0
    })
}

/// Mask of the row-0 lane of a replication-aligned accumulation.
fn ra_pass_mask(ctx: &HeCtx, pack: &Packing, w_o: usize, level: u32) -> PlainSim {
    let p = *pack;
    encode_by(ctx, level, move |slot| {
        let c = match decompose(&p, slot) {
            Some(c) => c,
            None => return 0.0,
        };
        if c.row != 0 || c.y >= w_o || c.x >= w_o {
            return 0.0;
        }
        1.0
    })
}

// ---------------------------------------------------------------------------
// SISO cores
// ---------------------------------------------------------------------------

/// Slide-then-multiply SISO over channel-aligned (or bare image) inputs.
/// Returns the accumulated, rescaled partial for one pass.
pub(crate) fn siso_forward(
    ctx: &HeCtx,
    inputs: &[CipherSim],
    weights: &LayerWeights,
    spec: &ConvLayerSpec,
    pack: &Packing,
    pass: usize,
) -> Result<CipherSim> {
    let rotated = slide_inputs(ctx, inputs, spec, pack);
    accumulate_pass(ctx, &rotated, weights, spec, pack, pass)
}

/// Rotate every input by the f^2-1 nonzero tap amounts (Slide_f).
pub(crate) fn slide_inputs(
    ctx: &HeCtx,
    inputs: &[CipherSim],
    spec: &ConvLayerSpec,
    pack: &Packing,
) -> Vec<Vec<CipherSim>> {
    inputs
        .iter()
        .map(|ct| {
            tap_offsets(spec.f)
                .into_iter()
                .map(|(d1, d2)| {
                    if d1 == 0 && d2 == 0 {
                        ct.clone()
                    } else {
                        ctx.crot(ct, slide_amount(pack, d1, d2), RotTag::Slide)
                    }
                })
                .collect()
        })
        .collect()
}

/// MulFilter and Sum over pre-rotated inputs for one pass; one rescale.
pub(crate) fn accumulate_pass(
    ctx: &HeCtx,
    rotated: &[Vec<CipherSim>],
    weights: &LayerWeights,
    spec: &ConvLayerSpec,
    pack: &Packing,
    pass: usize,
) -> Result<CipherSim> {
    let level = rotated[0][0].level();
    let mut acc: Option<CipherSim> = None;
    for (t, (d1, d2)) in tap_offsets(spec.f).into_iter().enumerate() {
        for (i, taps) in rotated.iter().enumerate() {
            let pt = ca_tap_plaintext(ctx, weights, spec, pack, pass, d1, d2, i, level);
            let prod = ctx.mul_pt(&taps[t], &pt)?;
            acc = Some(match acc {
                None => prod,
                Some(a) => ctx.add_ct(&a, &prod)?,
            });
        }
    }
    ctx.rescale(&acc.unwrap())
}

/// Multiply-then-slide SISO (reordered): per tap, multiply every input by
/// the inversely rotated plaintext, sum, then rotate the tap accumulations
/// into place. Bitwise identical to the forward order.
pub(crate) fn siso_reordered(
    ctx: &HeCtx,
    inputs: &[CipherSim],
    weights: &LayerWeights,
    spec: &ConvLayerSpec,
    pack: &Packing,
    pass: usize,
) -> Result<CipherSim> {
    let level = inputs[0].level();
    let out_pack = *pack;
    let mut acc: Option<CipherSim> = None;
    for (d1, d2) in tap_offsets(spec.f) {
        let mut tap_acc: Option<CipherSim> = None;
        for (i, ct) in inputs.iter().enumerate() {
            // single-image reordered form: channel-aligned source weights
            // shifted to source position
            let pt = {
                let p = *pack;
                let spec_c = *spec;
                let kernel = weights.kernel();
                let pass_groups: Vec<usize> =
                    (0..weights.segments().max(1)).map(|s| weights.group_of(pass, s)).collect();
                encode_by(ctx, level, move |slot| {
                    let c = match decompose(&p, slot) {
                        Some(c) => c,
                        None => return 0.0,
                    };
                    if c.y >= spec_c.w_i || c.x >= spec_c.w_i {
                        return 0.0;
                    }
                    let ty = c.y as i64 - d1;
                    let tx = c.x as i64 - d2;
                    if ty < 0
                        || tx < 0
                        || ty % spec_c.stride as i64 != 0
                        || tx % spec_c.stride as i64 != 0
                        || ty / spec_c.stride as i64 >= spec_c.w_o as i64
                        || tx / spec_c.stride as i64 >= spec_c.w_o as i64
                    {
                        return 0.0;
                    }
                    let ch = (i * p.planes + c.plane) * p.gap.m + c.col;
                    let s = segment_of(ty as usize, p.h, pass_groups.len());
                    let o = pass_groups[s.min(pass_groups.len() - 1)] * p.gap.d + c.row;
                    if ch >= spec_c.c_i || o >= spec_c.c_o {
                        return 0.0;
                    }
                    let cc = (spec_c.f - 1) as i64 / 2;
                    kernel.at(o, ch, (cc + d1) as usize, (cc + d2) as usize)
                })
            };
            let prod = ctx.mul_pt(ct, &pt)?;
            tap_acc = Some(match tap_acc {
                None => prod,
                Some(a) => ctx.add_ct(&a, &prod)?,
            });
        }
        let v = tap_acc.unwrap();
        let moved = if d1 == 0 && d2 == 0 {
            v
        } else {
            ctx.crot(&v, slide_amount(&out_pack, d1, d2), RotTag::Slide)
        };
        acc = Some(match acc {
            None => moved,
            Some(a) => ctx.add_ct(&a, &moved)?,
        });
    }
    ctx.rescale(&acc.unwrap())
}

// ---------------------------------------------------------------------------
// Channel-aligned convolution
// ---------------------------------------------------------------------------

pub(crate) fn caconv(
    ctx: &HeCtx,
    input: &PackedTensor,
    weights: &LayerWeights,
    spec: &ConvLayerSpec,
) -> Result<PackedTensor> {
    let pack = input.packing;
    assert!(matches!(pack.kind, FormatKind::PiCa | FormatKind::Image));
    assert_eq!(spec.c_o % spec.gap_in.d, 0);
    let slot_count = ctx.params.slot_count;
    let out_ra = Packing::pi_ra(slot_count, spec.c_o, spec.w_o, spec.w_o, spec.gap_out);
    let passes = spec.c_o / spec.gap_in.d;
    let n_ra = spec.c_o / spec.gap_out.d;

    // Slide_f: shared rotated copies of every input ciphertext.
    let rotated = slide_inputs(ctx, &input.cts, spec, &pack);

    // Passes: MulFilter&Sum, plane and gap reductions, mask, bias.
    let mut pass_cts = Vec::with_capacity(passes);
    for p in 0..passes {
        weights.charge_pass_rotations(ctx, p, spec.f * spec.f, input.cts.len());
        let acc = accumulate_pass(ctx, &rotated, weights, spec, &pack, p)?;
        let acc = reduce(
            ctx,
            &acc,
            log2(pack.planes),
            pack.plane_slots() as i64,
            RotTag::RaS,
        )?;
        let acc = reduce(ctx, &acc, log2(pack.gap.m), 1, RotTag::RaSGap)?;
        let mask = ca_pass_mask(ctx, &pack, spec, acc.level());
        let mut acc = ctx.rescale(&ctx.mul_pt(&acc, &mask)?)?;
        if let Some(bias) = weights.bias() {
            let pt = pass_bias_plaintext(ctx, weights, spec, &pack, p, bias, acc.level());
            acc = ctx.add_pt(&acc, &pt)?;
        }
        pass_cts.push(acc);
    }

    // Gap maintenance, metered per the reference accounting.
    charge_ca_ir(ctx, spec, input.cts.len(), passes as u64, n_ra as u64, &pack);

    // Assemble replication-aligned outputs. Pass pairs consolidate after a
    // stride-2 layer; under PRCR the channel groups sit on (segment, pass)
    // diagonals and are gathered segment-wise.
    let segs = weights.segments();
    if segs > 1 {
        assert_eq!(spec.stride, 1, "fragment reuse applies to unit-stride layers");
    }
    let mut cts = Vec::with_capacity(n_ra);
    let per_pass = spec.gap_in.d;
    for j in 0..n_ra {
        let group = spec.gap_out.d / per_pass; // passes per output ct
        let mut sources: Vec<&CipherSim> = Vec::new();
        let mut plan = Vec::new();
        if segs > 1 {
            let seg_rows = pack.h / segs;
            for s in 0..segs {
                let k = (j % segs + segs - s) % segs;
                let pass = (j / segs) * segs + k;
                sources.push(&pass_cts[pass]);
                let si = sources.len() - 1;
                if ctx.mode() == Mode::Full {
                    for rho in 0..per_pass {
                        let o = j * spec.gap_out.d + rho;
                        if o >= spec.c_o {
                            continue;
                        }
                        for yy in s * seg_rows..(s + 1) * seg_rows {
                            for xx in 0..spec.w_o {
                                let src = pack.slot_at(0, yy, xx, rho, 0);
                                for q in 0..out_ra.planes {
                                    for col in 0..out_ra.gap.m {
                                        plan.push((out_ra.slot_at(q, yy, xx, rho, col), si, src));
                                    }
                                }
                            }
                        }
                    }
                }
            }
        } else {
            sources = (0..group).map(|g| &pass_cts[j * group + g]).collect();
            if ctx.mode() == Mode::Full {
                for g in 0..group {
                    for rho in 0..per_pass {
                        let local = g * per_pass + rho; // cell row in the output
                        let o = j * spec.gap_out.d + local;
                        if o >= spec.c_o {
                            continue;
                        }
                        for yy in 0..spec.w_o {
                            for xx in 0..spec.w_o {
                                let src =
                                    pack.slot_at(0, yy * spec.stride, xx * spec.stride, rho, 0);
                                for q in 0..out_ra.planes {
                                    for col in 0..out_ra.gap.m {
                                        plan.push((out_ra.slot_at(q, yy, xx, local, col), g, src));
                                    }
                                }
                            }
                        }
                    }
                }
            } else {
                sources = vec![&pass_cts[0]];
            }
        }
        cts.push(ctx.assemble(&sources, &plan)?);
    }
    Ok(PackedTensor {
        cts,
        packing: out_ra,
    })
}

fn pass_bias_plaintext(
    ctx: &HeCtx,
    weights: &LayerWeights,
    spec: &ConvLayerSpec,
    pack: &Packing,
    pass: usize,
    bias: &[f64],
    level: u32,
) -> PlainSim {
    let p = *pack;
    let spec = *spec;
    let bias = bias.to_vec();
    let segs = weights.segments();
    let groups: Vec<usize> = (0..segs.max(1)).map(|s| weights.group_of(pass, s)).collect();
    encode_by(ctx, level, move |slot| {
        let c = match decompose(&p, slot) {
            Some(c) => c,
            None => return 0.0,
        };
        if c.plane != 0 || c.col != 0 || c.y % spec.stride != 0 || c.x % spec.stride != 0 {
            return 0.0;
        }
        if c.y / spec.stride >= spec.w_o || c.x / spec.stride >= spec.w_o {
            return 0.0;
        }
        let s = segment_of(c.y, p.h, segs);
        let o = groups[s.min(groups.len() - 1)] * p.gap.d + c.row;
        if o >= bias.len() {
            return 0.0;
        }
        bias[o]
    })
}

fn charge_ca_ir(
    ctx: &HeCtx,
    spec: &ConvLayerSpec,
    n_in: usize,
    passes: u64,
    n_ra: u64,
    pack: &Packing,
) {
    let row = pack.row_stride() as i64;
    let (m_i, d_i) = (spec.gap_in.m, spec.gap_in.d);
    let (m_o, d_o) = (spec.gap_out.m, spec.gap_out.d);
    if spec.stride == 1 {
        for _ in 0..n_in {
            for k in 0..log2(m_i) {
                ctx.charge_crot(1 << k, RotTag::IrGap);
            }
        }
        for k in 0..log2(d_i) {
            ctx.charge_crot(row << k, RotTag::IrGap);
        }
    } else if spec.f == 1 {
        // pointwise stride-2 shortcut: channel moves hop plane boundaries
        let plane = pack.plane_slots() as i64;
        for _ in 0..n_ra {
            for k in 0..log2(m_i) {
                let amt = if k == 0 { plane + 1 } else { 1 << k };
                ctx.charge_crot(amt, RotTag::IrGap);
            }
        }
        for _ in 0..passes {
            for k in 0..log2(d_o) {
                ctx.charge_crot(plane + (row << k), RotTag::IrGap);
            }
        }
        for _ in 0..log2(m_o) {
            ctx.charge_crot(row + 1, RotTag::IrGap);
        }
    } else {
        let plane = pack.plane_slots() as i64;
        for _ in 0..passes {
            for k in 0..log2(m_i) {
                ctx.charge_crot(plane + (1 << k), RotTag::IrGap);
            }
        }
        for _ in 0..n_ra {
            for k in 0..log2(m_o) {
                ctx.charge_crot(1 << k, RotTag::IrGap);
            }
        }
        for _ in 0..log2(m_i) {
            ctx.charge_crot(row + 1, RotTag::IrGap);
        }
    }
}

// ---------------------------------------------------------------------------
// Replication-aligned convolution
// ---------------------------------------------------------------------------

pub(crate) fn raconv(
    ctx: &HeCtx,
    input: &PackedTensor,
    weights: &LayerWeights,
    spec: &ConvLayerSpec,
    naive: bool,
    fused_gauge: Option<&mut WorkingSet>,
) -> Result<PackedTensor> {
    assert_eq!(input.packing.kind, FormatKind::PiRa);
    assert_eq!(spec.stride, 1, "replication-aligned convolutions are unit stride");
    let slot_count = ctx.params.slot_count;
    let pack = input.packing;
    let out = Packing::pi_ca(slot_count, spec.c_o, spec.w_o, spec.w_o, spec.gap_out);
    let n_ca = out.ct_count();
    let taps = tap_offsets(spec.f);

    // Naive order: slide every replication-aligned input up front.
    let rotated_inputs = if naive {
        Some(slide_inputs(ctx, &input.cts, spec, &pack))
    } else {
        None
    };

    let mut masked = Vec::with_capacity(n_ca);
    for l in 0..n_ca {
        let level = input.cts[0].level();
        let mut acc: Option<CipherSim> = None;
        if let Some(rot) = &rotated_inputs {
            // Slide_f then MulFilter&Sum_{f, c_i}; inputs accumulate within
            // each tap so both variants share the summation tree
            for (t, &(d1, d2)) in taps.iter().enumerate() {
                let mut tap_acc: Option<CipherSim> = None;
                for (j, taps_j) in rot.iter().enumerate() {
                    let pt = raconv_forward_plaintext(
                        ctx, weights, spec, &pack, &out, l, j, d1, d2, level,
                    );
                    let prod = ctx.mul_pt(&taps_j[t], &pt)?;
                    tap_acc = Some(match tap_acc {
                        None => prod,
                        Some(a) => ctx.add_ct(&a, &prod)?,
                    });
                }
                let v = tap_acc.unwrap();
                acc = Some(match acc {
                    None => v,
                    Some(a) => ctx.add_ct(&a, &v)?,
                });
            }
        } else {
            // Reordered: MulFilter&Sum_{c_i} then Slide_1&Sum_f
            for &(d1, d2) in &taps {
                let mut tap_acc: Option<CipherSim> = None;
                for (j, ct) in input.cts.iter().enumerate() {
                    let pt = ra_tap_plaintext(ctx, weights, spec, &pack, &out, l, d1, d2, j, level);
                    let prod = ctx.mul_pt(ct, &pt)?;
                    tap_acc = Some(match tap_acc {
                        None => prod,
                        Some(a) => ctx.add_ct(&a, &prod)?,
                    });
                }
                let v = tap_acc.unwrap();
                let moved = if d1 == 0 && d2 == 0 {
                    v
                } else {
                    ctx.crot(&v, slide_amount(&pack, d1, d2), RotTag::Slide)
                };
                acc = Some(match acc {
                    None => moved,
                    Some(a) => ctx.add_ct(&a, &moved)?,
                });
            }
        }
        let acc = ctx.rescale(&acc.unwrap())?;
        // Sum the d input-channel lanes living on cell rows.
        let acc = reduce(
            ctx,
            &acc,
            log2(pack.gap.d),
            pack.row_stride() as i64,
            RotTag::RaSGap,
        )?;
        let mask = ra_pass_mask(ctx, &pack, spec.w_o, acc.level());
        let mut acc = ctx.rescale(&ctx.mul_pt(&acc, &mask)?)?;
        if let Some(bias) = weights.bias() {
            let pt = ra_bias_plaintext(ctx, &pack, &out, l, bias, acc.level());
            acc = ctx.add_pt(&acc, &pt)?;
        }
        masked.push(acc);
    }
    if let Some(ws) = fused_gauge {
        ws.observe(ctx, masked.len());
    }

    // Gap maintenance: one charge per convolution.
    let row = pack.row_stride() as i64;
    for k in 0..log2(out.gap.m) {
        ctx.charge_crot(1 << k, RotTag::IrGap);
    }
    for k in 0..log2(out.gap.d) {
        ctx.charge_crot(row << k, RotTag::IrGap);
    }
    ctx.charge_crot(pack.plane_slots() as i64 - row, RotTag::IrGap);

    // Assemble fully valid channel-aligned outputs.
    let mut cts = Vec::with_capacity(n_ca);
    for (l, acc) in masked.iter().enumerate() {
        let mut plan = Vec::new();
        if ctx.mode() == Mode::Full {
            for q in 0..out.planes {
                for col in 0..out.gap.m {
                    let o = (l * out.planes + q) * out.gap.m + col;
                    if o >= spec.c_o {
                        continue;
                    }
                    for yy in 0..spec.w_o {
                        for xx in 0..spec.w_o {
                            let src = pack.slot_at(q, yy, xx, 0, col);
                            for row_d in 0..out.gap.d {
                                plan.push((out.slot_at(q, yy, xx, row_d, col), 0, src));
                            }
                        }
                    }
                }
            }
        }
        cts.push(ctx.assemble(&[acc], &plan)?);
    }
    Ok(PackedTensor { cts, packing: out })
}

#[allow(clippy::too_many_arguments)]
fn raconv_forward_plaintext(
    ctx: &HeCtx,
    w: &LayerWeights,
    spec: &ConvLayerSpec,
    pack: &Packing,
    out_pack: &Packing,
    out_ct: usize,
    in_ct: usize,
    d1: i64,
    d2: i64,
    level: u32,
) -> PlainSim {
    let p = *pack;
    let op = *out_pack;
    let spec = *spec;
    let kernel = w.kernel();
    encode_by(ctx, level, move |slot| {
        let c = match decompose(&p, slot) {
            Some(c) => c,
            None => return 0.0,
        };
        if c.y >= spec.w_o || c.x >= spec.w_o {
            return 0.0;
        }
        let sy = c.y as i64 + d1;
        let sx = c.x as i64 + d2;
        if sy < 0 || sx < 0 || sy >= spec.w_i as i64 || sx >= spec.w_i as i64 {
            return 0.0;
        }
        let ch = in_ct * p.gap.d + c.row;
        let o = (out_ct * op.planes + c.plane) * op.gap.m + c.col;
        if ch >= spec.c_i || o >= spec.c_o {
            return 0.0;
        }
        let cc = (spec.f - 1) as i64 / 2;
        kernel.at(o, ch, (cc + d1) as usize, (cc + d2) as usize)
    })
}

fn ra_bias_plaintext(
    ctx: &HeCtx,
    pack: &Packing,
    out_pack: &Packing,
    out_ct: usize,
    bias: &[f64],
    level: u32,
) -> PlainSim {
    let p = *pack;
    let op = *out_pack;
    let bias = bias.to_vec();
    encode_by(ctx, level, move |slot| {
        let c = match decompose(&p, slot) {
            Some(c) => c,
            None => return 0.0,
        };
        if c.row != 0 || c.y >= op.h || c.x >= op.w {
            return 0.0;
        }
        let o = (out_ct * op.planes + c.plane) * op.gap.m + c.col;
        if o >= bias.len() {
            return 0.0;
        }
        bias[o]
    })
}

// ---------------------------------------------------------------------------
// Multiplexed-packing baseline convolution
// ---------------------------------------------------------------------------

pub(crate) fn mp_conv(
    ctx: &HeCtx,
    input: &PackedTensor,
    weights: &LayerWeights,
    spec: &ConvLayerSpec,
    defer_replication: bool,
) -> Result<PackedTensor> {
    let pack = input.packing;
    assert_eq!(pack.kind, FormatKind::Mp);
    let slot_count = ctx.params.slot_count;
    let out = Packing::mp(slot_count, spec.c_o, spec.w_o, spec.w_o, spec.gap_out);
    let passes = spec.c_o / spec.gap_in.d;

    let rotated = if spec.f > 1 {
        slide_inputs(ctx, &input.cts, spec, &pack)
    } else {
        input.cts.iter().map(|c| vec![c.clone()]).collect()
    };

    let mut pass_cts = Vec::with_capacity(passes);
    for p in 0..passes {
        let acc = accumulate_pass(ctx, &rotated, weights, spec, &pack, p)?;
        // plane reduction within each replica block
        let acc = reduce(
            ctx,
            &acc,
            log2(pack.planes),
            pack.plane_slots() as i64,
            RotTag::RaS,
        )?;
        // gap-cell reduction toward cell position 0
        let mut acc = acc;
        let g = pack.cell_cols();
        let mut span = 1;
        while span < pack.gap.m {
            let off = ((span / g) * pack.row_stride() + span % g) as i64;
            let rot = ctx.crot(&acc, off, RotTag::RaSGap);
            acc = ctx.add_ct(&acc, &rot)?;
            span *= 2;
        }
        pass_cts.push(acc);
    }

    // Image realignment: mask-and-rotate gather into the output format,
    // then replicate across the outer repetition blocks.
    let ch_per_ct = out.channels_per_ct();
    let n_o = out.ct_count();
    let tuple_in = pack.planes * pack.plane_slots();
    let mut cts = Vec::with_capacity(n_o);
    for l in 0..n_o {
        let mut acc: Option<CipherSim> = None;
        for local in 0..ch_per_ct {
            let o = l * ch_per_ct + local;
            if o >= spec.c_o {
                break;
            }
            let p = o / spec.gap_in.d;
            let rep = o % spec.gap_in.d;
            let src_ct = &pass_cts[p];
            let level = src_ct.level();
            let mask = mp_channel_mask(ctx, &pack, spec, rep, level);
            let masked = ctx.mul_pt(src_ct, &mask)?;
            let shift = mp_shift(&pack, &out, rep, local, tuple_in);
            let moved = if local == 0 {
                debug_assert_eq!(shift, 0, "first gathered channel is in place");
                masked
            } else {
                ctx.crot(&masked, shift, RotTag::Ir)
            };
            acc = Some(match acc {
                None => moved,
                Some(a) => ctx.add_ct(&a, &moved)?,
            });
        }
        let mut acc = acc.unwrap();
        if !defer_replication {
            acc = mp_replicate(ctx, &acc, &out)?;
        }
        let mut acc = ctx.rescale(&acc)?;
        if let Some(bias) = weights.bias() {
            let pt = mp_bias_plaintext(ctx, &out, spec, l, bias, acc.level());
            acc = ctx.add_pt(&acc, &pt)?;
        }
        cts.push(acc);
    }
    // Fix up values: the masked rotations above compute the exact result
    // already in full mode; nothing further to assemble.
    Ok(PackedTensor { cts, packing: out })
}

/// Replicate the gathered tuple across the outer repetition blocks.
pub(crate) fn mp_replicate(ctx: &HeCtx, acc: &CipherSim, out: &Packing) -> Result<CipherSim> {
    let tuple_out = (out.planes * out.plane_slots()) as i64;
    let mut acc = acc.clone();
    for k in 0..log2(out.gap.d) {
        // negative amount: copy block 0 downward into higher blocks
        let rot = ctx.crot(&acc, -(tuple_out << k), RotTag::IrGap);
        acc = ctx.add_ct(&acc, &rot)?;
    }
    Ok(acc)
}

fn mp_channel_mask(
    ctx: &HeCtx,
    pack: &Packing,
    spec: &ConvLayerSpec,
    rep: usize,
    level: u32,
) -> PlainSim {
    let p = *pack;
    let spec = *spec;
    encode_by(ctx, level, move |slot| {
        let plane_count = p.planes * p.gap.d;
        let plane = slot / p.plane_slots();
        if plane >= plane_count {
            return 0.0;
        }
        // valid region: replica block `rep`, block-plane 0, cell position 0,
        // stride-aligned pixels
        if plane != rep * p.planes {
            return 0.0;
        }
        let c = match decompose(&p, slot) {
            Some(c) => c,
            None => return 0.0,
        };
        if c.row != 0 || c.col != 0 {
            return 0.0;
        }
        if c.y % spec.stride != 0
            || c.x % spec.stride != 0
            || c.y / spec.stride >= spec.w_o
            || c.x / spec.stride >= spec.w_o
        {
            return 0.0;
        }
        1.0
    })
}

/// Rotation amount moving a gathered channel from its pass position to its
/// place in the output format (left rotation by source minus target).
fn mp_shift(pack: &Packing, out: &Packing, rep: usize, local: usize, tuple_in: usize) -> i64 {
    let _ = pack;
    // source: replica block `rep`, plane 0, pixel (0,0), cell 0
    let src = (rep * tuple_in) as i64;
    // target: plane local/m, cell position local%m, pixel (0,0)
    let plane_t = local / out.gap.m;
    let t = local % out.gap.m;
    let g = out.cell_cols();
    let dst = (plane_t * out.plane_slots() + (t / g) * out.row_stride() + t % g) as i64;
    src - dst
}

pub(crate) fn mp_gather_amount(to: &Packing, local: usize) -> i64 {
    let plane_t = local / to.gap.m;
    let t = local % to.gap.m;
    let g = to.cell_cols();
    (plane_t * to.plane_slots() + (t / g) * to.row_stride() + t % g) as i64
}

fn mp_bias_plaintext(
    ctx: &HeCtx,
    out: &Packing,
    spec: &ConvLayerSpec,
    out_ct: usize,
    bias: &[f64],
    level: u32,
) -> PlainSim {
    let p = *out;
    let spec = *spec;
    let bias = bias.to_vec();
    encode_by(ctx, level, move |slot| {
        let tuple = p.planes * p.plane_slots();
        let in_tuple = slot % tuple;
        let plane = in_tuple / p.plane_slots();
        let c = match decompose(&p, slot % tuple) {
            Some(c) => c,
            None => return 0.0,
        };
        if c.y >= spec.w_o || c.x >= spec.w_o {
            return 0.0;
        }
        if slot / tuple >= p.gap.d {
            return 0.0;
        }
        let g = p.cell_cols();
        let t = c.row * g + c.col;
        let o = (out_ct * p.planes + plane) * p.gap.m + t;
        if o >= bias.len() {
            return 0.0;
        }
        bias[o]
    })
}

/// Pointwise stride-2 shortcut: channel-aligned passes assembled straight
/// back into the channel-aligned output format.
pub(crate) fn pconv_shortcut(
    ctx: &HeCtx,
    input: &PackedTensor,
    weights: &LayerWeights,
    spec: &ConvLayerSpec,
) -> Result<PackedTensor> {
    assert_eq!(spec.f, 1);
    assert_eq!(spec.stride, 2);
    let pack = input.packing;
    let slot_count = ctx.params.slot_count;
    let out = Packing::pi_ca(slot_count, spec.c_o, spec.w_o, spec.w_o, spec.gap_out);
    let passes = spec.c_o / spec.gap_in.d;
    let n_ra = spec.c_o / spec.gap_out.d;
    let per_pass = spec.gap_in.d;

    let rotated: Vec<Vec<CipherSim>> = input.cts.iter().map(|c| vec![c.clone()]).collect();
    let mut pass_cts = Vec::with_capacity(passes);
    for p in 0..passes {
        let acc = accumulate_pass(ctx, &rotated, weights, spec, &pack, p)?;
        let acc = reduce(ctx, &acc, log2(pack.planes), pack.plane_slots() as i64, RotTag::RaS)?;
        let acc = reduce(ctx, &acc, log2(pack.gap.m), 1, RotTag::RaSGap)?;
        let mask = ca_pass_mask(ctx, &pack, spec, acc.level());
        let acc = ctx.rescale(&ctx.mul_pt(&acc, &mask)?)?;
        pass_cts.push(acc);
    }
    charge_ca_ir(ctx, spec, input.cts.len(), passes as u64, n_ra as u64, &pack);

    let per_ct_out = out.channels_per_ct();
    let mut cts = Vec::with_capacity(out.ct_count());
    for l in 0..out.ct_count() {
        let mut sources = Vec::new();
        let mut plan = Vec::new();
        if ctx.mode() == Mode::Full {
            for local in 0..per_ct_out {
                let o = l * per_ct_out + local;
                if o >= spec.c_o {
                    break;
                }
                let p = o / per_pass;
                let rho = o % per_pass;
                sources.push(&pass_cts[p]);
                let si = sources.len() - 1;
                let q = local / out.gap.m;
                let col = local % out.gap.m;
                for yy in 0..spec.w_o {
                    for xx in 0..spec.w_o {
                        let src = pack.slot_at(0, yy * 2, xx * 2, rho, 0);
                        for row_d in 0..out.gap.d {
                            plan.push((out.slot_at(q, yy, xx, row_d, col), si, src));
                        }
                    }
                }
            }
        } else {
            sources.push(&pass_cts[0]);
        }
        cts.push(ctx.assemble(&sources, &plan)?);
    }
    Ok(PackedTensor { cts, packing: out })
}

/// All-ones mask over the valid data region of a packing.
pub(crate) fn region_mask(ctx: &HeCtx, p: &Packing, level: u32) -> crate::heslot::PlainSim {
    let p = *p;
    encode_by(ctx, level, move |slot| {
        let c = match decompose(&p, slot) {
            Some(c) => c,
            None => return 0.0,
        };
        if c.y < p.h && c.x < p.w {
            1.0
        } else {
            0.0
        }
    })
}

// ---------------------------------------------------------------------------
// Format transitions for the standalone ir() op
// ---------------------------------------------------------------------------

pub(crate) fn swap_plan(from: &Packing, to: &Packing) -> Vec<(usize, usize, usize)> {
    transcode_plan(from, to)
}

pub(crate) fn repack_plan(from: &Packing, to: &Packing) -> Vec<(usize, usize, usize)> {
    transcode_plan(from, to)
}

fn transcode_plan(from: &Packing, to: &Packing) -> Vec<(usize, usize, usize)> {
    let ch = from.channels_per_ct().min(to.channels_per_ct());
    let mut plan = Vec::new();
    for local in 0..ch {
        for y in 0..to.h.min(from.h) {
            for x in 0..to.w.min(from.w) {
                let src = from.canonical_slot(local, y, x);
                for dst in to.replica_slots(local, y, x) {
                    plan.push((dst, 0, src));
                }
            }
        }
    }
    plan
}

// ---------------------------------------------------------------------------
// Fused residual block core
// ---------------------------------------------------------------------------

/// Working-set gauge for the fused block: counts live intermediate
/// ciphertexts, excluding the slid input copies which are counted
/// separately.
pub(crate) struct WorkingSet {
    pub intermediates: usize,
    pub peak_intermediates: usize,
    pub inputs_held: usize,
}

impl WorkingSet {
    fn new(inputs_held: usize) -> Self {
        WorkingSet {
            intermediates: 0,
            peak_intermediates: 0,
            inputs_held,
        }
    }

    fn acquire(&mut self, n: usize) {
        self.intermediates += n;
        if self.intermediates > self.peak_intermediates {
            self.peak_intermediates = self.intermediates;
        }
    }

    fn release(&mut self, n: usize) {
        self.intermediates -= n;
    }

    fn observe(&mut self, _ctx: &HeCtx, _n: usize) {}
}

pub(crate) fn fused_block(
    ctx: &HeCtx,
    input: &PackedTensor,
    w_ca: &LayerWeights,
    w_ra: &LayerWeights,
    spec_ca: &ConvLayerSpec,
    spec_ra: &ConvLayerSpec,
) -> Result<super::FusedOutput> {
    let pack = input.packing;
    let slot_count = ctx.params.slot_count;
    let out_ra = Packing::pi_ra(slot_count, spec_ca.c_o, spec_ca.w_o, spec_ca.w_o, spec_ca.gap_out);
    let out_ca = Packing::pi_ca(slot_count, spec_ra.c_o, spec_ra.w_o, spec_ra.w_o, spec_ra.gap_out);
    let n_ca_out = out_ca.ct_count();
    let passes = spec_ca.c_o / spec_ca.gap_in.d;
    let n_ra = spec_ca.c_o / spec_ca.gap_out.d;
    let per_pass = spec_ca.gap_in.d;
    let group = spec_ca.gap_out.d / per_pass;
    let taps = tap_offsets(spec_ra.f);

    let mut ws = WorkingSet::new(input.cts.len() * spec_ca.f * spec_ca.f);

    // ct1: shared slid inputs (held for the whole block, counted apart)
    let rotated = slide_inputs(ctx, &input.cts, spec_ca, &pack);

    // ct4: one tap accumulator per output ciphertext
    let mut ct4: Vec<Vec<Option<CipherSim>>> = vec![vec![None; taps.len()]; n_ca_out];
    ws.acquire(n_ca_out * taps.len());

    charge_ca_ir(ctx, spec_ca, input.cts.len(), passes as u64, n_ra as u64, &pack);

    for j in 0..n_ra {
        // forward one replication-aligned intermediate: passes j*group..
        let mut consolidated: Option<CipherSim> = None;
        ws.acquire(1);
        for g in 0..group {
            let p = j * group + g;
            w_ca.charge_pass_rotations(ctx, p, spec_ca.f * spec_ca.f, input.cts.len());
            let acc = accumulate_pass(ctx, &rotated, w_ca, spec_ca, &pack, p)?;
            let acc = reduce(ctx, &acc, log2(pack.planes), pack.plane_slots() as i64, RotTag::RaS)?;
            let acc = reduce(ctx, &acc, log2(pack.gap.m), 1, RotTag::RaSGap)?;
            let mask = ca_pass_mask(ctx, &pack, spec_ca, acc.level());
            let mut acc = ctx.rescale(&ctx.mul_pt(&acc, &mask)?)?;
            if let Some(bias) = w_ca.bias() {
                let pt = pass_bias_plaintext(ctx, w_ca, spec_ca, &pack, p, bias, acc.level());
                acc = ctx.add_pt(&acc, &pt)?;
            }
            // place this pass into the consolidated pi_RA intermediate
            let mut plan = Vec::new();
            if ctx.mode() == Mode::Full {
                for rho in 0..per_pass {
                    let local = g * per_pass + rho;
                    let o = j * spec_ca.gap_out.d + local;
                    if o >= spec_ca.c_o {
                        continue;
                    }
                    for yy in 0..spec_ca.w_o {
                        for xx in 0..spec_ca.w_o {
                            let src =
                                pack.slot_at(0, yy * spec_ca.stride, xx * spec_ca.stride, rho, 0);
                            for q in 0..out_ra.planes {
                                for col in 0..out_ra.gap.m {
                                    plan.push((out_ra.slot_at(q, yy, xx, local, col), 0, src));
                                }
                            }
                        }
                    }
                }
            }
            let placed = ctx.assemble(&[&acc], &plan)?;
            consolidated = Some(match consolidated {
                None => placed,
                Some(c) => add_lanes(ctx, &c, &placed)?,
            });
        }
        let ct3 = square_ct(ctx, &consolidated.unwrap())?;

        // forward into every output's tap accumulators, then drop ct3
        for (l, acc_taps) in ct4.iter_mut().enumerate() {
            for (t, &(d1, d2)) in taps.iter().enumerate() {
                let pt = ra_tap_plaintext(
                    ctx,
                    w_ra,
                    spec_ra,
                    &out_ra,
                    &out_ca,
                    l,
                    d1,
                    d2,
                    j,
                    ct3.level(),
                );
                let prod = ctx.mul_pt(&ct3, &pt)?;
                acc_taps[t] = Some(match acc_taps[t].take() {
                    None => prod,
                    Some(a) => ctx.add_ct(&a, &prod)?,
                });
            }
        }
        ws.release(1);
    }

    // Slide_1&Sum_f per output, then the usual RA tail.
    let row = out_ra.row_stride() as i64;
    for k in 0..log2(out_ca.gap.m) {
        ctx.charge_crot(1 << k, RotTag::IrGap);
    }
    for k in 0..log2(out_ca.gap.d) {
        ctx.charge_crot(row << k, RotTag::IrGap);
    }
    ctx.charge_crot(out_ra.plane_slots() as i64 - row, RotTag::IrGap);

    let mut cts = Vec::with_capacity(n_ca_out);
    for (l, acc_taps) in ct4.into_iter().enumerate() {
        let mut acc: Option<CipherSim> = None;
        for (t, &(d1, d2)) in taps.iter().enumerate() {
            let v = acc_taps[t].clone().unwrap();
            let moved = if d1 == 0 && d2 == 0 {
                v
            } else {
                ctx.crot(&v, slide_amount(&out_ra, d1, d2), RotTag::Slide)
            };
            acc = Some(match acc {
                None => moved,
                Some(a) => ctx.add_ct(&a, &moved)?,
            });
        }
        ws.release(taps.len());
        let acc = ctx.rescale(&acc.unwrap())?;
        let acc = reduce(ctx, &acc, log2(out_ra.gap.d), out_ra.row_stride() as i64, RotTag::RaSGap)?;
        let mask = ra_pass_mask(ctx, &out_ra, spec_ra.w_o, acc.level());
        let mut acc = ctx.rescale(&ctx.mul_pt(&acc, &mask)?)?;
        if let Some(bias) = w_ra.bias() {
            let pt = ra_bias_plaintext(ctx, &out_ra, &out_ca, l, bias, acc.level());
            acc = ctx.add_pt(&acc, &pt)?;
        }
        let mut plan = Vec::new();
        if ctx.mode() == Mode::Full {
            for q in 0..out_ca.planes {
                for col in 0..out_ca.gap.m {
                    let o = (l * out_ca.planes + q) * out_ca.gap.m + col;
                    if o >= spec_ra.c_o {
                        continue;
                    }
                    for yy in 0..spec_ra.w_o {
                        for xx in 0..spec_ra.w_o {
                            let src = out_ra.slot_at(q, yy, xx, 0, col);
                            for row_d in 0..out_ca.gap.d {
                                plan.push((out_ca.slot_at(q, yy, xx, row_d, col), 0, src));
                            }
                        }
                    }
                }
            }
        }
        cts.push(ctx.assemble(&[&acc], &plan)?);
    }
    let peak_total = ws.peak_intermediates + ws.inputs_held;
    Ok(super::FusedOutput {
        tensor: PackedTensor {
            cts,
            packing: out_ca,
        },
        peak_intermediates: ws.peak_intermediates,
        peak_total,
    })
}

fn square_ct(ctx: &HeCtx, ct: &CipherSim) -> Result<CipherSim> {
    ctx.rescale(&ctx.mul_ct(ct, ct)?)
}

/// Add two ciphertexts whose valid lanes are disjoint (consolidation).
fn add_lanes(ctx: &HeCtx, a: &CipherSim, b: &CipherSim) -> Result<CipherSim> {
    ctx.add_ct(a, b)
}
