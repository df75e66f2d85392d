//! Closed-form rotation/bootstrap/memory accounting, evaluation-key
//! modeling with rotation decomposition, and exhaustive gap-plan search.
//!
//! The per-convolution counts here are the reference the simulator ledger
//! is tested against, and summing them over a model reproduces the
//! published per-network rotation and bootstrap totals.

use crate::heslot::{HeParams, RotEntry, RotTag};
use crate::layout::GapConfig;
use serde::Serialize;
use std::collections::BTreeSet;

pub fn log2(x: usize) -> u64 {
    debug_assert!(x.is_power_of_two(), "log2 argument {x} not a power of two");
    x.trailing_zeros() as u64
}

/// Convolution algorithm selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ConvAlgo {
    MpConvLc,
    CaConv,
    RaConvNaive,
    RaConvReorder,
}

/// Per-tag rotation counts of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct TagCounts {
    pub slide: u64,
    pub ras: u64,
    pub ras_g: u64,
    pub ir: u64,
    pub ir_g: u64,
}

impl TagCounts {
    pub fn total(&self) -> u64 {
        self.slide + self.ras + self.ras_g + self.ir + self.ir_g
    }

    /// Grouping used by the published tables: RaS column includes the gap
    /// variant, IR column includes gap maintenance.
    pub fn table_columns(&self) -> (u64, u64, u64) {
        (self.slide, self.ras + self.ras_g, self.ir + self.ir_g)
    }

    pub fn add(&mut self, other: &TagCounts) {
        self.slide += other.slide;
        self.ras += other.ras;
        self.ras_g += other.ras_g;
        self.ir += other.ir;
        self.ir_g += other.ir_g;
    }
}

/// Shape of one convolution as the cost model sees it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub c_i: usize,
    pub c_o: usize,
    pub f: usize,
    pub stride: usize,
    pub gap_in: GapConfig,
    pub gap_out: GapConfig,
    /// Channel planes per input ciphertext.
    pub cn_in: usize,
    /// Channel planes per output-side channel-aligned ciphertext.
    pub cn_out: usize,
    /// Input ciphertext count (channel-aligned side for CA/MP, replication
    /// side for RA).
    pub n_in: usize,
    /// Output channel-aligned ciphertext count.
    pub n_ca_out: usize,
}

impl ConvShape {
    /// Passes over the weight set: one per group of `d_in` output channels.
    pub fn passes(&self) -> u64 {
        (self.c_o / self.gap_in.d) as u64
    }

    /// Replication-aligned intermediate ciphertexts (d_out channels each).
    pub fn n_ra(&self) -> u64 {
        (self.c_o / self.gap_out.d) as u64
    }
}

/// Closed-form per-tag counts for one convolution.
///
/// `algo` selects the schedule; a pointwise stride-2 shortcut is the
/// `CaConv` schedule with `f = 1`, which the formulas special-case.
pub fn conv_cost_shape(algo: ConvAlgo, s: &ConvShape) -> TagCounts {
    let f2 = (s.f * s.f - 1) as u64;
    let p = s.passes();
    let n_ra = s.n_ra();
    let (m_i, d_i) = (s.gap_in.m, s.gap_in.d);
    let (m_o, d_o) = (s.gap_out.m, s.gap_out.d);
    match algo {
        ConvAlgo::CaConv => {
            let mut c = TagCounts {
                slide: s.n_in as u64 * f2,
                ras: p * log2(s.cn_in),
                ras_g: p * log2(m_i),
                ir: 0,
                ir_g: 0,
            };
            c.ir_g = if s.stride == 1 {
                s.n_in as u64 * log2(m_i) + log2(d_i)
            } else if s.f == 1 {
                // pointwise stride-2 shortcut
                n_ra * log2(m_i) + p * log2(d_o) + log2(m_o)
            } else {
                p * log2(m_i) + n_ra * log2(m_o) + log2(m_i)
            };
            c
        }
        ConvAlgo::RaConvReorder | ConvAlgo::RaConvNaive => {
            let n_ra_in = (s.c_i / d_o) as u64;
            let slide = match algo {
                ConvAlgo::RaConvReorder => s.n_ca_out as u64 * f2,
                _ => n_ra_in * f2,
            };
            TagCounts {
                slide,
                ras: 0,
                ras_g: s.n_ca_out as u64 * log2(d_o),
                ir: 0,
                ir_g: log2(m_o * d_o) + 1,
            }
        }
        ConvAlgo::MpConvLc => {
            let ch_per_ct_out = (s.cn_out * m_o) as u64;
            let (ir, ir_g) = if s.f == 1 && s.stride == 2 {
                // baseline pointwise shortcut: gather only, the block output
                // replication covers the merged sum
                (s.n_ca_out as u64 * (ch_per_ct_out - 1), 0)
            } else {
                (
                    s.n_ca_out as u64 * (ch_per_ct_out - 1),
                    s.n_ca_out as u64 * log2(d_o),
                )
            };
            TagCounts {
                slide: if s.f == 1 { 0 } else { s.n_in as u64 * f2 },
                ras: p * log2(s.cn_in),
                ras_g: p * log2(m_i),
                ir,
                ir_g,
            }
        }
    }
}

/// Normalized single-ciphertext form: `c_i = c_o = m * c_n`, one input
/// ciphertext, stride 1, same gap on both sides.
pub fn conv_cost(algo: ConvAlgo, f: usize, c_n: usize, m: usize, d: usize) -> TagCounts {
    let c = c_n * m;
    let gap = GapConfig::new(m, d);
    let shape = ConvShape {
        c_i: c,
        c_o: c,
        f,
        stride: 1,
        gap_in: gap,
        gap_out: gap,
        cn_in: c_n,
        cn_out: c_n,
        n_in: 1,
        n_ca_out: 1,
    };
    conv_cost_shape(algo, &shape)
}

// ---------------------------------------------------------------------------
// Network-level accounting
// ---------------------------------------------------------------------------

/// Model family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Arch {
    ResNet20,
    ResNet32,
    ResNet44,
    ResNet18,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::ResNet20 => "resnet20",
            Arch::ResNet32 => "resnet32",
            Arch::ResNet44 => "resnet44",
            Arch::ResNet18 => "resnet18",
        }
    }

    pub fn parse(s: &str) -> Option<Arch> {
        match s {
            "resnet20" => Some(Arch::ResNet20),
            "resnet32" => Some(Arch::ResNet32),
            "resnet44" => Some(Arch::ResNet44),
            "resnet18" => Some(Arch::ResNet18),
            _ => None,
        }
    }

    /// (channels, logical width, residual blocks) per stage.
    pub fn stages(self) -> Vec<(usize, usize, usize)> {
        match self {
            Arch::ResNet20 => vec![(16, 32, 3), (32, 16, 3), (64, 8, 3)],
            Arch::ResNet32 => vec![(16, 32, 5), (32, 16, 5), (64, 8, 5)],
            Arch::ResNet44 => vec![(16, 32, 7), (32, 16, 7), (64, 8, 7)],
            Arch::ResNet18 => vec![(64, 56, 2), (128, 28, 2), (256, 14, 2), (512, 7, 2)],
        }
    }

    /// CIFAR models carry their 3->16 stem in the convolution ledger; the
    /// ImageNet model's im2col stem is accounted under Others.
    pub fn stem_in_conv_path(self) -> bool {
        !matches!(self, Arch::ResNet18)
    }

    pub fn fc_classes(self) -> usize {
        match self {
            Arch::ResNet18 => 1000,
            _ => 10,
        }
    }
}

/// Per-stage gap plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GapPlan {
    pub stages: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PackingStyle {
    /// Alternating channel-aligned / replication-aligned convolutions.
    Hybrid,
    /// Multiplexed-packing baseline for every convolution.
    MpBaseline,
}

impl GapPlan {
    pub fn gap(&self, stage: usize) -> GapConfig {
        let (m, d) = self.stages[stage];
        GapConfig::new(m, d)
    }

    /// Validity: powers of two, and the gap fill quadruples at each
    /// downsampling. Hybrid plans grow m*d together; the multiplexed
    /// baseline grows m alone (the outer repetition just fills the
    /// ciphertext).
    pub fn validate(&self, arch: Arch, style: PackingStyle) -> Result<(), String> {
        let stages = arch.stages();
        if self.stages.len() != stages.len() {
            return Err(format!(
                "plan has {} stages, model has {}",
                self.stages.len(),
                stages.len()
            ));
        }
        for (i, &(m, d)) in self.stages.iter().enumerate() {
            if !m.is_power_of_two() || !d.is_power_of_two() {
                return Err(format!("stage {i}: (m,d)=({m},{d}) not powers of two"));
            }
            if m > stages[i].0 {
                return Err(format!("stage {i}: m={m} exceeds channel count"));
            }
            if i > 0 {
                let (pm, pd) = self.stages[i - 1];
                match style {
                    PackingStyle::Hybrid => {
                        if m * d != 4 * pm * pd {
                            return Err(format!(
                                "stage {i}: m*d={} must quadruple the previous {}",
                                m * d,
                                pm * pd
                            ));
                        }
                    }
                    PackingStyle::MpBaseline => {
                        if m != 4 * pm {
                            return Err(format!(
                                "stage {i}: m={m} must quadruple the previous {pm}"
                            ));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Named plans from the parameter study.
    pub fn named(arch: Arch, name: &str) -> Option<GapPlan> {
        let stages = match (arch, name) {
            (Arch::ResNet18, "baseline") => vec![(1, 1), (4, 1), (16, 1), (64, 1)],
            (Arch::ResNet18, "minboot") => vec![(1, 1), (4, 1), (16, 1), (64, 1)],
            (Arch::ResNet18, "optimal") => vec![(1, 1), (2, 2), (4, 4), (8, 8)],
            (_, "baseline") => vec![(1, 2), (4, 4), (16, 8)],
            (_, "optimal") => vec![(1, 2), (2, 4), (4, 8)],
            (_, "minrot") => vec![(1, 2), (1, 8), (2, 16)],
            _ => return None,
        };
        Some(GapPlan { stages })
    }
}

/// One convolution in a network walk, with enough geometry for both the
/// cost model and the simulator scheduler.
#[derive(Debug, Clone, Copy)]
pub struct ConvDesc {
    pub algo: ConvAlgo,
    pub shape: ConvShape,
    /// Logical input width (pre-padding).
    pub w_in: usize,
    pub stage: usize,
}

/// One residual block in a network walk.
#[derive(Debug, Clone)]
pub struct BlockDesc {
    pub stage: usize,
    pub downsampling: bool,
    /// Ciphertexts at block input; each block bootstraps them on entry.
    pub input_cts: usize,
    pub convs: Vec<ConvDesc>,
}

/// Stem accounting (CIFAR models only).
#[derive(Debug, Clone, Copy)]
pub struct StemCost {
    pub slide: u64,
    pub ras: u64,
    pub ir: u64,
}

/// Full closed-form cost of a network.
#[derive(Debug, Clone, Serialize)]
pub struct NetworkCost {
    pub slide: u64,
    pub ras: u64,
    pub ir: u64,
    pub total: u64,
    pub boots: u64,
}

fn plane_slots(w: usize, gap: GapConfig) -> usize {
    let grid = w.next_power_of_two();
    grid * grid * gap.cell()
}

fn cn_per_ct(slot_count: usize, channels: usize, w: usize, gap: GapConfig) -> usize {
    let plane = plane_slots(w, gap);
    (slot_count / plane).min((channels + gap.m - 1) / gap.m).max(1)
}

fn n_ca_cts(slot_count: usize, channels: usize, w: usize, gap: GapConfig) -> usize {
    let cn = cn_per_ct(slot_count, channels, w, gap);
    let per_ct = cn * gap.m;
    (channels + per_ct - 1) / per_ct
}

/// Walk the residual blocks of `arch` under `plan`, producing the full
/// convolution inventory. The stem is returned separately.
pub fn network_blocks(
    arch: Arch,
    plan: &GapPlan,
    style: PackingStyle,
    slot_count: usize,
) -> (Option<StemCost>, Vec<BlockDesc>) {
    let stages = arch.stages();
    let mut blocks = Vec::new();
    for (si, &(c, w, nblocks)) in stages.iter().enumerate() {
        let gap = plan.gap(si);
        let cn = cn_per_ct(slot_count, c, w, gap);
        let n_ca = n_ca_cts(slot_count, c, w, gap);
        for b in 0..nblocks {
            let ds = si > 0 && b == 0;
            let mut convs = Vec::new();
            let (conv1, input_cts);
            if ds {
                let (pc, pw, _) = stages[si - 1];
                let pgap = plan.gap(si - 1);
                let pcn = cn_per_ct(slot_count, pc, pw, pgap);
                let pn = n_ca_cts(slot_count, pc, pw, pgap);
                input_cts = pn;
                conv1 = ConvDesc {
                    algo: match style {
                        PackingStyle::Hybrid => ConvAlgo::CaConv,
                        PackingStyle::MpBaseline => ConvAlgo::MpConvLc,
                    },
                    shape: ConvShape {
                        c_i: pc,
                        c_o: c,
                        f: 3,
                        stride: 2,
                        gap_in: pgap,
                        gap_out: gap,
                        cn_in: pcn,
                        cn_out: cn,
                        n_in: pn,
                        n_ca_out: n_ca,
                    },
                    w_in: pw,
                    stage: si,
                };
                convs.push(conv1);
                // pointwise shortcut
                convs.push(ConvDesc {
                    algo: match style {
                        PackingStyle::Hybrid => ConvAlgo::CaConv,
                        PackingStyle::MpBaseline => ConvAlgo::MpConvLc,
                    },
                    shape: ConvShape {
                        c_i: pc,
                        c_o: c,
                        f: 1,
                        stride: 2,
                        gap_in: pgap,
                        gap_out: gap,
                        cn_in: pcn,
                        cn_out: cn,
                        n_in: pn,
                        n_ca_out: n_ca,
                    },
                    w_in: pw,
                    stage: si,
                });
            } else {
                input_cts = n_ca;
                conv1 = ConvDesc {
                    algo: match style {
                        PackingStyle::Hybrid => ConvAlgo::CaConv,
                        PackingStyle::MpBaseline => ConvAlgo::MpConvLc,
                    },
                    shape: ConvShape {
                        c_i: c,
                        c_o: c,
                        f: 3,
                        stride: 1,
                        gap_in: gap,
                        gap_out: gap,
                        cn_in: cn,
                        cn_out: cn,
                        n_in: n_ca,
                        n_ca_out: n_ca,
                    },
                    w_in: w,
                    stage: si,
                };
                convs.push(conv1);
            }
            // second convolution of the block
            convs.push(ConvDesc {
                algo: match style {
                    PackingStyle::Hybrid => ConvAlgo::RaConvReorder,
                    PackingStyle::MpBaseline => ConvAlgo::MpConvLc,
                },
                shape: ConvShape {
                    c_i: c,
                    c_o: c,
                    f: 3,
                    stride: 1,
                    gap_in: gap,
                    gap_out: gap,
                    cn_in: cn,
                    cn_out: cn,
                    n_in: n_ca,
                    n_ca_out: n_ca,
                },
                w_in: w,
                stage: si,
            });
            blocks.push(BlockDesc {
                stage: si,
                downsampling: ds,
                input_cts,
                convs,
            });
        }
    }
    let stem = if arch.stem_in_conv_path() {
        Some(match style {
            // Replication-aligned stem: two input ciphertexts of two
            // channel planes each, channel sums inside each.
            PackingStyle::Hybrid => StemCost {
                slide: 8,
                ras: 2,
                ir: 0,
            },
            // Baseline stem: multiplexed conv from a (cn=4, d=8) packing
            // into the stage-1 format.
            PackingStyle::MpBaseline => {
                let gap1 = plan.gap(0);
                let c_o = stages[0].0 as u64;
                let d_pack = 8u64;
                let passes = c_o / d_pack;
                StemCost {
                    slide: 8,
                    ras: passes * log2(4),
                    ir: (c_o - 1) + log2(gap1.d),
                }
            }
        })
    } else {
        None
    };
    (stem, blocks)
}

/// Closed-form totals for a preset network.
pub fn network_cost(arch: Arch, plan: &GapPlan, style: PackingStyle, slot_count: usize) -> NetworkCost {
    let (stem, blocks) = network_blocks(arch, plan, style, slot_count);
    let mut slide = 0;
    let mut ras = 0;
    let mut ir = 0;
    let mut boots = 1; // final bootstrap of the consolidated pooling input
    if let Some(s) = stem {
        slide += s.slide;
        ras += s.ras;
        ir += s.ir;
    }
    for b in &blocks {
        boots += b.input_cts as u64;
        for conv in &b.convs {
            let c = conv_cost_shape(conv.algo, &conv.shape);
            let (s, r, i) = c.table_columns();
            slide += s;
            ras += r;
            ir += i;
        }
    }
    NetworkCost {
        slide,
        ras,
        ir,
        total: slide + ras + ir,
        boots,
    }
}

// ---------------------------------------------------------------------------
// Evaluation keys and effective rotations
// ---------------------------------------------------------------------------

/// Loaded rotation-key amounts. Unloaded amounts are synthesized by
/// composing loaded ones.
#[derive(Debug, Clone)]
pub struct KeySet {
    pub amounts: BTreeSet<i64>,
    pub slot_count: usize,
    /// relinearization + conjugation + rotation keys
    pub key_objects: usize,
}

impl KeySet {
    /// Default policy: 48 bootstrap amounts (signed powers of two up to
    /// N/4 plus coarse three-power combinations), plus the full f=3 slide
    /// amount sets of each stage geometry of the preset.
    pub fn default_policy(slot_count: usize, slide_geometries: &[(i64, i64)]) -> KeySet {
        let mut amounts = BTreeSet::new();
        let mut boot = 0;
        let mut k = 0u32;
        while boot < 30 && (1i64 << k) <= slot_count as i64 / 2 {
            amounts.insert(1i64 << k);
            amounts.insert(-(1i64 << k));
            boot += 2;
            k += 1;
        }
        let mut extra = 0;
        let mut k = 6u32;
        while extra < 18 && (3i64 << k) < slot_count as i64 {
            amounts.insert(3i64 << k);
            amounts.insert(-(3i64 << k));
            extra += 2;
            k += 1;
        }
        let boot_keys = boot + extra;
        let mut slide_keys = 0;
        for &(row, col) in slide_geometries {
            for (d1, d2) in [
                (-1i64, -1i64),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ] {
                let amt = d1 * row + d2 * col;
                if amounts.insert(amt) {
                    slide_keys += 1;
                }
            }
        }
        KeySet {
            amounts,
            slot_count,
            key_objects: 2 + boot_keys + slide_keys,
        }
    }

    fn normalize(&self, amount: i64) -> i64 {
        let n = self.slot_count as i64;
        let mut a = amount.rem_euclid(n);
        if a > n / 2 {
            a -= n;
        }
        a
    }

    pub fn contains(&self, amount: i64) -> bool {
        self.amounts.contains(&self.normalize(amount))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Unreachable(pub i64);

impl std::fmt::Display for Unreachable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "rotation amount {} cannot be composed from loaded keys", self.0)
    }
}

impl std::error::Error for Unreachable {}

/// Greedy shortest-first decomposition of a rotation amount into loaded
/// key amounts. The returned amounts sum to the requested amount modulo the
/// slot count.
pub fn decompose_rotation(amount: i64, keys: &KeySet) -> Result<Vec<i64>, Unreachable> {
    let target = keys.normalize(amount);
    if target == 0 {
        return Ok(Vec::new());
    }
    if keys.contains(target) {
        return Ok(vec![target]);
    }
    if keys.amounts.is_empty() || !keys.amounts.contains(&1) && !keys.amounts.contains(&-1) {
        // need a unit generator for general amounts
        if !keys.amounts.iter().any(|a| a.abs() == 1) {
            return Err(Unreachable(amount));
        }
    }
    let mut parts = Vec::new();
    let mut rem = target;
    while rem != 0 {
        // closest loaded amount to the remainder
        let best = keys
            .amounts
            .iter()
            .copied()
            .min_by_key(|&a| ((rem - a).abs(), a.abs()))
            .ok_or(Unreachable(amount))?;
        if (rem - best).abs() >= rem.abs() {
            // no progress possible
            return Err(Unreachable(amount));
        }
        parts.push(best);
        rem -= best;
        if parts.len() > 64 {
            return Err(Unreachable(amount));
        }
    }
    Ok(parts)
}

/// Effective rotation count of a rotation log after key decomposition,
/// restricted to convolution-path tags.
pub fn effective_rotations(log: &[RotEntry], keys: &KeySet) -> u64 {
    log.iter()
        .filter(|e| e.tag != RotTag::Other)
        .map(|e| decompose_rotation(e.amount, keys).map(|p| p.len() as u64).unwrap_or(64))
        .sum()
}

/// Slide-amount geometries (row, col slot strides) of each stage of a
/// preset, for the key-loading policy.
pub fn slide_geometries(arch: Arch, plan: &GapPlan) -> Vec<(i64, i64)> {
    arch.stages()
        .iter()
        .enumerate()
        .map(|(si, &(_, w, _))| {
            let gap = plan.gap(si);
            let grid_w = w.next_power_of_two() as i64;
            let row = grid_w * gap.m as i64 * gap.d as i64;
            let col = gap.m as i64;
            (row, col)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Memory footprint
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct MemoryReport {
    pub weight_pt_slots: u64,
    pub weight_pt_bytes: u64,
    pub bias_pt_bytes: u64,
    pub input_ct_bytes: u64,
    pub evk_bytes: u64,
    pub prcr_segments: usize,
}

/// Weight-plaintext slots of one convolution: `w_i * h_i * f^2 * c_i * c_o`,
/// divided by the PRCR segment count.
pub fn conv_weight_slots(w_i: usize, h_i: usize, f: usize, c_i: usize, c_o: usize, segments: usize) -> u64 {
    (w_i as u64 * h_i as u64 * (f * f) as u64 * c_i as u64 * c_o as u64) / segments as u64
}

pub fn memory_footprint(
    arch: Arch,
    plan: &GapPlan,
    style: PackingStyle,
    params: &HeParams,
    prcr_segments: usize,
) -> MemoryReport {
    let (_, blocks) = network_blocks(arch, plan, style, params.slot_count);
    let mut weight_slots = 0u64;
    let mut bias_bytes = 0u64;
    for b in &blocks {
        for conv in &b.convs {
            weight_slots += conv_weight_slots(
                conv.w_in,
                conv.w_in,
                conv.shape.f,
                conv.shape.c_i,
                conv.shape.c_o,
                prcr_segments,
            );
            bias_bytes += conv.shape.n_ca_out as u64 * params.pt_bytes;
        }
    }
    let weight_bytes = weight_slots * params.pt_bytes / params.slot_count as u64;
    let keys = KeySet::default_policy(params.slot_count, &slide_geometries(arch, plan));
    let input_cts = blocks.first().map(|b| b.input_cts as u64).unwrap_or(1);
    MemoryReport {
        weight_pt_slots: weight_slots,
        weight_pt_bytes: weight_bytes,
        bias_pt_bytes: bias_bytes,
        input_ct_bytes: input_cts * params.ct_bytes,
        evk_bytes: keys.key_objects as u64 * params.evk_bytes,
        prcr_segments,
    }
}

// ---------------------------------------------------------------------------
// Plan search
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct RankedPlan {
    pub plan: GapPlan,
    pub cost: NetworkCost,
    pub score: f64,
}

/// Objective weights: time units per rotation and per bootstrap.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SearchWeights {
    pub crot: f64,
    pub boot: f64,
}

impl Default for SearchWeights {
    fn default() -> Self {
        // benchmark table defaults (milliseconds per op)
        SearchWeights {
            crot: 15.5,
            boot: 2160.0,
        }
    }
}

/// Exhaustively enumerate valid power-of-two gap plans and rank them by the
/// weighted rotation/bootstrap objective (ascending score).
pub fn search_plans(
    arch: Arch,
    style: PackingStyle,
    weights: SearchWeights,
    slot_count: usize,
) -> Vec<RankedPlan> {
    let stages = arch.stages();
    // stage-0 budgets: fill the ciphertext or leave it half full
    let (c0, w0, _) = stages[0];
    let grid0 = w0.next_power_of_two();
    let full_fill = slot_count / (grid0 * grid0 * c0);
    let mut bases: Vec<usize> = vec![full_fill.max(1)];
    if full_fill > 1 {
        bases.push(full_fill / 2);
    }
    let mut plans = Vec::new();
    let mut stack: Vec<Vec<(usize, usize)>> = bases
        .iter()
        .flat_map(|&base| factor_pairs(base).into_iter().map(|p| vec![p]))
        .collect();
    while let Some(partial) = stack.pop() {
        if partial.len() == stages.len() {
            let plan = GapPlan { stages: partial };
            if plan.validate(arch, style).is_ok() {
                plans.push(plan);
            }
            continue;
        }
        let si = partial.len();
        let (c, w, _) = stages[si];
        let (pm, pd) = partial[si - 1];
        let product = 4 * pm * pd;
        for (m, d) in factor_pairs(product) {
            if m > c {
                continue;
            }
            let grid = w.next_power_of_two();
            if grid * grid * m * d > slot_count {
                continue;
            }
            let mut next = partial.clone();
            next.push((m, d));
            stack.push(next);
        }
    }
    let mut ranked: Vec<RankedPlan> = plans
        .into_iter()
        .map(|plan| {
            let cost = network_cost(arch, &plan, style, slot_count);
            let score = weights.crot * cost.total as f64 + weights.boot * cost.boots as f64;
            RankedPlan { plan, cost, score }
        })
        .collect();
    ranked.sort_by(|a, b| a.score.partial_cmp(&b.score).unwrap());
    ranked
}

fn factor_pairs(product: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut m = 1;
    while m <= product {
        if product % m == 0 {
            let d = product / m;
            if m.is_power_of_two() && d.is_power_of_two() {
                out.push((m, d));
            }
        }
        m *= 2;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reorder_slide_is_f2_minus_one() {
        for c_n in [1usize, 2, 4, 8] {
            let c = conv_cost(ConvAlgo::RaConvReorder, 3, c_n, 1, 1);
            assert_eq!(c.slide, 8);
            let naive = conv_cost(ConvAlgo::RaConvNaive, 3, c_n, 1, 1);
            assert_eq!(naive.slide, 8 * c_n as u64);
        }
    }

    #[test]
    fn degenerate_conv_costs_nothing() {
        let c = conv_cost(ConvAlgo::CaConv, 1, 1, 1, 1);
        assert_eq!(c.total(), 0);
    }

    #[test]
    fn caconv_example_counts() {
        // f=3, c_n=2, m=2, d=2
        let c = conv_cost(ConvAlgo::CaConv, 3, 2, 2, 2);
        assert_eq!(c.slide, 8);
        assert_eq!(c.ras, 2);
        assert_eq!(c.ras_g, 2);
        assert_eq!(c.ir_g, 2);
    }

    #[test]
    fn resnet20_optimal_totals() {
        let plan = GapPlan::named(Arch::ResNet20, "optimal").unwrap();
        let c = network_cost(Arch::ResNet20, &plan, PackingStyle::Hybrid, 32768);
        assert_eq!((c.slide, c.ras, c.ir, c.total, c.boots), (152, 580, 187, 919, 10));
    }

    #[test]
    fn resnet20_minrot_totals() {
        let plan = GapPlan::named(Arch::ResNet20, "minrot").unwrap();
        let c = network_cost(Arch::ResNet20, &plan, PackingStyle::Hybrid, 32768);
        assert_eq!((c.slide, c.ras, c.ir, c.total, c.boots), (240, 407, 142, 789, 15));
    }

    #[test]
    fn resnet20_baseline_totals() {
        let plan = GapPlan::named(Arch::ResNet20, "baseline").unwrap();
        let c = network_cost(Arch::ResNet20, &plan, PackingStyle::MpBaseline, 32768);
        assert_eq!((c.slide, c.ras, c.ir, c.total, c.boots), (152, 924, 800, 1876, 10));
    }

    #[test]
    fn resnet18_totals() {
        let opt = GapPlan::named(Arch::ResNet18, "optimal").unwrap();
        let c = network_cost(Arch::ResNet18, &opt, PackingStyle::Hybrid, 32768);
        assert_eq!((c.slide, c.ras, c.ir, c.total, c.boots), (1024, 4512, 1823, 7359, 65));

        let mb = GapPlan::named(Arch::ResNet18, "minboot").unwrap();
        let c = network_cost(Arch::ResNet18, &mb, PackingStyle::Hybrid, 32768);
        assert_eq!((c.slide, c.ras, c.ir, c.total, c.boots), (536, 17920, 9544, 28000, 38));

        let base = GapPlan::named(Arch::ResNet18, "baseline").unwrap();
        let c = network_cost(Arch::ResNet18, &base, PackingStyle::MpBaseline, 32768);
        assert_eq!((c.slide, c.ras, c.ir, c.total, c.boots), (536, 32384, 4669, 37589, 38));
    }

    #[test]
    fn plan_validation() {
        let ok = GapPlan::named(Arch::ResNet20, "optimal").unwrap();
        assert!(ok.validate(Arch::ResNet20, PackingStyle::Hybrid).is_ok());
        let base = GapPlan::named(Arch::ResNet20, "baseline").unwrap();
        assert!(base.validate(Arch::ResNet20, PackingStyle::MpBaseline).is_ok());
        let bad = GapPlan {
            stages: vec![(1, 2), (1, 2), (1, 2)],
        };
        assert!(bad.validate(Arch::ResNet20, PackingStyle::Hybrid).is_err());
    }

    #[test]
    fn decompose_loaded_and_zero() {
        let keys = KeySet::default_policy(32768, &[(64, 1)]);
        assert_eq!(decompose_rotation(64, &keys).unwrap(), vec![64]);
        assert_eq!(decompose_rotation(0, &keys).unwrap(), Vec::<i64>::new());
        // 65 = 64 + 1 is loaded directly (slide diagonal)
        assert_eq!(decompose_rotation(65, &keys).unwrap().len(), 1);
    }

    #[test]
    fn decompose_roundtrip() {
        let keys = KeySet::default_policy(32768, &[(64, 1)]);
        for amount in [7i64, 100, -100, 12345, -20000, 32767, 2048 * 5 + 3] {
            let parts = decompose_rotation(amount, &keys).unwrap();
            assert!(!parts.is_empty());
            let sum: i64 = parts.iter().sum();
            assert_eq!(
                sum.rem_euclid(32768),
                amount.rem_euclid(32768),
                "amount {amount}: parts {parts:?}"
            );
        }
    }

    #[test]
    fn memory_footprint_resnet18() {
        let plan = GapPlan::named(Arch::ResNet18, "baseline").unwrap();
        let params = HeParams::set_hyp();
        let rep = memory_footprint(Arch::ResNet18, &plan, PackingStyle::MpBaseline, &params, 1);
        // 364.8 GB published; linear slot formula gives ~363.8 GB
        let gb = rep.weight_pt_bytes as f64 / 1e9;
        assert!((gb - 364.8).abs() / 364.8 < 0.02, "weight plaintexts {gb} GB");
        let rep8 = memory_footprint(Arch::ResNet18, &plan, PackingStyle::MpBaseline, &params, 8);
        assert_eq!(rep.weight_pt_slots, rep8.weight_pt_slots * 8);
        assert_eq!(rep.weight_pt_bytes, rep8.weight_pt_bytes * 8);
    }

    #[test]
    fn single_conv_weight_slot_formula() {
        assert_eq!(conv_weight_slots(32, 32, 1, 1, 1, 1), 1024);
        assert_eq!(conv_weight_slots(56, 56, 3, 64, 64, 1), 56 * 56 * 9 * 64 * 64);
        assert_eq!(
            conv_weight_slots(56, 56, 3, 64, 64, 8),
            56 * 56 * 9 * 64 * 64 / 8
        );
    }

    #[test]
    fn search_prefers_published_plans() {
        let ranked = search_plans(Arch::ResNet20, PackingStyle::Hybrid, SearchWeights::default(), 32768);
        assert!(!ranked.is_empty());
        assert_eq!(
            ranked[0].plan,
            GapPlan::named(Arch::ResNet20, "optimal").unwrap(),
            "top plan: {:?}",
            ranked[0].plan
        );
        let ranked18 = search_plans(Arch::ResNet18, PackingStyle::Hybrid, SearchWeights::default(), 32768);
        let pos = |p: &GapPlan| ranked18.iter().position(|r| &r.plan == p).unwrap();
        let opt = GapPlan::named(Arch::ResNet18, "optimal").unwrap();
        let mb = GapPlan::named(Arch::ResNet18, "minboot").unwrap();
        assert!(pos(&opt) < pos(&mb));
    }

    #[test]
    fn objective_monotonicity() {
        let w1 = SearchWeights { crot: 15.5, boot: 2160.0 };
        let w2 = SearchWeights { crot: 31.0, boot: 2160.0 };
        let r1 = search_plans(Arch::ResNet20, PackingStyle::Hybrid, w1, 32768);
        let r2 = search_plans(Arch::ResNet20, PackingStyle::Hybrid, w2, 32768);
        // a plan with strictly fewer rotations and equal boots never ranks
        // worse when the rotation weight grows
        for a in &r1 {
            for b in &r1 {
                if a.cost.total < b.cost.total && a.cost.boots == b.cost.boots {
                    let pa1 = r1.iter().position(|x| x.plan == a.plan).unwrap();
                    let pb1 = r1.iter().position(|x| x.plan == b.plan).unwrap();
                    let pa2 = r2.iter().position(|x| x.plan == a.plan).unwrap();
                    let pb2 = r2.iter().position(|x| x.plan == b.plan).unwrap();
                    if pa1 < pb1 {
                        assert!(pa2 < pb2);
                    }
                }
            }
        }
    }
}
