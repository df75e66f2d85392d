//! Data formats and the conversions between plain tensors and packed slot
//! vectors.
//!
//! Slot geometry. Each ciphertext holds `planes` blocks of an image grid.
//! A grid is `h` by `w` gap cells; a cell is `d` physical rows by `m`
//! physical columns, so one plane occupies `h*d * w*m` slots in row-major
//! order. The channel-aligned format stores `m` distinct channels along
//! cell columns and duplicates each one down the `d` cell rows; the
//! replication-aligned format stores `d` distinct channels along cell rows
//! and duplicates along the `m` columns, with whole-image replicas in the
//! plane dimension. The multiplexed baseline format instead uses square
//! `g x g` cells holding `m = g^2` channels in row-major cell order and
//! replicates the whole tuple `d` times across the outermost dimension.

use crate::heslot::{CipherSim, HeCtx, Mode, PlainSim};
use crate::oracle::Tensor;
use std::fmt;

/// Dimension names usable in a format spec string.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DimKind {
    Ca,
    Ra,
    S,
    H,
    Hp,
    W,
    Rg,
    Cg,
    C,
    R,
}

impl DimKind {
    fn token(self) -> &'static str {
        match self {
            DimKind::Ca => "CA",
            DimKind::Ra => "RA",
            DimKind::S => "S",
            DimKind::H => "H",
            DimKind::Hp => "Hp",
            DimKind::W => "W",
            DimKind::Rg => "Rg",
            DimKind::Cg => "Cg",
            DimKind::C => "C",
            DimKind::R => "R",
        }
    }
}

/// Ordered dimension list with sizes; flattening is row-major over this
/// order, with the gap dimensions realized as 2-D cell interleavings.
#[derive(Debug, Clone, PartialEq)]
pub struct DataFormat {
    pub dims: Vec<(DimKind, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayoutError {
    ShapeMismatch(String),
    CapacityExceeded(String),
    GapMismatch(String),
    IndivisibleHeight { h: usize, segments: usize },
    Parse(String),
}

impl fmt::Display for LayoutError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayoutError::ShapeMismatch(m) => write!(f, "shape mismatch: {m}"),
            LayoutError::CapacityExceeded(m) => write!(f, "capacity exceeded: {m}"),
            LayoutError::GapMismatch(m) => write!(f, "gap mismatch: {m}"),
            LayoutError::IndivisibleHeight { h, segments } => {
                write!(f, "height {h} not divisible into {segments} segments")
            }
            LayoutError::Parse(m) => write!(f, "format parse error: {m}"),
        }
    }
}

impl std::error::Error for LayoutError {}

impl DataFormat {
    pub fn slots(&self) -> usize {
        self.dims.iter().map(|&(_, n)| n).product()
    }

    pub fn size_of(&self, kind: DimKind) -> Option<usize> {
        self.dims.iter().find(|&&(k, _)| k == kind).map(|&(_, n)| n)
    }

    /// `CA[c]H[h]W[w]Rg[d]Cg[m]` and friends.
    pub fn parse(text: &str) -> Result<DataFormat, LayoutError> {
        let mut dims = Vec::new();
        let mut rest = text.trim();
        while !rest.is_empty() {
            let open = rest
                .find('[')
                .ok_or_else(|| LayoutError::Parse(format!("missing [ in {rest:?}")))?;
            let close = rest
                .find(']')
                .ok_or_else(|| LayoutError::Parse(format!("missing ] in {rest:?}")))?;
            let name = &rest[..open];
            let kind = match name {
                "CA" => DimKind::Ca,
                "RA" => DimKind::Ra,
                "S" => DimKind::S,
                "H" => DimKind::H,
                "Hp" => DimKind::Hp,
                "W" => DimKind::W,
                "Rg" => DimKind::Rg,
                "Cg" => DimKind::Cg,
                "C" => DimKind::C,
                "R" => DimKind::R,
                other => return Err(LayoutError::Parse(format!("unknown dim {other:?}"))),
            };
            let size: usize = rest[open + 1..close]
                .parse()
                .map_err(|_| LayoutError::Parse(format!("bad size in {rest:?}")))?;
            dims.push((kind, size));
            rest = &rest[close + 1..];
        }
        if dims.is_empty() {
            return Err(LayoutError::Parse("empty format".into()));
        }
        Ok(DataFormat { dims })
    }
}

impl fmt::Display for DataFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &(k, n) in &self.dims {
            write!(f, "{}[{}]", k.token(), n)?;
        }
        Ok(())
    }
}

/// Gap configuration: `m` multiplexed channels and `d` duplicates per cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GapConfig {
    pub m: usize,
    pub d: usize,
}

impl GapConfig {
    pub fn new(m: usize, d: usize) -> Self {
        assert!(m.is_power_of_two() && d.is_power_of_two(), "(m,d) must be powers of two");
        GapConfig { m, d }
    }

    pub fn cell(&self) -> usize {
        self.m * self.d
    }

    /// Gap configuration after one stride-2 layer: both sides double.
    pub fn after_stride2(&self) -> GapConfig {
        GapConfig {
            m: self.m * 2,
            d: self.d * 2,
        }
    }
}

/// Packing family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormatKind {
    /// Channel-aligned: channels along cell columns, duplicates down rows.
    PiCa,
    /// Replication-aligned: channels along cell rows, duplicates across
    /// columns, whole-image replicas in the plane dimension.
    PiRa,
    /// Multiplexed baseline: square cells of channels, outer replication.
    Mp,
    /// Bare row-major image (single channel group, no gap).
    Image,
}

/// Concrete packing geometry for one tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Packing {
    pub kind: FormatKind,
    /// Logical image height/width (valid pixels per channel).
    pub h: usize,
    pub w: usize,
    /// Padded grid dimensions in cells (powers of two covering h, w).
    pub grid_h: usize,
    pub grid_w: usize,
    pub gap: GapConfig,
    /// Total tensor channels.
    pub channels: usize,
    /// Channel planes per ciphertext (PiCa/Mp) or image replicas (PiRa).
    pub planes: usize,
    /// PRCR segment count (1 = disabled). Affects weight-plaintext
    /// accounting, not slot placement: segments are row-contiguous.
    pub segments: usize,
}

impl Packing {
    /// Channel-aligned packing for a `channels x h x w` tensor under `gap`,
    /// padding the grid to powers of two and filling each ciphertext.
    pub fn pi_ca(slot_count: usize, channels: usize, h: usize, w: usize, gap: GapConfig) -> Self {
        let grid_h = h.next_power_of_two();
        let grid_w = w.next_power_of_two();
        let plane = grid_h * grid_w * gap.cell();
        assert!(plane <= slot_count, "one channel plane must fit a ciphertext");
        let planes = (slot_count / plane).min(ceil_div(channels, gap.m)).max(1);
        Packing {
            kind: FormatKind::PiCa,
            h,
            w,
            grid_h,
            grid_w,
            gap,
            channels,
            planes,
            segments: 1,
        }
    }

    /// Replication-aligned packing holding `d` channels per ciphertext.
    pub fn pi_ra(slot_count: usize, channels: usize, h: usize, w: usize, gap: GapConfig) -> Self {
        let grid_h = h.next_power_of_two();
        let grid_w = w.next_power_of_two();
        let plane = grid_h * grid_w * gap.cell();
        assert!(plane <= slot_count);
        let planes = (slot_count / plane).max(1);
        Packing {
            kind: FormatKind::PiRa,
            h,
            w,
            grid_h,
            grid_w,
            gap,
            channels,
            planes,
            segments: 1,
        }
    }

    /// Multiplexed baseline packing: gap cells are sqrt(m) x sqrt(m) holding
    /// m channels in row-major cell order; the whole tuple is repeated `d`
    /// times in the outermost dimension.
    pub fn mp(slot_count: usize, channels: usize, h: usize, w: usize, gap: GapConfig) -> Self {
        let g = (gap.m as f64).sqrt() as usize;
        assert_eq!(g * g, gap.m, "multiplexed packing needs square gap fill");
        let grid_h = h.next_power_of_two();
        let grid_w = w.next_power_of_two();
        let plane = grid_h * grid_w * gap.m;
        assert!(plane * gap.d <= slot_count, "one replicated plane must fit");
        let planes = (slot_count / (plane * gap.d))
            .min(ceil_div(channels, gap.m))
            .max(1);
        Packing {
            kind: FormatKind::Mp,
            h,
            w,
            grid_h,
            grid_w,
            gap,
            channels,
            planes,
            segments: 1,
        }
    }

    /// Bare image packing, one channel group, no gap.
    pub fn image(h: usize, w: usize) -> Self {
        Packing {
            kind: FormatKind::Image,
            h,
            w,
            grid_h: h,
            grid_w: w,
            gap: GapConfig::new(1, 1),
            channels: 1,
            planes: 1,
            segments: 1,
        }
    }

    /// Apply PRCR segmentation: rows split into `segments` contiguous
    /// pieces. Slot placement is unchanged (segments are row-contiguous by
    /// construction); weight fragments shrink by the segment count.
    pub fn with_segments(mut self, segments: usize) -> Result<Self, LayoutError> {
        if self.h % segments != 0 {
            return Err(LayoutError::IndivisibleHeight {
                h: self.h,
                segments,
            });
        }
        self.segments = segments;
        Ok(self)
    }

    /// Slots of one plane (channel block or replica).
    pub fn plane_slots(&self) -> usize {
        self.grid_h * self.grid_w * self.cell_rows() * self.cell_cols()
    }

    /// Physical row length in slots.
    pub fn row_stride(&self) -> usize {
        match self.kind {
            FormatKind::Mp => self.grid_w * self.cell_cols(),
            _ => self.grid_w * self.gap.m,
        }
    }

    /// Physical rows per cell / columns per cell.
    pub fn cell_rows(&self) -> usize {
        match self.kind {
            FormatKind::Mp => (self.gap.m as f64).sqrt() as usize,
            _ => self.gap.d,
        }
    }

    pub fn cell_cols(&self) -> usize {
        match self.kind {
            FormatKind::Mp => (self.gap.m as f64).sqrt() as usize,
            _ => self.gap.m,
        }
    }

    /// Distinct channels held by one ciphertext.
    pub fn channels_per_ct(&self) -> usize {
        match self.kind {
            FormatKind::PiCa => self.planes * self.gap.m,
            FormatKind::PiRa => self.gap.d,
            FormatKind::Mp => self.planes * self.gap.m,
            FormatKind::Image => 1,
        }
    }

    /// Number of ciphertexts for the whole tensor.
    pub fn ct_count(&self) -> usize {
        ceil_div(self.channels, self.channels_per_ct())
    }

    /// The canonical slot of (channel within ct, y, x): the cell position
    /// that holds the authoritative copy.
    pub fn canonical_slot(&self, ch_in_ct: usize, y: usize, x: usize) -> usize {
        match self.kind {
            FormatKind::Image => y * self.grid_w + x,
            FormatKind::PiCa => {
                let plane = ch_in_ct / self.gap.m;
                let col = ch_in_ct % self.gap.m;
                self.slot_at(plane, y, x, 0, col)
            }
            FormatKind::PiRa => {
                // channel index = cell row; plane 0, column 0.
                self.slot_at(0, y, x, ch_in_ct, 0)
            }
            FormatKind::Mp => {
                let plane = ch_in_ct / self.gap.m;
                let t = ch_in_ct % self.gap.m;
                let g = self.cell_cols();
                self.slot_at(plane, y, x, t / g, t % g)
            }
        }
    }

    /// All replica slots of (channel within ct, y, x) under full validity.
    pub fn replica_slots(&self, ch_in_ct: usize, y: usize, x: usize) -> Vec<usize> {
        match self.kind {
            FormatKind::Image => vec![y * self.grid_w + x],
            FormatKind::PiCa => {
                let plane = ch_in_ct / self.gap.m;
                let col = ch_in_ct % self.gap.m;
                (0..self.gap.d)
                    .map(|row| self.slot_at(plane, y, x, row, col))
                    .collect()
            }
            FormatKind::PiRa => {
                let row = ch_in_ct;
                let mut v = Vec::with_capacity(self.planes * self.gap.m);
                for plane in 0..self.planes {
                    for col in 0..self.gap.m {
                        v.push(self.slot_at(plane, y, x, row, col));
                    }
                }
                v
            }
            FormatKind::Mp => {
                let plane = ch_in_ct / self.gap.m;
                let t = ch_in_ct % self.gap.m;
                let g = self.cell_cols();
                let tuple = self.planes * self.plane_slots();
                let base = self.slot_at(plane, y, x, t / g, t % g);
                (0..self.gap.d).map(|rep| rep * tuple + base).collect()
            }
        }
    }

    /// Raw slot index from plane, pixel and cell coordinates.
    pub fn slot_at(&self, plane: usize, y: usize, x: usize, cell_row: usize, cell_col: usize) -> usize {
        let rows = self.cell_rows();
        let cols = self.cell_cols();
        let row_len = self.grid_w * cols;
        plane * self.plane_slots() + (y * rows + cell_row) * row_len + (x * cols + cell_col)
    }

    /// Spec-style format description of one ciphertext.
    pub fn format(&self) -> DataFormat {
        let dims = match self.kind {
            FormatKind::PiCa => {
                if self.segments > 1 {
                    vec![
                        (DimKind::Ca, self.planes),
                        (DimKind::S, self.segments),
                        (DimKind::Hp, self.grid_h / self.segments),
                        (DimKind::W, self.grid_w),
                        (DimKind::Rg, self.gap.d),
                        (DimKind::Cg, self.gap.m),
                    ]
                } else {
                    vec![
                        (DimKind::Ca, self.planes),
                        (DimKind::H, self.grid_h),
                        (DimKind::W, self.grid_w),
                        (DimKind::Rg, self.gap.d),
                        (DimKind::Cg, self.gap.m),
                    ]
                }
            }
            FormatKind::PiRa => vec![
                (DimKind::Ra, self.planes),
                (DimKind::H, self.grid_h),
                (DimKind::W, self.grid_w),
                (DimKind::Cg, self.gap.d),
                (DimKind::Rg, self.gap.m),
            ],
            FormatKind::Mp => vec![
                (DimKind::R, self.gap.d),
                (DimKind::Ca, self.planes),
                (DimKind::H, self.grid_h),
                (DimKind::W, self.grid_w),
                (DimKind::Cg, self.gap.m),
            ],
            FormatKind::Image => vec![(DimKind::H, self.grid_h), (DimKind::W, self.grid_w)],
        };
        DataFormat { dims }
    }
}

fn ceil_div(a: usize, b: usize) -> usize {
    (a + b - 1) / b
}

/// A tensor packed into ciphertexts.
#[derive(Clone)]
pub struct PackedTensor {
    pub cts: Vec<CipherSim>,
    pub packing: Packing,
}

impl PackedTensor {
    pub fn logical_shape(&self) -> (usize, usize, usize) {
        (self.packing.channels, self.packing.h, self.packing.w)
    }
}

/// Pack a `(C, H, W)` tensor. Client-side: free in the ledger. Replicas are
/// fully materialized (every duplicate slot written).
pub fn pack(ctx: &HeCtx, tensor: &Tensor, packing: &Packing, level: u32) -> Result<PackedTensor, LayoutError> {
    if tensor.channels() != packing.channels
        || tensor.height() != packing.h
        || tensor.width() != packing.w
    {
        return Err(LayoutError::ShapeMismatch(format!(
            "tensor {:?} vs packing ({}, {}, {})",
            tensor.shape, packing.channels, packing.h, packing.w
        )));
    }
    if packing.plane_slots() * packing.planes > ctx.params.slot_count {
        return Err(LayoutError::CapacityExceeded(format!(
            "{} slots needed, {} available",
            packing.plane_slots() * packing.planes,
            ctx.params.slot_count
        )));
    }
    let per_ct = packing.channels_per_ct();
    let n_cts = packing.ct_count();
    let mut cts = Vec::with_capacity(n_cts);
    for ct_idx in 0..n_cts {
        if ctx.mode() == Mode::Trace {
            cts.push(ctx.encrypt_trace(level));
            continue;
        }
        let mut slots = vec![0.0; ctx.params.slot_count];
        for local in 0..per_ct {
            let ch = ct_idx * per_ct + local;
            if ch >= packing.channels {
                break;
            }
            for y in 0..packing.h {
                for x in 0..packing.w {
                    let v = tensor.at3(ch, y, x);
                    for slot in packing.replica_slots(local, y, x) {
                        slots[slot] = v;
                    }
                }
            }
        }
        cts.push(ctx.encrypt(&slots, level));
    }
    Ok(PackedTensor {
        cts,
        packing: *packing,
    })
}

/// Exact inverse of [`pack`]: reads each channel's canonical replica.
pub fn unpack(ctx: &HeCtx, pt: &PackedTensor) -> Result<Tensor, LayoutError> {
    let p = &pt.packing;
    let mut out = Tensor::zeros(vec![p.channels, p.h, p.w]);
    let per_ct = p.channels_per_ct();
    for (ct_idx, ct) in pt.cts.iter().enumerate() {
        let values = match ctx.decrypt(ct) {
            Some(v) => v,
            None => {
                return Err(LayoutError::ShapeMismatch(
                    "cannot unpack a trace-mode ciphertext".into(),
                ))
            }
        };
        for local in 0..per_ct {
            let ch = ct_idx * per_ct + local;
            if ch >= p.channels {
                break;
            }
            for y in 0..p.h {
                for x in 0..p.w {
                    out.set3(ch, y, x, values[p.canonical_slot(local, y, x)]);
                }
            }
        }
    }
    Ok(out)
}

/// Multiplexed packing with `m` channels folded into the gap. `m == 1`
/// degenerates to plain channel-aligned packing.
pub fn multiplexed_pack(
    ctx: &HeCtx,
    tensor: &Tensor,
    m: usize,
    d: usize,
    level: u32,
) -> Result<PackedTensor, LayoutError> {
    let g2 = (m as f64).sqrt() as usize;
    if g2 * g2 != m {
        return Err(LayoutError::GapMismatch(format!(
            "m = {m} does not fill a square gap"
        )));
    }
    let packing = Packing::mp(
        ctx.params.slot_count,
        tensor.channels(),
        tensor.height(),
        tensor.width(),
        GapConfig::new(m, d),
    );
    pack(ctx, tensor, &packing, level)
}

/// PRCR format adjustment: the H dimension splits into `segments`
/// row-contiguous pieces S and H' = H / segments. Total valid slot usage is
/// unchanged; only the dimension bookkeeping differs.
pub fn prcr_format(format: &DataFormat, segments: usize) -> Result<DataFormat, LayoutError> {
    if segments == 1 {
        return Ok(format.clone());
    }
    let mut dims = Vec::with_capacity(format.dims.len() + 1);
    let mut found = false;
    for &(kind, size) in &format.dims {
        if kind == DimKind::H {
            if size % segments != 0 {
                return Err(LayoutError::IndivisibleHeight { h: size, segments });
            }
            dims.push((DimKind::S, segments));
            dims.push((DimKind::Hp, size / segments));
            found = true;
        } else {
            dims.push((kind, size));
        }
    }
    if !found {
        return Err(LayoutError::Parse("format has no H dimension".into()));
    }
    Ok(DataFormat { dims })
}

/// Mask purposes understood by [`build_masks`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskPurpose {
    /// One mask per gap column: selects that column in every cell.
    GapSelect,
    /// Mask of the canonical (row 0) positions, used before moving data.
    IrMove,
    /// One mask per PRCR segment.
    Segment,
}

/// Named set of 0/1 plaintext masks.
pub struct MaskSet {
    pub names: Vec<String>,
    pub masks: Vec<PlainSim>,
}

/// Build binary masks consistent with the packing geometry. Masks are
/// encoded at the given level.
pub fn build_masks(ctx: &HeCtx, packing: &Packing, purpose: MaskPurpose, level: u32) -> MaskSet {
    let n = ctx.params.slot_count;
    let mut names = Vec::new();
    let mut masks = Vec::new();
    let mut emit = |name: String, pred: &dyn Fn(usize) -> bool| {
        let vals: Vec<f64> = (0..n).map(|s| if pred(s) { 1.0 } else { 0.0 }).collect();
        names.push(name);
        masks.push(ctx.encode(&vals, level));
    };
    match purpose {
        MaskPurpose::GapSelect => {
            let cols = packing.cell_cols();
            let row_len = packing.grid_w * cols;
            let used = packing.planes * packing.plane_slots();
            for col in 0..cols {
                emit(format!("gap_col_{col}"), &move |s: usize| {
                    s < used && s % row_len % cols == col
                });
            }
        }
        MaskPurpose::IrMove => {
            let rows = packing.cell_rows();
            let cols = packing.cell_cols();
            let row_len = packing.grid_w * cols;
            let used = packing.planes * packing.plane_slots();
            emit("canonical".into(), &move |s: usize| {
                if s >= used {
                    return false;
                }
                let in_plane = s % (packing.plane_slots());
                let phys_row = in_plane / row_len;
                let phys_col = in_plane % row_len;
                phys_row % rows == 0 && phys_col % cols == 0
            });
        }
        MaskPurpose::Segment => {
            let seg_rows = packing.grid_h / packing.segments * packing.cell_rows();
            let row_len = packing.row_stride();
            let plane = packing.plane_slots();
            let used = packing.planes * plane;
            for seg in 0..packing.segments {
                emit(format!("segment_{seg}"), &move |s: usize| {
                    if s >= used {
                        return false;
                    }
                    let phys_row = s % plane / row_len;
                    phys_row / seg_rows == seg
                });
            }
        }
    }
    MaskSet { names, masks }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heslot::{HeParams, Mode};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn ctx(slots: usize) -> HeCtx {
        let mut p = HeParams::set_hyp();
        p.slot_count = slots;
        HeCtx::new(p, Mode::Full)
    }

    #[test]
    fn single_image_is_row_major() {
        let c = ctx(16);
        let t = Tensor::chw(1, 4, 4, (1..=16).map(|i| i as f64).collect());
        let p = Packing::image(4, 4);
        let packed = pack(&c, &t, &p, 6).unwrap();
        let vals = packed.cts[0].values().unwrap().to_vec();
        assert_eq!(&vals[..16], &(1..=16).map(|i| i as f64).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn scalar_tensor_lands_at_slot_zero() {
        let c = ctx(16);
        let t = Tensor::chw(1, 1, 1, vec![42.0]);
        let p = Packing::image(1, 1);
        let packed = pack(&c, &t, &p, 6).unwrap();
        let vals = packed.cts[0].values().unwrap();
        assert_eq!(vals[0], 42.0);
        assert!(vals[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pi_ca_roundtrip() {
        let c = ctx(32768);
        let mut rng = StdRng::seed_from_u64(2);
        let t = Tensor::chw(
            16,
            32,
            32,
            (0..16 * 1024).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let p = Packing::pi_ca(32768, 16, 32, 32, GapConfig::new(1, 2));
        assert_eq!(p.planes, 16);
        assert_eq!(p.ct_count(), 1);
        let packed = pack(&c, &t, &p, 6).unwrap();
        let back = unpack(&c, &packed).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn pi_ra_roundtrip_and_replicas_agree() {
        let c = ctx(32768);
        let mut rng = StdRng::seed_from_u64(3);
        let t = Tensor::chw(
            32,
            16,
            16,
            (0..32 * 256).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let p = Packing::pi_ra(32768, 32, 16, 16, GapConfig::new(2, 4));
        assert_eq!(p.channels_per_ct(), 4);
        assert_eq!(p.ct_count(), 8);
        let packed = pack(&c, &t, &p, 6).unwrap();
        // every replica of a channel decodes identically
        let vals = packed.cts[3].values().unwrap();
        for ch in 0..4 {
            for &(y, x) in &[(0usize, 0usize), (5, 7), (15, 15)] {
                let slots = p.replica_slots(ch, y, x);
                let v0 = vals[slots[0]];
                assert!(slots.iter().all(|&s| vals[s] == v0));
            }
        }
        let back = unpack(&c, &packed).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn multiplexed_cell_layout_matches_figure() {
        // 4 channels of 2x2 into one 4x4 grid: cell holds channels
        // row-major: a1^(1) a1^(2) / a1^(3) a1^(4).
        let c = ctx(16);
        let mut t = Tensor::zeros(vec![4, 2, 2]);
        for ch in 0..4 {
            for y in 0..2 {
                for x in 0..2 {
                    t.set3(ch, y, x, (ch + 1) as f64 + 10.0 * (y * 2 + x) as f64);
                }
            }
        }
        let packed = multiplexed_pack(&c, &t, 4, 1, 6).unwrap();
        let vals = packed.cts[0].values().unwrap();
        // top-left cell = pixel (0,0): channels 1..4 in row-major cell order
        assert_eq!(vals[0], 1.0);
        assert_eq!(vals[1], 2.0);
        assert_eq!(vals[4], 3.0);
        assert_eq!(vals[5], 4.0);
        // pixel (0,1) cell starts at column 2
        assert_eq!(vals[2], 11.0);
        assert_eq!(vals[3], 12.0);
    }

    #[test]
    fn multiplexed_pack_m1_equals_pack() {
        let c = ctx(32768);
        let mut rng = StdRng::seed_from_u64(4);
        let t = Tensor::chw(4, 8, 8, (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let a = multiplexed_pack(&c, &t, 1, 1, 6).unwrap();
        let p = Packing::pi_ca(32768, 4, 8, 8, GapConfig::new(1, 1));
        let b = pack(&c, &t, &p, 6).unwrap();
        for (x, y) in a.cts.iter().zip(&b.cts) {
            assert_eq!(x.values().unwrap(), y.values().unwrap());
        }
    }

    #[test]
    fn multiplexed_roundtrip_m4() {
        let c = ctx(32768);
        let mut rng = StdRng::seed_from_u64(5);
        let t = Tensor::chw(
            32,
            16,
            16,
            (0..32 * 256).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let packed = multiplexed_pack(&c, &t, 4, 4, 6).unwrap();
        let back = unpack(&c, &packed).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn prcr_format_splits_rows() {
        let f = DataFormat::parse("CA[64]H[224]W[224]Rg[1]Cg[1]").unwrap();
        let seg = prcr_format(&f, 8).unwrap();
        assert_eq!(seg.size_of(DimKind::S), Some(8));
        assert_eq!(seg.size_of(DimKind::Hp), Some(28));
        assert_eq!(seg.slots(), f.slots());
        assert!(prcr_format(&f, 9).is_err());
        assert_eq!(prcr_format(&f, 1).unwrap(), f);
    }

    #[test]
    fn prcr_roundtrip() {
        let c = ctx(32768);
        let mut rng = StdRng::seed_from_u64(6);
        let t = Tensor::chw(
            64,
            56,
            56,
            (0..64 * 56 * 56).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let p = Packing::pi_ca(32768, 64, 56, 56, GapConfig::new(1, 1))
            .with_segments(8)
            .unwrap();
        let packed = pack(&c, &t, &p, 6).unwrap();
        let back = unpack(&c, &packed).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn format_spec_string_roundtrip() {
        let p = Packing::pi_ca(32768, 32, 16, 16, GapConfig::new(2, 4));
        let f = p.format();
        let s = f.to_string();
        assert_eq!(s, "CA[16]H[16]W[16]Rg[4]Cg[2]");
        assert_eq!(DataFormat::parse(&s).unwrap(), f);
        assert!(DataFormat::parse("XX[3]").is_err());
    }

    #[test]
    fn gap_masks_partition_valid_region() {
        let c = ctx(32768);
        let p = Packing::pi_ca(32768, 16, 16, 16, GapConfig::new(2, 2));
        let set = build_masks(&c, &p, MaskPurpose::GapSelect, 6);
        assert_eq!(set.masks.len(), 2);
        let used = p.planes * p.plane_slots();
        let mut sum = vec![0.0; c.params.slot_count];
        for m in &set.masks {
            for (i, v) in m.values().unwrap().iter().enumerate() {
                sum[i] += v;
            }
        }
        assert!(sum[..used].iter().all(|&v| v == 1.0));
        assert!(sum[used..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn trivial_gap_mask_is_all_ones() {
        let c = ctx(32768);
        let p = Packing::pi_ca(32768, 16, 32, 32, GapConfig::new(1, 1));
        let set = build_masks(&c, &p, MaskPurpose::GapSelect, 6);
        assert_eq!(set.masks.len(), 1);
        let used = p.planes * p.plane_slots();
        let vals = set.masks[0].values().unwrap();
        assert!(vals[..used].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn gap_product_rule_walks_strides() {
        let mut g = GapConfig::new(1, 2);
        let mut product = g.m * g.d;
        for _ in 0..3 {
            g = g.after_stride2();
            assert_eq!(g.m * g.d, product * 4);
            product = g.m * g.d;
        }
    }
}
