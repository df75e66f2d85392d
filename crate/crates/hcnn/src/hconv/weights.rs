//! Filter weight handling: kernel storage, output-group placement and the
//! PRCR fragment-reuse bookkeeping.

use crate::heslot::HeCtx;
use crate::oracle::ConvKernel;

/// How the filter plaintexts are laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightLayout {
    /// One plaintext per (pass, tap, input ciphertext); filter element or
    /// zero per slot.
    Standard,
    /// Plaintexts pre-rotated by minus the slide amount so multiplication
    /// happens before sliding (reordered schedules).
    InverseRotated,
    /// Fragment-sized plaintexts with output groups placed circularly,
    /// reused across segments through plaintext rotation.
    Prcr { segments: usize },
}

/// Weights of one convolution layer plus their plaintext layout.
pub struct LayerWeights {
    kernel: ConvKernel,
    bias: Option<Vec<f64>>,
    layout: WeightLayout,
}

impl LayerWeights {
    pub fn new(kernel: ConvKernel, bias: Option<Vec<f64>>, layout: WeightLayout) -> Self {
        if let Some(b) = &bias {
            assert_eq!(b.len(), kernel.c_o);
        }
        LayerWeights {
            kernel,
            bias,
            layout,
        }
    }

    pub fn standard(kernel: ConvKernel) -> Self {
        LayerWeights::new(kernel, None, WeightLayout::Standard)
    }

    pub fn layout(&self) -> WeightLayout {
        self.layout
    }

    pub fn kernel(&self) -> &ConvKernel {
        &self.kernel
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn entry(&self, o: usize, i: usize, j1: usize, j2: usize) -> f64 {
        self.kernel.at(o, i, j1, j2)
    }

    pub fn segments(&self) -> usize {
        match self.layout {
            WeightLayout::Prcr { segments } => segments,
            _ => 1,
        }
    }

    /// Output channel group computed by `pass` at row segment `seg`.
    /// Standard layouts assign group = pass uniformly; PRCR places groups
    /// circularly so one fragment plaintext serves every segment.
    pub fn group_of(&self, pass: usize, seg: usize) -> usize {
        match self.layout {
            WeightLayout::Prcr { segments } => {
                let cycle = pass / segments;
                let k = pass % segments;
                cycle * segments + (seg + k) % segments
            }
            _ => pass,
        }
    }

    /// Meter the plaintext rotations of one pass: reuses beyond the first
    /// in a PRCR cycle rotate each base fragment once per (tap, input).
    pub fn charge_pass_rotations(&self, ctx: &HeCtx, pass: usize, taps: usize, n_inputs: usize) {
        if let WeightLayout::Prcr { segments } = self.layout {
            if pass % segments != 0 {
                ctx.charge_prot((taps * n_inputs) as u64);
            }
        }
    }

    /// Weight-plaintext slot footprint of this layer (PRCR divides by the
    /// segment count).
    pub fn plaintext_slots(&self, w_i: usize, h_i: usize) -> u64 {
        crate::costmodel::conv_weight_slots(
            w_i,
            h_i,
            self.kernel.f,
            self.kernel.c_i,
            self.kernel.c_o,
            self.segments(),
        )
    }
}
