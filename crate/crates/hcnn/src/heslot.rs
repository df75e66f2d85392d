//! Mock leveled-HE backend: slot-wise arithmetic, cyclic rotation,
//! rescale/level semantics and bootstrap-as-refresh, with exact cost
//! accounting.
//!
//! Arithmetic is exact `f64`; no noise is modeled. The backend runs in one
//! of two modes: `Full` materializes every slot vector, `Trace` carries
//! shapes/levels only. Replaying the same operation sequence in either mode
//! produces identical ledgers.

use std::fmt;
use std::sync::Mutex;

/// Operation classes metered by the ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpClass {
    AddPt,
    AddCt,
    MulPt,
    MulCt,
    Rescale,
    PRot,
    CRot,
    Boot,
}

impl OpClass {
    pub const ALL: [OpClass; 8] = [
        OpClass::AddPt,
        OpClass::AddCt,
        OpClass::MulPt,
        OpClass::MulCt,
        OpClass::Rescale,
        OpClass::PRot,
        OpClass::CRot,
        OpClass::Boot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpClass::AddPt => "AddPt",
            OpClass::AddCt => "AddCt",
            OpClass::MulPt => "MulPt",
            OpClass::MulCt => "MulCt",
            OpClass::Rescale => "Rescale",
            OpClass::PRot => "PRot",
            OpClass::CRot => "CRot",
            OpClass::Boot => "Boot",
        }
    }

    fn index(self) -> usize {
        match self {
            OpClass::AddPt => 0,
            OpClass::AddCt => 1,
            OpClass::MulPt => 2,
            OpClass::MulCt => 3,
            OpClass::Rescale => 4,
            OpClass::PRot => 5,
            OpClass::CRot => 6,
            OpClass::Boot => 7,
        }
    }
}

/// Context tag recorded for every ciphertext rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RotTag {
    /// Image sliding inside SISO.
    Slide,
    /// Rotate-and-sum over aligned channel planes.
    RaS,
    /// Rotate-and-sum inside the gap.
    RaSGap,
    /// Image realigning between formats.
    Ir,
    /// Gap-structure maintenance between formats.
    IrGap,
    /// Anything outside the convolution path (pooling, FC, stem of
    /// ImageNet models).
    Other,
}

impl RotTag {
    pub const ALL: [RotTag; 6] = [
        RotTag::Slide,
        RotTag::RaS,
        RotTag::RaSGap,
        RotTag::Ir,
        RotTag::IrGap,
        RotTag::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RotTag::Slide => "Slide",
            RotTag::RaS => "RaS",
            RotTag::RaSGap => "RaS_g",
            RotTag::Ir => "IR",
            RotTag::IrGap => "IR_g",
            RotTag::Other => "Other",
        }
    }
}

/// One logged ciphertext rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RotEntry {
    pub amount: i64,
    pub tag: RotTag,
}

/// Error type for backend operations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HeError {
    LevelMismatch { left: u32, right: u32 },
    ShapeMismatch { left: usize, right: usize },
    LevelExhausted,
    InvalidTarget { level: u32, target: u32 },
    NotRescaled,
    InvalidParams(String),
}

impl fmt::Display for HeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeError::LevelMismatch { left, right } => {
                write!(f, "operand levels differ: {left} vs {right}")
            }
            HeError::ShapeMismatch { left, right } => {
                write!(f, "slot counts differ: {left} vs {right}")
            }
            HeError::LevelExhausted => write!(f, "multiplicative level exhausted"),
            HeError::InvalidTarget { level, target } => {
                write!(f, "level_down target {target} above current level {level}")
            }
            HeError::NotRescaled => write!(f, "ciphertext is not marked needs-rescale"),
            HeError::InvalidParams(msg) => write!(f, "invalid parameters: {msg}"),
        }
    }
}

impl std::error::Error for HeError {}

pub type Result<T> = std::result::Result<T, HeError>;

/// FHE parameter set. Sizes are quoted at the post-bootstrap level, matching
/// how the reference parameter table reports them.
#[derive(Debug, Clone, PartialEq)]
pub struct HeParams {
    pub slot_count: usize,
    /// Maximum level L.
    pub max_level: u32,
    /// Usable level L' restored by bootstrapping.
    pub usable_level: u32,
    pub dnum: u32,
    pub ct_bytes: u64,
    pub pt_bytes: u64,
    pub evk_bytes: u64,
}

impl HeParams {
    /// Parameter set used by the hybrid-packing construction: L+1 = 24,
    /// L' = 6, dnum = 6, ct 10 MB, pt 5 MB, evk 168 MB.
    pub fn set_hyp() -> Self {
        HeParams {
            slot_count: 32768,
            max_level: 23,
            usable_level: 6,
            dnum: 6,
            ct_bytes: 10 * MIB,
            pt_bytes: 5 * MIB,
            evk_bytes: 168 * MIB,
        }
    }

    /// Parameter set of the high-degree-activation baseline: L+1 = 32,
    /// L' = 16, dnum = 32, ct 17 MB, pt 8.5 MB, evk 1056 MB.
    pub fn set_lc() -> Self {
        HeParams {
            slot_count: 32768,
            max_level: 31,
            usable_level: 16,
            dnum: 32,
            ct_bytes: 17 * MIB,
            pt_bytes: 8 * MIB + MIB / 2,
            evk_bytes: 1056 * MIB,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.slot_count.is_power_of_two() {
            return Err(HeError::InvalidParams(format!(
                "slot_count {} is not a power of two",
                self.slot_count
            )));
        }
        if self.usable_level == 0 || self.usable_level > self.max_level {
            return Err(HeError::InvalidParams(format!(
                "usable level {} outside 1..={}",
                self.usable_level, self.max_level
            )));
        }
        if self.ct_bytes == 0 || self.pt_bytes == 0 || self.evk_bytes == 0 {
            return Err(HeError::InvalidParams("object sizes must be positive".into()));
        }
        Ok(())
    }

    /// Parse a flat `key = value` description. Unknown keys are rejected.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut p = HeParams::set_hyp();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with('[') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                HeError::InvalidParams(format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let parse = |v: &str| -> Result<u64> {
                v.parse::<u64>()
                    .map_err(|_| HeError::InvalidParams(format!("bad value for {key}: {v}")))
            };
            match key {
                "slot_count" => p.slot_count = parse(value)? as usize,
                "max_level" => p.max_level = parse(value)? as u32,
                "usable_level" => p.usable_level = parse(value)? as u32,
                "dnum" => p.dnum = parse(value)? as u32,
                "ct_bytes" => p.ct_bytes = parse(value)?,
                "pt_bytes" => p.pt_bytes = parse(value)?,
                "evk_bytes" => p.evk_bytes = parse(value)?,
                other => {
                    return Err(HeError::InvalidParams(format!("unknown key {other}")));
                }
            }
        }
        p.validate()?;
        Ok(p)
    }

    /// Bytes of one ciphertext at the given level under the linear-in-level
    /// approximation (sizes in the parameter table are quoted at L').
    pub fn ct_bytes_at(&self, level: u32) -> u64 {
        scale_bytes(self.ct_bytes, level, self.usable_level)
    }

    pub fn pt_bytes_at(&self, level: u32) -> u64 {
        scale_bytes(self.pt_bytes, level, self.usable_level)
    }
}

const MIB: u64 = 1 << 20;

fn scale_bytes(quoted: u64, level: u32, quoted_level: u32) -> u64 {
    (quoted as u128 * (level as u128 + 1) / (quoted_level as u128 + 1)) as u64
}

/// Execution mode of the backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Slot vectors are materialized and every operation computes them.
    Full,
    /// Only shapes, levels and costs are tracked.
    Trace,
}

/// Per-run cost ledger: operation counters, rotation log and memory gauges.
#[derive(Debug, Clone, Default)]
pub struct CostLedger {
    counts: [u64; 8],
    pub rotation_log: Vec<RotEntry>,
    /// Cumulative bytes of ciphertexts produced by backend ops.
    pub ct_bytes_created: u64,
    /// Cumulative bytes of plaintexts produced by `encode`.
    pub pt_bytes_created: u64,
    /// Externally managed gauge of live ciphertexts (see `note_ct_alloc`).
    live_cts: i64,
    pub peak_live_cts: i64,
}

impl CostLedger {
    pub fn count(&self, op: OpClass) -> u64 {
        self.counts[op.index()]
    }

    pub fn counts_by_tag(&self, tag: RotTag) -> u64 {
        self.rotation_log.iter().filter(|e| e.tag == tag).count() as u64
    }

    /// Total ciphertext rotations on the convolution path (everything but
    /// `Other`).
    pub fn conv_rotations(&self) -> u64 {
        self.rotation_log
            .iter()
            .filter(|e| e.tag != RotTag::Other)
            .count() as u64
    }

    fn bump(&mut self, op: OpClass) {
        self.counts[op.index()] += 1;
    }

    pub fn note_ct_alloc(&mut self, n: i64) {
        self.live_cts += n;
        if self.live_cts > self.peak_live_cts {
            self.peak_live_cts = self.live_cts;
        }
    }

    pub fn note_ct_free(&mut self, n: i64) {
        self.live_cts -= n;
    }

    pub fn live_cts(&self) -> i64 {
        self.live_cts
    }

    /// Rotations whose raw amount is zero; kept for the scheduling lint.
    pub fn zero_rotations(&self) -> usize {
        self.rotation_log.iter().filter(|e| e.amount == 0).count()
    }
}

/// Message payload: one real value per slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotVec(pub Vec<f64>);

/// Mock ciphertext: optional payload plus level bookkeeping.
#[derive(Debug, Clone)]
pub struct CipherSim {
    payload: Option<SlotVec>,
    level: u32,
    needs_rescale: bool,
}

impl CipherSim {
    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn needs_rescale(&self) -> bool {
        self.needs_rescale
    }

    pub fn values(&self) -> Option<&[f64]> {
        self.payload.as_ref().map(|s| s.0.as_slice())
    }
}

/// Mock plaintext.
#[derive(Debug, Clone)]
pub struct PlainSim {
    payload: Option<SlotVec>,
    level: u32,
}

impl PlainSim {
    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn values(&self) -> Option<&[f64]> {
        self.payload.as_ref().map(|s| s.0.as_slice())
    }
}

/// Backend context: parameters, mode and the shared ledger.
///
/// Operations are pure in their ciphertext arguments; the ledger is the only
/// mutable state and its appends are serialized behind a mutex, so
/// independent ciphertext operations may run in parallel. Single-threaded
/// use is the reference for determinism.
pub struct HeCtx {
    pub params: HeParams,
    mode: Mode,
    ledger: Mutex<CostLedger>,
}

impl HeCtx {
    pub fn new(params: HeParams, mode: Mode) -> Self {
        params.validate().expect("invalid backend parameters");
        HeCtx {
            params,
            mode,
            ledger: Mutex::new(CostLedger::default()),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn ledger(&self) -> CostLedger {
        self.ledger.lock().unwrap().clone()
    }

    pub fn reset_ledger(&self) {
        *self.ledger.lock().unwrap() = CostLedger::default();
    }

    pub fn with_ledger<R>(&self, f: impl FnOnce(&mut CostLedger) -> R) -> R {
        f(&mut self.ledger.lock().unwrap())
    }

    fn n(&self) -> usize {
        self.params.slot_count
    }

    // ---- client-side encode/encrypt (free in the ledger) -----------------

    /// Encode a message at the given level. Client-side; not metered except
    /// for the cumulative plaintext byte gauge.
    pub fn encode(&self, values: &[f64], level: u32) -> PlainSim {
        assert!(values.len() <= self.n(), "message longer than slot count");
        let payload = match self.mode {
            Mode::Full => {
                let mut v = values.to_vec();
                v.resize(self.n(), 0.0);
                Some(SlotVec(v))
            }
            Mode::Trace => None,
        };
        self.ledger.lock().unwrap().pt_bytes_created += self.params.pt_bytes_at(level);
        PlainSim { payload, level }
    }

    /// Encrypt a message at the given level. Client-side; free.
    pub fn encrypt(&self, values: &[f64], level: u32) -> CipherSim {
        assert!(level <= self.params.max_level);
        let payload = match self.mode {
            Mode::Full => {
                let mut v = values.to_vec();
                v.resize(self.n(), 0.0);
                Some(SlotVec(v))
            }
            Mode::Trace => None,
        };
        CipherSim {
            payload,
            level,
            needs_rescale: false,
        }
    }

    /// Trace-mode ciphertext of a given level (shape only).
    pub fn encrypt_trace(&self, level: u32) -> CipherSim {
        CipherSim {
            payload: None,
            level,
            needs_rescale: false,
        }
    }

    /// Decrypt; returns `None` in trace mode.
    pub fn decrypt(&self, ct: &CipherSim) -> Option<Vec<f64>> {
        ct.payload.as_ref().map(|s| s.0.clone())
    }

    // ---- metered server-side operations ----------------------------------

    pub fn add_ct(&self, a: &CipherSim, b: &CipherSim) -> Result<CipherSim> {
        if a.level != b.level {
            return Err(HeError::LevelMismatch {
                left: a.level,
                right: b.level,
            });
        }
        let payload = self.zip(a.payload.as_ref(), b.payload.as_ref(), |x, y| x + y)?;
        self.ledger.lock().unwrap().bump(OpClass::AddCt);
        Ok(CipherSim {
            payload,
            level: a.level,
            needs_rescale: a.needs_rescale || b.needs_rescale,
        })
    }

    pub fn add_pt(&self, a: &CipherSim, p: &PlainSim) -> Result<CipherSim> {
        if a.level != p.level {
            return Err(HeError::LevelMismatch {
                left: a.level,
                right: p.level,
            });
        }
        let payload = self.zip(a.payload.as_ref(), p.payload.as_ref(), |x, y| x + y)?;
        self.ledger.lock().unwrap().bump(OpClass::AddPt);
        Ok(CipherSim {
            payload,
            level: a.level,
            needs_rescale: a.needs_rescale,
        })
    }

    pub fn mul_pt(&self, a: &CipherSim, p: &PlainSim) -> Result<CipherSim> {
        if a.level != p.level {
            return Err(HeError::LevelMismatch {
                left: a.level,
                right: p.level,
            });
        }
        if a.level == 0 {
            return Err(HeError::LevelExhausted);
        }
        let payload = self.zip(a.payload.as_ref(), p.payload.as_ref(), |x, y| x * y)?;
        self.ledger.lock().unwrap().bump(OpClass::MulPt);
        Ok(CipherSim {
            payload,
            level: a.level,
            needs_rescale: true,
        })
    }

    pub fn mul_ct(&self, a: &CipherSim, b: &CipherSim) -> Result<CipherSim> {
        if a.level != b.level {
            return Err(HeError::LevelMismatch {
                left: a.level,
                right: b.level,
            });
        }
        if a.level == 0 {
            return Err(HeError::LevelExhausted);
        }
        let payload = self.zip(a.payload.as_ref(), b.payload.as_ref(), |x, y| x * y)?;
        self.ledger.lock().unwrap().bump(OpClass::MulCt);
        Ok(CipherSim {
            payload,
            level: a.level,
            needs_rescale: true,
        })
    }

    /// Drop one level after a multiplication. Values are unchanged (no noise
    /// model).
    pub fn rescale(&self, a: &CipherSim) -> Result<CipherSim> {
        if !a.needs_rescale {
            return Err(HeError::NotRescaled);
        }
        if a.level == 0 {
            return Err(HeError::LevelExhausted);
        }
        self.ledger.lock().unwrap().bump(OpClass::Rescale);
        Ok(CipherSim {
            payload: a.payload.clone(),
            level: a.level - 1,
            needs_rescale: false,
        })
    }

    /// Cyclic left rotation by `r` slots (negative `r` rotates right).
    /// Always metered and logged, including `r == 0`.
    pub fn crot(&self, a: &CipherSim, r: i64, tag: RotTag) -> CipherSim {
        let payload = a.payload.as_ref().map(|s| SlotVec(rotate(&s.0, r)));
        let mut led = self.ledger.lock().unwrap();
        led.bump(OpClass::CRot);
        led.rotation_log.push(RotEntry { amount: r, tag });
        CipherSim {
            payload,
            level: a.level,
            needs_rescale: a.needs_rescale,
        }
    }

    /// Plaintext rotation; cheap, metered under `PRot` without a log entry.
    pub fn prot(&self, p: &PlainSim, r: i64) -> PlainSim {
        let payload = p.payload.as_ref().map(|s| SlotVec(rotate(&s.0, r)));
        self.ledger.lock().unwrap().bump(OpClass::PRot);
        PlainSim {
            payload,
            level: p.level,
        }
    }

    /// Refresh the level to L'. Values unchanged; internal rotations are not
    /// part of the convolution ledger (Boot is its own counter).
    pub fn bootstrap(&self, a: &CipherSim) -> CipherSim {
        self.ledger.lock().unwrap().bump(OpClass::Boot);
        CipherSim {
            payload: a.payload.clone(),
            level: self.params.usable_level,
            needs_rescale: false,
        }
    }

    /// Drop to a lower level without cost (modeled free).
    pub fn level_down(&self, a: &CipherSim, target: u32) -> Result<CipherSim> {
        if target > a.level {
            return Err(HeError::InvalidTarget {
                level: a.level,
                target,
            });
        }
        Ok(CipherSim {
            payload: a.payload.clone(),
            level: target,
            needs_rescale: a.needs_rescale,
        })
    }

    // ---- scheduling helpers ----------------------------------------------

    /// Meter rotations that a schedule performs as part of format
    /// maintenance. Each entry is logged exactly like `crot`; the value
    /// rearrangement itself is applied by the caller via [`HeCtx::assemble`].
    pub(crate) fn charge_crot(&self, amount: i64, tag: RotTag) {
        let mut led = self.ledger.lock().unwrap();
        led.bump(OpClass::CRot);
        led.rotation_log.push(RotEntry { amount, tag });
    }

    pub(crate) fn charge_prot(&self, n: u64) {
        let mut led = self.ledger.lock().unwrap();
        for _ in 0..n {
            led.bump(OpClass::PRot);
        }
    }

    /// Build a ciphertext by gathering slots from source ciphertexts
    /// according to `plan`: `(dst_slot, src_index, src_slot)`. Slots not
    /// named in the plan are zero. All sources must share a level.
    ///
    /// This is the value-movement companion of `charge_crot`: schedules call
    /// it for mask-and-rotate format maintenance after metering the
    /// rotations the maintenance costs under the reference accounting.
    pub(crate) fn assemble(
        &self,
        sources: &[&CipherSim],
        plan: &[(usize, usize, usize)],
    ) -> Result<CipherSim> {
        assert!(!sources.is_empty());
        let level = sources[0].level;
        for s in sources {
            if s.level != level {
                return Err(HeError::LevelMismatch {
                    left: level,
                    right: s.level,
                });
            }
        }
        let payload = match self.mode {
            Mode::Trace => None,
            Mode::Full => {
                let mut out = vec![0.0; self.n()];
                for &(dst, si, src) in plan {
                    let sv = sources[si]
                        .payload
                        .as_ref()
                        .expect("full-mode ciphertext without payload");
                    out[dst] = sv.0[src];
                }
                Some(SlotVec(out))
            }
        };
        Ok(CipherSim {
            payload,
            level,
            needs_rescale: sources.iter().any(|s| s.needs_rescale),
        })
    }

    fn zip(
        &self,
        a: Option<&SlotVec>,
        b: Option<&SlotVec>,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Option<SlotVec>> {
        match (a, b) {
            (Some(x), Some(y)) => {
                if x.0.len() != y.0.len() {
                    return Err(HeError::ShapeMismatch {
                        left: x.0.len(),
                        right: y.0.len(),
                    });
                }
                Ok(Some(SlotVec(
                    x.0.iter().zip(&y.0).map(|(&u, &v)| f(u, v)).collect(),
                )))
            }
            (None, None) => Ok(None),
            // Mixing a materialized operand with a trace operand loses the
            // payload; treated as trace.
            _ => Ok(None),
        }
    }
}

fn rotate(v: &[f64], r: i64) -> Vec<f64> {
    let n = v.len() as i64;
    let shift = r.rem_euclid(n) as usize;
    let mut out = Vec::with_capacity(v.len());
    out.extend_from_slice(&v[shift..]);
    out.extend_from_slice(&v[..shift]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx() -> HeCtx {
        let mut p = HeParams::set_hyp();
        p.slot_count = 16;
        HeCtx::new(p, Mode::Full)
    }

    fn ct(ctx: &HeCtx, values: &[f64], level: u32) -> CipherSim {
        ctx.encrypt(values, level)
    }

    #[test]
    fn add_ct_is_elementwise() {
        let c = ctx();
        let a = ct(&c, &[1.0, 2.0, 3.0], 3);
        let b = ct(&c, &[3.0, 4.0, 5.0], 3);
        let s = c.add_ct(&a, &b).unwrap();
        assert_eq!(&s.values().unwrap()[..3], &[4.0, 6.0, 8.0]);
        assert_eq!(s.level(), 3);
        assert_eq!(c.ledger().count(OpClass::AddCt), 1);
    }

    #[test]
    fn add_ct_zero_is_identity() {
        let c = ctx();
        let a = ct(&c, &[5.0, -1.0], 2);
        let z = ct(&c, &[], 2);
        let s = c.add_ct(&a, &z).unwrap();
        assert_eq!(s.values().unwrap(), a.values().unwrap());
    }

    #[test]
    fn add_ct_level_mismatch() {
        let c = ctx();
        let a = ct(&c, &[1.0], 3);
        let b = ct(&c, &[1.0], 2);
        assert!(matches!(
            c.add_ct(&a, &b),
            Err(HeError::LevelMismatch { left: 3, right: 2 })
        ));
    }

    #[test]
    fn mul_pt_identity_and_mask() {
        let c = ctx();
        let a = ct(&c, &[1.0, 2.0, 3.0, 4.0], 4);
        let ones = c.encode(&[1.0; 16], 4);
        let m = c.mul_pt(&a, &ones).unwrap();
        assert_eq!(&m.values().unwrap()[..4], &[1.0, 2.0, 3.0, 4.0]);
        assert!(m.needs_rescale());

        let mask = c.encode(&[1.0, 0.0, 1.0, 0.0], 4);
        let m = c.mul_pt(&a, &mask).unwrap();
        assert_eq!(&m.values().unwrap()[..4], &[1.0, 0.0, 3.0, 0.0]);
    }

    #[test]
    fn mul_at_level_zero_fails() {
        let c = ctx();
        let a = ct(&c, &[1.0], 0);
        let p = c.encode(&[1.0], 0);
        assert!(matches!(c.mul_pt(&a, &p), Err(HeError::LevelExhausted)));
    }

    #[test]
    fn rescale_drops_one_level() {
        let c = ctx();
        let a = ct(&c, &[2.0], 6);
        let p = c.encode(&[3.0], 6);
        let m = c.mul_pt(&a, &p).unwrap();
        let r = c.rescale(&m).unwrap();
        assert_eq!(r.level(), 5);
        assert_eq!(r.values().unwrap()[0], 6.0);
        // not marked needs-rescale anymore
        assert!(matches!(c.rescale(&r), Err(HeError::NotRescaled)));
    }

    #[test]
    fn mul_rescale_chain_exhausts_at_usable_level() {
        let c = ctx();
        let lp = c.params.usable_level;
        let mut a = ct(&c, &[1.0], lp);
        for _ in 0..lp {
            let p = c.encode(&[1.0], a.level());
            a = c.rescale(&c.mul_pt(&a, &p).unwrap()).unwrap();
        }
        assert_eq!(a.level(), 0);
        let p = c.encode(&[1.0], 0);
        assert!(matches!(c.mul_pt(&a, &p), Err(HeError::LevelExhausted)));
    }

    #[test]
    fn crot_unit_shift() {
        let c = ctx();
        let a = ct(&c, &[1.0, 2.0, 3.0, 4.0], 1);
        let r = c.crot(&a, 1, RotTag::Slide);
        assert_eq!(&r.values().unwrap()[..3], &[2.0, 3.0, 4.0]);
        assert_eq!(r.values().unwrap()[15], 1.0);
    }

    #[test]
    fn crot_zero_still_counts() {
        let c = ctx();
        let a = ct(&c, &[1.0], 1);
        let r = c.crot(&a, 0, RotTag::Other);
        assert_eq!(r.values().unwrap(), a.values().unwrap());
        let led = c.ledger();
        assert_eq!(led.count(OpClass::CRot), 1);
        assert_eq!(led.zero_rotations(), 1);
    }

    #[test]
    fn crot_roundtrip() {
        let c = ctx();
        let vals: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let a = ct(&c, &vals, 1);
        for r in [1i64, 3, 7, 15] {
            let out = c.crot(&c.crot(&a, r, RotTag::Other), 16 - r, RotTag::Other);
            assert_eq!(out.values().unwrap(), a.values().unwrap());
        }
    }

    #[test]
    fn prot_mirrors_crot() {
        let c = ctx();
        let p = c.encode(&[1.0, 2.0, 3.0, 4.0], 1);
        let r = c.prot(&p, 1);
        assert_eq!(&r.values().unwrap()[..3], &[2.0, 3.0, 4.0]);
        assert_eq!(c.ledger().count(OpClass::PRot), 1);
        assert_eq!(c.ledger().count(OpClass::CRot), 0);
    }

    #[test]
    fn bootstrap_refreshes_level_and_keeps_values() {
        let c = ctx();
        let a = ct(&c, &[1.5, -2.5], 0);
        let b = c.bootstrap(&a);
        assert_eq!(b.level(), c.params.usable_level);
        assert_eq!(b.values().unwrap(), a.values().unwrap());
        let early = ct(&c, &[1.0], 2);
        assert_eq!(c.bootstrap(&early).level(), c.params.usable_level);
        assert_eq!(c.ledger().count(OpClass::Boot), 2);
    }

    #[test]
    fn level_down_rules() {
        let c = ctx();
        let a = ct(&c, &[1.0], 5);
        assert_eq!(c.level_down(&a, 3).unwrap().level(), 3);
        assert_eq!(c.level_down(&a, 5).unwrap().level(), 5);
        let low = ct(&c, &[1.0], 2);
        assert!(matches!(
            c.level_down(&low, 4),
            Err(HeError::InvalidTarget { level: 2, target: 4 })
        ));
    }

    #[test]
    fn trace_and_full_ledgers_match() {
        let run = |mode: Mode| {
            let mut p = HeParams::set_hyp();
            p.slot_count = 16;
            let c = HeCtx::new(p, mode);
            let a = c.encrypt(&[1.0, 2.0], 6);
            let b = c.encrypt(&[0.5, 0.5], 6);
            let s = c.add_ct(&a, &b).unwrap();
            let m = c.mul_ct(&s, &s).unwrap();
            let r = c.rescale(&m).unwrap();
            let r = c.crot(&r, 3, RotTag::RaS);
            let _ = c.bootstrap(&r);
            c.ledger()
        };
        let full = run(Mode::Full);
        let trace = run(Mode::Trace);
        for op in OpClass::ALL {
            assert_eq!(full.count(op), trace.count(op), "{}", op.name());
        }
        assert_eq!(full.rotation_log, trace.rotation_log);
    }

    #[test]
    fn rotation_log_matches_crot_count() {
        let c = ctx();
        let a = ct(&c, &[1.0], 1);
        let _ = c.crot(&a, 2, RotTag::RaS);
        let _ = c.crot(&a, -5, RotTag::IrGap);
        c.charge_crot(7, RotTag::Ir);
        let led = c.ledger();
        assert_eq!(led.rotation_log.len() as u64, led.count(OpClass::CRot));
    }

    #[test]
    fn presets_match_parameter_table() {
        let hyp = HeParams::set_hyp();
        assert_eq!(hyp.max_level + 1, 24);
        assert_eq!(hyp.usable_level, 6);
        assert_eq!(hyp.dnum, 6);
        assert_eq!(hyp.ct_bytes, 10 << 20);
        assert_eq!(hyp.evk_bytes, 168 << 20);
        let lc = HeParams::set_lc();
        assert_eq!(lc.max_level + 1, 32);
        assert_eq!(lc.usable_level, 16);
        assert_eq!(lc.dnum, 32);
        assert_eq!(lc.ct_bytes, 17 << 20);
    }

    #[test]
    fn params_from_kv() {
        let p = HeParams::from_kv("slot_count = 8192\nusable_level = 4\n").unwrap();
        assert_eq!(p.slot_count, 8192);
        assert_eq!(p.usable_level, 4);
        assert!(HeParams::from_kv("slot_count = 100\n").is_err());
        assert!(HeParams::from_kv("bogus = 1\n").is_err());
    }
}
