//! Simulator and cost model for CNN inference over packed homomorphic
//! encryption.
//!
//! The crate models an RNS-CKKS-like backend at the slot level (no actual
//! cryptography): ciphertexts are vectors of `N/2` real slots with a
//! multiplicative level, and every homomorphic operation is metered in a
//! [`heslot::CostLedger`]. On top of the mock backend, [`hconv`] implements
//! the packed convolution algorithms (SISO, MP-Conv, channel-aligned and
//! replication-aligned convolutions with 2D gap packing, PRCR weight reuse),
//! [`network`] assembles full ResNet models and schedules bootstraps, and
//! [`costmodel`] provides the closed-form rotation/bootstrap/memory
//! accounting together with an exhaustive gap-plan search.
//!
//! Functional correctness is established against the plain-tensor reference
//! in [`oracle`]; operation counts are established against the closed forms
//! in [`costmodel`].

pub mod costmodel;
pub mod hconv;
pub mod heslot;
pub mod layout;
pub mod network;
pub mod oracle;

pub use heslot::{CipherSim, CostLedger, HeCtx, HeError, HeParams, Mode, OpClass, PlainSim, RotTag};
pub use layout::{DataFormat, GapConfig, PackedTensor};
