//! Combinatorial LMSR prediction markets over networks of contestable
//! propositions.

// `!(x > 0)` is deliberate: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod leverage;
pub mod lmsr;
pub mod programmable;
pub mod report;
pub mod scalar;
pub mod scenario;
pub mod security;
pub mod segmentation;
pub mod structure;

pub use lmsr::{Account, MarketError, MarketState, TradeReceipt, TraderId};
pub use scalar::Scalar;
pub use security::{Literal, Security, SecurityError};
pub use structure::{
    Assignment, CarrollStructure, OutcomeSpace, PropId, PropKind, Proposition, Relation,
    StructureError,
};

pub type Market = MarketState<f64>;
pub type MarketF32 = MarketState<f32>;
