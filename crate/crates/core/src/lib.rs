//! Core data model and numerics for driving-model scaling experiments:
//! compute accounting, motion tokenization, the synthetic world, rollout
//! metrics, scaling-law fits and the closed-loop simulator.

pub mod closed_loop;
pub mod codec;
pub mod eval;
pub mod fit;
pub mod geometry;
pub mod ledger;
pub mod synth;

pub use codec::{Point, Token, TokenVocab};
pub use ledger::{ComputeBudget, ModelShape};
