//! A toolchain for a linear lambda calculus with quantum control:
//! type checking, evaluation and denotational semantics.

pub mod config_eval;
pub mod error;
pub mod frontend;
pub mod main_core;
pub mod mixed_denot;
pub mod pure_check;
pub mod pure_core;
pub mod pure_denot;
pub mod pure_eval;
