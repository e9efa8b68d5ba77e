//! Desk-scale sequence-to-sequence toolkit built around a cross-stream
//! visible n-stream decoder: one model supports autoregressive,
//! non-autoregressive, and semi-non-autoregressive generation from a
//! single set of weights.

pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod decoding;
pub mod masking;
pub mod model;
pub mod objectives;
pub mod train;
