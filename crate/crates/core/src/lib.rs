//! Soft-pattern (weighted finite-state) encoders for character-level
//! morphology, with a BiLSTM baseline, Luong-attention decoder, training
//! harness and a positional-Jaccard model similarity analysis.

pub mod data;
pub mod gradcheck;
pub mod params;
pub mod seq2seq;
pub mod similarity;
pub mod sopa;
pub mod tensor;
pub mod trainer;
