//! Desk-scale laboratory for masking policies in denoising sequence-to-sequence
//! language-model pre-training.
//!
//! The crate implements the full loop: a reverse-mode autodiff engine with
//! second-order support ([`diffcore`]), neural building blocks ([`nnblocks`]),
//! a synthetic annotated corpus ([`corpus`]), heuristic and learned masking
//! policies ([`masking`], [`policynets`]), a tiny GRU encoder-decoder LM
//! ([`lmodel`]), the training loops that tie them together ([`trainers`]),
//! mask-distribution analytics ([`analysis`]), and a reproducible experiment
//! driver ([`experiment`]).

pub mod analysis;
pub mod corpus;
pub mod diffcore;
pub mod experiment;
pub mod lmodel;
pub mod masking;
pub mod nnblocks;
pub mod policynets;
pub mod trainers;
