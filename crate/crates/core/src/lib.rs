//! Desk-scale video-language multi-task harness.
//!
//! The crate is organised around a hierarchical video-language model: a
//! per-namespace video feature projection, a cross-modal transformer fusing
//! frames with subtitle text, a temporal transformer producing contextualized
//! video representations, and two interchangeable text-encoding front ends
//! (a plain embedding layer and a causal transformer text encoder). On top of
//! the backbone sit three task heads (retrieval, multiple-choice QA,
//! captioning), a finetuning-strategy engine, benchmark metrics with a
//! Meta-Ave aggregate, and a cross-task split-leakage auditor.
//!
//! Everything trains on the CPU in f64 via a small reverse-mode autodiff
//! graph ([`tensor`]), which keeps runs bit-deterministic for a given seed
//! and makes finite-difference gradient verification cheap.

pub mod audit;
pub mod backbone;
pub mod corpus;
pub mod fixtures;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod textenc;
pub mod trainer;
