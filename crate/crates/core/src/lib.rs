//! Triplet loss with teacher-distilled dynamic margins.
//!
//! A frozen teacher supplies, for each triplet, the gap between its
//! anchor–negative and anchor–positive distances. That gap is mapped
//! linearly onto `[m_min, m_max]` and used as the triplet's margin when
//! training a smaller student, so identities the teacher sees as similar
//! are pushed apart less than dissimilar ones.
//!
//! Modules: [`numerics`] (vector math, seeded RNG), [`loss`], [`teacher`],
//! [`data`] (synthetic identities, PK batches, mining), [`trainer`] (MLP,
//! SGD, training loops), [`eval`] (verification, structure correlation)
//! and [`cli`] (the `tdistill` pipeline).

pub mod cli;
pub mod data;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod loss;
pub mod numerics;
pub mod par;
pub mod teacher;
pub mod trainer;

pub use embedding::Embedder;
pub use error::{Error, Result};
