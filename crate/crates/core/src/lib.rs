//! Latent-alignment models for non-autoregressive sequence transduction.
//!
//! CTC marginalizes all monotonic alignments of a target under a per-frame
//! independent model; the Imputer additionally conditions each frame on a
//! partially observed alignment and decodes iteratively. Both losses are
//! exact dynamic programs over the blank-augmented target lattice.

pub mod alignment;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod ctc;
pub mod data;
pub mod error;
pub mod eval;
pub mod imputer;
pub mod io;
pub mod model;
pub mod oracle;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use alignment::{
    collapse, count_alignments, enumerate_alignments, sample_mask, Alignment, MaskPolicy,
    PartialAlignment, TokenSeq, Vocab, BLANK,
};
pub use ctc::{ctc_greedy_decode, ctc_loss, LogitLattice, LossOutput};
pub use error::{Error, Result};
pub use imputer::{imputer_decode, imputer_loss, rollin_alignment, DecodeOutput, DecodeSchedule};
