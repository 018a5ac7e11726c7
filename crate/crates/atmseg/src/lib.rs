//! atmseg — anatomy-aware, text-guided multi-modal fusion for fine-grained
//! lumbar spine MRI segmentation.
//!
//! The crate is organized around the stages of the pipeline:
//!
//! - [`taxonomy`]: the 20-class anatomy table (background + VBs + IDs + SC).
//! - [`dataio`]: slice loading, preprocessing, stratified splits, elastic
//!   augmentation, and a synthetic phantom generator for desk-scale runs.
//! - [`atpg`]: anatomy-aware text prompt generation (holistic + per-channel).
//! - [`encoders`]: the visual feature pyramid and text token embeddings, each
//!   behind a backend enum with a deterministic `tiny` implementation.
//! - [`hasf`]: holistic semantic fusion — per-stage self/cross attention over
//!   the decoder, plus the Dice+Focal segmentation loss.
//! - [`ccae`]: channel-wise contrastive alignment (symmetric InfoNCE) and the
//!   total training objective.
//! - [`metrics`]: DSC / Jaccard / HD95 / ASD with NaN-exclusion aggregation,
//!   backed by a brute-force oracle.
//! - [`harness`]: run configs, the training loop, checkpoints, ablations.
//!
//! The `nn` module is the small f64 reverse-mode tape the model runs on, and
//! `archive` is the named-array container used for checkpoints and packed
//! volumes. See the `examples/` directory for runnable entry points into each
//! capability; the `atmseg` binary exposes the same flows as subcommands.

pub mod archive;
pub mod atpg;
pub mod ccae;
pub mod dataio;
pub mod encoders;
pub mod error;
pub mod harness;
pub mod hasf;
pub mod metrics;
pub mod nn;
pub mod taxonomy;

pub use error::{AtmError, Result};
