//! gemfuse: sensor-aware multi-modal fusion for 2D object detection, desk scale.
//!
//! The crate is organized around six subsystems:
//!
//! - [`tensorcore`]: dense f64 tensors with tape-based reverse-mode autodiff,
//!   including a stop-gradient node.
//! - [`fusion`]: per-modality feature extraction, sensor-certainty estimation
//!   (scalar weights and spatial masks), and the five fusion operators
//!   (weighted average/concat, masked average/concat, stochastic selection).
//! - [`detmini`]: a miniature transformer encoder-decoder detection head with
//!   learned object queries, Hungarian set matching, set loss, and a plain
//!   gradient-descent training loop.
//! - [`preproc`]: r-blended hybrid depth, homography estimation (normalized
//!   DLT) with image warping, and random-shadows-and-highlights corruption.
//! - [`dataeval`]: a synthetic two-modality dataset generator plus the
//!   detection evaluation protocol (IoU, per-class AP@0.5, mAP, multi-trial
//!   corruption averaging).
//! - [`cli`]: the `gemfuse` command-line entry point wiring everything
//!   together behind a declarative JSON configuration.

pub mod cli;
pub mod dataeval;
pub mod detmini;
pub mod fusion;
pub mod preproc;
pub mod tensorcore;
