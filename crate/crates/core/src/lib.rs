//! Volumetric evidence engine for 3D CT question answering.
//!
//! The crate is organised around the pipeline an agent follows when it
//! answers a question about a CT volume:
//!
//! - [`volume`]: spacing-aware scalar and label volumes, NIfTI-1 and raw I/O.
//! - [`memory`]: per-organ records and the append-only evidence memory.
//! - [`lesion`]: connected components, diameters, region assignment, indices.
//! - [`cflt`]: similarity heatmaps over feature fields and ROI ranking.
//! - [`agent`]: the one-slice-per-turn reasoning loop and model clients.
//! - [`qagen`]: deterministic mask-driven question generation and balancing.
//! - [`eval`]: answer parsing, accuracy aggregation and random baselines.
//! - [`synth`]: synthetic chest cases for offline runs.
//! - [`config`]: the flat key-value run configuration.
//!
//! Data-parallel kernels go through [`exec::Execution`]; with the `parallel`
//! feature disabled every kernel runs sequentially.

// NaN inputs are rejected with `!(x >= y)` throughout
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agent;
pub mod case;
pub mod cflt;
pub mod config;
pub mod eval;
pub mod exec;
pub mod lesion;
pub mod memory;
pub mod qagen;
pub mod seed;
pub mod synth;
pub mod volume;

pub use exec::Execution;
