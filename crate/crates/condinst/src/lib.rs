//! Desk-scale instance segmentation with dynamically generated,
//! instance-conditioned mask heads.
//!
//! A small anchor-free detector predicts, at every feature-pyramid location,
//! a class score, a box, a center-ness score, and — the interesting part —
//! the flattened parameters of a tiny per-instance mask FCN. That generated
//! head runs fully convolutionally over a shared mask feature map combined
//! with instance-relative coordinates, so masks come out without any ROI
//! cropping. Everything trains on synthetic multi-shape scenes on a CPU in
//! minutes.
//!
//! Crate layout follows the pipeline:
//! [`tensor`] (autodiff substrate) -> [`scenes`] (data) -> [`backbone`] /
//! [`heads`] / [`mask_branch`] / [`dynamic_head`] (network) -> [`losses`] /
//! [`train`] (optimization) -> [`inference`] / [`metrics`] (deployment and
//! scoring), with [`bench`] timing the dynamic head against a conventional
//! fixed-weight crop head.

pub mod backbone;
pub mod config;
pub mod dynamic_head;
pub mod heads;
pub mod inference;
pub mod losses;
pub mod model;
pub mod mask_branch;
pub mod metrics;
mod nn;
pub mod scenes;
pub mod train;
pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
