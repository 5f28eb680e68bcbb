//! Multi-modal (RGB + thermal) multi-target detection with cross-modal
//! feature fusion and teacher-to-student knowledge distillation, built on a
//! from-scratch reverse-mode autodiff engine. Everything runs on CPU in f32.
//!
//! The crate is organized bottom-up:
//!
//! - [`tape`], [`gradcheck`], [`params`]: the autodiff engine, its
//!   finite-difference oracle, parameter storage, and Adam.
//! - [`nn`]: depthwise-separable convs, batch norm, squeeze-excitation,
//!   MBConv blocks.
//! - [`backbone`], [`bifpn`], [`fusion`]: per-modality pyramids, weighted
//!   bidirectional cross-scale refinement, and CBAM cross-modal fusion.
//! - [`heads`], [`detect`]: anchor grids, shared detection heads, box
//!   decoding, NMS, and end-to-end inference.
//! - [`loss`]: anchor assignment plus the supervised, knowledge-distillation
//!   and feature-distillation loss terms and their weighted composite.
//! - [`data`]: deterministic synthetic RGB/thermal scene generation and the
//!   on-disk dataset formats (PPM/PGM images, JSON annotations/manifests).
//! - [`eval`], [`stats`]: IoU/AP/mAP metrics, latency benchmarking, KDE
//!   intensity likelihoods and empirical priors.
//! - [`train`], [`checkpoint`], [`config`]: the training pipeline behind the
//!   `ffkd` CLI.

pub mod error;
pub mod kernels;
pub mod tape;
pub mod gradcheck;
pub mod params;
pub mod nn;
pub mod backbone;
pub mod bifpn;
pub mod fusion;
pub mod boxes;
pub mod anchors;
pub mod heads;
pub mod detect;
pub mod model;
pub mod data;
pub mod loss;
pub mod eval;
pub mod stats;
pub mod checkpoint;
pub mod config;
pub mod train;

pub use error::{Error, Result};
