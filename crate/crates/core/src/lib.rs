//! A small, fully deterministic laboratory for source-free detection
//! adaptation on synthetic scenes.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: dense `f64` tensors, the few differentiable primitives the
//!   toy detector needs, and a central finite-difference gradient oracle.
//! * [`losses`]: spatial prior alignment (mean ℓ1 + Dice), the peak-adjust
//!   transform, the imbalance-aware robust pseudo-label loss, cross entropy
//!   and ℓ1 box regression, all with analytic gradients.
//! * [`scenes`]: procedural source/target scenes with exact foreground masks
//!   and weak/strong augmentations.
//! * [`detector`]: an anchor-free grid detector with a hand-written backward
//!   pass, decoding, NMS and target assignment.
//! * [`adaptation`]: source pretraining, the EMA mean-teacher loop and mAP
//!   evaluation.
//! * [`bounds`]: Monte-Carlo and per-sample verification of the detection
//!   risk bounds under pseudo-label noise.

pub mod adaptation;
pub mod bounds;
pub mod detector;
pub mod error;
pub mod losses;
pub mod numerics;
pub mod rng;
pub mod scenes;

pub use error::{Error, Result};
