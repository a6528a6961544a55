//! Pure algorithms behind pseudo-ground-truth segmentation quality control.
//!
//! Everything in this crate is allocation-only (`no_std` + `alloc`): dataset
//! fingerprints and the pre/post-processing they drive, the synthetic mask
//! degradation engine, overlap and boundary metrics, diffusion noise schedules
//! with the deterministic DDIM update, and the phantom volume generator used
//! for desk-scale experiments. Neural networks, file formats and the CLI live
//! in the `nnqc` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod degrade;
pub mod error;
pub mod fingerprint;
pub mod grid;
pub mod metrics;
pub mod orientation;
pub mod phantom;
pub mod resample;
pub mod rng;
pub mod schedule;

pub use error::{Error, Result};
pub use grid::{Grid, Image, Mask};
