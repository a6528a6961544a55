//! Segmentation quality control with pseudo ground truths.
//!
//! A VAE-GAN learns a latent manifold of clean masks; a latent diffusion
//! model conditioned on the image, the slice position and the candidate
//! mask restores a pseudo ground truth that the candidate is scored
//! against. Geometry, metrics and degradation live in `nnqc-core`.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod ldm;
pub mod manifold;
pub mod nifti_io;
pub mod nn;
pub mod pipeline;
pub mod report;
pub mod toe;
pub mod unet;

pub use error::{Error, Result};
