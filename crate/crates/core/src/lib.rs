//! Segmentation-guided image editing in the latent space of a joint
//! image/mask generator.
//!
//! The pieces, roughly in pipeline order:
//!
//! - [`generator`]: mapping and synthesis networks that produce an image and
//!   the multi-scale features a [`segmentation`] head turns into a mask.
//! - [`embedding`]: an encoder plus per-image optimization that places real
//!   images in the extended latent space.
//! - [`editing`]: learning and applying editing vectors from mask edits,
//!   with optional test-time refinement.
//! - [`library`]: persisted editing vectors.
//! - [`scenes`]: procedural vehicle scenes with exact part masks.
//! - [`metrics`]: FID, KID, identity score, attribute accuracy and the
//!   editing benchmark.

pub mod checkpoint;
pub mod container;
pub mod editing;
pub mod embedding;
pub mod error;
pub mod features;
pub mod gan;
pub mod generator;
pub mod graph;
pub mod image;
pub mod latent;
pub mod library;
pub mod metrics;
pub mod nn;
pub mod scenes;
pub mod segmentation;
pub mod tensor;

pub use error::{Error, Result};
pub use generator::{Generator, GeneratorConfig, JointSample};
pub use image::{Image, Mask};
pub use latent::{sample_latent, ExtendedLatent, LatentCode};
pub use segmentation::{HeadConfig, LabeledPair, SegmentationHead};
