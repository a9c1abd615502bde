//! HDFormer: a high-order directed transformer that lifts 2D pose sequences
//! to 3D.
//!
//! The crate is self-contained: [`numerics`] provides the tensor engine and
//! reverse-mode differentiation, [`skeleton`] the directed joint graph and its
//! hyperbones, [`encoding`] and [`attention`] the model blocks, [`network`]
//! the U-shaped model, and [`training`], [`dataio`] and [`metrics`] the
//! surrounding pipeline.

pub mod attention;
pub mod dataio;
pub mod encoding;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod network;
pub mod numerics;
pub mod skeleton;
pub mod training;

pub use error::{Error, Result};
