//! Cross-modal point cloud completion.
//!
//! A partial point cloud is encoded by a hierarchical graph-attention
//! encoder, fused with image-derived features through multi-scale
//! attention, and decoded into a complete cloud. Training combines an
//! L2 Chamfer objective with a contrastive alignment term. Everything
//! runs on a small reverse-mode autodiff engine over dense f32 arrays.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod gradcheck;
pub mod image;
pub mod layers;
pub mod losses;
pub mod model;
pub mod optim;
pub mod synthetic;
pub mod train;

pub use autodiff::DiffArray;
pub use error::{Error, Result};
pub use geometry::PointCloud;
