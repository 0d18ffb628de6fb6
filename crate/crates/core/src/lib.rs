//! Neural style transfer for colored point clouds.
//!
//! A colored point cloud is an N x 6 set of XYZ positions and RGB colors.
//! A small two-route classification network encodes the geometry and color
//! properties separately; its per-point feature responses serve as content
//! representations and their Gram matrices as style representations. The
//! transfer engine then optimizes a target cloud so its representations
//! match a content cloud and a style cloud (or an image treated as a bag
//! of pixels).
//!
//! Modules:
//! - [`numerics`]: dense matrices, reverse-mode differentiation, optimizers
//! - [`pointcloud`]: cloud/pixel-set data model, PLY and PPM I/O, synthesis
//! - [`network`]: the two-route feature encoder and classifier
//! - [`training`]: desk-scale classifier training and evaluation
//! - [`transfer`]: content/style losses and the stylization loop

pub mod error;
pub mod network;
pub mod numerics;
pub mod pointcloud;
pub mod training;
pub mod transfer;

pub use error::{Error, Result};
