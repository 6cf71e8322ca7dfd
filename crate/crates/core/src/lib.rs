//! Weakly supervised 3D segmentation from six extreme-point clicks.
//!
//! The clicks are turned into geodesic scribbles, a seeded random walker
//! produces the first pseudo label, and a small convolutional segmenter is
//! then trained on the pseudo labels with a soft Dice loss. Each round's
//! prediction is re-regularized by a random walker seeded from its eroded
//! foreground and background, until two consecutive rounds agree.
//!
//! Module map:
//!
//! - [`volume`]: grids, bounding boxes, resampling, Dice, file I/O
//! - [`points`]: extreme points, padded boxes, the Gaussian click channel
//! - [`morphology`]: ball dilation and erosion
//! - [`geodesic`]: gradient cost, Dijkstra scribbles, seed maps
//! - [`randomwalker`]: Laplacian assembly and the CG Dirichlet solve
//! - [`learner`]: the convolutional segmenter and Dice loss
//! - [`pipeline`]: the iterative loop and evaluation
//! - [`phantom`]: synthetic ellipsoid cases with ground truth

pub mod error;
pub mod geodesic;
pub mod learner;
pub mod morphology;
pub mod phantom;
pub mod pipeline;
pub mod points;
pub mod randomwalker;
pub mod volume;

pub use error::{Error, Result};
