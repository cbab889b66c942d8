//! Skeleton-guided two-level spatial attention for 3D-flow action
//! recognition, at desk scale.
//!
//! A two-branch temporal-convolutional skeleton network scores each joint
//! by how informative its motion is; those scores shape attention masks
//! inserted after every convolution of a small spatiotemporal network over
//! colorized scene-flow clips. The two models can be fused late and trained
//! jointly.

pub mod attention;
pub mod c3d;
pub mod dataset;
pub mod error;
pub mod flow;
pub mod fusion;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod skeleton;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{ParamId, ParamKind, ParamStore};
pub use tensor::{DiffTensor, Graph, Mode, Padding, Var};
