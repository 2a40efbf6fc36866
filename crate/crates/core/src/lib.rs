//! Single-stream vision-transformer tracker with dynamic early exit and
//! motion-blur-robust training.

pub mod backbone;
pub mod bbox;
pub mod blur;
pub mod config;
pub mod deem;
pub mod error;
pub mod harness;
pub mod head;
pub mod image;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod pipeline;

pub use bbox::BBox;
pub use config::{LossWeights, RunConfig, TrainConfig, ViTConfig};
pub use error::{Error, Result};
pub use image::Image;
pub use model::Model;
pub use numerics::{Graph, ParamStore, Session, Tensor, Var};
