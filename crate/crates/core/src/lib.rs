pub mod ablation;
pub mod ad;
pub mod body_model;
pub mod bundle;
pub mod camera;
pub mod error;
pub mod estimator;
pub mod fusion;
pub mod geom;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod pose_prior;
pub mod rotation;
pub mod sequence_refine;
pub mod synthgen;

pub use error::{Error, Result};
