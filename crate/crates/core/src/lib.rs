//! Motion-field analysis built on thermal energy fields.
//!
//! Dense motion fields are diffused into thermal energy fields (TEFs),
//! segmented into coherent motions, clustered into semantic regions, used
//! for activity recognition, and mined for recurrent activities summarized
//! as flow curves. A synthetic scene generator with analytic ground truth
//! drives the benchmarks.

pub mod assignment;
pub mod diffusion;
pub mod error;
pub mod field;
pub mod flo;
pub mod metrics;
pub mod mining;
pub mod pgm;
pub mod raster;
pub mod recognition;
pub mod segmentation;
pub mod semantic;
pub mod spectral;
pub mod synth;

pub use error::{Error, Result};
pub use field::{advect, FlowSequence, GridDims, MotionField, Particle, Vec2};
