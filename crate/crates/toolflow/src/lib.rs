//! Role-conditioned tool-target point-flow affordances at desk scale.
//!
//! The pipeline is: procedurally generate labeled scenes with ground-truth
//! motion ([`synth`]), ground instruction text to tool/target query regions
//! ([`grounding`]), train a conditional diffusion model over per-query 3D
//! displacement sequences ([`model`], [`train`]), and execute the predicted
//! flow closed-loop in a kinematic simulator via rigid registration ([`sim`]).

pub mod config;
pub mod container;
pub mod geometry;
pub mod grounding;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod scene;
pub mod sim;
pub mod synth;
pub mod tensor;
pub mod train;
