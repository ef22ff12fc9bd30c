//! Pose-guided structure-from-motion refinement and reconstruction benchmarking.
//!
//! The crate is organized bottom-up:
//!
//! * [`model_io`]: sparse models (text/binary), feature files and metric tables.
//! * [`geometry`]: camera models, poses, projection and triangulation.
//! * [`pairing`], [`matching`], [`mapping`], [`bundle`]: the refinement stages.
//! * [`refine`]: the stage orchestrator with wall-clock timings.
//! * [`eval_poses`], [`eval_nvs`]: accuracy and image-quality evaluation.
//! * [`synth`]: deterministic synthetic scenes used throughout the tests.

pub mod bundle;
pub mod eval_nvs;
pub mod eval_poses;
pub mod geometry;
pub mod mapping;
pub mod matching;
pub mod model_io;
pub mod pairing;
pub mod refine;
pub mod rng;
pub mod synth;

pub type CameraId = u32;
pub type ImageId = u32;
pub type PointId = u64;
