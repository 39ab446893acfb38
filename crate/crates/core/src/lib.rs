//! Feedforward sequential memory networks (FSMN, cFSMN, DFSMN): forward
//! passes, analytic gradients, lower-frame-rate preprocessing, and a
//! latency-exact streaming inference engine.
//!
//! The crate is organized along the data path:
//!
//! - [`tensor`]: dense row-major matrices over `f32`/`f64`, seeded RNG
//! - [`topology`]: architecture-notation parser and static analysis
//!   (latency, receptive field, parameter counts)
//! - [`layers`]: memory blocks and the full model forward pass
//! - [`grad`]: backward passes, cross entropy, SGD trainer, gradient checks
//! - [`lfr`]: context stacking, decimation, soft targets
//! - [`data`]: synthetic long-range tasks and the dataset file format
//! - [`stream`]: frame-by-frame inference with ring buffers
//! - [`checkpoint`]: model persistence

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod grad;
pub mod layers;
pub mod lfr;
pub mod stream;
pub mod tensor;
pub mod topology;

pub use error::{Error, Result};
pub use tensor::{Matrix, Precision, Scalar, SeedRng};
pub use topology::{BlockSpec, TopologySpec, Variant};
