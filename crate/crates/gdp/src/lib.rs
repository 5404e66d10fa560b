//! Multi-view camera pose regression with graph neural diffusion.
//!
//! The crate implements the full desk-scale pipeline: a staged convolutional
//! backbone, cross/self diffusion blocks integrated as neural ODEs over
//! configurable graph topologies, branched multi-level pose decoding, a
//! learnable-balance loss, a synthetic trajectory/rendering data generator
//! with perturbation presets, and a training/evaluation harness.

pub mod ablate;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod eval;
pub mod export;
pub mod geometry;
pub mod graph;
pub mod model;
pub mod objective;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;
