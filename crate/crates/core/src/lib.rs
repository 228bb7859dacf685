//! Spatiotemporal tri-perspective-view (TPV) encoding for 3D semantic
//! occupancy: geometry, deformable attention, the layered encoder and
//! decoder, a synthetic multi-camera scene generator, training, evaluation
//! and the oracle suites that check them.

// `!(x > 0.0)` also rejects NaN, which is the point of writing it that way.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod bench;
pub mod cli;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod tpv;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
