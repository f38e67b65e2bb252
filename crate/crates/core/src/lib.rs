//! Soft-tissue driven jaw surgery planning on point clouds.
//!
//! A face → bone network proposes bone movement for a desired face, a rigid
//! fit turns it into one transform per bone segment, and a bone → face network
//! checks candidate plans by simulating the face they produce.

pub mod acmt;
pub mod bony_planner;
pub mod config;
pub mod error;
pub mod eval;
pub mod facial_simulator;
pub mod geom;
pub mod io;
pub mod phantom;
pub mod pipeline;
pub mod plan_search;
pub mod tensor_net;

#[cfg(test)]
mod test_util;

pub use error::{Error, Result};
