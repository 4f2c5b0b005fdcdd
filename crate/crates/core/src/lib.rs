//! Edge-aware video frame interpolation: edge extraction, bidirectional flow
//! estimation, flow refinement with attention blending, adversarial training
//! and evaluation.

pub mod data;
pub mod edge_fusion;
pub mod error;
pub mod flow;
pub mod imaging;
pub mod kv;
pub mod models;
pub mod objective;
pub mod trainer;

pub use error::{Error, Result};
