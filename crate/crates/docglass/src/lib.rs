//! Hourglass dual-stream document transformer.

pub mod attention;
pub mod bench;
pub mod config;
pub mod doc;
pub mod embed;
pub mod error;
pub mod graph;
pub mod heads;
pub mod hourglass;
pub mod macs;
pub mod params;
pub mod streams;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;
