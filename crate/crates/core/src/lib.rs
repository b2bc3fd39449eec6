//! Learned dynamic point-cloud geometry codec with bidirectional feature
//! alignment, cross-attention refinement and a conditional Laplace entropy
//! model over a bit-exact range coder.

pub mod align;
mod bytes;
pub mod cloud;
pub mod container;
pub mod ctr;
pub mod entropy;
pub mod error;
pub mod geomcodec;
pub mod knn;
pub mod metrics;
pub mod model;
pub mod morton;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod ply;
pub mod prob;
pub mod rasched;
pub mod rangecoder;
pub mod report;
pub mod scale;
pub mod synth;
pub mod train;

pub use cloud::{voxelize, CodecConfig, Coord, FramePointCloud, ScaleLevel};
pub use error::{Error, Result};
pub use model::Model;
pub use pipeline::{decode_frame, decode_sequence, encode_frame, encode_sequence, ContextMode, DecodedFrame};
