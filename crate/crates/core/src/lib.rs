pub mod analysis;
pub mod bbam;
pub mod detector;
pub mod error;
pub mod masks;
pub mod nn;
pub mod pipeline;
pub mod pseudogt;
pub mod segtrain;
pub mod synthdata;

pub use error::{Error, Result};
