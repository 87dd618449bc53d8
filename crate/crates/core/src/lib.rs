//! Object-centric video segmentation: recurrent slot attention, a masked
//! bidirectional transformer over slots, feature-reconstruction decoders,
//! a slot contrastive loss, and the evaluation metrics used to score the
//! resulting masks.

pub mod autograd;
pub mod container;
pub mod data;
pub mod decoders;
pub mod error;
pub mod features;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod slot_attention;
pub mod tensor;
pub mod tst;

pub use error::{Error, Result};
pub use tensor::Mat;
