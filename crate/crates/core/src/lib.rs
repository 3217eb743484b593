//! Compositional cosine logits for open-world compositional zero-shot learning.
//!
//! Images (as precomputed backbone features) and state-object compositions
//! are embedded into a shared space and compared by cosine similarity.
//! Unseen compositions get a feasibility score from primitive similarities,
//! which is used either as a training margin or as a hard mask on the output
//! space at inference time.

pub mod embed;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod feasibility;
pub mod gradcheck;
pub mod io;
pub mod optim;
pub mod space;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
