//! Co-speech gesture video synthesis.
//!
//! Stage one turns speech features into gesture tokens with an
//! audio-conditioned masked discrete diffusion transformer over a VQ-VAE
//! codebook of hybrid 2D-body/3D-hand gesture vectors. Stage two renders the
//! gestures and animates a reference frame with a latent video diffusion
//! transformer whose appearance and motion blocks use joint attention.

pub mod align;
pub mod audio;
pub mod checkpoint;
pub mod diffusion;
pub mod dit_a;
pub mod error;
pub mod gesture;
pub mod gradients;
pub mod io;
pub mod pipeline;
pub mod render;
pub mod synth;
pub mod video;
pub mod vq;
pub mod tensor;
pub mod transformer;

pub use error::{Error, Result};
pub use tensor::{Tensor, Graph, ParamStore};
