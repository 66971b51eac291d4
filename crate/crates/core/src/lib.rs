//! Desk-scale pipeline for decoding images from brain-activity vectors:
//! contrastive pretraining of an fMRI encoder, a concept-conditioned latent
//! diffusion model, an n-way semantic evaluation protocol, and a linear
//! decoding analysis that regresses UNet hidden states from voxels.

pub mod analysis;
pub mod checkpoint;
pub mod conditioning;
pub mod contrastive;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod fmri_encoder;
pub mod nn;
pub mod synth_data;
pub mod tensor;

pub use error::{CndError, Result};
