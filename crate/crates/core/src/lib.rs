//! Multi-domain image translation with a diffusion-regularized discriminator,
//! on a procedurally generated toy iris corpus.

pub mod autodiff;
pub mod checkpoint;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod losses;
pub mod networks;
pub mod optim;
pub mod params;
pub mod rng;
pub mod run;
pub mod tensor;
pub mod toy_data;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
