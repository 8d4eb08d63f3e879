//! Generative radiance fields: a latent-conditioned radiance field rendered
//! by differentiable volume rendering, trained adversarially against a
//! patch discriminator from unposed images.
//!
//! All numeric modules are generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below name the two concrete instantiations.

pub mod config;
pub mod discriminator;
pub mod error;
pub mod field;
pub mod geometry;
pub mod image;
pub mod overfit;
pub mod png;
pub mod renderer;
pub mod rng;
pub mod scenegen;
pub mod trainer;
pub mod verify;

pub use graf_diffcore as diffcore;
pub use graf_diffcore::Scalar;

pub use config::Config;
pub use error::{GrafError, Result};

pub type RadianceField32 = field::RadianceField<f32>;
pub type RadianceField64 = field::RadianceField<f64>;
pub type Discriminator32 = discriminator::Discriminator<f32>;
pub type Discriminator64 = discriminator::Discriminator<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
pub type Trainer64 = trainer::Trainer<f64>;
pub type Checkpoint32 = trainer::Checkpoint<f32>;
pub type Checkpoint64 = trainer::Checkpoint<f64>;
