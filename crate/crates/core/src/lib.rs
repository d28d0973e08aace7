//! Latent energy-based style translation for multi-site image harmonization.
//!
//! A latent adversarial autoencoder learns a site-agnostic latent space
//! ([`sig`]), an energy-based model over one target site's latent codes moves
//! other sites' codes toward that site with Langevin dynamics ([`sst`]), and
//! the decoder turns translated or freshly mapped codes back into images.
//! [`phantoms`] provides multi-site synthetic data with ground truth and
//! [`metrics`] the evaluation battery.

pub mod error;
pub mod image;
pub mod metrics;
pub mod nets;
pub mod numerics;
pub mod phantoms;
pub mod selfcheck;
pub mod sig;
pub mod sst;

pub use error::{Error, Result};
