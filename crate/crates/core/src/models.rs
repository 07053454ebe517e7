//! Contracts for the frozen models the direction module is trained against.
//!
//! Each forward pass is paired with a vector-Jacobian product so gradients can
//! be pulled back to the latent input. Real-network adapters implement the same
//! traits; the analytic toy world in [`crate::toyworld`] is the reference
//! implementation.

use std::sync::Arc;

use crate::error::{check_dim, Result};
use crate::image::{Features, Image};
use crate::latent::{AttributeVector, LatentVector};
use crate::toyworld::{ToyConfig, ToyWorld};

pub trait Generator: Send + Sync {
    fn latent_dim(&self) -> usize;
    fn image_shape(&self) -> (usize, usize);
    fn generate(&self, z: &LatentVector) -> Result<Image>;
    /// Pull an image-space gradient back to the latent.
    fn generate_vjp(&self, z: &LatentVector, upstream: &Image) -> Result<Vec<f64>>;
    /// Flattened frozen weights, used to verify nothing is updated in training.
    fn frozen_parameters(&self) -> Vec<f64> {
        Vec::new()
    }
}

pub trait Regressor: Send + Sync {
    fn num_attributes(&self) -> usize;
    fn attribute_names(&self) -> Vec<String>;
    fn regress(&self, img: &Image) -> Result<AttributeVector>;
    fn regress_vjp(&self, img: &Image, upstream: &[f64]) -> Result<Image>;
    fn frozen_parameters(&self) -> Vec<f64> {
        Vec::new()
    }
}

pub trait Discriminator: Send + Sync {
    /// Realism score in `(0, 1)`.
    fn discriminate(&self, img: &Image) -> Result<f64>;
    fn discriminate_vjp(&self, img: &Image, upstream: f64) -> Result<Image>;
    fn frozen_parameters(&self) -> Vec<f64> {
        Vec::new()
    }
}

pub trait FeatureExtractor: Send + Sync {
    fn features(&self, img: &Image) -> Result<Features>;
    fn features_vjp(&self, img: &Image, upstream: &Features) -> Result<Image>;
    fn frozen_parameters(&self) -> Vec<f64> {
        Vec::new()
    }
}

pub trait IdentityEmbedder: Send + Sync {
    /// Unit-length identity embedding.
    fn embed(&self, img: &Image) -> Result<Vec<f64>>;
    fn embed_vjp(&self, img: &Image, upstream: &[f64]) -> Result<Image>;
    fn frozen_parameters(&self) -> Vec<f64> {
        Vec::new()
    }
}

/// The five frozen models, shared read-only.
#[derive(Clone)]
pub struct ModelBundle {
    pub generator: Arc<dyn Generator>,
    pub regressor: Arc<dyn Regressor>,
    pub discriminator: Arc<dyn Discriminator>,
    pub features: Arc<dyn FeatureExtractor>,
    pub identity: Arc<dyn IdentityEmbedder>,
}

impl ModelBundle {
    pub fn toy(config: ToyConfig) -> Result<Self> {
        let world = Arc::new(ToyWorld::new(config)?);
        Ok(Self::from_toy(world))
    }

    pub fn from_toy(world: Arc<ToyWorld>) -> Self {
        Self {
            generator: world.clone(),
            regressor: world.clone(),
            discriminator: world.clone(),
            features: world.clone(),
            identity: world,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.generator.latent_dim()
    }

    pub fn num_attributes(&self) -> usize {
        self.regressor.num_attributes()
    }

    pub fn image_shape(&self) -> (usize, usize) {
        self.generator.image_shape()
    }

    /// `R(G(z))`.
    pub fn attributes_of(&self, z: &LatentVector) -> Result<AttributeVector> {
        self.regressor.regress(&self.generator.generate(z)?)
    }

    /// Cosine similarity of identity embeddings, in `[-1, 1]`.
    pub fn identity_similarity(&self, a: &Image, b: &Image) -> Result<f64> {
        check_dim("image height", a.height(), b.height())?;
        check_dim("image width", a.width(), b.width())?;
        let ea = self.identity.embed(a)?;
        let eb = self.identity.embed(b)?;
        let dot = |u: &[f64], v: &[f64]| -> f64 { u.iter().zip(v).map(|(x, y)| x * y).sum() };
        // Dividing by the norms, even of unit embeddings, makes a self-comparison exactly 1.
        let norms = (dot(&ea, &ea) * dot(&eb, &eb)).sqrt();
        if norms == 0.0 {
            return Ok(0.0);
        }
        Ok((dot(&ea, &eb) / norms).clamp(-1.0, 1.0))
    }

    /// Concatenation of every frozen weight in the bundle.
    pub fn frozen_snapshot(&self) -> Vec<f64> {
        let mut out = self.generator.frozen_parameters();
        out.extend(self.regressor.frozen_parameters());
        out.extend(self.discriminator.frozen_parameters());
        out.extend(self.features.frozen_parameters());
        out.extend(self.identity.frozen_parameters());
        out
    }
}
