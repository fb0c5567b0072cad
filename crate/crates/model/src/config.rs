//! Stream identities and model hyperparameters.

use resplat_core::{APPEARANCE_DIM, GEOMETRY_DIM};
use serde::{Deserialize, Serialize};

use crate::error::ModelError;

/// Which feature view a model consumes and predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Geometry,
    Appearance,
}

impl Stream {
    /// Width of this stream's per-state feature vector.
    pub fn feature_dim(self) -> usize {
        match self {
            Stream::Geometry => GEOMETRY_DIM,
            Stream::Appearance => APPEARANCE_DIM,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stream::Geometry => "geometry",
            Stream::Appearance => "appearance",
        }
    }

    /// Serialized-parameter budget in bytes (f32 payload).
    pub fn size_budget_bytes(self) -> usize {
        match self {
            Stream::Geometry => (0.7 * 1024.0 * 1024.0) as usize,
            Stream::Appearance => (1.3 * 1024.0 * 1024.0) as usize,
        }
    }
}

/// Architecture hyperparameters for one stream model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Token width of the transformer.
    pub d_model: usize,
    /// Hidden width of the feed-forward sublayer.
    pub ff_dim: usize,
    /// Encoder depth; the decoder mirrors it.
    pub layers: usize,
    /// Attention heads; must divide `d_model`.
    pub heads: usize,
    /// Latent width of the posterior and prior.
    pub latent_dim: usize,
    /// Number of affine coupling transforms in the prior.
    pub flow_layers: usize,
    /// Hidden width of each coupling's conditioner network.
    pub flow_hidden: usize,
    /// Default packing horizon for batch builders.
    pub max_time: usize,
}

impl ModelConfig {
    /// Defaults sized so the serialized f32 parameters land under each
    /// stream's size budget.
    pub fn for_stream(stream: Stream) -> Self {
        match stream {
            Stream::Geometry => ModelConfig {
                d_model: 64,
                ff_dim: 128,
                layers: 2,
                heads: 4,
                latent_dim: 16,
                flow_layers: 4,
                flow_hidden: 32,
                max_time: 16,
            },
            Stream::Appearance => ModelConfig {
                d_model: 96,
                ff_dim: 144,
                layers: 2,
                heads: 4,
                latent_dim: 16,
                flow_layers: 4,
                flow_hidden: 32,
                max_time: 16,
            },
        }
    }

    /// A deliberately small configuration for fast tests.
    pub fn tiny() -> Self {
        ModelConfig {
            d_model: 16,
            ff_dim: 32,
            layers: 1,
            heads: 2,
            latent_dim: 4,
            flow_layers: 2,
            flow_hidden: 8,
            max_time: 8,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.ff_dim == 0 || self.layers == 0 || self.heads == 0 {
            return Err(ModelError::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} must be even for the sinusoidal step encoding",
                self.d_model
            )));
        }
        if self.latent_dim < 2 || self.latent_dim % 2 != 0 {
            return Err(ModelError::Config(format!(
                "latent_dim {} must be even and at least 2 for coupling splits",
                self.latent_dim
            )));
        }
        if self.flow_hidden == 0 {
            return Err(ModelError::Config("flow_hidden must be positive".into()));
        }
        if self.max_time < 2 {
            return Err(ModelError::Config("max_time must be at least 2".into()));
        }
        Ok(())
    }
}
