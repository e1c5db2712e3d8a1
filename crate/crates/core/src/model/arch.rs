use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::vocab;

/// Architecture hyperparameters of the toy denoiser.
///
/// The image is its own latent. Encoder resolutions are `size`, `size/2`
/// and `size/4`; the cross-attention block runs at `size/4`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub image_size: usize,
    pub image_channels: usize,
    pub channels: [usize; 3],
    pub embed_dim: usize,
    pub attn_dim: usize,
    pub max_tokens: usize,
    pub train_timesteps: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            image_channels: 1,
            channels: [16, 32, 32],
            embed_dim: 32,
            attn_dim: 32,
            max_tokens: 8,
            train_timesteps: 200,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(4) {
            return Err(Error::Config(
                "image_size must be a positive multiple of 4".into(),
            ));
        }
        if self.channels.contains(&0)
            || self.embed_dim == 0
            || self.attn_dim == 0
            || self.image_channels == 0
        {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.max_tokens < 2 {
            return Err(Error::Config(
                "max_tokens must allow the background token plus one word".into(),
            ));
        }
        if self.train_timesteps == 0 {
            return Err(Error::Config("train_timesteps must be positive".into()));
        }
        Ok(())
    }

    pub fn attn_size(&self) -> usize {
        self.image_size / 4
    }

    pub fn vocab_size(&self) -> usize {
        vocab::VOCAB_SIZE
    }

    /// SHA-256 over the canonical JSON of the architecture and vocabulary.
    pub fn hash(&self) -> [u8; 32] {
        let canon = serde_json::json!({ "arch": self, "vocab": vocab::words() });
        Sha256::digest(canon.to_string().as_bytes()).into()
    }
}
