//! Model configuration and the derived token/pixel layout.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};

/// Instance capacity of the first-frame ID map.
pub const MAX_INSTANCES: usize = 5;

/// Temporal compression of the latent grid: one latent step per 4 pixel frames
/// after the first.
pub const TEMPORAL_STRIDE: usize = 4;

/// Reference scale of the full-size backbone, kept for documentation and
/// fixtures only.
pub mod reference {
    /// Text stream length of the full-scale backbone.
    pub const TEXT_TOKENS: usize = 226;
    /// Spatial locations per latent frame.
    pub const SPATIAL_TOKENS_PER_FRAME: usize = 1350;
    /// Latent frames of a 49-frame clip.
    pub const LATENT_FRAMES: usize = 13;
    /// `SPATIAL_TOKENS_PER_FRAME * LATENT_FRAMES`.
    pub const VISUAL_TOKENS: usize = 17550;
    /// Pixel frames decoded from `LATENT_FRAMES`.
    pub const PIXEL_FRAMES: usize = 49;
    /// Layers used for grounding alignment in the full-scale model.
    pub const GROUNDING_LAYERS: [usize; 2] = [7, 11];
    /// Layer used for propagation alignment in the full-scale model.
    pub const PROPAGATION_LAYERS: [usize; 1] = [12];
    pub const LAYERS: usize = 42;
    pub const DENOISING_STEPS: usize = 50;
}

/// Pixel frames produced by `latent_frames` latent steps: `1 + 4 (F - 1)`.
pub fn pixel_frames_for(latent_frames: usize) -> usize {
    1 + TEMPORAL_STRIDE * latent_frames.saturating_sub(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub latent_frames: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    pub text_len: usize,
    pub timesteps: usize,
    pub seed: u64,
    /// Pixels per latent cell along each spatial axis.
    pub patch: usize,
    /// Hidden width of the MLP relative to `d_model`.
    pub mlp_ratio: usize,
    /// Size of the frozen text embedding table.
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 8,
            n_heads: 4,
            d_model: 64,
            latent_frames: 4,
            latent_height: 8,
            latent_width: 8,
            text_len: 16,
            timesteps: 20,
            seed: 0,
            patch: 4,
            mlp_ratio: 2,
            vocab_size: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("latent_frames", self.latent_frames),
            ("latent_height", self.latent_height),
            ("latent_width", self.latent_width),
            ("text_len", self.text_len),
            ("timesteps", self.timesteps),
            ("patch", self.patch),
            ("mlp_ratio", self.mlp_ratio),
            ("vocab_size", self.vocab_size),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(LabError::config(format!("{name} must be >= 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(LabError::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.latent_height * self.latent_width
    }

    /// Number of video tokens `F_lat * H_lat * W_lat`.
    pub fn n_video(&self) -> usize {
        self.latent_frames * self.tokens_per_frame()
    }

    /// Full sequence length (video first, then text).
    pub fn seq_len(&self) -> usize {
        self.n_video() + self.text_len
    }

    pub fn pixel_frames(&self) -> usize {
        pixel_frames_for(self.latent_frames)
    }

    pub fn pixel_height(&self) -> usize {
        self.latent_height * self.patch
    }

    pub fn pixel_width(&self) -> usize {
        self.latent_width * self.patch
    }

    /// Channels of one latent token: an RGB patch.
    pub fn latent_channels(&self) -> usize {
        3 * self.patch * self.patch
    }

    /// Input projection width: noisy latent, first-frame RGB patch and the
    /// ID-map patch, concatenated channel-wise.
    pub fn condition_channels(&self) -> usize {
        2 * self.latent_channels() + self.patch * self.patch
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_ratio * self.d_model
    }

    pub fn layout(&self) -> SequenceLayout {
        SequenceLayout {
            frames: self.latent_frames,
            height: self.latent_height,
            width: self.latent_width,
            text_len: self.text_len,
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Hex SHA-256 over the serde_json encoding of any serializable value.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// Geometry of the concatenated `[video | text]` token sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub text_len: usize,
}

impl SequenceLayout {
    pub fn tokens_per_frame(&self) -> usize {
        self.height * self.width
    }

    pub fn n_video(&self) -> usize {
        self.frames * self.tokens_per_frame()
    }

    pub fn seq_len(&self) -> usize {
        self.n_video() + self.text_len
    }

    /// Sequence index of the video token at `(f, h, w)`.
    pub fn video_index(&self, f: usize, h: usize, w: usize) -> usize {
        (f * self.height + h) * self.width + w
    }

    /// Sequence index of text token `t`.
    pub fn text_index(&self, t: usize) -> usize {
        self.n_video() + t
    }

    /// Latent frame of a video sequence index.
    pub fn frame_of(&self, index: usize) -> usize {
        index / self.tokens_per_frame()
    }

    pub fn is_video(&self, index: usize) -> bool {
        index < self.n_video()
    }

    /// `[video_start, video_end, text_start, text_end]`.
    pub fn block_boundaries(&self) -> [usize; 4] {
        [0, self.n_video(), self.n_video(), self.seq_len()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.d_head(), 16);
        assert_eq!(cfg.n_video(), 256);
        assert_eq!(cfg.seq_len(), 272);
        assert_eq!(cfg.pixel_frames(), 13);
        assert_eq!(cfg.pixel_height(), 32);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = ModelConfig {
            d_model: 30,
            n_heads: 4,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(LabError::Config(_))));
    }

    #[test]
    fn rejects_zero_counts() {
        let cfg = ModelConfig {
            latent_frames: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn reference_constants_are_consistent() {
        use reference::*;
        assert_eq!(SPATIAL_TOKENS_PER_FRAME * LATENT_FRAMES, VISUAL_TOKENS);
        assert_eq!(pixel_frames_for(LATENT_FRAMES), PIXEL_FRAMES);
    }

    #[test]
    fn hash_changes_with_seed() {
        let a = ModelConfig::default();
        let b = ModelConfig {
            seed: 1,
            ..Default::default()
        };
        assert_eq!(a.hash(), ModelConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
    }
}
