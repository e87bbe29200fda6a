use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyper-parameters of the video transformer and its
/// projection head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Patch side P in pixels.
    pub patch_size: usize,
    /// Token width D.
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    /// Temporal capacity T_max of the positional table.
    pub max_frames: usize,
    /// Side of the square spatial capacity (pixels) of the positional table.
    pub spatial_capacity: usize,
    pub mlp_ratio: usize,
    pub head_hidden_dim: usize,
    pub head_bottleneck_dim: usize,
    /// Output dimension K of the projection head.
    pub out_dim: usize,
    pub layer_norm_eps: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Full-size backbone: ViT-B/16 width with a 65536-way head.
    pub fn paper() -> Self {
        ModelConfig {
            patch_size: 16,
            embed_dim: 768,
            depth: 12,
            num_heads: 12,
            max_frames: 16,
            spatial_capacity: 224,
            mlp_ratio: 4,
            head_hidden_dim: 2048,
            head_bottleneck_dim: 256,
            out_dim: 65536,
            layer_norm_eps: 1e-6,
            init_std: 0.02,
        }
    }

    /// CPU-sized default.
    pub fn desk() -> Self {
        ModelConfig {
            patch_size: 4,
            embed_dim: 64,
            depth: 4,
            num_heads: 4,
            max_frames: 8,
            spatial_capacity: 32,
            mlp_ratio: 4,
            head_hidden_dim: 128,
            head_bottleneck_dim: 64,
            out_dim: 256,
            layer_norm_eps: 1e-6,
            init_std: 0.25,
        }
    }

    /// Smallest configuration used for gradient checking.
    pub fn tiny() -> Self {
        ModelConfig {
            max_frames: 4,
            spatial_capacity: 16,
            head_hidden_dim: 32,
            head_bottleneck_dim: 16,
            out_dim: 16,
            ..Self::desk()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Side of the square spatial positional grid.
    pub fn grid_side(&self) -> usize {
        self.spatial_capacity / self.patch_size
    }

    pub fn max_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.patch_size", self.patch_size),
            ("model.embed_dim", self.embed_dim),
            ("model.depth", self.depth),
            ("model.num_heads", self.num_heads),
            ("model.max_frames", self.max_frames),
            ("model.spatial_capacity", self.spatial_capacity),
            ("model.mlp_ratio", self.mlp_ratio),
            ("model.head_hidden_dim", self.head_hidden_dim),
            ("model.head_bottleneck_dim", self.head_bottleneck_dim),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::config(
                "model.num_heads",
                format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.num_heads),
            ));
        }
        if self.spatial_capacity % self.patch_size != 0 {
            return Err(Error::config(
                "model.spatial_capacity",
                format!(
                    "{} not divisible by patch size {}",
                    self.spatial_capacity, self.patch_size
                ),
            ));
        }
        if self.out_dim < 2 {
            return Err(Error::config("model.out_dim", "must be at least 2"));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::config("model.layer_norm_eps", "must be positive"));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::config("model.init_std", "must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for c in [ModelConfig::paper(), ModelConfig::desk(), ModelConfig::tiny()] {
            c.validate().unwrap();
        }
        assert_eq!(ModelConfig::paper().out_dim, 65536);
        assert_eq!(ModelConfig::desk().out_dim, 256);
    }

    #[test]
    fn invariants_enforced() {
        let mut c = ModelConfig::desk();
        c.num_heads = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.spatial_capacity = 30;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.out_dim = 1;
        assert!(c.validate().is_err());
    }
}
