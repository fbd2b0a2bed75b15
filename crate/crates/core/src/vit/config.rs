use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters. Defaults describe ViT-B/16 with a
/// two-class head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
    pub norm_eps: f64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4.0,
            num_classes: 2,
            norm_eps: 1e-6,
        }
    }
}

impl ViTConfig {
    pub fn vit_b16() -> Self {
        Self::default()
    }

    /// Small configuration used for gradient checks: 16px images, 4px
    /// patches, width 16, two layers of two heads.
    pub fn tiny() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            embed_dim: 16,
            depth: 2,
            heads: 2,
            ..Self::default()
        }
    }

    /// Resolves a preset name (`vit-b16`, `tiny`).
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "vit-b16" | "vit_b16" | "default" => Some(Self::vit_b16()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(format!("config: {msg}")));
        if self.patch_size == 0
            || self.image_size == 0
            || !self.image_size.is_multiple_of(self.patch_size)
        {
            return bad(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1".into());
        }
        let hidden = self.embed_dim as f64 * self.mlp_ratio;
        if !(hidden >= 1.0 && hidden.fract() == 0.0) {
            return bad(format!(
                "embed_dim * mlp_ratio = {hidden} is not a positive integer"
            ));
        }
        if !(self.norm_eps > 0.0) {
            return bad("norm_eps must be > 0".into());
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid_size(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_size() * self.grid_size()
    }

    /// Patch tokens plus the `[cls]` token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio) as usize
    }

    /// Length of one flattened patch (channels x patch x patch).
    pub fn patch_len(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    /// Every parameter tensor with its canonical name and shape, in
    /// canonical order.
    pub fn expected_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let p = self.patch_size;
        let hidden = self.mlp_hidden();
        let mut out = vec![
            ("cls_token".to_string(), vec![1, 1, d]),
            ("pos_embed".to_string(), vec![1, self.num_tokens(), d]),
            ("patch_embed.proj.weight".to_string(), vec![d, 3, p, p]),
            ("patch_embed.proj.bias".to_string(), vec![d]),
        ];
        for l in 0..self.depth {
            let name = |s: &str| format!("blocks.{l}.{s}");
            out.extend([
                (name("norm1.weight"), vec![d]),
                (name("norm1.bias"), vec![d]),
                (name("attn.qkv.weight"), vec![3 * d, d]),
                (name("attn.qkv.bias"), vec![3 * d]),
                (name("attn.proj.weight"), vec![d, d]),
                (name("attn.proj.bias"), vec![d]),
                (name("norm2.weight"), vec![d]),
                (name("norm2.bias"), vec![d]),
                (name("mlp.fc1.weight"), vec![hidden, d]),
                (name("mlp.fc1.bias"), vec![hidden]),
                (name("mlp.fc2.weight"), vec![d, hidden]),
                (name("mlp.fc2.bias"), vec![d]),
            ]);
        }
        out.extend([
            ("norm.weight".to_string(), vec![d]),
            ("norm.bias".to_string(), vec![d]),
            ("head.weight".to_string(), vec![self.num_classes, d]),
            ("head.bias".to_string(), vec![self.num_classes]),
        ]);
        out
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.embed_dim;
        let h = self.mlp_hidden();
        let embed = d * self.patch_len() + d + d + self.num_tokens() * d;
        let block = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (h * d + h) + (d * h + d);
        embed + self.depth * block + 2 * d + self.num_classes * d + self.num_classes
    }
}
