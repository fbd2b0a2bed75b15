//! Raster to model-input conversion.

use serde::{Deserialize, Serialize};

use super::config::ViTConfig;
use crate::error::{Error, Result};
use crate::resample::resize_plane;
use crate::tensor::{Element, Tensor};

/// Interleaved 8-bit raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn rgb(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::InvalidArgument(format!(
                "{width}x{height} RGB raster needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels: 3,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(width * height * 3)
            .collect();
        Self {
            width,
            height,
            channels: 3,
            data,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }
}

/// Per-channel normalisation applied after scaling to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl Normalization {
    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|&s| !(s > 0.0) || !s.is_finite())
            || self.mean.iter().any(|m| !m.is_finite())
        {
            return Err(Error::InvalidArgument(format!(
                "normalization std must be positive and finite: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Maps original image coordinates onto the square model input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResizeTransform {
    pub src_width: usize,
    pub src_height: usize,
    pub size: usize,
}

impl ResizeTransform {
    pub fn scale_x(&self) -> f64 {
        self.size as f64 / self.src_width as f64
    }

    pub fn scale_y(&self) -> f64 {
        self.size as f64 / self.src_height as f64
    }

    /// Maps a half-open pixel interval along x outward to whole model pixels.
    pub fn map_x(&self, start: usize, end: usize) -> (usize, usize) {
        map_interval(start, end, self.src_width, self.size)
    }

    pub fn map_y(&self, start: usize, end: usize) -> (usize, usize) {
        map_interval(start, end, self.src_height, self.size)
    }
}

/// `floor(start * size / len)` .. `ceil(end * size / len)`, clamped to the
/// target extent.
fn map_interval(start: usize, end: usize, len: usize, size: usize) -> (usize, usize) {
    let lo = (start * size / len).min(size);
    let hi = ((end * size).div_ceil(len)).min(size);
    (lo, hi)
}

/// Bilinear resize to `image_size` squared, scale to [0, 1], then
/// `(x - mean) / std` per channel. Output is channel-first `[3, S, S]`.
pub fn preprocess<F: Element>(
    image: &Raster,
    config: &ViTConfig,
    norm: &Normalization,
) -> Result<(Tensor<F>, ResizeTransform)> {
    if image.channels != 3 {
        return Err(Error::InvalidArgument(format!(
            "expected an RGB image, got {} channels",
            image.channels
        )));
    }
    if image.width == 0 || image.height == 0 {
        return Err(Error::InvalidArgument("image has zero extent".into()));
    }
    if image.data.len() != image.width * image.height * 3 {
        return Err(Error::InvalidArgument(
            "raster length does not match its extents".into(),
        ));
    }
    norm.validate()?;
    let size = config.image_size;
    let plane_len = image.width * image.height;
    let mut out = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        let plane: Vec<f64> = (0..plane_len)
            .map(|i| image.data[i * 3 + c] as f64)
            .collect();
        let resized = resize_plane(&plane, image.height, image.width, size, size);
        let (mean, std) = (norm.mean[c], norm.std[c]);
        out.extend(
            resized
                .into_iter()
                .map(|v| F::from_f64((v / 255.0 - mean) / std)),
        );
    }
    let transform = ResizeTransform {
        src_width: image.width,
        src_height: image.height,
        size,
    };
    Ok((Tensor::new([3, size, size], out)?, transform))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(size: usize) -> ViTConfig {
        ViTConfig {
            image_size: size,
            patch_size: 4,
            ..ViTConfig::default()
        }
    }

    #[test]
    fn same_size_only_normalises() {
        let img = Raster::rgb(2, 2, vec![0, 51, 255, 10, 20, 30, 1, 2, 3, 4, 5, 6]).unwrap();
        let norm = Normalization {
            mean: [0.0; 3],
            std: [1.0; 3],
        };
        let config = ViTConfig {
            image_size: 2,
            patch_size: 1,
            ..ViTConfig::default()
        };
        let (t, tf) = preprocess::<f64>(&img, &config, &norm).unwrap();
        assert_eq!(t.shape(), &[3, 2, 2]);
        assert_eq!(t.get(&[1, 0, 0]).unwrap(), 51.0 / 255.0);
        assert_eq!(t.get(&[2, 0, 1]).unwrap(), 30.0 / 255.0);
        assert_eq!(t.get(&[0, 1, 1]).unwrap(), 4.0 / 255.0);
        assert_eq!(tf.scale_x(), 1.0);
    }

    #[test]
    fn mid_gray_normalises_to_zero() {
        // 127.5 has no u8 encoding, so centre the mean on 128 instead
        let img = Raster::filled(8, 8, [128, 128, 128]);
        let norm = Normalization {
            mean: [128.0 / 255.0; 3],
            std: [0.5; 3],
        };
        let (t, _) = preprocess::<f32>(&img, &cfg(8), &norm).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_non_rgb() {
        let img = Raster {
            width: 2,
            height: 2,
            channels: 1,
            data: vec![0; 4],
        };
        assert!(preprocess::<f32>(&img, &cfg(4), &Normalization::default()).is_err());
    }

    #[test]
    fn interval_mapping_rounds_outward() {
        let tf = ResizeTransform {
            src_width: 448,
            src_height: 300,
            size: 224,
        };
        assert_eq!(tf.map_x(10, 21), (5, 11));
        assert_eq!(tf.map_y(0, 300), (0, 224));
        assert_eq!(tf.map_y(1, 2), (0, 2));
    }
}
