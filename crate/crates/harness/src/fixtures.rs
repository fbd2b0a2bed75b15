//! Hand-built models and a synthetic annotated dataset.
//!
//! The bright-patch model has one layer and one head over a 3-wide
//! embedding. Each patch embeds to `[b, 1, 0]` where `b` is its mean
//! normalised intensity, and `[cls]` is `[0, 0, 1]`. After layer norm the
//! first coordinate of a patch token is strictly increasing in `b`, the
//! key reads that coordinate and the `[cls]` query is a positive constant,
//! so `[cls]` attention is ordered by patch brightness.

use std::path::{Path, PathBuf};

use anyhow::Result;
use attnmap_core::vit::{write_vtw, Raster, ViTConfig, WeightStore};
use attnmap_core::Tensor;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::annotations::{write_annotations, AnnotationRecord};
use crate::imageio::write_ppm;

/// Scale of the `[cls]` query in the bright-patch model.
pub const QUERY_SCALE: f32 = 4.0;
pub const SQUARE: usize = 32;
pub const BACKGROUND_MAX: u8 = 40;

pub fn bright_patch_config() -> ViTConfig {
    ViTConfig {
        image_size: 224,
        patch_size: 16,
        embed_dim: 3,
        depth: 1,
        heads: 1,
        mlp_ratio: 1.0,
        num_classes: 2,
        norm_eps: 1e-6,
    }
}

fn zeros(store: &mut WeightStore<f32>, config: &ViTConfig) {
    for (name, shape) in config.expected_shapes() {
        store.insert(name, Tensor::zeros(shape));
    }
}

fn set(store: &mut WeightStore<f32>, name: &str, shape: &[usize], data: Vec<f32>) {
    store.insert(
        name,
        Tensor::new(shape.to_vec(), data).expect("fixture shape"),
    );
}

pub fn bright_patch_weights() -> WeightStore<f32> {
    let config = bright_patch_config();
    let mut w = WeightStore::new();
    zeros(&mut w, &config);
    let p = config.patch_len();

    let mut patch = vec![0.0; 3 * p];
    patch[..p].fill(1.0 / p as f32);
    set(&mut w, "patch_embed.proj.weight", &[3, 3, 16, 16], patch);
    set(&mut w, "patch_embed.proj.bias", &[3], vec![0.0, 1.0, 0.0]);
    set(&mut w, "cls_token", &[1, 1, 3], vec![0.0, 0.0, 1.0]);

    // rows: q0..q2, k0..k2, v0..v2
    let mut qkv = vec![0.0; 27];
    qkv[2] = QUERY_SCALE;
    qkv[3 * 3] = 1.0;
    for i in 0..3 {
        qkv[(6 + i) * 3 + i] = 1.0;
    }
    set(&mut w, "blocks.0.attn.qkv.weight", &[9, 3], qkv);
    set(&mut w, "blocks.0.attn.proj.weight", &[3, 3], eye(3));
    for norm in [
        "blocks.0.norm1.weight",
        "blocks.0.norm2.weight",
        "norm.weight",
    ] {
        set(&mut w, norm, &[3], vec![1.0; 3]);
    }
    set(
        &mut w,
        "head.weight",
        &[2, 3],
        vec![-1.0, 0.0, 0.5, 1.0, 0.0, -0.5],
    );
    w
}

fn eye(n: usize) -> Vec<f32> {
    (0..n * n)
        .map(|i| if i / n == i % n { 1.0 } else { 0.0 })
        .collect()
}

/// Tiny model whose query and key weights are zero, so every attention
/// row is uniform.
pub fn uniform_attention_weights(config: &ViTConfig, seed: u64) -> Result<WeightStore<f32>> {
    let mut w = WeightStore::random(config, seed, 0.2)?;
    let d = config.embed_dim;
    for l in 0..config.depth {
        let name = format!("blocks.{l}.attn.qkv.weight");
        let mut qkv = w.get(&name)?.to_vec();
        qkv[..2 * d * d].fill(0.0);
        set(&mut w, &name, &[3 * d, d], qkv);
        let name = format!("blocks.{l}.attn.qkv.bias");
        let mut b = w.get(&name)?.to_vec();
        b[..2 * d].fill(0.0);
        set(&mut w, &name, &[3 * d], b);
    }
    Ok(w)
}

/// Random model with a zero classifier: every logit is constant, so all
/// gradients vanish.
pub fn zero_head_weights(config: &ViTConfig, seed: u64) -> Result<WeightStore<f32>> {
    let mut w = WeightStore::random(config, seed, 0.2)?;
    w.insert(
        "head.weight",
        Tensor::zeros([config.num_classes, config.embed_dim]),
    );
    Ok(w)
}

/// Dark noise with one saturated white square.
pub fn square_image(rng: &mut StdRng, size: usize, x0: usize, y0: usize) -> Raster {
    let mut data: Vec<u8> = (0..size * size * 3)
        .map(|_| rng.gen_range(0..=BACKGROUND_MAX))
        .collect();
    for y in y0..y0 + SQUARE {
        for x in x0..x0 + SQUARE {
            let i = (y * size + x) * 3;
            data[i..i + 3].fill(255);
        }
    }
    Raster::rgb(size, size, data).expect("square image")
}

/// Writes `count` images and `annotations.jsonl` into `dir`; returns the
/// records in file order.
pub fn write_square_dataset(dir: &Path, count: usize, seed: u64) -> Result<Vec<AnnotationRecord>> {
    std::fs::create_dir_all(dir)?;
    let mut rng = StdRng::seed_from_u64(seed);
    let size = 224;
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let x0 = rng.gen_range(0..=size - SQUARE);
        let y0 = rng.gen_range(0..=size - SQUARE);
        let image = square_image(&mut rng, size, x0, y0);
        let name = format!("square_{i:03}.ppm");
        write_ppm(&dir.join(&name), &image)?;
        records.push(AnnotationRecord {
            image: name,
            bbox: [x0, y0, x0 + SQUARE, y0 + SQUARE],
            positive: true,
        });
    }
    write_annotations(&dir.join("annotations.jsonl"), &records)?;
    Ok(records)
}

/// Paths of a complete fixture written by [`write_bright_patch_fixture`].
#[derive(Debug, Clone)]
pub struct FixturePaths {
    pub weights: PathBuf,
    pub config: PathBuf,
    pub data_dir: PathBuf,
    pub annotations: PathBuf,
}

/// Model weights, config JSON and a square dataset under `dir`.
pub fn write_bright_patch_fixture(dir: &Path, count: usize, seed: u64) -> Result<FixturePaths> {
    std::fs::create_dir_all(dir)?;
    let paths = FixturePaths {
        weights: dir.join("bright_patch.vtw"),
        config: dir.join("bright_patch.json"),
        data_dir: dir.join("images"),
        annotations: dir.join("images").join("annotations.jsonl"),
    };
    write_vtw(&paths.weights, &bright_patch_weights())?;
    std::fs::write(
        &paths.config,
        serde_json::to_string_pretty(&bright_patch_config())? + "\n",
    )?;
    write_square_dataset(&paths.data_dir, count, seed)?;
    Ok(paths)
}
