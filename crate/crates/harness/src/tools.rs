//! Single-image map dumps and weight file inspection.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use attnmap_core::eval::{
    argmax, threshold_top_percentile, tightest_bbox, AnnotationBox, PixelPos,
};
use attnmap_core::saliency::dump::{write_pgm16, write_raw};
use attnmap_core::saliency::{compute_map, HeadAggregation, Method};
use attnmap_core::vit::{load_weights, preprocess, read_vtw, Normalization, ViTConfig, Vit};
use attnmap_core::{DType, Element};

use crate::config::ClassPolicy;
use crate::imageio::read_image;

#[derive(Debug, Clone)]
pub struct SaliencyRequest {
    pub image: PathBuf,
    pub weights: PathBuf,
    pub model: ViTConfig,
    pub method: Method,
    pub class_policy: ClassPolicy,
    pub head_agg: HeadAggregation,
    pub normalization: Normalization,
    pub k: f64,
    pub out_dir: PathBuf,
    pub dtype: DType,
}

#[derive(Debug, Clone)]
pub struct SaliencyOutput {
    pub class_index: usize,
    pub logits: Vec<f64>,
    pub argmax: PixelPos,
    pub predicted_box: AnnotationBox,
    pub files: Vec<PathBuf>,
}

impl SaliencyOutput {
    pub fn describe(&self) -> String {
        let b = self.predicted_box;
        let mut s = format!(
            "class {} logits {:?}\nargmax row {} col {}\npredicted box {} {} {} {}\n",
            self.class_index, self.logits, self.argmax.row, self.argmax.col, b.x0, b.y0, b.x1, b.y1
        );
        for f in &self.files {
            writeln!(s, "wrote {}", f.display()).expect("write to string");
        }
        s
    }
}

/// Writes `<stem>.<method>.grid.f32`, `<stem>.<method>.pixels.f32` (each
/// with a JSON sidecar) and `<stem>.<method>.pgm` into the output directory.
pub fn saliency(req: &SaliencyRequest) -> Result<SaliencyOutput> {
    if let ClassPolicy::Fixed(c) = req.class_policy {
        anyhow::ensure!(
            c < req.model.num_classes,
            "class {c} out of range for {} classes",
            req.model.num_classes
        );
    }
    let weights = load_weights(&req.weights, &req.model)
        .with_context(|| format!("loading {}", req.weights.display()))?;
    match req.dtype {
        DType::F32 => saliency_typed(req, Vit::<f32>::new(req.model.clone(), &weights)?),
        DType::F64 => saliency_typed(req, Vit::<f64>::new(req.model.clone(), &weights.cast())?),
    }
}

fn saliency_typed<F: Element>(req: &SaliencyRequest, vit: Vit<F>) -> Result<SaliencyOutput> {
    let raster = read_image(&req.image)?;
    let (x, _) = preprocess::<F>(&raster, &req.model, &req.normalization)?;
    let (logits, mut captures) = vit.forward_with_capture(&x)?;
    let class_index = req.class_policy.resolve(&logits);
    if req.method.needs_gradients() {
        captures.backward_class(class_index)?;
    }
    let map = compute_map(
        req.method,
        &captures,
        class_index,
        req.head_agg,
        req.model.image_size,
    )?;

    std::fs::create_dir_all(&req.out_dir)
        .with_context(|| format!("creating {}", req.out_dir.display()))?;
    let stem = req
        .image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let base = |suffix: &str| req.out_dir.join(format!("{stem}.{}.{suffix}", req.method));
    let grid_path = base("grid.f32");
    let pixels_path = base("pixels.f32");
    let pgm_path = base("pgm");
    write_raw(&grid_path, &map.grid, req.method)?;
    write_raw(&pixels_path, &map.pixels, req.method)?;
    write_pgm16(&pgm_path, &map.pixels)?;

    let pixels = map.pixels.cast::<f64>();
    let mask = threshold_top_percentile(&pixels, req.k)?;
    Ok(SaliencyOutput {
        class_index,
        logits: logits.data().iter().map(|v| v.as_f64()).collect(),
        argmax: argmax(&pixels)?,
        predicted_box: tightest_bbox(&mask)?,
        files: vec![
            grid_path.clone(),
            grid_path.with_extension("json"),
            pixels_path.clone(),
            pixels_path.with_extension("json"),
            pgm_path,
        ],
    })
}

/// Manifest table and parameter count. With a config, the file is also
/// validated against it.
pub fn inspect_weights(path: &Path, config: Option<&ViTConfig>) -> Result<String> {
    let (entries, store) = read_vtw(path).with_context(|| format!("reading {}", path.display()))?;
    let width = entries
        .iter()
        .map(|e| e.name.len())
        .max()
        .unwrap_or(4)
        .max(4);
    let mut out = format!("{:<width$}  dtype  {:<18}  offset\n", "name", "shape");
    for e in &entries {
        let shape = format!("{:?}", e.shape);
        writeln!(
            out,
            "{:<width$}  {:<5}  {shape:<18}  {}",
            e.name, e.dtype, e.offset
        )
        .expect("write to string");
    }
    writeln!(out, "tensors: {}", entries.len()).expect("write to string");
    writeln!(out, "parameters: {}", store.param_count()).expect("write to string");
    if let Some(config) = config {
        let extras = store.validate(config)?;
        writeln!(
            out,
            "config: ok ({} expected parameters)",
            config.param_count()
        )
        .expect("write to string");
        if !extras.is_empty() {
            writeln!(out, "unused tensors: {}", extras.join(", ")).expect("write to string");
        }
    }
    Ok(out)
}
