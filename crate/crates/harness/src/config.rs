use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use attnmap_core::eval::IouMode;
use attnmap_core::saliency::{HeadAggregation, Method};
use attnmap_core::vit::{predicted_class, Normalization, ViTConfig};
use attnmap_core::{DType, Element, Tensor};

/// Which logit the gradient-based maps explain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassPolicy {
    Predicted,
    Fixed(usize),
}

impl Default for ClassPolicy {
    fn default() -> Self {
        ClassPolicy::Fixed(1)
    }
}

impl ClassPolicy {
    pub fn resolve<F: Element>(self, logits: &Tensor<F>) -> usize {
        match self {
            ClassPolicy::Predicted => predicted_class(logits),
            ClassPolicy::Fixed(c) => c,
        }
    }
}

impl fmt::Display for ClassPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassPolicy::Predicted => f.write_str("predicted"),
            ClassPolicy::Fixed(c) => write!(f, "fixed({c})"),
        }
    }
}

impl FromStr for ClassPolicy {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "predicted" {
            return Ok(ClassPolicy::Predicted);
        }
        s.parse()
            .map(ClassPolicy::Fixed)
            .with_context(|| format!("class must be \"predicted\" or a class index, got {s:?}"))
    }
}

/// A preset name (`vit-b16`, `tiny`) or a path to a JSON config file.
pub fn resolve_model_config(name: &str) -> Result<ViTConfig> {
    let config = match ViTConfig::preset(name) {
        Some(c) => c,
        None => {
            let text = std::fs::read_to_string(name).with_context(|| {
                format!("{name:?} is neither a preset (vit-b16, tiny) nor a readable file")
            })?;
            serde_json::from_str(&text).with_context(|| format!("parsing model config {name}"))?
        }
    };
    config.validate()?;
    Ok(config)
}

/// Parses `a,b,c` into three floats.
pub fn parse_triple(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("expected three comma-separated numbers, got {s:?}"))?;
    match parts.as_slice() {
        [a, b, c] => Ok([*a, *b, *c]),
        _ => bail!("expected three comma-separated numbers, got {s:?}"),
    }
}

/// Everything one `evaluate` run needs.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub weights: PathBuf,
    pub model: ViTConfig,
    pub data_dir: PathBuf,
    pub annotations: PathBuf,
    pub methods: Vec<Method>,
    pub class_policy: ClassPolicy,
    pub k: f64,
    pub head_agg: HeadAggregation,
    pub iou_mode: IouMode,
    pub normalization: Normalization,
    /// Free-form label for the weight initialisation, copied into every row.
    pub init: String,
    pub out_dir: PathBuf,
    pub jobs: usize,
    pub dtype: DType,
}

impl RunConfig {
    /// Defaults for everything except the four input paths and the model.
    pub fn new(
        weights: &Path,
        model: ViTConfig,
        data_dir: &Path,
        annotations: &Path,
        out_dir: &Path,
    ) -> Self {
        let init = weights
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self {
            weights: weights.to_path_buf(),
            model,
            data_dir: data_dir.to_path_buf(),
            annotations: annotations.to_path_buf(),
            methods: vec![Method::GradCam, Method::Attention, Method::Chefer],
            class_policy: ClassPolicy::default(),
            k: 5.0,
            head_agg: HeadAggregation::Mean,
            iou_mode: IouMode::BoxVsBox,
            normalization: Normalization::default(),
            init,
            out_dir: out_dir.to_path_buf(),
            jobs: 1,
            dtype: DType::F32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            bail!("at least one method is required");
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                bail!("method {m} listed twice");
            }
        }
        if !(self.k > 0.0 && self.k < 100.0) {
            bail!("k must lie in (0, 100), got {}", self.k);
        }
        if let ClassPolicy::Fixed(c) = self.class_policy {
            if c >= self.model.num_classes {
                bail!(
                    "class {c} out of range for {} classes",
                    self.model.num_classes
                );
            }
        }
        if let HeadAggregation::Single(h) = self.head_agg {
            if h >= self.model.heads {
                bail!("head {h} out of range for {} heads", self.model.heads);
            }
        }
        if self.jobs == 0 {
            bail!("jobs must be at least 1");
        }
        self.model.validate()?;
        self.normalization.validate()?;
        for (what, path) in [
            ("weights", &self.weights),
            ("data directory", &self.data_dir),
            ("annotations", &self.annotations),
        ] {
            if !path.exists() {
                bail!("{what} {} does not exist", path.display());
            }
        }
        Ok(())
    }
}
