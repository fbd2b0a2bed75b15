//! Saliency maps computed from a [`CaptureSet`].
//!
//! All three methods produce a `G x G` grid over the patch tokens (the
//! `[cls]` column is always dropped) which is then bilinearly upsampled to
//! the model's input resolution.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resample::resize_plane;
use crate::tensor::{ops, Element, Tensor};
use crate::vit::CaptureSet;

pub mod dump;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Attention,
    GradCam,
    Chefer,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::GradCam, Method::Attention, Method::Chefer];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Attention => "attention",
            Method::GradCam => "gradcam",
            Method::Chefer => "chefer",
        }
    }

    /// Whether the method needs `backward_class` to have run.
    pub fn needs_gradients(self) -> bool {
        !matches!(self, Method::Attention)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "attention" => Ok(Method::Attention),
            "gradcam" => Ok(Method::GradCam),
            "chefer" => Ok(Method::Chefer),
            other => Err(Error::InvalidArgument(format!(
                "unknown method {other:?} (expected attention, gradcam or chefer)"
            ))),
        }
    }
}

/// How attention heads are combined for the `[cls]` attention map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadAggregation {
    #[default]
    Mean,
    Max,
    Single(usize),
}

impl fmt::Display for HeadAggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeadAggregation::Mean => f.write_str("mean"),
            HeadAggregation::Max => f.write_str("max"),
            HeadAggregation::Single(h) => write!(f, "{h}"),
        }
    }
}

impl FromStr for HeadAggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(HeadAggregation::Mean),
            "max" => Ok(HeadAggregation::Max),
            other => other.parse().map(HeadAggregation::Single).map_err(|_| {
                Error::InvalidArgument(format!(
                    "unknown head aggregation {other:?} (expected mean, max or a head index)"
                ))
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap<F: Element = f32> {
    pub method: Method,
    /// `[G, G]`, row-major over patch tokens.
    pub grid: Tensor<F>,
    /// `[S, S]`, the bilinear upsampling of `grid`.
    pub pixels: Tensor<F>,
}

impl<F: Element> SaliencyMap<F> {
    pub fn from_grid(method: Method, grid: Tensor<F>, size: usize) -> Result<Self> {
        let pixels = upsample_bilinear(&grid, size)?;
        Ok(Self {
            method,
            grid,
            pixels,
        })
    }
}

/// Side of the patch grid implied by `T` tokens (one of which is `[cls]`).
fn grid_side(tokens: usize) -> Result<usize> {
    let patches = tokens.saturating_sub(1);
    let side = (patches as f64).sqrt().round() as usize;
    if side == 0 || side * side != patches {
        return Err(Error::invalid(
            "saliency",
            format!("{patches} patch tokens do not form a square grid"),
        ));
    }
    Ok(side)
}

/// `[cls]` row of the last layer's attention over the patch columns,
/// combined across heads.
pub fn attention_cls_grid<F: Element>(
    captures: &CaptureSet<F>,
    agg: HeadAggregation,
) -> Result<Tensor<F>> {
    let last = captures
        .attention()
        .last()
        .ok_or_else(|| Error::State("no attention layers captured".into()))?;
    let (heads, t) = (last.shape()[0], last.shape()[1]);
    let side = grid_side(t)?;
    let cls_row = |h: usize| &last.data()[h * t * t + 1..h * t * t + t];
    let values: Vec<F> = match agg {
        HeadAggregation::Mean => {
            let n = F::from_f64(heads as f64);
            (0..t - 1)
                .map(|j| (0..heads).map(|h| cls_row(h)[j]).sum::<F>() / n)
                .collect()
        }
        HeadAggregation::Max => (0..t - 1)
            .map(|j| {
                (0..heads)
                    .map(|h| cls_row(h)[j])
                    .fold(F::neg_infinity(), F::max)
            })
            .collect(),
        HeadAggregation::Single(h) => {
            if h >= heads {
                return Err(Error::InvalidArgument(format!(
                    "head {h} out of range for {heads} heads"
                )));
            }
            cls_row(h).to_vec()
        }
    };
    Tensor::new([side, side], values)
}

/// GradCAM on the final block's patch-token features: channel weights are
/// the patch-averaged gradients, the map is the ReLU of the weighted sum.
pub fn gradcam_grid<F: Element>(captures: &CaptureSet<F>, class_index: usize) -> Result<Tensor<F>> {
    let grad = captures.features_grad(class_index)?;
    let feats = captures.features();
    let (t, d) = (feats.shape()[0], feats.shape()[1]);
    let side = grid_side(t)?;
    let patches = t - 1;
    let x = &feats.data()[d..];
    let g = &grad.data()[d..];
    let mut alpha = vec![F::zero(); d];
    for row in g.chunks(d) {
        for (a, &v) in alpha.iter_mut().zip(row) {
            *a = *a + v;
        }
    }
    let n = F::from_f64(patches as f64);
    alpha.iter_mut().for_each(|a| *a = *a / n);
    let values = x
        .chunks(d)
        .map(|row| {
            let s: F = row.iter().zip(&alpha).map(|(&xv, &a)| xv * a).sum();
            s.max(F::zero())
        })
        .collect();
    Tensor::new([side, side], values)
}

/// Gradient-weighted relevance accumulated over all layers:
/// `R = I`, then per layer in forward order `R += mean_h((dA * A)+) R`.
/// The map is the `[cls]` row of `R` over the patch columns.
pub fn chefer_grid<F: Element>(captures: &CaptureSet<F>, class_index: usize) -> Result<Tensor<F>> {
    let grads = captures.attention_grad(class_index)?;
    let t = captures.num_tokens();
    let side = grid_side(t)?;
    let mut relevance = Tensor::<F>::eye(t);
    for (a, da) in captures.attention().iter().zip(grads) {
        let weighted = weighted_attention(a, da)?;
        let update = ops::matmul(&weighted, &relevance)?;
        relevance = ops::add(&relevance, &update)?;
    }
    Tensor::new([side, side], relevance.data()[1..t].to_vec())
}

/// `mean over heads of max(dA * A, 0)`, shape `[T, T]`.
pub fn weighted_attention<F: Element>(a: &Tensor<F>, da: &Tensor<F>) -> Result<Tensor<F>> {
    if a.shape() != da.shape() || a.rank() != 3 {
        return Err(Error::shape("weighted_attention", a.shape(), da.shape()));
    }
    let heads = a.shape()[0];
    let tt = a.shape()[1] * a.shape()[2];
    let n = F::from_f64(heads as f64);
    let mut out = vec![F::zero(); tt];
    for h in 0..heads {
        let (ah, gh) = (
            &a.data()[h * tt..(h + 1) * tt],
            &da.data()[h * tt..(h + 1) * tt],
        );
        for ((o, &x), &g) in out.iter_mut().zip(ah).zip(gh) {
            *o = *o + (x * g).max(F::zero());
        }
    }
    out.iter_mut().for_each(|v| *v = *v / n);
    Tensor::new([a.shape()[1], a.shape()[2]], out)
}

pub fn attention_cls_map<F: Element>(
    captures: &CaptureSet<F>,
    agg: HeadAggregation,
    size: usize,
) -> Result<SaliencyMap<F>> {
    SaliencyMap::from_grid(Method::Attention, attention_cls_grid(captures, agg)?, size)
}

pub fn gradcam_map<F: Element>(
    captures: &CaptureSet<F>,
    class_index: usize,
    size: usize,
) -> Result<SaliencyMap<F>> {
    SaliencyMap::from_grid(Method::GradCam, gradcam_grid(captures, class_index)?, size)
}

pub fn chefer_map<F: Element>(
    captures: &CaptureSet<F>,
    class_index: usize,
    size: usize,
) -> Result<SaliencyMap<F>> {
    SaliencyMap::from_grid(Method::Chefer, chefer_grid(captures, class_index)?, size)
}

/// Dispatches on `method`. `class_index` is ignored for attention maps.
pub fn compute_map<F: Element>(
    method: Method,
    captures: &CaptureSet<F>,
    class_index: usize,
    agg: HeadAggregation,
    size: usize,
) -> Result<SaliencyMap<F>> {
    match method {
        Method::Attention => attention_cls_map(captures, agg, size),
        Method::GradCam => gradcam_map(captures, class_index, size),
        Method::Chefer => chefer_map(captures, class_index, size),
    }
}

/// Upsamples a square `[G, G]` grid to `[size, size]` with half-pixel
/// centred bilinear interpolation.
pub fn upsample_bilinear<F: Element>(grid: &Tensor<F>, size: usize) -> Result<Tensor<F>> {
    if grid.rank() != 2 || grid.shape()[0] == 0 || grid.shape()[1] == 0 {
        return Err(Error::invalid(
            "upsample",
            format!("expected a non-empty [G, G] grid, got {:?}", grid.shape()),
        ));
    }
    if size == 0 {
        return Err(Error::InvalidArgument(
            "upsample target must be positive".into(),
        ));
    }
    let (h, w) = (grid.shape()[0], grid.shape()[1]);
    Tensor::new([size, size], resize_plane(grid.data(), h, w, size, size))
}
