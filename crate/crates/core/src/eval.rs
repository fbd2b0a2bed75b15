//! Localisation metrics for saliency maps against bounding-box annotations.
//!
//! Conventions:
//! - boxes are half-open integer pixel rectangles `[x0, x1) x [y0, y1)`;
//! - argmax ties resolve to the lowest row-major index;
//! - the top-k percentile uses nearest rank on a descending sort, and a pixel
//!   is kept when its value is `>=` that rank's value, so ties can enlarge
//!   the mask beyond `ceil(k/100 * N)` pixels;
//! - quartiles interpolate linearly between order statistics.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::saliency::Method;
use crate::tensor::{Element, Tensor};
use crate::vit::ResizeTransform;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    Original,
    #[default]
    Model,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AnnotationBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub frame: Frame,
}

impl AnnotationBox {
    /// A box in model (input-resolution) coordinates.
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        Self::in_frame(x0, y0, x1, y1, Frame::Model)
    }

    pub fn in_frame(x0: usize, y0: usize, x1: usize, y1: usize, frame: Frame) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::InvalidArgument(format!(
                "degenerate box [{x0}, {y0}, {x1}, {y1}]"
            )));
        }
        Ok(Self {
            x0,
            y0,
            x1,
            y1,
            frame,
        })
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, pos: PixelPos) -> bool {
        (self.x0..self.x1).contains(&pos.col) && (self.y0..self.y1).contains(&pos.row)
    }

    /// Rescales an original-frame box through the preprocessing resize,
    /// rounding outward to whole model pixels. Model-frame boxes are
    /// returned unchanged.
    pub fn to_model_frame(&self, transform: &ResizeTransform) -> Result<Self> {
        match self.frame {
            Frame::Model => Ok(*self),
            Frame::Original => {
                if self.x1 > transform.src_width || self.y1 > transform.src_height {
                    return Err(Error::InvalidArgument(format!(
                        "box {:?} exceeds the {}x{} image",
                        [self.x0, self.y0, self.x1, self.y1],
                        transform.src_width,
                        transform.src_height
                    )));
                }
                let (x0, x1) = transform.map_x(self.x0, self.x1);
                let (y0, y1) = transform.map_y(self.y0, self.y1);
                Self::new(x0, y0, x1, y1)
            }
        }
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelPos {
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::invalid(
                "mask",
                format!("{height}x{width} mask needs {} bits", height * width),
            ));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }
}

fn map_dims<F: Element>(map: &Tensor<F>) -> Result<(usize, usize)> {
    match *map.shape() {
        [h, w] if h > 0 && w > 0 => Ok((h, w)),
        _ => Err(Error::invalid(
            "eval",
            format!("expected a non-empty [H, W] map, got {:?}", map.shape()),
        )),
    }
}

fn require_model_frame(b: &AnnotationBox) -> Result<()> {
    if b.frame != Frame::Model {
        return Err(Error::InvalidArgument(
            "box must be rescaled to the model frame before evaluation".into(),
        ));
    }
    Ok(())
}

/// Position of the largest value; ties go to the lowest row-major index.
pub fn argmax<F: Element>(map: &Tensor<F>) -> Result<PixelPos> {
    let (_, w) = map_dims(map)?;
    let data = map.data();
    let mut best = 0;
    for (i, &v) in data.iter().enumerate() {
        if v > data[best] {
            best = i;
        }
    }
    Ok(PixelPos {
        row: best / w,
        col: best % w,
    })
}

/// Hit when the map's argmax lies inside the box.
pub fn pointing_game<F: Element>(map: &Tensor<F>, gt: &AnnotationBox) -> Result<(bool, PixelPos)> {
    require_model_frame(gt)?;
    let pos = argmax(map)?;
    Ok((gt.contains(pos), pos))
}

/// Number of pixels the nearest-rank percentile selects when values are
/// distinct: `ceil(k/100 * n)`, at least one.
pub fn top_percentile_count(k: f64, n: usize) -> usize {
    ((k * n as f64 / 100.0).ceil() as usize).clamp(1, n.max(1))
}

/// Keeps pixels whose value is at least the value at descending rank
/// `ceil(k/100 * N)`.
pub fn threshold_top_percentile<F: Element>(map: &Tensor<F>, k: f64) -> Result<BinaryMask> {
    if !(k > 0.0 && k < 100.0) {
        return Err(Error::InvalidArgument(format!(
            "k must lie in (0, 100), got {k}"
        )));
    }
    let (h, w) = map_dims(map)?;
    let values: Vec<f64> = map.data().iter().map(|v| v.as_f64()).collect();
    let mut sorted = values.clone();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let cut = sorted[top_percentile_count(k, values.len()) - 1];
    BinaryMask::new(h, w, values.iter().map(|&v| v >= cut).collect())
}

/// Smallest half-open box covering every set pixel.
pub fn tightest_bbox(mask: &BinaryMask) -> Result<AnnotationBox> {
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for row in 0..mask.height {
        for col in 0..mask.width {
            if mask.get(row, col) {
                bounds = Some(match bounds {
                    None => (col, row, col, row),
                    Some((x0, y0, x1, y1)) => (x0.min(col), y0.min(row), x1.max(col), y1.max(row)),
                });
            }
        }
    }
    let (x0, y0, x1, y1) =
        bounds.ok_or_else(|| Error::InvalidArgument("empty mask has no bounding box".into()))?;
    AnnotationBox::new(x0, y0, x1 + 1, y1 + 1)
}

/// Intersection over union of two half-open boxes; 0 when disjoint.
pub fn box_iou(a: &AnnotationBox, b: &AnnotationBox) -> f64 {
    let iw = a.x1.min(b.x1).saturating_sub(a.x0.max(b.x0));
    let ih = a.y1.min(b.y1).saturating_sub(a.y0.max(b.y0));
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Intersection over union of a mask and a box, pixel by pixel.
pub fn mask_box_iou(mask: &BinaryMask, b: &AnnotationBox) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for row in 0..mask.height {
        for col in 0..mask.width {
            let m = mask.get(row, col);
            let inside = b.contains(PixelPos { row, col });
            inter += (m && inside) as usize;
            union += (m || inside) as usize;
        }
    }
    // box pixels outside the map still count toward the union
    let clipped_w = b.x1.min(mask.width).saturating_sub(b.x0);
    let clipped_h = b.y1.min(mask.height).saturating_sub(b.y0);
    union += b.area() - clipped_w * clipped_h;
    inter as f64 / union as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IouMode {
    /// Tightest box around the thresholded mask versus the annotation box.
    #[default]
    BoxVsBox,
    /// Thresholded mask itself versus the annotation box.
    MaskVsBox,
}

impl IouMode {
    pub fn as_str(self) -> &'static str {
        match self {
            IouMode::BoxVsBox => "box-vs-box",
            IouMode::MaskVsBox => "mask-vs-box",
        }
    }
}

impl fmt::Display for IouMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for IouMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "box-vs-box" => Ok(IouMode::BoxVsBox),
            "mask-vs-box" => Ok(IouMode::MaskVsBox),
            other => Err(Error::InvalidArgument(format!(
                "unknown IoU mode {other:?} (expected box-vs-box or mask-vs-box)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub k: f64,
    pub iou_mode: IouMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            k: 5.0,
            iou_mode: IouMode::BoxVsBox,
        }
    }
}

/// Outcome for one map against one annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub hit: bool,
    pub argmax: PixelPos,
    pub iou: f64,
    pub predicted_box: AnnotationBox,
    pub mask_size: usize,
}

pub fn evaluate_sample<F: Element>(
    map: &Tensor<F>,
    gt: &AnnotationBox,
    opts: &EvalOptions,
) -> Result<SampleEval> {
    let (hit, argmax) = pointing_game(map, gt)?;
    let mask = threshold_top_percentile(map, opts.k)?;
    let predicted_box = tightest_bbox(&mask)?;
    let iou = match opts.iou_mode {
        IouMode::BoxVsBox => box_iou(&predicted_box, gt),
        IouMode::MaskVsBox => mask_box_iou(&mask, gt),
    };
    Ok(SampleEval {
        hit,
        argmax,
        iou,
        predicted_box,
        mask_size: mask.count(),
    })
}

/// One row of the per-sample report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub image: String,
    pub method: Method,
    pub hit: bool,
    pub iou: f64,
    pub argmax: PixelPos,
    pub predicted_box: AnnotationBox,
    pub gt_box: AnnotationBox,
}

impl EvalResult {
    pub fn new(
        image: impl Into<String>,
        method: Method,
        sample: &SampleEval,
        gt: AnnotationBox,
    ) -> Self {
        Self {
            image: image.into(),
            method,
            hit: sample.hit,
            iou: sample.iou,
            argmax: sample.argmax,
            predicted_box: sample.predicted_box,
            gt_box: gt,
        }
    }
}

/// `#hit / (#hit + #miss)`.
pub fn pointing_accuracy(results: &[EvalResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::InvalidArgument(
            "pointing accuracy of zero results".into(),
        ));
    }
    let hits = results.iter().filter(|r| r.hit).count();
    Ok(hits as f64 / results.len() as f64)
}

/// Linear-interpolation quantile of an ascending slice, `q` in [0, 1].
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub hits: usize,
    pub pointing_accuracy: f64,
    pub iou_mean: f64,
    pub iou_min: f64,
    pub iou_q1: f64,
    pub iou_median: f64,
    pub iou_q3: f64,
    pub iou_max: f64,
}

impl Summary {
    pub fn from_results(results: &[EvalResult]) -> Result<Self> {
        let pointing_accuracy = pointing_accuracy(results)?;
        let mut ious: Vec<f64> = results.iter().map(|r| r.iou).collect();
        ious.sort_unstable_by(f64::total_cmp);
        Ok(Self {
            count: results.len(),
            hits: results.iter().filter(|r| r.hit).count(),
            pointing_accuracy,
            iou_mean: ious.iter().sum::<f64>() / ious.len() as f64,
            iou_min: ious[0],
            iou_q1: quantile_sorted(&ious, 0.25),
            iou_median: quantile_sorted(&ious, 0.5),
            iou_q3: quantile_sorted(&ious, 0.75),
            iou_max: ious[ious.len() - 1],
        })
    }
}

/// Per-method summaries. Every method present in `results` gets one entry.
pub fn aggregate(results: &[EvalResult]) -> Result<BTreeMap<Method, Summary>> {
    let mut groups: BTreeMap<Method, Vec<EvalResult>> = BTreeMap::new();
    for r in results {
        groups.entry(r.method).or_default().push(r.clone());
    }
    if groups.is_empty() {
        return Err(Error::InvalidArgument("nothing to aggregate".into()));
    }
    groups
        .into_iter()
        .map(|(m, rs)| Ok((m, Summary::from_results(&rs)?)))
        .collect()
}
