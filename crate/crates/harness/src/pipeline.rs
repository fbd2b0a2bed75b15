//! Batch evaluation over an annotation file.

use anyhow::{Context, Result};
use attnmap_core::eval::{evaluate_sample, EvalOptions, EvalResult};
use attnmap_core::saliency::compute_map;
use attnmap_core::vit::{load_weights, preprocess, Vit};
use attnmap_core::{DType, Element};
use rayon::prelude::*;

use crate::annotations::{read_annotations, AnnotationRecord};
use crate::config::RunConfig;
use crate::imageio::read_image;
use crate::report::{csv_string, Failure, RunSettings, SummaryReport};

/// Outcome of one run, in annotation-file order.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub results: Vec<EvalResult>,
    pub failures: Vec<Failure>,
    pub records: usize,
}

impl RunOutput {
    pub fn csv(&self, run: &RunConfig) -> String {
        csv_string(&self.results, &run.init)
    }

    pub fn summary(&self, run: &RunConfig) -> Result<SummaryReport> {
        let settings = RunSettings {
            init: run.init.clone(),
            class_policy: run.class_policy.to_string(),
            k: run.k,
            iou_mode: run.iou_mode.to_string(),
            head_agg: run.head_agg.to_string(),
            dtype: run.dtype.to_string(),
        };
        SummaryReport::build(settings, self.records, &self.results, self.failures.clone())
    }
}

/// Runs every requested method on every annotated image. Per-record
/// failures are collected, not raised; only setup errors abort the run.
pub fn evaluate(run: &RunConfig) -> Result<RunOutput> {
    run.validate()?;
    let records = read_annotations(&run.annotations)?;
    let weights = load_weights(&run.weights, &run.model)
        .with_context(|| format!("loading {}", run.weights.display()))?;
    let outcomes = match run.dtype {
        DType::F32 => {
            evaluate_records(run, &records, Vit::<f32>::new(run.model.clone(), &weights)?)?
        }
        DType::F64 => evaluate_records(
            run,
            &records,
            Vit::<f64>::new(run.model.clone(), &weights.cast())?,
        )?,
    };

    let mut results = Vec::new();
    let mut failures = Vec::new();
    for (record, outcome) in records.iter().zip(outcomes) {
        match outcome {
            Ok(rows) => results.extend(rows),
            Err(e) => {
                log::warn!("{}: {e:#}", record.image);
                failures.push(Failure {
                    image: record.image.clone(),
                    error: format!("{e:#}"),
                });
            }
        }
    }
    Ok(RunOutput {
        results,
        failures,
        records: records.len(),
    })
}

fn evaluate_records<F: Element>(
    run: &RunConfig,
    records: &[AnnotationRecord],
    vit: Vit<F>,
) -> Result<Vec<Result<Vec<EvalResult>>>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(run.jobs)
        .build()?;
    // collect() on an indexed parallel iterator keeps input order
    Ok(pool.install(|| {
        records
            .par_iter()
            .map(|record| evaluate_record(run, &vit, record))
            .collect()
    }))
}

pub fn evaluate_record<F: Element>(
    run: &RunConfig,
    vit: &Vit<F>,
    record: &AnnotationRecord,
) -> Result<Vec<EvalResult>> {
    let path = run.data_dir.join(&record.image);
    let raster = read_image(&path)?;
    let (x, transform) = preprocess::<F>(&raster, &run.model, &run.normalization)?;
    let gt = record.original_box()?.to_model_frame(&transform)?;
    let (logits, mut captures) = vit.forward_with_capture(&x)?;
    let class = run.class_policy.resolve(&logits);
    if run.methods.iter().any(|m| m.needs_gradients()) {
        captures.backward_class(class)?;
    }
    let opts = EvalOptions {
        k: run.k,
        iou_mode: run.iou_mode,
    };
    run.methods
        .iter()
        .map(|&method| {
            let map = compute_map(method, &captures, class, run.head_agg, run.model.image_size)?;
            // metrics always run on f64 maps
            let sample = evaluate_sample(&map.pixels.cast::<f64>(), &gt, &opts)?;
            Ok(EvalResult::new(record.image.clone(), method, &sample, gt))
        })
        .collect()
}
