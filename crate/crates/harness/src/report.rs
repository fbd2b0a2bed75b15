//! Per-sample CSV and per-method summary JSON.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use attnmap_core::eval::{aggregate, AnnotationBox, EvalResult, Summary};
use serde::{Deserialize, Serialize};

pub const CSV_HEADER: &str = "image,method,init,hit,iou,argmax_row,argmax_col,pred_box,gt_box";

/// `printf("%g")` with six significant digits.
pub fn format_g(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    // round first, then pick the notation from the rounded exponent
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa), exp.abs())
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn box_field(b: &AnnotationBox) -> String {
    format!("{} {} {} {}", b.x0, b.y0, b.x1, b.y1)
}

pub fn csv_string(results: &[EvalResult], init: &str) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(CSV_HEADER.split(','))
        .expect("write to memory");
    for r in results {
        w.write_record([
            r.image.clone(),
            r.method.to_string(),
            init.to_string(),
            (r.hit as u8).to_string(),
            format_g(r.iou),
            r.argmax.row.to_string(),
            r.argmax.col.to_string(),
            box_field(&r.predicted_box),
            box_field(&r.gt_box),
        ])
        .expect("write to memory");
    }
    let bytes = w.into_inner().expect("flush to memory");
    String::from_utf8(bytes).expect("fields are utf-8")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub image: String,
    pub error: String,
}

/// Summary JSON layout. The run settings come first so a reader can tell
/// which class the maps explain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub init: String,
    pub class_policy: String,
    pub k: f64,
    pub iou_mode: String,
    pub head_agg: String,
    pub dtype: String,
    pub records: usize,
    pub evaluated: usize,
    pub failures: Vec<Failure>,
    pub methods: BTreeMap<String, Summary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub init: String,
    pub class_policy: String,
    pub k: f64,
    pub iou_mode: String,
    pub head_agg: String,
    pub dtype: String,
}

impl SummaryReport {
    pub fn build(
        settings: RunSettings,
        records: usize,
        results: &[EvalResult],
        failures: Vec<Failure>,
    ) -> Result<Self> {
        let methods = if results.is_empty() {
            BTreeMap::new()
        } else {
            aggregate(results)?
                .into_iter()
                .map(|(m, s)| (m.to_string(), s))
                .collect()
        };
        Ok(Self {
            init: settings.init,
            class_policy: settings.class_policy,
            k: settings.k,
            iou_mode: settings.iou_mode,
            head_agg: settings.head_agg,
            dtype: settings.dtype,
            records,
            evaluated: records - failures.len(),
            failures,
            methods,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serialises") + "\n"
    }
}

pub fn write_outputs(dir: &Path, csv: &str, summary: &SummaryReport) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("results.csv"), csv)?;
    std::fs::write(dir.join("summary.json"), summary.to_json())?;
    Ok(())
}
