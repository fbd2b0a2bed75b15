//! JSON Lines annotation files, one record per line:
//! `{"image": "<relative path>", "box": [x0, y0, x1, y1], "positive": true}`.
//! Boxes are half-open and in original image pixels.

use std::path::Path;

use anyhow::{Context, Result};
use attnmap_core::eval::{AnnotationBox, Frame};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub image: String,
    #[serde(rename = "box")]
    pub bbox: [usize; 4],
    #[serde(default = "default_positive")]
    pub positive: bool,
}

fn default_positive() -> bool {
    true
}

impl AnnotationRecord {
    pub fn original_box(&self) -> attnmap_core::Result<AnnotationBox> {
        let [x0, y0, x1, y1] = self.bbox;
        AnnotationBox::in_frame(x0, y0, x1, y1, Frame::Original)
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("annotation serialises")
    }
}

/// Parses every non-blank line. A malformed line fails the whole file.
pub fn parse_annotations(text: &str) -> Result<Vec<AnnotationRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("annotation line {}", i + 1)))
        .collect()
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_annotations(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&r.to_line());
        text.push('\n');
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_lines_and_skips_blanks() {
        let text = "{\"image\": \"a.ppm\", \"box\": [1, 2, 30, 40], \"positive\": true}\n\n{\"image\":\"b.png\",\"box\":[0,0,5,5]}\n";
        let recs = parse_annotations(text).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].bbox, [1, 2, 30, 40]);
        assert!(recs[1].positive);
        assert_eq!(recs[0].original_box().unwrap().frame, Frame::Original);
    }

    #[test]
    fn malformed_line_names_its_number() {
        let err = parse_annotations("{\"image\":\"a\",\"box\":[0,0,1,1]}\n{\"image\":\"b\"}\n")
            .unwrap_err();
        assert!(format!("{err:#}").contains("line 2"));
    }

    #[test]
    fn line_round_trip() {
        let r = AnnotationRecord {
            image: "x/y.ppm".into(),
            bbox: [3, 4, 5, 6],
            positive: false,
        };
        assert_eq!(
            r.to_line(),
            r#"{"image":"x/y.ppm","box":[3,4,5,6],"positive":false}"#
        );
        assert_eq!(parse_annotations(&r.to_line()).unwrap(), vec![r]);
    }

    #[test]
    fn degenerate_box_is_an_error() {
        let r = AnnotationRecord {
            image: "a".into(),
            bbox: [5, 0, 5, 3],
            positive: true,
        };
        assert!(r.original_box().is_err());
    }
}
