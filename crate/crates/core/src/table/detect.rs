use std::collections::HashSet;

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{Cell, ColumnModality, ProblemType};
use crate::error::{Error, Result};

/// Cutoffs used by modality and problem-type inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionThresholds {
    /// Minimum fraction of non-null cells that must parse as numbers.
    pub numeric_fraction: f64,
    /// Minimum fraction of non-null cells that must look like images.
    pub image_fraction: f64,
    pub categorical_max_ratio: f64,
    pub categorical_max_distinct: usize,
    /// A numeric label is a regression target when its distinct ratio
    /// exceeds this and it is either non-integral or has many distinct values.
    pub regression_min_ratio: f64,
    pub regression_min_distinct: usize,
    pub image_extensions: Vec<String>,
}

impl Default for DetectionThresholds {
    fn default() -> Self {
        DetectionThresholds {
            numeric_fraction: 0.95,
            image_fraction: 0.95,
            categorical_max_ratio: 0.2,
            categorical_max_distinct: 100,
            regression_min_ratio: 0.3,
            regression_min_distinct: 20,
            image_extensions: ["jpg", "jpeg", "png", "bmp", "gif"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

pub(crate) fn has_image_magic(bytes: &[u8]) -> bool {
    bytes.starts_with(b"\x89PNG\r\n\x1a\n")
        || bytes.starts_with(&[0xFF, 0xD8, 0xFF])
        || bytes.starts_with(b"GIF87a")
        || bytes.starts_with(b"GIF89a")
        || bytes.starts_with(b"BM")
}

fn is_base64_image(s: &str) -> bool {
    let s = s.trim();
    if s.len() < 12 {
        return false;
    }
    // Decoding a short aligned prefix is enough to see the magic number.
    let prefix = &s[..s.len().min(24) / 4 * 4];
    base64::engine::general_purpose::STANDARD
        .decode(prefix)
        .map(|b| has_image_magic(&b))
        .unwrap_or(false)
}

fn has_image_extension(s: &str, exts: &[String]) -> bool {
    match s.trim().rsplit_once('.') {
        Some((stem, ext)) if !stem.is_empty() => exts.iter().any(|e| e.eq_ignore_ascii_case(ext)),
        _ => false,
    }
}

/// Assigns exactly one modality to a column of cells.
///
/// Rules are tried in priority order: constant columns are non-informative,
/// then image encodings (raw bytes, paths, base64), then numeric, then
/// categorical, and finally free text.
pub fn infer_column_modality(
    values: &[Cell],
    thresholds: &DetectionThresholds,
) -> Result<ColumnModality> {
    if values.is_empty() {
        return Err(Error::EmptyColumn(String::new()));
    }
    let non_null: Vec<&Cell> = values.iter().filter(|c| !c.is_null()).collect();
    let distinct: HashSet<String> = non_null.iter().filter_map(|c| c.key()).collect();
    if distinct.len() <= 1 {
        return Ok(ColumnModality::NonInformative);
    }
    let n = non_null.len() as f64;
    let frac =
        |pred: &dyn Fn(&Cell) -> bool| non_null.iter().filter(|c| pred(c)).count() as f64 / n;

    if frac(&|c| matches!(c, Cell::Bytes(b) if has_image_magic(b))) >= thresholds.image_fraction {
        return Ok(ColumnModality::ImageBytes);
    }
    let exts = &thresholds.image_extensions;
    if frac(&|c| matches!(c, Cell::Text(s) if has_image_extension(s, exts)))
        >= thresholds.image_fraction
    {
        return Ok(ColumnModality::ImagePath);
    }
    if frac(&|c| matches!(c, Cell::Text(s) if is_base64_image(s))) >= thresholds.image_fraction {
        return Ok(ColumnModality::ImageBase64);
    }
    if frac(&|c| c.as_number().is_some()) >= thresholds.numeric_fraction {
        return Ok(ColumnModality::Numeric);
    }
    if non_null.iter().any(|c| matches!(c, Cell::Bytes(_))) {
        // Opaque non-image bytes carry nothing the backbones can consume.
        return Ok(ColumnModality::NonInformative);
    }
    let ratio = distinct.len() as f64 / n;
    if ratio <= thresholds.categorical_max_ratio
        && distinct.len() <= thresholds.categorical_max_distinct
    {
        Ok(ColumnModality::Categorical)
    } else {
        Ok(ColumnModality::Text)
    }
}

/// Infers binary / multiclass / regression from a label column.
pub fn infer_problem_type(
    label_values: &[Cell],
    thresholds: &DetectionThresholds,
) -> Result<ProblemType> {
    let non_null: Vec<&Cell> = label_values.iter().filter(|c| !c.is_null()).collect();
    if non_null.is_empty() {
        return Err(Error::DegenerateLabel("no non-null labels".into()));
    }
    let distinct: HashSet<String> = non_null.iter().filter_map(|c| c.key()).collect();
    match distinct.len() {
        1 => Err(Error::DegenerateLabel(
            distinct.into_iter().next().unwrap_or_default(),
        )),
        2 => Ok(ProblemType::Binary),
        k => {
            let numbers: Option<Vec<f64>> = non_null.iter().map(|c| c.as_number()).collect();
            let ratio = k as f64 / non_null.len() as f64;
            let is_regression = numbers.is_some_and(|xs| {
                let integral = xs.iter().all(|x| x.fract() == 0.0);
                ratio > thresholds.regression_min_ratio
                    && (!integral || k > thresholds.regression_min_distinct)
            });
            Ok(if is_regression {
                ProblemType::Regression
            } else {
                ProblemType::Multiclass
            })
        }
    }
}
