//! Model-agnostic preprocessing (fit once on training data) and per-sample
//! processing into model inputs.

pub mod collate;
pub mod image;
pub mod text;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::table::{Cell, ColumnModality, ColumnSchema, MultimodalTable, ProblemType, TableSchema};
use crate::tensor::Tensor;
use crate::trainer::PresetConfig;

pub use self::image::{load_image, process_image, AugmentOp, ImageNorm};
pub use collate::{collate, Batch, Labels};
pub use text::{
    tokenize, tokenize_and_truncate, truncated_lengths, truncation_removals, TextVocab,
};

pub const PIPELINE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericStats {
    pub column: String,
    pub mean: f64,
    /// Population standard deviation; always positive.
    pub std: f64,
}

/// Sorted categories of one column. Category `categories[i]` has id `i + 1`;
/// id 0 is reserved for unseen values and nulls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalVocab {
    pub column: String,
    pub categories: Vec<String>,
}

impl CategoricalVocab {
    pub const UNKNOWN: usize = 0;

    pub fn id(&self, cell: &Cell) -> usize {
        cell.key()
            .and_then(|k| self.categories.binary_search(&k).ok())
            .map_or(Self::UNKNOWN, |i| i + 1)
    }

    /// Number of ids including the unknown slot.
    pub fn size(&self) -> usize {
        self.categories.len() + 1
    }
}

/// Encoded training target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Label {
    Class(usize),
    Value(f64),
}

/// Label encoding. Classes are sorted by their canonical key, so for a
/// binary problem the second class is the positive one. Regression targets
/// are standardized for training and mapped back on decode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelCodec {
    Classes { classes: Vec<Cell> },
    Regression { mean: f64, std: f64 },
}

impl LabelCodec {
    pub fn fit(values: &[Cell], problem: ProblemType) -> Result<Self> {
        if problem == ProblemType::Regression {
            let xs: Vec<f64> = values.iter().filter_map(Cell::as_number).collect();
            if xs.len() < 2 {
                return Err(Error::DegenerateLabel(
                    "fewer than two numeric targets".into(),
                ));
            }
            let (mean, std) = mean_std(&xs);
            return Ok(LabelCodec::Regression {
                mean,
                std: if std > 0.0 { std } else { 1.0 },
            });
        }
        let mut classes: Vec<(String, Cell)> = Vec::new();
        for v in values {
            if let Some(k) = v.key() {
                if let Err(pos) = classes.binary_search_by(|(ck, _)| ck.cmp(&k)) {
                    classes.insert(pos, (k, v.clone()));
                }
            }
        }
        Ok(LabelCodec::Classes {
            classes: classes.into_iter().map(|(_, c)| c).collect(),
        })
    }

    pub fn n_classes(&self) -> Option<usize> {
        match self {
            LabelCodec::Classes { classes } => Some(classes.len()),
            LabelCodec::Regression { .. } => None,
        }
    }

    /// Output width of the prediction head.
    pub fn output_width(&self) -> usize {
        self.n_classes().unwrap_or(1)
    }

    pub fn encode(&self, cell: &Cell) -> Option<Label> {
        match self {
            LabelCodec::Classes { classes } => {
                let k = cell.key()?;
                classes
                    .iter()
                    .position(|c| c.key().as_deref() == Some(k.as_str()))
                    .map(Label::Class)
            }
            LabelCodec::Regression { mean, std } => {
                cell.as_number().map(|x| Label::Value((x - mean) / std))
            }
        }
    }

    pub fn decode_class(&self, index: usize) -> Cell {
        match self {
            LabelCodec::Classes { classes } => classes[index].clone(),
            LabelCodec::Regression { .. } => Cell::Null,
        }
    }

    pub fn decode_value(&self, v: f64) -> f64 {
        match self {
            LabelCodec::Regression { mean, std } => v * std + mean,
            LabelCodec::Classes { .. } => v,
        }
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Fitted preprocessing state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    pub version: u32,
    pub kept_columns: Vec<ColumnSchema>,
    pub dropped_columns: Vec<String>,
    pub numeric_stats: Vec<NumericStats>,
    pub categorical_vocab: Vec<CategoricalVocab>,
    pub text_columns: Vec<String>,
    pub text_vocab: TextVocab,
    pub image_columns: Vec<ColumnSchema>,
    pub label_column: Option<String>,
    pub label_codec: Option<LabelCodec>,
    pub image_norm: ImageNorm,
    pub max_text_len: usize,
    pub image_size: usize,
}

/// Fits the preprocessing state on a training table.
pub fn fit_pipeline(
    table: &MultimodalTable,
    schema: &TableSchema,
    config: &PresetConfig,
) -> Result<PipelineState> {
    if table.n_rows() == 0 {
        return Err(Error::EmptyTrainSet);
    }
    let mut state = PipelineState {
        version: PIPELINE_VERSION,
        kept_columns: Vec::new(),
        dropped_columns: Vec::new(),
        numeric_stats: Vec::new(),
        categorical_vocab: Vec::new(),
        text_columns: Vec::new(),
        text_vocab: TextVocab::default(),
        image_columns: Vec::new(),
        label_column: schema.label_column.clone(),
        label_codec: None,
        image_norm: ImageNorm::default(),
        max_text_len: config.max_text_len,
        image_size: config.image_size,
    };
    let mut text_cells: Vec<&str> = Vec::new();
    for col in &schema.columns {
        let values = &table
            .column(&col.name)
            .ok_or_else(|| {
                Error::SchemaMismatch(format!("training data lacks column `{}`", col.name))
            })?
            .values;
        let kept = match col.modality {
            ColumnModality::NonInformative => false,
            ColumnModality::Numeric => {
                let xs: Vec<f64> = values.iter().filter_map(Cell::as_number).collect();
                let (mean, std) = if xs.is_empty() {
                    (0.0, 0.0)
                } else {
                    mean_std(&xs)
                };
                let ok = std > 0.0 && std.is_finite();
                if ok {
                    state.numeric_stats.push(NumericStats {
                        column: col.name.clone(),
                        mean,
                        std,
                    });
                }
                ok
            }
            ColumnModality::Categorical => {
                let mut cats: Vec<String> = values.iter().filter_map(Cell::key).collect();
                cats.sort();
                cats.dedup();
                let ok = cats.len() > 1;
                if ok {
                    state.categorical_vocab.push(CategoricalVocab {
                        column: col.name.clone(),
                        categories: cats,
                    });
                }
                ok
            }
            ColumnModality::Text => {
                let ok = values.iter().any(|c| !c.is_null());
                if ok {
                    state.text_columns.push(col.name.clone());
                    text_cells.extend(values.iter().filter_map(Cell::as_text));
                }
                ok
            }
            m if m.is_image() => {
                let ok = values.iter().any(|c| !c.is_null());
                if ok {
                    state.image_columns.push(col.clone());
                }
                ok
            }
            _ => false,
        };
        if kept {
            state.kept_columns.push(col.clone());
        } else {
            state.dropped_columns.push(col.name.clone());
        }
    }
    if state.kept_columns.is_empty() {
        return Err(Error::AllColumnsDropped);
    }
    state.text_vocab = TextVocab::fit(text_cells, text::MIN_TOKEN_FREQ);
    if let Some(label) = &schema.label_column {
        if let Some(col) = table.column(label) {
            if !schema.problem_type.is_matching() {
                state.label_codec = Some(LabelCodec::fit(&col.values, schema.problem_type)?);
            }
        }
    }
    if !state.dropped_columns.is_empty() {
        log::info!(
            "dropped non-informative columns: {:?}",
            state.dropped_columns
        );
    }
    Ok(state)
}

/// Model inputs for one row.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessedSample {
    pub numeric: Vec<f64>,
    pub categorical: Vec<usize>,
    /// Empty when there are no text columns.
    pub text_tokens: Vec<usize>,
    /// One `C×H×W` tensor per image column; zeros when missing.
    pub images: Vec<Tensor>,
    pub image_present: Vec<bool>,
    pub label: Option<Label>,
}

impl PipelineState {
    pub fn has_text(&self) -> bool {
        !self.text_columns.is_empty()
    }

    pub fn n_numeric(&self) -> usize {
        self.numeric_stats.len()
    }

    /// Verifies that `table` has every kept feature column.
    pub fn check_columns(&self, table: &MultimodalTable) -> Result<()> {
        for c in &self.kept_columns {
            if table.column(&c.name).is_none() {
                return Err(Error::SchemaMismatch(format!(
                    "missing feature column `{}`",
                    c.name
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let state: PipelineState = serde_json::from_str(s)?;
        if state.version != PIPELINE_VERSION {
            return Err(Error::VersionMismatch {
                found: state.version,
                expected: PIPELINE_VERSION,
            });
        }
        Ok(state)
    }

    /// Processes row `row` of `table`. With `augment` off the result is a
    /// pure function of the row and the state.
    pub fn transform_sample(
        &self,
        table: &MultimodalTable,
        row: usize,
        augment: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<ProcessedSample> {
        let cell = |name: &str| {
            table
                .cell(name, row)
                .ok_or_else(|| Error::SchemaMismatch(format!("missing feature column `{name}`")))
        };
        let numeric = self
            .numeric_stats
            .iter()
            .map(|s| {
                let x = cell(&s.column)?.as_number().unwrap_or(s.mean);
                Ok((x - s.mean) / s.std)
            })
            .collect::<Result<Vec<f64>>>()?;
        let categorical = self
            .categorical_vocab
            .iter()
            .map(|v| cell(&v.column).map(|c| v.id(c)))
            .collect::<Result<Vec<usize>>>()?;
        let text_tokens = if self.has_text() {
            let fields = self
                .text_columns
                .iter()
                .map(|name| {
                    Ok(cell(name)?
                        .as_text()
                        .map(|t| self.text_vocab.encode(t))
                        .unwrap_or_default())
                })
                .collect::<Result<Vec<_>>>()?;
            tokenize_and_truncate(&fields, self.max_text_len)?
        } else {
            Vec::new()
        };
        let mut images = Vec::with_capacity(self.image_columns.len());
        let mut image_present = Vec::with_capacity(self.image_columns.len());
        for col in &self.image_columns {
            let c = cell(&col.name)?;
            if c.is_null() {
                images.push(Tensor::zeros(&[
                    image::CHANNELS,
                    self.image_size,
                    self.image_size,
                ]));
                image_present.push(false);
                continue;
            }
            let img = load_image(c, col.modality, table.image_root()).map_err(|reason| {
                Error::ImageDecode {
                    column: col.name.clone(),
                    row,
                    reason,
                }
            })?;
            images.push(process_image(
                &img,
                self.image_size,
                &self.image_norm,
                augment,
                rng,
            ));
            image_present.push(true);
        }
        let label = match (&self.label_codec, &self.label_column) {
            (Some(codec), Some(name)) => table.cell(name, row).and_then(|c| codec.encode(c)),
            _ => None,
        };
        Ok(ProcessedSample {
            numeric,
            categorical,
            text_tokens,
            images,
            image_present,
            label,
        })
    }
}

/// Independent stream for one sample in one epoch. Any worker can
/// reconstruct it, so parallel loading never changes results.
pub fn sample_rng(seed: u64, epoch: u64, row: u64) -> ChaCha8Rng {
    let mut h = splitmix(seed ^ 0x5151_f00d);
    h = splitmix(h ^ epoch);
    h = splitmix(h ^ row);
    ChaCha8Rng::seed_from_u64(h)
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::{Column, DetectionThresholds};

    fn schema_for(table: &MultimodalTable, label: Option<&str>) -> TableSchema {
        TableSchema::infer(
            table,
            label,
            ProblemType::Multiclass,
            &DetectionThresholds::default(),
        )
        .unwrap()
    }

    #[test]
    fn numeric_stats_use_population_std() {
        let t = MultimodalTable::new(vec![Column::new(
            "x",
            vec![2.0.into(), 4.0.into(), 6.0.into()],
        )])
        .unwrap();
        let st = fit_pipeline(&t, &schema_for(&t, None), &PresetConfig::default()).unwrap();
        assert_eq!(st.numeric_stats[0].mean, 4.0);
        assert!((st.numeric_stats[0].std - (8.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn constant_column_dropped_and_unknown_category() {
        let t = MultimodalTable::new(vec![
            Column::new("k", vec!["x".into(), "x".into(), "x".into()]),
            Column::new("c", vec!["a".into(), "b".into(), "a".into()]),
        ])
        .unwrap();
        let mut schema = schema_for(&t, None);
        schema.columns[1].modality = ColumnModality::Categorical;
        let st = fit_pipeline(&t, &schema, &PresetConfig::default()).unwrap();
        assert_eq!(st.dropped_columns, vec!["k"]);
        assert_eq!(
            st.categorical_vocab[0].id(&"c".into()),
            CategoricalVocab::UNKNOWN
        );
        assert_eq!(st.categorical_vocab[0].id(&"b".into()), 2);
    }

    #[test]
    fn all_dropped_is_an_error() {
        let t = MultimodalTable::new(vec![Column::new("k", vec!["x".into(), "x".into()])]).unwrap();
        assert!(matches!(
            fit_pipeline(&t, &schema_for(&t, None), &PresetConfig::default()),
            Err(Error::AllColumnsDropped)
        ));
    }

    #[test]
    fn null_numeric_imputes_to_mean() {
        let t = MultimodalTable::new(vec![Column::new(
            "x",
            vec![2.0.into(), 6.0.into(), Cell::Null],
        )])
        .unwrap();
        let st = fit_pipeline(&t, &schema_for(&t, None), &PresetConfig::default()).unwrap();
        let mut rng = sample_rng(0, 0, 0);
        let s = st.transform_sample(&t, 2, false, &mut rng).unwrap();
        assert_eq!(s.numeric, vec![0.0]);
    }

    #[test]
    fn missing_image_is_zero_with_flag() {
        let png = image::encode_png(&::image::RgbImage::from_pixel(
            4,
            4,
            ::image::Rgb([9, 9, 9]),
        ));
        let mut other = ::image::RgbImage::from_pixel(4, 4, ::image::Rgb([9, 9, 9]));
        other.put_pixel(0, 0, ::image::Rgb([0, 0, 0]));
        let t = MultimodalTable::new(vec![Column::new(
            "img",
            vec![
                Cell::Bytes(png),
                Cell::Null,
                Cell::Bytes(image::encode_png(&other)),
            ],
        )])
        .unwrap();
        let st = fit_pipeline(&t, &schema_for(&t, None), &PresetConfig::default()).unwrap();
        let mut rng = sample_rng(0, 0, 1);
        let s = st.transform_sample(&t, 1, false, &mut rng).unwrap();
        assert_eq!(s.image_present, vec![false]);
        assert!(s.images[0].data().iter().all(|v| *v == 0.0));
        assert_eq!(s.images[0].shape(), &[3, 32, 32]);
    }

    #[test]
    fn bad_image_reports_column_and_row() {
        let t = MultimodalTable::new(vec![Column::new(
            "img",
            vec![
                Cell::Bytes(b"\x89PNG\r\n\x1a\nbroken".to_vec()),
                Cell::Bytes(b"\x89PNG\r\n\x1a\nbroken2".to_vec()),
            ],
        )])
        .unwrap();
        let st = fit_pipeline(&t, &schema_for(&t, None), &PresetConfig::default()).unwrap();
        let err = st
            .transform_sample(&t, 1, false, &mut sample_rng(0, 0, 1))
            .unwrap_err();
        assert!(matches!(err, Error::ImageDecode { ref column, row: 1, .. } if column == "img"));
    }

    #[test]
    fn json_round_trip_is_byte_identical() {
        let t = MultimodalTable::new(vec![
            Column::new("x", vec![0.1.into(), 0.7.into(), 1.3.into()]),
            Column::new("y", vec!["a".into(), "b".into(), "a".into()]),
        ])
        .unwrap();
        let st = fit_pipeline(&t, &schema_for(&t, Some("y")), &PresetConfig::default()).unwrap();
        let s1 = st.to_json().unwrap();
        let s2 = PipelineState::from_json(&s1).unwrap().to_json().unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn label_codec_sorted_classes() {
        let codec = LabelCodec::fit(
            &["yes".into(), "no".into(), "yes".into()],
            ProblemType::Binary,
        )
        .unwrap();
        assert_eq!(codec.encode(&"yes".into()), Some(Label::Class(1)));
        assert_eq!(codec.decode_class(0), Cell::from("no"));
        assert_eq!(codec.encode(&"maybe".into()), None);
    }
}
