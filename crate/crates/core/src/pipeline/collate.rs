use super::{Label, ProcessedSample};
use crate::error::{Error, Result};
use crate::pipeline::text::PAD;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

/// Stacked samples. Token rows are padded with PAD to the longest sequence
/// in the batch; `text_mask` is 1 on real tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    /// `[B, n_numeric]`
    pub numeric: Tensor,
    /// Row-major `[B, n_categorical]`.
    pub categorical: Vec<usize>,
    pub n_categorical: usize,
    /// Row-major `[B, seq_len]`.
    pub tokens: Vec<usize>,
    pub seq_len: usize,
    /// `[B, seq_len]`
    pub text_mask: Tensor,
    /// One `[B, C, H, W]` tensor per image column.
    pub images: Vec<Tensor>,
    /// `[B, n_images]`, 1.0 where the image exists.
    pub image_present: Tensor,
    pub labels: Option<Labels>,
}

impl Batch {
    pub fn has_text(&self) -> bool {
        self.seq_len > 0
    }

    pub fn n_numeric(&self) -> usize {
        self.numeric.shape()[1]
    }

    pub fn token_row(&self, i: usize) -> &[usize] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }

    /// Reconstructs sample `i` without padding.
    pub fn row(&self, i: usize) -> ProcessedSample {
        let n_real = self.text_mask.row(i).iter().filter(|m| **m > 0.0).count();
        ProcessedSample {
            numeric: self.numeric.row(i).to_vec(),
            categorical: self.categorical[i * self.n_categorical..(i + 1) * self.n_categorical]
                .to_vec(),
            text_tokens: self.token_row(i)[..n_real].to_vec(),
            images: self
                .images
                .iter()
                .map(|t| {
                    let per = t.len() / self.size;
                    Tensor::new(
                        t.shape()[1..].to_vec(),
                        t.data()[i * per..(i + 1) * per].to_vec(),
                    )
                })
                .collect(),
            image_present: self.image_present.row(i).iter().map(|p| *p > 0.0).collect(),
            label: self.labels.as_ref().map(|l| match l {
                Labels::Classes(c) => Label::Class(c[i]),
                Labels::Values(v) => Label::Value(v[i]),
            }),
        }
    }
}

fn layout(s: &ProcessedSample) -> (usize, usize, bool, usize, Vec<&[usize]>, Option<bool>) {
    (
        s.numeric.len(),
        s.categorical.len(),
        !s.text_tokens.is_empty(),
        s.images.len(),
        s.images.iter().map(Tensor::shape).collect(),
        s.label.map(|l| matches!(l, Label::Class(_))),
    )
}

/// Stacks samples into a batch, preserving order.
pub fn collate(samples: &[ProcessedSample]) -> Result<Batch> {
    let first = samples
        .first()
        .ok_or_else(|| Error::HeterogeneousSamples("empty sample list".into()))?;
    let reference = layout(first);
    for (i, s) in samples.iter().enumerate().skip(1) {
        if layout(s) != reference {
            return Err(Error::HeterogeneousSamples(format!(
                "sample {i} differs from sample 0 in field layout"
            )));
        }
    }
    let b = samples.len();
    let n_num = first.numeric.len();
    let n_cat = first.categorical.len();
    let seq_len = samples
        .iter()
        .map(|s| s.text_tokens.len())
        .max()
        .unwrap_or(0);

    let mut numeric = Vec::with_capacity(b * n_num);
    let mut categorical = Vec::with_capacity(b * n_cat);
    let mut tokens = vec![PAD; b * seq_len];
    let mut mask = vec![0.0; b * seq_len];
    let n_img = first.images.len();
    let mut images: Vec<Vec<f64>> = first
        .images
        .iter()
        .map(|t| Vec::with_capacity(b * t.len()))
        .collect();
    let mut present = Vec::with_capacity(b * n_img);
    for (i, s) in samples.iter().enumerate() {
        numeric.extend_from_slice(&s.numeric);
        categorical.extend_from_slice(&s.categorical);
        tokens[i * seq_len..i * seq_len + s.text_tokens.len()].copy_from_slice(&s.text_tokens);
        for m in &mut mask[i * seq_len..i * seq_len + s.text_tokens.len()] {
            *m = 1.0;
        }
        for (acc, img) in images.iter_mut().zip(&s.images) {
            acc.extend_from_slice(img.data());
        }
        present.extend(s.image_present.iter().map(|&p| if p { 1.0 } else { 0.0 }));
    }
    let labels = match first.label {
        None => None,
        Some(Label::Class(_)) => Some(Labels::Classes(
            samples
                .iter()
                .map(|s| match s.label {
                    Some(Label::Class(c)) => c,
                    _ => unreachable!("layout check guarantees class labels"),
                })
                .collect(),
        )),
        Some(Label::Value(_)) => Some(Labels::Values(
            samples
                .iter()
                .map(|s| match s.label {
                    Some(Label::Value(v)) => v,
                    _ => unreachable!("layout check guarantees value labels"),
                })
                .collect(),
        )),
    };
    Ok(Batch {
        size: b,
        numeric: Tensor::new(vec![b, n_num], numeric),
        categorical,
        n_categorical: n_cat,
        tokens,
        seq_len,
        text_mask: Tensor::new(vec![b, seq_len], mask),
        images: images
            .into_iter()
            .zip(&first.images)
            .map(|(data, t)| {
                let mut shape = vec![b];
                shape.extend_from_slice(t.shape());
                Tensor::new(shape, data)
            })
            .collect(),
        image_present: Tensor::new(vec![b, n_img], present),
        labels,
    })
}
