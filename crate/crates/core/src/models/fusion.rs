use super::backbones::{Backbone, BackboneSpec, ImageBackbone, TabularBackbone, TextBackbone};
use super::layers::{Linear, LinearRole};
use super::params::{Graph, ParamGroup, ParamStore};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::pipeline::collate::Batch;
use crate::pipeline::{image::CHANNELS, PipelineState};
use crate::tensor::Tensor;
use crate::trainer::PresetConfig;

/// Input widths the model was built for, checked on every batch.
#[derive(Debug, Clone, PartialEq)]
pub struct InputLayout {
    pub n_numeric: usize,
    pub n_categorical: usize,
    pub has_text: bool,
    pub n_images: usize,
    pub image_size: usize,
}

impl InputLayout {
    pub fn of(state: &PipelineState) -> Self {
        InputLayout {
            n_numeric: state.n_numeric(),
            n_categorical: state.categorical_vocab.len(),
            has_text: state.has_text(),
            n_images: state.image_columns.len(),
            image_size: state.image_size,
        }
    }

    pub fn check(&self, batch: &Batch) -> Result<()> {
        let mismatch = |field: &str, expected: String, actual: String| {
            Err(Error::ShapeMismatch {
                field: field.into(),
                expected,
                actual,
            })
        };
        if batch.n_numeric() != self.n_numeric {
            return mismatch(
                "numeric",
                self.n_numeric.to_string(),
                batch.n_numeric().to_string(),
            );
        }
        if batch.n_categorical != self.n_categorical {
            return mismatch(
                "categorical",
                self.n_categorical.to_string(),
                batch.n_categorical.to_string(),
            );
        }
        if batch.has_text() != self.has_text {
            let s = |b: bool| if b { "tokens" } else { "no tokens" }.to_string();
            return mismatch("tokens", s(self.has_text), s(batch.has_text()));
        }
        if batch.images.len() != self.n_images {
            return mismatch(
                "images",
                self.n_images.to_string(),
                batch.images.len().to_string(),
            );
        }
        let want = [batch.size, CHANNELS, self.image_size, self.image_size];
        for img in &batch.images {
            if img.shape() != want {
                return mismatch("images", format!("{want:?}"), format!("{:?}", img.shape()));
            }
        }
        Ok(())
    }
}

/// Late-fusion network: per-modality backbones, linear projectors to a
/// shared width, a two-layer fusion perceptron and an output head.
#[derive(Debug, Clone)]
pub struct FusionModel {
    pub params: ParamStore,
    /// In modality-group order (image, text, tabular).
    pub backbones: Vec<Backbone>,
    pub projectors: Vec<Linear>,
    /// Absent with a single modality.
    pub fusion: Option<(Linear, Linear)>,
    pub head: Linear,
    pub specs: Vec<BackboneSpec>,
    pub fusion_dim: usize,
    pub output_width: usize,
    pub layout: InputLayout,
}

/// Output head values and the fused pre-head embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    /// `[B, n_classes]` or `[B, 1]`.
    pub logits: Tensor,
    /// `[B, fusion_dim]`
    pub embedding: Tensor,
}

/// Builds the fusion model for a fitted pipeline. Initialization depends
/// only on `seed` and the shapes involved.
pub fn build_fusion_model(
    state: &PipelineState,
    preset: &PresetConfig,
    seed: u64,
) -> Result<FusionModel> {
    let layout = InputLayout::of(state);
    let (dim, depth) = (preset.backbone_dim, preset.backbone_depth);
    let mut ps = ParamStore::new(seed);
    let mut backbones = Vec::new();
    if layout.n_images > 0 {
        backbones.push(Backbone::Image(ImageBackbone::new(
            &mut ps, "image", CHANNELS, dim,
        )));
    }
    if layout.has_text {
        backbones.push(Backbone::Text(TextBackbone::new(
            &mut ps,
            "text",
            state.text_vocab.len(),
            state.max_text_len,
            dim,
            depth,
            preset.pooling_mode,
        )));
    }
    if layout.n_numeric + layout.n_categorical > 0 {
        let sizes: Vec<usize> = state.categorical_vocab.iter().map(|v| v.size()).collect();
        backbones.push(Backbone::Tabular(TabularBackbone::new(
            &mut ps,
            "tabular",
            layout.n_numeric,
            &sizes,
            dim,
            depth,
        )));
    }
    if backbones.is_empty() {
        return Err(Error::NoFeatureColumns);
    }
    let fd = preset.fusion_dim;
    let projectors: Vec<Linear> = backbones
        .iter()
        .map(|b| {
            let name = format!("projector.{}", b.architecture());
            Linear::new(
                &mut ps,
                &name,
                LinearRole::Projector,
                b.dim(),
                fd,
                0,
                ParamGroup::Head,
            )
        })
        .collect();
    let fusion = (backbones.len() > 1).then(|| {
        let k = backbones.len();
        (
            Linear::new(
                &mut ps,
                "fusion.0",
                LinearRole::Fusion,
                k * fd,
                fd,
                0,
                ParamGroup::Head,
            ),
            Linear::new(
                &mut ps,
                "fusion.1",
                LinearRole::Fusion,
                fd,
                fd,
                0,
                ParamGroup::Head,
            ),
        )
    });
    let output_width = state.label_codec.as_ref().map_or(1, |c| c.output_width());
    let head = Linear::new(
        &mut ps,
        "head",
        LinearRole::Output,
        fd,
        output_width,
        0,
        ParamGroup::Head,
    );
    let specs = backbones
        .iter()
        .map(|b| BackboneSpec {
            modality: b.group(),
            architecture: b.architecture().to_string(),
            embed_dim: b.dim(),
            depth: b.depth(),
            seed,
        })
        .collect();
    Ok(FusionModel {
        params: ps,
        backbones,
        projectors,
        fusion,
        head,
        specs,
        fusion_dim: fd,
        output_width,
        layout,
    })
}

impl FusionModel {
    /// Records the forward pass on `g`, returning `(head output, embedding)`.
    pub fn forward_graph(&self, g: &mut Graph, batch: &Batch) -> Result<(Var, Var)> {
        self.layout.check(batch)?;
        let projected: Vec<Var> = self
            .backbones
            .iter()
            .zip(&self.projectors)
            .map(|(b, p)| {
                let f = b.forward(g, batch);
                p.forward(g, f)
            })
            .collect();
        let embedding = match &self.fusion {
            None => projected[0],
            Some((l0, l1)) => {
                let cat = g.tape.concat_cols(&projected);
                let h = l0.forward(g, cat);
                let h = g.tape.gelu(h);
                l1.forward(g, h)
            }
        };
        let out = self.head.forward(g, embedding);
        Ok((out, embedding))
    }

    /// Inference forward pass.
    pub fn forward(&self, batch: &Batch) -> Result<ModelOutput> {
        let mut g = Graph::new(&self.params, false);
        let (out, emb) = self.forward_graph(&mut g, batch)?;
        Ok(ModelOutput {
            logits: g.tape.value(out).clone(),
            embedding: g.tape.value(emb).clone(),
        })
    }

    /// Backbone outputs after projection, one `[B, fusion_dim]` per backbone.
    pub fn projected_features(&self, batch: &Batch) -> Result<Vec<Tensor>> {
        self.layout.check(batch)?;
        let mut g = Graph::new(&self.params, false);
        Ok(self
            .backbones
            .iter()
            .zip(&self.projectors)
            .map(|(b, p)| {
                let f = b.forward(&mut g, batch);
                let v = p.forward(&mut g, f);
                g.tape.value(v).clone()
            })
            .collect())
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut ParamStore, Vec<&mut Linear>) {
        let mut lin: Vec<&mut Linear> = self
            .backbones
            .iter_mut()
            .flat_map(|b| b.linears_mut())
            .collect();
        lin.extend(self.projectors.iter_mut());
        if let Some((a, b)) = &mut self.fusion {
            lin.push(a);
            lin.push(b);
        }
        lin.push(&mut self.head);
        (&mut self.params, lin)
    }
}
