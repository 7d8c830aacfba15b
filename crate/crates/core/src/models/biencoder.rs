use super::backbones::{Backbone, ImageBackbone, TabularBackbone, TextBackbone};
use super::fusion::InputLayout;
use super::layers::{Linear, LinearRole};
use super::params::{Graph, Init, ParamGroup, ParamId, ParamStore};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::pipeline::collate::Batch;
use crate::pipeline::{image::CHANNELS, PipelineState};
use crate::tensor::Tensor;
use crate::trainer::PresetConfig;

/// Initial temperature of the in-batch contrastive objective.
pub const INIT_TEMPERATURE: f64 = 0.07;

/// Backbone, projector and L2 normalization.
#[derive(Debug, Clone)]
pub struct Tower {
    pub backbone: Backbone,
    pub projector: Linear,
    pub layout: InputLayout,
}

impl Tower {
    fn new(
        ps: &mut ParamStore,
        name: &str,
        state: &PipelineState,
        preset: &PresetConfig,
    ) -> Result<Self> {
        let layout = InputLayout::of(state);
        let (dim, depth) = (preset.backbone_dim, preset.backbone_depth);
        let backbone = if layout.n_images > 0 {
            Backbone::Image(ImageBackbone::new(
                ps,
                &format!("{name}.image"),
                CHANNELS,
                dim,
            ))
        } else if layout.has_text {
            Backbone::Text(TextBackbone::new(
                ps,
                &format!("{name}.text"),
                state.text_vocab.len(),
                state.max_text_len,
                dim,
                depth,
                preset.pooling_mode,
            ))
        } else if layout.n_numeric + layout.n_categorical > 0 {
            let sizes: Vec<usize> = state.categorical_vocab.iter().map(|v| v.size()).collect();
            Backbone::Tabular(TabularBackbone::new(
                ps,
                &format!("{name}.tabular"),
                layout.n_numeric,
                &sizes,
                dim,
                depth,
            ))
        } else {
            return Err(Error::NoFeatureColumns);
        };
        let projector = Linear::new(
            ps,
            &format!("{name}.projector"),
            LinearRole::Projector,
            dim,
            preset.fusion_dim,
            0,
            ParamGroup::Head,
        );
        Ok(Tower {
            backbone,
            projector,
            layout,
        })
    }

    /// Unit-norm `[B, d]` embeddings.
    pub fn embed(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        self.layout.check(batch)?;
        let f = self.backbone.forward(g, batch);
        let p = self.projector.forward(g, f);
        Ok(g.tape.l2_normalize(p))
    }
}

/// Two encoders compared by cosine similarity. With `response == None` both
/// sides share the query tower.
#[derive(Debug, Clone)]
pub struct BiEncoderModel {
    pub params: ParamStore,
    pub query: Tower,
    pub response: Option<Tower>,
    /// Log of the inverse temperature, present for in-batch training.
    pub logit_scale: Option<ParamId>,
    pub embed_dim: usize,
}

/// Builds a bi-encoder. Passing `None` for the response state shares the
/// query tower across both sides.
pub fn build_biencoder(
    query: &PipelineState,
    response: Option<&PipelineState>,
    preset: &PresetConfig,
    in_batch: bool,
    seed: u64,
) -> Result<BiEncoderModel> {
    let mut ps = ParamStore::new(seed);
    let q = Tower::new(&mut ps, "query", query, preset)?;
    let r = response
        .map(|s| Tower::new(&mut ps, "response", s, preset))
        .transpose()?;
    let logit_scale = in_batch.then(|| {
        let id = ps.add("logit_scale", &[1], Init::Zeros, 0, ParamGroup::Head, false);
        ps.get_mut(id).value = Tensor::new(vec![1], vec![(1.0 / INIT_TEMPERATURE).ln()]);
        id
    });
    Ok(BiEncoderModel {
        params: ps,
        query: q,
        response: r,
        logit_scale,
        embed_dim: preset.fusion_dim,
    })
}

/// Which side of a pair a batch belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Query,
    Response,
}

impl BiEncoderModel {
    pub fn shared(&self) -> bool {
        self.response.is_none()
    }

    pub fn tower(&self, side: Side) -> &Tower {
        match (side, &self.response) {
            (Side::Response, Some(r)) => r,
            _ => &self.query,
        }
    }

    pub fn embed_graph(&self, g: &mut Graph, side: Side, batch: &Batch) -> Result<Var> {
        self.tower(side).embed(g, batch)
    }

    /// Unit-norm embeddings without recording gradients.
    pub fn embed(&self, side: Side, batch: &Batch) -> Result<Tensor> {
        let mut g = Graph::new(&self.params, false);
        let v = self.embed_graph(&mut g, side, batch)?;
        Ok(g.tape.value(v).clone())
    }

    /// Per-row cosine similarity `[B]`.
    pub fn forward_graph(&self, g: &mut Graph, a: &Batch, b: &Batch) -> Result<Var> {
        if a.size != b.size {
            return Err(Error::LengthMismatch(a.size, b.size));
        }
        let ea = self.embed_graph(g, Side::Query, a)?;
        let eb = self.embed_graph(g, Side::Response, b)?;
        Ok(g.tape.row_dot(ea, eb))
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut ParamStore, Vec<&mut Linear>) {
        let mut lin: Vec<&mut Linear> = Vec::new();
        for t in std::iter::once(&mut self.query).chain(self.response.as_mut()) {
            lin.extend(t.backbone.linears_mut());
            lin.push(&mut t.projector);
        }
        (&mut self.params, lin)
    }
}

/// Cosine similarity per row of two batches.
pub fn forward_biencoder(model: &BiEncoderModel, a: &Batch, b: &Batch) -> Result<Vec<f64>> {
    let mut g = Graph::new(&model.params, false);
    let s = model.forward_graph(&mut g, a, b)?;
    Ok(g.tape.value(s).data().to_vec())
}

/// Symmetric in-batch cross-entropy over the `[N, N]` similarity matrix
/// scaled by `exp(logit_scale)`; pair `i` is the positive for row and
/// column `i`.
pub fn in_batch_loss(g: &mut Graph, ea: Var, eb: Var, logit_scale: Var) -> Var {
    let n = g.tape.shape(ea)[0];
    let ebt = g.tape.transpose(eb);
    let sim = g.tape.matmul(ea, ebt);
    let scale = g.tape.exp(logit_scale);
    let logits = g.tape.scale_by(sim, scale);
    let targets: Vec<usize> = (0..n).collect();
    let l_rows = g.tape.cross_entropy(logits, &targets);
    let lt = g.tape.transpose(logits);
    let l_cols = g.tape.cross_entropy(lt, &targets);
    let sum = g.tape.add(l_rows, l_cols);
    g.tape.scale(sum, 0.5)
}
