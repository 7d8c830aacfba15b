//! Desk-scale backbones: a transformer text encoder, a three-block
//! convolutional image encoder, and an FT-transformer-style tabular encoder.

use serde::{Deserialize, Serialize};

use super::layers::{Encoder, LayerNorm, Linear};
use super::params::{Graph, Init, ParamGroup, ParamId, ParamStore};
use crate::autograd::Var;
use crate::pipeline::collate::Batch;
use crate::table::ModalityGroup;
use crate::tensor::Tensor;
use crate::trainer::PoolingMode;

pub const ATTENTION_HEADS: usize = 4;
const EMBED_STD: f64 = 1.0;
const POS_STD: f64 = 0.1;

/// Registry entry describing one backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub modality: ModalityGroup,
    pub architecture: String,
    pub embed_dim: usize,
    pub depth: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TextBackbone {
    pub token_emb: ParamId,
    pub pos_emb: ParamId,
    pub encoder: Encoder,
    pub pooling: PoolingMode,
    pub dim: usize,
    pub max_len: usize,
}

impl TextBackbone {
    pub(crate) fn new(
        ps: &mut ParamStore,
        name: &str,
        vocab: usize,
        max_len: usize,
        dim: usize,
        depth: usize,
        pooling: PoolingMode,
    ) -> Self {
        let grp = ParamGroup::Backbone;
        TextBackbone {
            token_emb: ps.add(
                format!("{name}.token_emb"),
                &[vocab, dim],
                Init::Normal(EMBED_STD),
                depth + 1,
                grp,
                true,
            ),
            pos_emb: ps.add(
                format!("{name}.pos_emb"),
                &[max_len, dim],
                Init::Normal(POS_STD),
                depth + 1,
                grp,
                true,
            ),
            encoder: Encoder::new(ps, name, dim, ATTENTION_HEADS, depth),
            pooling,
            dim,
            max_len,
        }
    }

    /// `[B, d]` pooled text features.
    pub fn forward(&self, g: &mut Graph, batch: &Batch) -> Var {
        let (b, t) = (batch.size, batch.seq_len);
        let tok = g.param(self.token_emb);
        let x = g.tape.embedding(tok, &batch.tokens);
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        let pos = g.param(self.pos_emb);
        let p = g.tape.embedding(pos, &positions);
        let x = g.tape.add(x, p);
        let x = g.tape.reshape(x, &[b, t, self.dim]);
        let h = self.encoder.forward(g, x, &batch.text_mask);
        match self.pooling {
            PoolingMode::Cls => g.tape.select_token(h, 0),
            PoolingMode::Mean => g.tape.masked_mean(h, &batch.text_mask),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct ImageBackbone {
    pub blocks: Vec<ConvBlock>,
    pub norm: LayerNorm,
    pub dim: usize,
}

impl ImageBackbone {
    pub(crate) fn new(ps: &mut ParamStore, name: &str, channels: usize, dim: usize) -> Self {
        let widths = [channels, dim / 4, dim / 2, dim];
        let grp = ParamGroup::Backbone;
        let blocks = (0..3)
            .map(|i| {
                let (c, o) = (widths[i], widths[i + 1]);
                let bound = 1.0 / ((c * 9) as f64).sqrt();
                ConvBlock {
                    weight: ps.add(
                        format!("{name}.conv{i}.weight"),
                        &[o, c, 3, 3],
                        Init::Uniform(bound),
                        3 - i,
                        grp,
                        true,
                    ),
                    bias: ps.add(
                        format!("{name}.conv{i}.bias"),
                        &[o],
                        Init::Uniform(bound),
                        3 - i,
                        grp,
                        false,
                    ),
                }
            })
            .collect();
        ImageBackbone {
            blocks,
            norm: LayerNorm::new(ps, &format!("{name}.norm"), dim, 1, grp),
            dim,
        }
    }

    /// One image column `[B, C, H, W] -> [B, d]`.
    pub fn encode(&self, g: &mut Graph, images: &Tensor) -> Var {
        let mut x = g.tape.constant(images.clone());
        for (i, blk) in self.blocks.iter().enumerate() {
            let (w, b) = (g.param(blk.weight), g.param(blk.bias));
            x = g.tape.conv3x3(x, w, b);
            x = g.tape.gelu(x);
            x = if i + 1 < self.blocks.len() {
                g.tape.avg_pool2(x)
            } else {
                g.tape.global_avg_pool(x)
            };
        }
        self.norm.forward(g, x)
    }

    /// Presence-gated mean over all image columns of the batch.
    pub fn forward(&self, g: &mut Graph, batch: &Batch) -> Var {
        let n = batch.images.len();
        let mut acc: Option<Var> = None;
        for (j, imgs) in batch.images.iter().enumerate() {
            let f = self.encode(g, imgs);
            let mut gate = Vec::with_capacity(batch.size * self.dim);
            for r in 0..batch.size {
                let p = batch.image_present.row(r)[j];
                gate.extend(std::iter::repeat_n(p, self.dim));
            }
            let f = g
                .tape
                .mul_const(f, Tensor::new(vec![batch.size, self.dim], gate));
            acc = Some(match acc {
                None => f,
                Some(a) => g.tape.add(a, f),
            });
        }
        let acc = acc.expect("image backbone requires at least one image column");
        if n == 1 {
            acc
        } else {
            g.tape.scale(acc, 1.0 / n as f64)
        }
    }
}

/// One learned token per numeric and categorical field plus a CLS token,
/// mixed by a transformer encoder.
#[derive(Debug, Clone)]
pub struct TabularBackbone {
    /// `[n_numeric, d]` per-field scale and offset.
    pub num_weight: Option<ParamId>,
    pub num_bias: Option<ParamId>,
    /// One `[categories, d]` table per categorical field.
    pub cat_emb: Vec<ParamId>,
    pub cls: ParamId,
    pub encoder: Encoder,
    pub n_numeric: usize,
    pub dim: usize,
}

impl TabularBackbone {
    pub(crate) fn new(
        ps: &mut ParamStore,
        name: &str,
        n_numeric: usize,
        cat_sizes: &[usize],
        dim: usize,
        depth: usize,
    ) -> Self {
        let grp = ParamGroup::Backbone;
        let d0 = depth + 1;
        let (num_weight, num_bias) = if n_numeric > 0 {
            (
                Some(ps.add(
                    format!("{name}.num_weight"),
                    &[n_numeric, dim],
                    Init::Normal(EMBED_STD),
                    d0,
                    grp,
                    true,
                )),
                Some(ps.add(
                    format!("{name}.num_bias"),
                    &[n_numeric, dim],
                    Init::Normal(EMBED_STD),
                    d0,
                    grp,
                    false,
                )),
            )
        } else {
            (None, None)
        };
        let cat_emb = cat_sizes
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                ps.add(
                    format!("{name}.cat_emb{i}"),
                    &[s, dim],
                    Init::Normal(EMBED_STD),
                    d0,
                    grp,
                    true,
                )
            })
            .collect();
        TabularBackbone {
            num_weight,
            num_bias,
            cat_emb,
            cls: ps.add(
                format!("{name}.cls"),
                &[dim],
                Init::Normal(EMBED_STD),
                d0,
                grp,
                true,
            ),
            encoder: Encoder::new(ps, name, dim, ATTENTION_HEADS, depth),
            n_numeric,
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, batch: &Batch) -> Var {
        let (b, d) = (batch.size, self.dim);
        let cls = g.param(self.cls);
        let mut tokens = vec![g.tape.broadcast_rows(cls, b)];
        if let (Some(w), Some(bias)) = (self.num_weight, self.num_bias) {
            let (w, bias) = (g.param(w), g.param(bias));
            for j in 0..self.n_numeric {
                let ids = vec![j; b];
                let wj = g.tape.embedding(w, &ids);
                let bj = g.tape.embedding(bias, &ids);
                let mut xs = Vec::with_capacity(b * d);
                for r in 0..b {
                    xs.extend(std::iter::repeat_n(batch.numeric.row(r)[j], d));
                }
                let t = g.tape.mul_const(wj, Tensor::new(vec![b, d], xs));
                tokens.push(g.tape.add(t, bj));
            }
        }
        for (j, &emb) in self.cat_emb.iter().enumerate() {
            let e = g.param(emb);
            let ids: Vec<usize> = (0..b)
                .map(|r| batch.categorical[r * batch.n_categorical + j])
                .collect();
            tokens.push(g.tape.embedding(e, &ids));
        }
        let n_tok = tokens.len();
        let x = g.tape.stack_tokens(&tokens);
        let h = self.encoder.forward(g, x, &Tensor::full(&[b, n_tok], 1.0));
        g.tape.select_token(h, 0)
    }
}

/// A backbone of any modality.
#[derive(Debug, Clone)]
pub enum Backbone {
    Text(TextBackbone),
    Image(ImageBackbone),
    Tabular(TabularBackbone),
}

impl Backbone {
    pub fn forward(&self, g: &mut Graph, batch: &Batch) -> Var {
        match self {
            Backbone::Text(b) => b.forward(g, batch),
            Backbone::Image(b) => b.forward(g, batch),
            Backbone::Tabular(b) => b.forward(g, batch),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Backbone::Text(b) => b.dim,
            Backbone::Image(b) => b.dim,
            Backbone::Tabular(b) => b.dim,
        }
    }

    pub fn group(&self) -> ModalityGroup {
        match self {
            Backbone::Text(_) => ModalityGroup::Text,
            Backbone::Image(_) => ModalityGroup::Image,
            Backbone::Tabular(_) => ModalityGroup::Tabular,
        }
    }

    pub fn architecture(&self) -> &'static str {
        match self {
            Backbone::Text(_) => "text_transformer",
            Backbone::Image(_) => "conv3_gap",
            Backbone::Tabular(_) => "ft_transformer",
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Backbone::Text(b) => b.encoder.layers.len(),
            Backbone::Image(b) => b.blocks.len(),
            Backbone::Tabular(b) => b.encoder.layers.len(),
        }
    }

    pub fn linears_mut(&mut self) -> Vec<&mut Linear> {
        match self {
            Backbone::Text(b) => b.encoder.linears_mut(),
            Backbone::Image(_) => Vec::new(),
            Backbone::Tabular(b) => b.encoder.linears_mut(),
        }
    }
}
