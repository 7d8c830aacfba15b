use serde::{Deserialize, Serialize};

use super::params::{Graph, Init, ParamGroup, ParamId, ParamStore};
use crate::autograd::Var;
use crate::tensor::Tensor;

/// Additive attention bias on padded keys; `exp` of it underflows to 0.
const MASK_NEG: f64 = -1e9;

/// Role tag of a linear map, matched against LoRA targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearRole {
    Query,
    Key,
    Value,
    AttnOut,
    FfnIn,
    FfnOut,
    Projector,
    Fusion,
    Output,
}

impl LinearRole {
    pub const ALL: [LinearRole; 9] = [
        LinearRole::Query,
        LinearRole::Key,
        LinearRole::Value,
        LinearRole::AttnOut,
        LinearRole::FfnIn,
        LinearRole::FfnOut,
        LinearRole::Projector,
        LinearRole::Fusion,
        LinearRole::Output,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LinearRole::Query => "query",
            LinearRole::Key => "key",
            LinearRole::Value => "value",
            LinearRole::AttnOut => "attn_out",
            LinearRole::FfnIn => "ffn_in",
            LinearRole::FfnOut => "ffn_out",
            LinearRole::Projector => "projector",
            LinearRole::Fusion => "fusion",
            LinearRole::Output => "output",
        }
    }

    pub fn parse(s: &str) -> Option<LinearRole> {
        LinearRole::ALL.into_iter().find(|r| r.name() == s)
    }
}

/// Low-rank side path `scale · (x A) B`.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    /// `[in, r]`
    pub a: ParamId,
    /// `[r, out]`, zero at injection.
    pub b: ParamId,
    pub scale: f64,
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub role: LinearRole,
    /// `[in, out]`
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub depth: usize,
    pub group: ParamGroup,
    pub lora: Option<LoraAdapter>,
}

impl Linear {
    pub(crate) fn new(
        ps: &mut ParamStore,
        name: &str,
        role: LinearRole,
        in_dim: usize,
        out_dim: usize,
        depth: usize,
        group: ParamGroup,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = ps.add(
            format!("{name}.weight"),
            &[in_dim, out_dim],
            Init::Uniform(bound),
            depth,
            group,
            true,
        );
        let bias = ps.add(
            format!("{name}.bias"),
            &[out_dim],
            Init::Uniform(bound),
            depth,
            group,
            false,
        );
        Linear {
            name: name.to_string(),
            role,
            weight,
            bias,
            in_dim,
            out_dim,
            depth,
            group,
            lora: None,
        }
    }

    /// `[n, in] -> [n, out]`
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let mut y = g.tape.matmul(x, w);
        if let Some(l) = &self.lora {
            let (a, b) = (g.param(l.a), g.param(l.b));
            let xa = g.tape.matmul(x, a);
            let delta = g.tape.matmul(xa, b);
            let delta = g.tape.scale(delta, l.scale);
            y = g.tape.add(y, delta);
        }
        let b = g.param(self.bias);
        g.tape.add_bias(y, b)
    }

    /// Applies to the last axis of any-rank input.
    pub fn forward_nd(&self, g: &mut Graph, x: Var) -> Var {
        let shape = g.tape.shape(x).to_vec();
        if shape.len() == 2 {
            return self.forward(g, x);
        }
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = g.tape.reshape(x, &[rows, self.in_dim]);
        let y = self.forward(g, flat);
        let mut out = shape;
        *out.last_mut().unwrap() = self.out_dim;
        g.tape.reshape(y, &out)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub(crate) fn new(
        ps: &mut ParamStore,
        name: &str,
        dim: usize,
        depth: usize,
        group: ParamGroup,
    ) -> Self {
        LayerNorm {
            gamma: ps.add(
                format!("{name}.gamma"),
                &[dim],
                Init::Ones,
                depth,
                group,
                false,
            ),
            beta: ps.add(
                format!("{name}.beta"),
                &[dim],
                Init::Zeros,
                depth,
                group,
                false,
            ),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.tape.layer_norm(x, gm, bt)
    }
}

/// Pre-norm transformer block: `h = x + attn(ln1(x))`, `y = h + ffn(ln2(h))`.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub attn_out: Linear,
    pub ln2: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub heads: usize,
}

impl EncoderLayer {
    pub(crate) fn new(
        ps: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        depth: usize,
    ) -> Self {
        let grp = ParamGroup::Backbone;
        let lin = |ps: &mut ParamStore, n: &str, role, i, o| {
            Linear::new(ps, &format!("{name}.{n}"), role, i, o, depth, grp)
        };
        EncoderLayer {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim, depth, grp),
            query: lin(ps, "query", LinearRole::Query, dim, dim),
            key: lin(ps, "key", LinearRole::Key, dim, dim),
            value: lin(ps, "value", LinearRole::Value, dim, dim),
            attn_out: lin(ps, "attn_out", LinearRole::AttnOut, dim, dim),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim, depth, grp),
            ffn_in: lin(ps, "ffn_in", LinearRole::FfnIn, dim, 4 * dim),
            ffn_out: lin(ps, "ffn_out", LinearRole::FfnOut, 4 * dim, dim),
            heads,
        }
    }

    /// `x: [B, T, d]`; `key_mask: [B, T]`, 1 on real tokens.
    pub fn forward(&self, g: &mut Graph, x: Var, key_mask: &Tensor) -> Var {
        let shape = g.tape.shape(x).to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let (h, dh) = (self.heads, d / self.heads);
        let flat = g.tape.reshape(x, &[b * t, d]);
        let n1 = self.ln1.forward(g, flat);

        let split = |g: &mut Graph, v: Var, perm: &[usize], last: [usize; 2]| {
            let v = g.tape.reshape(v, &[b, t, h, dh]);
            let v = g.tape.permute(v, perm);
            g.tape.reshape(v, &[b * h, last[0], last[1]])
        };
        let q = self.query.forward(g, n1);
        let k = self.key.forward(g, n1);
        let v = self.value.forward(g, n1);
        let q = split(g, q, &[0, 2, 1, 3], [t, dh]);
        let kt = split(g, k, &[0, 2, 3, 1], [dh, t]);
        let v = split(g, v, &[0, 2, 1, 3], [t, dh]);

        let scores = g.tape.bmm(q, kt);
        let scores = g.tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let mut bias = vec![0.0; b * h * t * t];
        for r in 0..b {
            let m = key_mask.row(r);
            for row in bias[r * h * t * t..(r + 1) * h * t * t].chunks_mut(t) {
                for (o, &mk) in row.iter_mut().zip(m) {
                    if mk == 0.0 {
                        *o = MASK_NEG;
                    }
                }
            }
        }
        let scores = g
            .tape
            .add_const(scores, Tensor::new(vec![b * h, t, t], bias));
        let probs = g.tape.softmax(scores);
        let ctx = g.tape.bmm(probs, v);
        let ctx = g.tape.reshape(ctx, &[b, h, t, dh]);
        let ctx = g.tape.permute(ctx, &[0, 2, 1, 3]);
        let ctx = g.tape.reshape(ctx, &[b * t, d]);
        let attn = self.attn_out.forward(g, ctx);
        let h1 = g.tape.add(flat, attn);

        let n2 = self.ln2.forward(g, h1);
        let f = self.ffn_in.forward(g, n2);
        let f = g.tape.gelu(f);
        let f = self.ffn_out.forward(g, f);
        let out = g.tape.add(h1, f);
        g.tape.reshape(out, &[b, t, d])
    }

    pub fn linears_mut(&mut self) -> [&mut Linear; 6] {
        [
            &mut self.query,
            &mut self.key,
            &mut self.value,
            &mut self.attn_out,
            &mut self.ffn_in,
            &mut self.ffn_out,
        ]
    }
}

/// Stack of encoder layers; the first (input-most) layer is deepest.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
    pub final_norm: LayerNorm,
}

impl Encoder {
    pub(crate) fn new(
        ps: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        depth: usize,
    ) -> Self {
        let layers = (0..depth)
            .map(|i| EncoderLayer::new(ps, &format!("{name}.layer{i}"), dim, heads, depth - i))
            .collect();
        Encoder {
            layers,
            final_norm: LayerNorm::new(
                ps,
                &format!("{name}.final_norm"),
                dim,
                1,
                ParamGroup::Backbone,
            ),
        }
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var, key_mask: &Tensor) -> Var {
        for layer in &self.layers {
            x = layer.forward(g, x, key_mask);
        }
        self.final_norm.forward(g, x)
    }

    pub fn linears_mut(&mut self) -> Vec<&mut Linear> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.linears_mut())
            .collect()
    }
}
