//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation in evaluation order. Each node keeps
//! its value and, when any input requires a gradient, a closure mapping the
//! output gradient to input gradients. [`Tape::backward`] walks the nodes in
//! reverse.

use std::sync::Arc;

use rayon::prelude::*;

use crate::tensor::{gemm, gemm_nt, gemm_tn, pooled, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Arc<Tensor>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by node.
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0[v.0].take()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf. Gradients are accumulated for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, parents: Vec<Var>, backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            parents: parents.iter().map(|p| p.0).collect(),
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[i].take() else { continue };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| self.nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&g, &needs);
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                if !need {
                    continue;
                }
                if let Some(pg) = pg {
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
        }
        Gradients(grads)
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(
            out,
            vec![a, b],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(
            out,
            vec![a, b],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.scale(-1.0))]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.val(a), self.val(b));
        let out = av.zip_map(&bv, |x, y| x * y);
        self.push(
            out,
            vec![a, b],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| g.zip_map(&bv, |g, y| g * y)),
                    need[1].then(|| g.zip_map(&av, |g, x| g * x)),
                ]
            }),
        )
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Var {
        let out = self.value(a).zip_map(&c, |x, y| x * y);
        self.push(
            out,
            vec![a],
            Box::new(move |g, _| vec![Some(g.zip_map(&c, |g, y| g * y))]),
        )
    }

    pub fn add_const(&mut self, a: Var, c: Tensor) -> Var {
        let out = self.value(a).zip_map(&c, |x, y| x + y);
        self.push(out, vec![a], Box::new(|g, _| vec![Some(g.clone())]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, vec![a], Box::new(move |g, _| vec![Some(g.scale(s))]))
    }

    /// Multiplies every element of `a` by the scalar variable `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let (av, sv) = (self.val(a), self.value(s).item());
        let s_shape = self.shape(s).to_vec();
        let out = av.scale(sv);
        self.push(
            out,
            vec![a, s],
            Box::new(move |g, need| {
                let ds = need[1].then(|| {
                    let d: f64 = g.data().iter().zip(av.data()).map(|(g, x)| g * x).sum();
                    Tensor::full(&s_shape, d)
                });
                vec![need[0].then(|| g.scale(sv)), ds]
            }),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let y = out.clone();
        self.push(
            out,
            vec![a],
            Box::new(move |g, _| vec![Some(g.zip_map(&y, |g, y| g * y))]),
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.val(a);
        let out = av.map(gelu);
        self.push(
            out,
            vec![a],
            Box::new(move |g, _| vec![Some(g.zip_map(&av, |g, x| g * gelu_grad(x)))]),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let y = out.clone();
        self.push(
            out,
            vec![a],
            Box::new(move |g, _| vec![Some(g.zip_map(&y, |g, y| g * (1.0 - y * y)))]),
        )
    }

    // ---- shape ------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let src = self.shape(a).to_vec();
        let out = (*self.val(a)).clone().reshaped(shape);
        self.push(
            out,
            vec![a],
            Box::new(move |g, _| vec![Some(g.clone().reshaped(&src))]),
        )
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Var {
        let out = self.value(a).permute(perm);
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        self.push(
            out,
            vec![a],
            Box::new(move |g, _| vec![Some(g.permute(&inv))]),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        self.permute(a, &[1, 0])
    }

    /// Concatenates 2-d tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0])[0];
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p)[1]).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p);
            assert_eq!(v.shape()[0], rows);
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(v.row(r));
            }
            off += w;
        }
        self.push(
            Tensor::new(vec![rows, total], out),
            parts.to_vec(),
            Box::new(move |g, need| {
                let mut off = 0;
                widths
                    .iter()
                    .zip(need)
                    .map(|(&w, &n)| {
                        let part = n.then(|| {
                            let mut d = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                d.extend_from_slice(
                                    &g.data()[r * total + off..r * total + off + w],
                                );
                            }
                            Tensor::new(vec![rows, w], d)
                        });
                        off += w;
                        part
                    })
                    .collect()
            }),
        )
    }

    /// Stacks `[B, d]` tensors into `[B, T, d]`.
    pub fn stack_tokens(&mut self, parts: &[Var]) -> Var {
        let (b, d) = (self.shape(parts[0])[0], self.shape(parts[0])[1]);
        let t = parts.len();
        let mut out = vec![0.0; b * t * d];
        for (j, &p) in parts.iter().enumerate() {
            let v = self.value(p);
            assert_eq!(v.shape(), &[b, d]);
            for r in 0..b {
                out[(r * t + j) * d..(r * t + j + 1) * d].copy_from_slice(v.row(r));
            }
        }
        self.push(
            Tensor::new(vec![b, t, d], out),
            parts.to_vec(),
            Box::new(move |g, need| {
                (0..t)
                    .map(|j| {
                        need[j].then(|| {
                            let mut o = Vec::with_capacity(b * d);
                            for r in 0..b {
                                o.extend_from_slice(
                                    &g.data()[(r * t + j) * d..(r * t + j + 1) * d],
                                );
                            }
                            Tensor::new(vec![b, d], o)
                        })
                    })
                    .collect()
            }),
        )
    }

    /// Token `t` of every sequence: `[B, T, d] -> [B, d]`.
    pub fn select_token(&mut self, a: Var, t: usize) -> Var {
        let shape = self.shape(a).to_vec();
        let (b, tt, d) = (shape[0], shape[1], shape[2]);
        let v = self.value(a);
        let mut out = Vec::with_capacity(b * d);
        for r in 0..b {
            out.extend_from_slice(&v.data()[(r * tt + t) * d..(r * tt + t + 1) * d]);
        }
        self.push(
            Tensor::new(vec![b, d], out),
            vec![a],
            Box::new(move |g, _| {
                let mut full = Tensor::zeros(&shape);
                for r in 0..b {
                    full.data_mut()[(r * tt + t) * d..(r * tt + t + 1) * d]
                        .copy_from_slice(g.row(r));
                }
                vec![Some(full)]
            }),
        )
    }

    /// Repeats a `[d]` vector into `[n, d]`.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        let v = self.value(a);
        let d = v.len();
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            out.extend_from_slice(v.data());
        }
        let src = v.shape().to_vec();
        self.push(
            Tensor::new(vec![n, d], out),
            vec![a],
            Box::new(move |g, _| {
                let mut acc = vec![0.0; d];
                for r in 0..n {
                    for (a, x) in acc.iter_mut().zip(g.row(r)) {
                        *a += x;
                    }
                }
                vec![Some(Tensor::new(src.clone(), acc))]
            }),
        )
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.val(a), self.val(b));
        let out = av.matmul(&bv);
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        self.push(
            out,
            vec![a, b],
            Box::new(move |g, need| {
                let da = need[0].then(|| {
                    let mut d = vec![0.0; m * k];
                    gemm_nt(g.data(), bv.data(), &mut d, m, n, k);
                    Tensor::new(vec![m, k], d)
                });
                let db = need[1].then(|| {
                    let mut d = vec![0.0; k * n];
                    gemm_tn(av.data(), g.data(), &mut d, m, k, n);
                    Tensor::new(vec![k, n], d)
                });
                vec![da, db]
            }),
        )
    }

    /// Batched matmul: `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.val(a), self.val(b));
        let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let n = bv.shape()[2];
        assert_eq!(bv.shape()[..2], [bs, k]);
        let mut out = vec![0.0; bs * m * n];
        let one = |(i, o): (usize, &mut [f64])| {
            gemm(
                &av.data()[i * m * k..(i + 1) * m * k],
                &bv.data()[i * k * n..(i + 1) * k * n],
                o,
                m,
                k,
                n,
            )
        };
        if pooled() {
            out.par_chunks_mut((m * n).max(1)).enumerate().for_each(one);
        } else {
            out.chunks_mut((m * n).max(1)).enumerate().for_each(one);
        }
        self.push(
            Tensor::new(vec![bs, m, n], out),
            vec![a, b],
            Box::new(move |g, need| {
                let da = need[0].then(|| {
                    let mut d = vec![0.0; bs * m * k];
                    d.par_chunks_mut((m * k).max(1))
                        .enumerate()
                        .for_each(|(i, d)| {
                            gemm_nt(
                                &g.data()[i * m * n..(i + 1) * m * n],
                                &bv.data()[i * k * n..(i + 1) * k * n],
                                d,
                                m,
                                n,
                                k,
                            )
                        });
                    Tensor::new(vec![bs, m, k], d)
                });
                let db = need[1].then(|| {
                    let mut d = vec![0.0; bs * k * n];
                    d.par_chunks_mut((k * n).max(1))
                        .enumerate()
                        .for_each(|(i, d)| {
                            gemm_tn(
                                &av.data()[i * m * k..(i + 1) * m * k],
                                &g.data()[i * m * n..(i + 1) * m * n],
                                d,
                                m,
                                k,
                                n,
                            )
                        });
                    Tensor::new(vec![bs, k, n], d)
                });
                vec![da, db]
            }),
        )
    }

    /// Adds a `[n]` bias along the last axis.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(bias);
        let n = bv.len();
        assert_eq!(*av.shape().last().unwrap(), n);
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        self.push(
            out,
            vec![a, bias],
            Box::new(move |g, need| {
                let db = need[1].then(|| {
                    let mut acc = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (a, x) in acc.iter_mut().zip(row) {
                            *a += x;
                        }
                    }
                    Tensor::new(vec![n], acc)
                });
                vec![Some(g.clone()), db]
            }),
        )
    }

    // ---- normalization and reductions ------------------------------------

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.val(x);
        let gv = self.val(gamma);
        let bv = self.value(beta);
        let (rows, d) = xv.rows_cols();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::new(shape.clone(), out),
            vec![x, gamma, beta],
            Box::new(move |g, need| {
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                let mut dx = vec![0.0; rows * d];
                for r in 0..rows {
                    let gr = g.row(r);
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        dg[j] += gr[j] * hr[j];
                        db[j] += gr[j];
                        let dh = gr[j] * gv.data()[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gv.data()[j];
                        dx[r * d + j] = inv_std[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                vec![
                    need[0].then(|| Tensor::new(shape.clone(), dx)),
                    need[1].then(|| Tensor::new(vec![d], dg)),
                    need[2].then(|| Tensor::new(vec![d], db)),
                ]
            }),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (rows, n) = xv.rows_cols();
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = xv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                out[r * n + j] = e;
                sum += e;
            }
            for v in &mut out[r * n..(r + 1) * n] {
                *v /= sum;
            }
        }
        let y = Tensor::new(xv.shape().to_vec(), out);
        let yc = y.clone();
        self.push(
            y,
            vec![x],
            Box::new(move |g, _| {
                let mut dx = vec![0.0; rows * n];
                for r in 0..rows {
                    let yr = yc.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        dx[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![Some(Tensor::new(yc.shape().to_vec(), dx))]
            }),
        )
    }

    /// Mean over tokens where `mask` is 1: `[B, T, d], [B, T] -> [B, d]`.
    pub fn masked_mean(&mut self, x: Var, mask: &Tensor) -> Var {
        let shape = self.shape(x).to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let xv = self.value(x);
        let mut out = vec![0.0; b * d];
        let counts: Vec<f64> = (0..b)
            .map(|r| mask.row(r).iter().sum::<f64>().max(1.0))
            .collect();
        for r in 0..b {
            for s in 0..t {
                let m = mask.data()[r * t + s];
                if m == 0.0 {
                    continue;
                }
                for j in 0..d {
                    out[r * d + j] += m * xv.data()[(r * t + s) * d + j];
                }
            }
            for j in 0..d {
                out[r * d + j] /= counts[r];
            }
        }
        let mask = mask.clone();
        self.push(
            Tensor::new(vec![b, d], out),
            vec![x],
            Box::new(move |g, _| {
                let mut dx = Tensor::zeros(&shape);
                for r in 0..b {
                    for s in 0..t {
                        let w = mask.data()[r * t + s] / counts[r];
                        if w == 0.0 {
                            continue;
                        }
                        for j in 0..d {
                            dx.data_mut()[(r * t + s) * d + j] = w * g.data()[r * d + j];
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Scales each row of `[n, d]` to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.rows_cols();
        let norms: Vec<f64> = (0..n)
            .map(|r| {
                xv.row(r)
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
                    .max(NORM_EPS)
            })
            .collect();
        let mut out = xv.clone();
        for r in 0..n {
            for v in &mut out.data_mut()[r * d..(r + 1) * d] {
                *v /= norms[r];
            }
        }
        let y = out.clone();
        self.push(
            out,
            vec![x],
            Box::new(move |g, _| {
                let mut dx = g.clone();
                for r in 0..n {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx.data_mut()[r * d + j] = (gr[j] - yr[j] * dot) / norms[r];
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Row-wise dot product of two `[n, d]` tensors, giving `[n]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.val(a), self.val(b));
        let (n, d) = av.rows_cols();
        let out: Vec<f64> = (0..n)
            .map(|r| av.row(r).iter().zip(bv.row(r)).map(|(x, y)| x * y).sum())
            .collect();
        self.push(
            Tensor::new(vec![n], out),
            vec![a, b],
            Box::new(move |g, need| {
                let scaled = |other: &Tensor| {
                    let mut t = other.clone();
                    for r in 0..n {
                        for v in &mut t.data_mut()[r * d..(r + 1) * d] {
                            *v *= g.data()[r];
                        }
                    }
                    t
                };
                vec![need[0].then(|| scaled(&bv)), need[1].then(|| scaled(&av))]
            }),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = v.len() as f64;
        let out = Tensor::scalar(v.sum() / n);
        let shape = v.shape().to_vec();
        self.push(
            out,
            vec![a],
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item() / n))]),
        )
    }

    // ---- lookups and convolutions ----------------------------------------

    /// Rows of `table: [V, d]` selected by `ids`, giving `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            assert!(i < v, "embedding index {i} out of range {v}");
            out.extend_from_slice(tv.row(i));
        }
        let ids = ids.to_vec();
        self.push(
            Tensor::new(vec![ids.len(), d], out),
            vec![table],
            Box::new(move |g, _| {
                let mut dt = Tensor::zeros(&[v, d]);
                for (r, &i) in ids.iter().enumerate() {
                    for (a, x) in dt.data_mut()[i * d..(i + 1) * d].iter_mut().zip(g.row(r)) {
                        *a += x;
                    }
                }
                vec![Some(dt)]
            }),
        )
    }

    /// 3×3 convolution, stride 1, zero padding 1:
    /// `[B, C, H, W] x [O, C, 3, 3] + [O] -> [B, O, H, W]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, bias: Var) -> Var {
        let (xv, wv, bv) = (self.val(x), self.val(w), self.val(bias));
        let (b, c, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let o = wv.shape()[0];
        assert_eq!(wv.shape(), &[o, c, 3, 3]);
        let hw = h * wd;
        let ck = c * 9;
        let img = c * hw;
        let mut out = vec![0.0; b * o * hw];
        let one = |(i, ob): (usize, &mut [f64])| {
            let cols = im2col(&xv.data()[i * img..(i + 1) * img], c, h, wd);
            gemm(wv.data(), &cols, ob, o, ck, hw);
            for (oc, chunk) in ob.chunks_mut(hw).enumerate() {
                let bias = bv.data()[oc];
                for v in chunk {
                    *v += bias;
                }
            }
        };
        if pooled() {
            out.par_chunks_mut(o * hw).enumerate().for_each(one);
        } else {
            out.chunks_mut(o * hw).enumerate().for_each(one);
        }
        self.push(
            Tensor::new(vec![b, o, h, wd], out),
            vec![x, w, bias],
            Box::new(move |g, need| {
                let per_image: Vec<(Vec<f64>, Option<Vec<f64>>)> = (0..b)
                    .into_par_iter()
                    .map(|i| {
                        let gi = &g.data()[i * o * hw..(i + 1) * o * hw];
                        let cols = im2col(&xv.data()[i * img..(i + 1) * img], c, h, wd);
                        let mut dw = vec![0.0; o * ck];
                        if need[1] {
                            gemm_nt(gi, &cols, &mut dw, o, hw, ck);
                        }
                        let dx = need[0].then(|| {
                            let mut dcols = vec![0.0; ck * hw];
                            gemm_tn(wv.data(), gi, &mut dcols, o, ck, hw);
                            col2im(&dcols, c, h, wd)
                        });
                        (dw, dx)
                    })
                    .collect();
                let mut dw = vec![0.0; o * ck];
                let mut dx = need[0].then(|| Vec::with_capacity(b * img));
                for (w_i, x_i) in per_image {
                    for (a, v) in dw.iter_mut().zip(&w_i) {
                        *a += v;
                    }
                    if let (Some(dx), Some(x_i)) = (dx.as_mut(), x_i) {
                        dx.extend_from_slice(&x_i);
                    }
                }
                let db = need[2].then(|| {
                    let mut db = vec![0.0; o];
                    for i in 0..b {
                        for (oc, d) in db.iter_mut().enumerate() {
                            *d += g.data()[(i * o + oc) * hw..(i * o + oc + 1) * hw]
                                .iter()
                                .sum::<f64>();
                        }
                    }
                    Tensor::new(vec![o], db)
                });
                vec![
                    dx.map(|d| Tensor::new(vec![b, c, h, wd], d)),
                    need[1].then(|| Tensor::new(vec![o, c, 3, 3], dw)),
                    db,
                ]
            }),
        )
    }

    /// 2×2 average pooling with stride 2 (odd trailing rows/cols dropped).
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (b, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; b * c * oh * ow];
        for p in 0..b * c {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            for i in 0..oh {
                for j in 0..ow {
                    let s = src[2 * i * w + 2 * j]
                        + src[2 * i * w + 2 * j + 1]
                        + src[(2 * i + 1) * w + 2 * j]
                        + src[(2 * i + 1) * w + 2 * j + 1];
                    out[p * oh * ow + i * ow + j] = 0.25 * s;
                }
            }
        }
        self.push(
            Tensor::new(vec![b, c, oh, ow], out),
            vec![x],
            Box::new(move |g, _| {
                let mut dx = Tensor::zeros(&[b, c, h, w]);
                for p in 0..b * c {
                    for i in 0..oh {
                        for j in 0..ow {
                            let gv = 0.25 * g.data()[p * oh * ow + i * ow + j];
                            let base = p * h * w;
                            let d = dx.data_mut();
                            d[base + 2 * i * w + 2 * j] += gv;
                            d[base + 2 * i * w + 2 * j + 1] += gv;
                            d[base + (2 * i + 1) * w + 2 * j] += gv;
                            d[base + (2 * i + 1) * w + 2 * j + 1] += gv;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Mean over spatial axes: `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (b, c) = (xv.shape()[0], xv.shape()[1]);
        let hw = xv.shape()[2] * xv.shape()[3];
        let out: Vec<f64> = xv
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().sum::<f64>() / hw as f64)
            .collect();
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::new(vec![b, c], out),
            vec![x],
            Box::new(move |g, _| {
                let mut dx = Vec::with_capacity(b * c * hw);
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv / hw as f64, hw));
                }
                vec![Some(Tensor::new(shape.clone(), dx))]
            }),
        )
    }

    // ---- losses -----------------------------------------------------------

    /// Mean cross-entropy of `[n, C]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        let (n, c) = lv.rows_cols();
        assert_eq!(n, targets.len());
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for r in 0..n {
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[targets[r]];
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
        }
        let targets = targets.to_vec();
        self.push(
            Tensor::scalar(loss / n as f64),
            vec![logits],
            Box::new(move |g, _| {
                let s = g.item() / n as f64;
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * c + t] -= 1.0;
                }
                for v in &mut d {
                    *v *= s;
                }
                vec![Some(Tensor::new(vec![n, c], d))]
            }),
        )
    }

    /// Mean squared error between predictions (any shape with `n` elements)
    /// and targets.
    pub fn mse(&mut self, pred: Var, targets: &[f64]) -> Var {
        let pv = self.val(pred);
        assert_eq!(pv.len(), targets.len());
        let n = targets.len() as f64;
        let loss = pv
            .data()
            .iter()
            .zip(targets)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        let targets = targets.to_vec();
        self.push(
            Tensor::scalar(loss),
            vec![pred],
            Box::new(move |g, _| {
                let s = 2.0 * g.item() / n;
                let d: Vec<f64> = pv
                    .data()
                    .iter()
                    .zip(&targets)
                    .map(|(p, t)| s * (p - t))
                    .collect();
                vec![Some(Tensor::new(pv.shape().to_vec(), d))]
            }),
        )
    }

    /// Margin contrastive loss on cosine similarities: with distance
    /// `d = 1 - cos`, positives contribute `d²` and negatives
    /// `max(0, margin - d)²`; the result is the mean over pairs.
    pub fn contrastive_loss(&mut self, cos: Var, labels: &[bool], margin: f64) -> Var {
        let cv = self.val(cos);
        let n = labels.len() as f64;
        assert_eq!(cv.len(), labels.len());
        let mut loss = 0.0;
        let mut dcos = vec![0.0; labels.len()];
        for (i, (&c, &pos)) in cv.data().iter().zip(labels).enumerate() {
            let d = 1.0 - c;
            if pos {
                loss += d * d;
                dcos[i] = -2.0 * d;
            } else if margin - d > 0.0 {
                loss += (margin - d) * (margin - d);
                dcos[i] = 2.0 * (margin - d);
            }
        }
        self.push(
            Tensor::scalar(loss / n),
            vec![cos],
            Box::new(move |g, _| {
                let s = g.item() / n;
                vec![Some(Tensor::new(
                    cv.shape().to_vec(),
                    dcos.iter().map(|v| v * s).collect(),
                ))]
            }),
        )
    }
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut cols = vec![0.0; c * 9 * hw];
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * hw;
                for i in 0..h {
                    let si = i as isize + ky as isize - 1;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for j in 0..w {
                        let sj = j as isize + kx as isize - 1;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        cols[row + i * w + j] = x[ch * hw + si as usize * w + sj as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut x = vec![0.0; c * hw];
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * hw;
                for i in 0..h {
                    let si = i as isize + ky as isize - 1;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for j in 0..w {
                        let sj = j as isize + kx as isize - 1;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        x[ch * hw + si as usize * w + sj as usize] += cols[row + i * w + j];
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference gradient of `f` at `x`.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Tensor {
        let eps = 1e-6;
        let mut g = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += eps;
            let mut m = x.clone();
            m.data_mut()[i] -= eps;
            g.data_mut()[i] = (f(&p) - f(&m)) / (2.0 * eps);
        }
        g
    }

    fn seq(shape: &[usize], k: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|i| ((i as f64 + 1.0) * k).sin()).collect(),
        )
    }

    /// Checks the gradient of `build(tape, x)` summed against fixed weights.
    fn check(x: Tensor, build: impl Fn(&mut Tape, Var) -> Var) {
        let scalarize = |tape: &mut Tape, out: Var| {
            let w = seq(tape.shape(out), 0.71);
            let p = tape.mul_const(out, w);
            tape.mean(p)
        };
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let out = build(&mut tape, xv);
        let loss = scalarize(&mut tape, out);
        let grads = tape.backward(loss);
        let analytic = grads.get(xv).unwrap().clone();
        let numeric = numeric_grad(&x, &|t| {
            let mut tape = Tape::new();
            let xv = tape.leaf(t.clone(), true);
            let out = build(&mut tape, xv);
            let l = scalarize(&mut tape, out);
            tape.value(l).item()
        });
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            assert!(
                (a - n).abs() <= 1e-6 * (1.0 + n.abs()),
                "analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn grad_matmul_and_bias() {
        let b = seq(&[4, 3], 0.3);
        let bias = seq(&[3], 0.9);
        check(seq(&[2, 4], 0.5), |t, x| {
            let w = t.leaf(b.clone(), false);
            let bb = t.leaf(bias.clone(), false);
            let y = t.matmul(x, w);
            t.add_bias(y, bb)
        });
        let a = seq(&[2, 4], 0.2);
        check(seq(&[4, 3], 0.5), |t, w| {
            let x = t.constant(a.clone());
            t.matmul(x, w)
        });
    }

    #[test]
    fn grad_layer_norm_softmax_gelu() {
        let g = seq(&[5], 0.4);
        let b = seq(&[5], 0.8);
        check(seq(&[3, 5], 0.7), |t, x| {
            let gv = t.constant(g.clone());
            let bv = t.constant(b.clone());
            let y = t.layer_norm(x, gv, bv);
            let y = t.gelu(y);
            t.softmax(y)
        });
        check(seq(&[5], 0.3), |t, gv| {
            let x = t.constant(seq(&[3, 5], 0.7));
            let bv = t.constant(b.clone());
            t.layer_norm(x, gv, bv)
        });
    }

    #[test]
    fn grad_bmm_permute_reshape() {
        let other = seq(&[2, 4, 3], 0.6);
        check(seq(&[2, 3, 4], 0.2), |t, x| {
            let o = t.constant(other.clone());
            let y = t.bmm(x, o);
            let y = t.permute(y, &[2, 0, 1]);
            t.reshape(y, &[3, 6])
        });
        check(seq(&[2, 4, 3], 0.25), |t, o| {
            let x = t.constant(seq(&[2, 3, 4], 0.2));
            t.bmm(x, o)
        });
    }

    #[test]
    fn grad_conv_and_pools() {
        let w = seq(&[2, 3, 3, 3], 0.15);
        let bias = seq(&[2], 0.5);
        check(seq(&[2, 3, 4, 4], 0.35), |t, x| {
            let wv = t.constant(w.clone());
            let bv = t.constant(bias.clone());
            let y = t.conv3x3(x, wv, bv);
            let y = t.avg_pool2(y);
            t.global_avg_pool(y)
        });
        check(w.clone(), |t, wv| {
            let x = t.constant(seq(&[2, 3, 4, 4], 0.35));
            let bv = t.constant(bias.clone());
            t.conv3x3(x, wv, bv)
        });
    }

    #[test]
    fn grad_pooling_normalize_losses() {
        let mask = Tensor::new(vec![2, 3], vec![1., 1., 0., 1., 1., 1.]);
        check(seq(&[2, 3, 4], 0.45), |t, x| {
            let y = t.masked_mean(x, &mask);
            t.l2_normalize(y)
        });
        check(seq(&[3, 4], 0.45), |t, x| {
            let l = t.cross_entropy(x, &[0, 3, 1]);
            t.reshape(l, &[1])
        });
        check(seq(&[4, 2], 0.45), |t, x| {
            let r = t.reshape(x, &[2, 2, 2]);
            let y = t.select_token(r, 1);
            let z = t.row_dot(y, y);
            t.contrastive_loss(z, &[true, false], 0.3)
        });
    }

    #[test]
    fn grad_embedding_concat_stack() {
        check(seq(&[5, 3], 0.3), |t, table| {
            let a = t.embedding(table, &[4, 0, 4]);
            let b = t.embedding(table, &[1, 2, 3]);
            let c = t.concat_cols(&[a, b]);
            let s = t.stack_tokens(&[a, b]);
            let s = t.reshape(s, &[3, 6]);
            t.mul(c, s)
        });
    }

    #[test]
    fn grad_scale_by_exp_broadcast() {
        check(seq(&[1], 0.9).reshaped(&[]), |t, s| {
            let e = t.exp(s);
            let x = t.constant(seq(&[2, 3], 0.2));
            t.scale_by(x, e)
        });
        check(seq(&[3], 0.9), |t, v| {
            let y = t.broadcast_rows(v, 4);
            t.tanh(y)
        });
    }
}
