//! Parameterised building blocks composed from tape operations.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{Bound, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// He-style normal init for `fan_in` inputs feeding a ReLU.
pub fn kaiming<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::randn(shape.to_vec(), (2.0 / fan_in as f64).sqrt(), rng)
}

/// Fan-in scaled init without the ReLU gain.
pub fn lecun<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::randn(shape.to_vec(), (1.0 / fan_in as f64).sqrt(), rng)
}

/// Dense layer on row vectors: `x[n, in] W[in, out] + b[out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        relu_gain: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = if relu_gain {
            kaiming(&[inputs, outputs], inputs, rng)
        } else {
            lecun(&[inputs, outputs], inputs, rng)
        };
        Self::with_weight(store, name, w)
    }

    pub fn with_weight<T: Scalar>(store: &mut ParamStore<T>, name: &str, w: Tensor<T>) -> Self {
        let (inputs, outputs) = (w.shape()[0], w.shape()[1]);
        Linear {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([outputs])),
            inputs,
            outputs,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.weight])?;
        g.add_row_vec(y, p[self.bias])
    }
}

/// Stack of [`Linear`] layers with ReLU between them (not after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dims: &[usize], rng: &mut impl Rng) -> Self {
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| Linear::new(store, &format!("{name}.{i}"), dims[i], dims[i + 1], i + 1 < n, rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, mut x: Var) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, p, x)?;
            if i + 1 < self.layers.len() {
                x = g.relu(x);
            }
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let weight = store.add(format!("{name}.weight"), kaiming(&[c_out, c_in, kernel, kernel], fan_in, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([c_out])));
        Conv2d { weight, bias, stride, padding }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p[self.weight], self.bias.map(|b| p[b]), self.stride, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl ConvTranspose2d {
    /// Kernel equal to the stride: every output pixel reads one input pixel.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), kaiming(&[c_in, c_out, stride, stride], c_in, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([c_out]));
        ConvTranspose2d { weight, bias, stride }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv_transpose2d(x, p[self.weight], Some(p[self.bias]), self.stride, 0)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, groups: usize) -> Self {
        GroupNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([channels])),
            groups: groups.min(channels),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.group_norm(x, p[self.gamma], p[self.beta], self.groups, 1e-5)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([dim])),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p[self.gamma], p[self.beta], 1e-5)
    }
}

/// Multi-head scaled dot-product attention over row-major token matrices.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    /// Queries of width `q_dim`, keys/values of width `kv_dim`, internal and
    /// output width `dim`.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        q_dim: usize,
        kv_dim: usize,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert_eq!(dim % heads, 0, "attention width {dim} not divisible by {heads} heads");
        Attention {
            q: Linear::new(store, &format!("{name}.q"), q_dim, dim, false, rng),
            k: Linear::new(store, &format!("{name}.k"), kv_dim, dim, false, rng),
            v: Linear::new(store, &format!("{name}.v"), kv_dim, dim, false, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, false, rng),
            heads,
        }
    }

    /// Per-head attention, heads concatenated, before the output projection.
    ///
    /// `allowed` is a row-major `[n_queries, n_keys]` mask shared by all
    /// heads; rows with no allowed key attend everywhere.
    pub fn attend<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        query: Var,
        key: Var,
        value: Var,
        allowed: Option<&[bool]>,
    ) -> Result<Var> {
        let q = self.q.forward(g, p, query)?;
        let k = self.k.forward(g, p, key)?;
        let v = self.v.forward(g, p, value)?;
        let dim = self.q.outputs;
        let hd = dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * hd, hd)?,
                    g.slice_cols(k, h * hd, hd)?,
                    g.slice_cols(v, h * hd, hd)?,
                )
            };
            let scores = g.matmul_t(qh, kh, false, true)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax(scores, 1.0, allowed)?;
            outs.push(g.matmul(attn, vh)?);
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            g.concat_cols(&outs)
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        query: Var,
        key: Var,
        value: Var,
        allowed: Option<&[bool]>,
    ) -> Result<Var> {
        let heads = self.attend(g, p, query, key, value, allowed)?;
        self.out.forward(g, p, heads)
    }
}
