//! Reverse-mode differentiation tape.
//!
//! Every operation appends a node; node order is therefore a topological
//! order and [`Graph::backward`] walks it in reverse.

use super::kernels::{self, gemm, ConvGeom, MatRef};
use super::tensor::numel;
use super::{Scalar, Tensor};
use crate::error::{invalid, shape_err, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowVec(Var, Var),
    AddChannelVec(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    Sigmoid(Var),
    Log { x: Var, floor: T },
    Softmax { x: Var, tau: T },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<T>, rstd: Vec<T> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<T> },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    MaxPool { x: Var, argmax: Vec<usize> },
    Resize { x: Var, planes: usize, from: (usize, usize), to: (usize, usize) },
    Sum(Var),
    Mean(Var),
    MeanLast(Var),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Bce { logits: Var, target: Vec<T>, eps: T },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations for one forward pass.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(shape_err!(op, "{a:?} vs {b:?}"));
    }
    Ok(())
}

fn dims2(op: &'static str, s: &[usize]) -> Result<(usize, usize)> {
    match s {
        [r, c] => Ok((*r, *c)),
        _ => Err(shape_err!(op, "expected rank 2, got {s:?}")),
    }
}

fn dims3(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize)> {
    match s {
        [c, h, w] => Ok((*c, *h, *w)),
        _ => Err(shape_err!(op, "expected C x H x W, got {s:?}")),
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot => *slot = Some(g),
    }
}

fn accumulate_with<T: Scalar>(
    grads: &mut [Option<Vec<T>>],
    v: Var,
    len: usize,
    f: impl FnOnce(&mut [T]),
) {
    let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
    f(slot);
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta.shape(), tb.shape())?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x[r, c] + b[c]` broadcast over rows.
    pub fn add_row_vec(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, c) = dims2("add_row_vec", self.shape(x))?;
        if self.shape(b) != [c] {
            return Err(shape_err!("add_row_vec", "bias {:?} for {c} columns", self.shape(b)));
        }
        let bias = self.value(b).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(c) {
            for (v, &bb) in row.iter_mut().zip(&bias) {
                *v += bb;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(t, Op::AddRowVec(x, b), rg))
    }

    /// `x[c, ...] + b[c]` broadcast over trailing axes.
    pub fn add_channel_vec(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.shape(x)[0];
        if self.shape(b) != [c] {
            return Err(shape_err!("add_channel_vec", "bias {:?} for {c} channels", self.shape(b)));
        }
        let bias = self.value(b).data().to_vec();
        let mut t = self.value(x).clone();
        let plane = t.len() / c;
        for (chunk, &bb) in t.data_mut().chunks_mut(plane).zip(&bias) {
            for v in chunk {
                *v += bb;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(t, Op::AddChannelVec(x, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        let t = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        let t = self.value(x).map(|v| v + s);
        let rg = self.rg(&[x]);
        self.push(t, Op::AddScalar(x), rg)
    }

    /// Matrix product of `a` and `b`, each optionally transposed.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = dims2("matmul", self.shape(a))?;
        let (br, bc) = dims2("matmul", self.shape(b))?;
        let am = MatRef { data: self.value(a).data(), rows: ar, cols: ac, transposed: ta };
        let bm = MatRef { data: self.value(b).data(), rows: br, cols: bc, transposed: tb };
        let (m, k) = am.dims();
        let (k2, n) = bm.dims();
        if k != k2 {
            return Err(shape_err!(
                "matmul",
                "{:?}{} x {:?}{}",
                self.shape(a),
                if ta { "^T" } else { "" },
                self.shape(b),
                if tb { "^T" } else { "" }
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(am, bm, &mut out, T::zero());
        let t = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2("transpose", self.shape(x))?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v <= T::zero() { T::zero() } else { v });
        let rg = self.rg(&[x]);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(t, Op::Sigmoid(x), rg)
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log(&mut self, x: Var, floor: f64) -> Var {
        let floor = T::of(floor);
        let t = self.value(x).map(|v| if v < floor { floor } else { v }.ln());
        let rg = self.rg(&[x]);
        self.push(t, Op::Log { x, floor }, rg)
    }

    /// Row-wise `softmax(x / tau)` over the last axis of a rank-1 or rank-2
    /// tensor. `allowed` (row-major, same length as `x`) zeroes disallowed
    /// entries; a row with nothing allowed falls back to all entries.
    pub fn softmax(&mut self, x: Var, tau: f64, allowed: Option<&[bool]>) -> Result<Var> {
        if tau.is_nan() || tau <= 0.0 {
            return Err(invalid!("softmax temperature must be positive, got {tau}"));
        }
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| shape_err!("softmax", "rank 0 input"))?;
        if shape.len() > 2 {
            return Err(shape_err!("softmax", "expected rank 1 or 2, got {shape:?}"));
        }
        if let Some(m) = allowed {
            if m.len() != numel(&shape) {
                return Err(shape_err!("softmax", "mask of {} for {shape:?}", m.len()));
            }
        }
        let tau_t = T::of(tau);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for (r, (row, dst)) in src.chunks(c).zip(out.chunks_mut(c)).enumerate() {
            let mask = allowed.map(|m| &m[r * c..(r + 1) * c]);
            kernels::softmax_row(row, tau_t, mask, dst);
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax { x, tau: tau_t }, rg))
    }

    /// Normalise each row of `x[r, d]` and apply the affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, d) = dims2("layer_norm", self.shape(x))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err!("layer_norm", "affine params must be [{d}]"));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); r * d];
        let mut rstd = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * d];
        let eps = T::of(eps);
        let dn = T::of(d as f64);
        for i in 0..r {
            let row = &src[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[i * d + j] = xh;
                out[i * d + j] = xh * g[j] + b[j];
            }
        }
        let t = Tensor::new(vec![r, d], out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    /// Group normalisation of `x[C, H, W]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let (c, h, w) = dims3("group_norm", self.shape(x))?;
        if groups == 0 || c % groups != 0 {
            return Err(invalid!("{c} channels not divisible into {groups} groups"));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err!("group_norm", "affine params must be [{c}]"));
        }
        let src = self.value(x).data();
        let gm = self.value(gamma).data();
        let bt = self.value(beta).data();
        let per = c / groups * h * w;
        let plane = h * w;
        let eps = T::of(eps);
        let n = T::of(per as f64);
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); groups];
        let mut out = vec![T::zero(); src.len()];
        for gi in 0..groups {
            let seg = &src[gi * per..(gi + 1) * per];
            let mean = seg.iter().copied().sum::<T>() / n;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[gi] = rs;
            for (j, &v) in seg.iter().enumerate() {
                let idx = gi * per + j;
                let ch = idx / plane;
                let xh = (v - mean) * rs;
                xhat[idx] = xh;
                out[idx] = xh * gm[ch] + bt[ch];
            }
        }
        let t = Tensor::new(vec![c, h, w], out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(t, Op::GroupNorm { x, gamma, beta, groups, xhat, rstd }, rg))
    }

    /// Cross-correlation of `x[C_in, H, W]` with `w[C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (ci, h, wd) = dims3("conv2d", self.shape(x))?;
        let ws = self.shape(w).to_vec();
        let [co, wci, k, k2] = ws[..] else {
            return Err(shape_err!("conv2d", "weight must be rank 4, got {ws:?}"));
        };
        if wci != ci || k != k2 {
            return Err(shape_err!("conv2d", "input {:?} vs weight {ws:?}", self.shape(x)));
        }
        if stride == 0 || k > h + 2 * padding || k > wd + 2 * padding {
            return Err(invalid!("conv2d kernel {k} stride {stride} on {h}x{wd} pad {padding}"));
        }
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(shape_err!("conv2d", "bias {:?} for {co} outputs", self.shape(b)));
            }
        }
        let geom = ConvGeom { channels: ci, height: h, width: wd, kernel: k, stride, padding };
        let (oh, ow) = (geom.out_height(), geom.out_width());
        let mut cols = vec![T::zero(); geom.col_rows() * oh * ow];
        kernels::im2col(self.value(x).data(), &geom, &mut cols);
        let mut out = vec![T::zero(); co * oh * ow];
        gemm(
            MatRef::new(self.value(w).data(), co, geom.col_rows()),
            MatRef::new(&cols, geom.col_rows(), oh * ow),
            &mut out,
            T::zero(),
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (chunk, &bb) in out.chunks_mut(oh * ow).zip(bias) {
                chunk.iter_mut().for_each(|v| *v += bb);
            }
        }
        let t = Tensor::new(vec![co, oh, ow], out)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        let rg = self.rg(&ins);
        Ok(self.push(t, Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    /// Transposed convolution with `w[C_in, C_out, k, k]`; output extent is
    /// `(H - 1) * stride - 2 * padding + k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (ci, h, wd) = dims3("conv_transpose2d", self.shape(x))?;
        let ws = self.shape(w).to_vec();
        let [wci, co, k, k2] = ws[..] else {
            return Err(shape_err!("conv_transpose2d", "weight must be rank 4, got {ws:?}"));
        };
        if wci != ci || k != k2 {
            return Err(shape_err!("conv_transpose2d", "input {:?} vs weight {ws:?}", self.shape(x)));
        }
        if stride == 0 || (h - 1) * stride + k <= 2 * padding {
            return Err(invalid!("conv_transpose2d geometry k={k} s={stride} p={padding}"));
        }
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(shape_err!("conv_transpose2d", "bias {:?} for {co} outputs", self.shape(b)));
            }
        }
        let oh = (h - 1) * stride + k - 2 * padding;
        let ow = (wd - 1) * stride + k - 2 * padding;
        let geom = ConvGeom { channels: co, height: oh, width: ow, kernel: k, stride, padding };
        debug_assert_eq!(geom.out_height(), h);
        let mut cols = vec![T::zero(); geom.col_rows() * h * wd];
        gemm(
            MatRef::new(self.value(w).data(), ci, geom.col_rows()).t(),
            MatRef::new(self.value(x).data(), ci, h * wd),
            &mut cols,
            T::zero(),
        );
        let mut out = vec![T::zero(); co * oh * ow];
        kernels::col2im(&cols, &geom, &mut out);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (chunk, &bb) in out.chunks_mut(oh * ow).zip(bias) {
                chunk.iter_mut().for_each(|v| *v += bb);
            }
        }
        let t = Tensor::new(vec![co, oh, ow], out)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        let rg = self.rg(&ins);
        Ok(self.push(t, Op::ConvTranspose2d { x, w, b, geom }, rg))
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let (c, h, w) = dims3("max_pool2d", self.shape(x))?;
        let geom = ConvGeom { channels: c, height: h, width: w, kernel, stride, padding };
        if stride == 0 || kernel > h + 2 * padding || padding >= kernel {
            return Err(invalid!("max_pool2d k={kernel} s={stride} p={padding} on {h}x{w}"));
        }
        let (oh, ow) = (geom.out_height(), geom.out_width());
        let src = self.value(x).data();
        let mut out = vec![T::zero(); c * oh * ow];
        let mut argmax = vec![0usize; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut at = 0;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = (ch * h + iy as usize) * w + ix as usize;
                            if src[idx] > best || src[idx].is_nan() {
                                best = src[idx];
                                at = idx;
                            }
                        }
                    }
                    let o = (ch * oh + oy) * ow + ox;
                    out[o] = best;
                    argmax[o] = at;
                }
            }
        }
        let t = Tensor::new(vec![c, oh, ow], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::MaxPool { x, argmax }, rg))
    }

    /// Bilinear resample of `x[C, H, W]` to `C x oh x ow` (half-pixel centres).
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let (c, h, w) = dims3("resize_bilinear", self.shape(x))?;
        if oh == 0 || ow == 0 {
            return Err(invalid!("resize to empty extent"));
        }
        let out = kernels::bilinear_resize(self.value(x).data(), c, (h, w), (oh, ow));
        let t = Tensor::new(vec![c, oh, ow], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Resize { x, planes: c, from: (h, w), to: (oh, ow) }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(t, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::scalar(v.sum() / T::of(v.len() as f64));
        let rg = self.rg(&[x]);
        self.push(t, Op::Mean(x), rg)
    }

    /// Mean over the last axis.
    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (&c, lead) = shape
            .split_last()
            .ok_or_else(|| shape_err!("mean_last", "rank 0 input"))?;
        let cn = T::of(c as f64);
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(c)
            .map(|row| row.iter().copied().sum::<T>() / cn)
            .collect();
        let t = if lead.is_empty() {
            Tensor::scalar(data[0])
        } else {
            Tensor::new(lead.to_vec(), data)?
        };
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::MeanLast(x), rg))
    }

    /// Stack rank-2 tensors with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid!("concat of nothing"))?;
        let (_, c) = dims2("concat_rows", self.shape(*first))?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = dims2("concat_rows", self.shape(p))?;
            if pc != c {
                return Err(shape_err!("concat_rows", "{pc} columns vs {c}"));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![rows, c], data)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2("slice_rows", self.shape(x))?;
        if len == 0 || start + len > r {
            return Err(shape_err!("slice_rows", "rows {start}..{} of {r}", start + len));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::new(vec![len, c], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SliceRows { x, start }, rg))
    }

    /// Join rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid!("concat of nothing"))?;
        let (r, _) = dims2("concat_cols", self.shape(*first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = dims2("concat_cols", self.shape(p))?;
            if pr != r {
                return Err(shape_err!("concat_cols", "{pr} rows vs {r}"));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &pc) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * pc..(i + 1) * pc]);
            }
        }
        let t = Tensor::new(vec![r, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2("slice_cols", self.shape(x))?;
        if len == 0 || start + len > c {
            return Err(shape_err!("slice_cols", "cols {start}..{} of {c}", start + len));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let t = Tensor::new(vec![r, len], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SliceCols { x, start }, rg))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `target`, with
    /// probabilities clamped to `[eps, 1 - eps]` before the log.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor<T>, eps: f64) -> Result<Var> {
        same_shape("bce_with_logits", self.shape(logits), target.shape())?;
        let eps_t = T::of(eps);
        let x = self.value(logits).data();
        let y = target.data();
        let mut total = T::zero();
        for (&xi, &yi) in x.iter().zip(y) {
            let lp = clamped_log_sigmoid(xi, eps_t);
            let lq = clamped_log_sigmoid(-xi, eps_t);
            total -= yi * lp + (T::one() - yi) * lq;
        }
        let t = Tensor::scalar(total / T::of(x.len() as f64));
        let rg = self.rg(&[logits]);
        Ok(self.push(
            t,
            Op::Bce { logits, target: y.to_vec(), eps: eps_t },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(invalid!("backward needs a scalar loss, got shape {:?}", lv.shape()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let gb = g.iter().zip(val(*b)).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *a, gb);
                }
                if wants(*b) {
                    let ga = g.iter().zip(val(*a)).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *b, ga);
                }
            }
            Op::AddRowVec(x, b) => {
                if wants(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
                if wants(*b) {
                    let c = val(*b).len();
                    accumulate_with(grads, *b, c, |acc| {
                        for row in g.chunks(c) {
                            for (a, &v) in acc.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                    });
                }
            }
            Op::AddChannelVec(x, b) => {
                if wants(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
                if wants(*b) {
                    let c = val(*b).len();
                    let plane = g.len() / c;
                    accumulate_with(grads, *b, c, |acc| {
                        for (a, chunk) in acc.iter_mut().zip(g.chunks(plane)) {
                            *a += chunk.iter().copied().sum::<T>();
                        }
                    });
                }
            }
            Op::Scale(x, s) => {
                if wants(*x) {
                    accumulate(grads, *x, g.iter().map(|&v| v * *s).collect());
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if wants(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let am = MatRef { data: val(*a), rows: sa[0], cols: sa[1], transposed: *ta };
                let bm = MatRef { data: val(*b), rows: sb[0], cols: sb[1], transposed: *tb };
                let (m, _) = am.dims();
                let (_, n) = bm.dims();
                let gm = MatRef::new(g, m, n);
                if wants(*a) {
                    let len = sa[0] * sa[1];
                    accumulate_with(grads, *a, len, |acc| {
                        if *ta {
                            gemm(bm, gm.t(), acc, T::one());
                        } else {
                            gemm(gm, bm.t(), acc, T::one());
                        }
                    });
                }
                if wants(*b) {
                    let len = sb[0] * sb[1];
                    accumulate_with(grads, *b, len, |acc| {
                        if *tb {
                            gemm(gm.t(), am, acc, T::one());
                        } else {
                            gemm(am.t(), gm, acc, T::one());
                        }
                    });
                }
            }
            Op::Transpose(x) => {
                if wants(*x) {
                    let s = node.value.shape();
                    let (r, c) = (s[0], s[1]);
                    let mut out = vec![T::zero(); r * c];
                    for i in 0..r {
                        for j in 0..c {
                            out[j * r + i] = g[i * c + j];
                        }
                    }
                    accumulate(grads, *x, out);
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let out = g
                        .iter()
                        .zip(val(*x))
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    accumulate(grads, *x, out);
                }
            }
            Op::Sigmoid(x) => {
                if wants(*x) {
                    let out = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(&gv, &y)| gv * y * (T::one() - y))
                        .collect();
                    accumulate(grads, *x, out);
                }
            }
            Op::Log { x, floor } => {
                if wants(*x) {
                    let out = g
                        .iter()
                        .zip(val(*x))
                        .map(|(&gv, &xv)| if xv > *floor { gv / xv } else { T::zero() })
                        .collect();
                    accumulate(grads, *x, out);
                }
            }
            Op::Softmax { x, tau } => {
                if wants(*x) {
                    let p = node.value.data();
                    let c = *node.value.shape().last().expect("rank >= 1");
                    let mut out = vec![T::zero(); p.len()];
                    for ((pr, gr), or) in p.chunks(c).zip(g.chunks(c)).zip(out.chunks_mut(c)) {
                        let dot: T = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((o, &pi), &gi) in or.iter_mut().zip(pr).zip(gr) {
                            *o = pi * (gi - dot) / *tau;
                        }
                    }
                    accumulate(grads, *x, out);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = val(*gamma).len();
                let gm = val(*gamma);
                if wants(*x) {
                    let dn = T::of(d as f64);
                    let mut out = vec![T::zero(); g.len()];
                    for (i, &rs) in rstd.iter().enumerate() {
                        let gr = &g[i * d..(i + 1) * d];
                        let xr = &xhat[i * d..(i + 1) * d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dx = gr[j] * gm[j];
                            m1 += dx;
                            m2 += dx * xr[j];
                        }
                        m1 /= dn;
                        m2 /= dn;
                        for j in 0..d {
                            out[i * d + j] = rs * (gr[j] * gm[j] - m1 - xr[j] * m2);
                        }
                    }
                    accumulate(grads, *x, out);
                }
                if wants(*gamma) {
                    accumulate_with(grads, *gamma, d, |acc| {
                        for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                acc[j] += gr[j] * xr[j];
                            }
                        }
                    });
                }
                if wants(*beta) {
                    accumulate_with(grads, *beta, d, |acc| {
                        for gr in g.chunks(d) {
                            for j in 0..d {
                                acc[j] += gr[j];
                            }
                        }
                    });
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, xhat, rstd } => {
                let c = val(*gamma).len();
                let plane = g.len() / c;
                let per = g.len() / groups;
                let gm = val(*gamma);
                if wants(*x) {
                    let n = T::of(per as f64);
                    let mut out = vec![T::zero(); g.len()];
                    for (gi, &rs) in rstd.iter().enumerate() {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in gi * per..(gi + 1) * per {
                            let dx = g[j] * gm[j / plane];
                            m1 += dx;
                            m2 += dx * xhat[j];
                        }
                        m1 /= n;
                        m2 /= n;
                        for j in gi * per..(gi + 1) * per {
                            out[j] = rs * (g[j] * gm[j / plane] - m1 - xhat[j] * m2);
                        }
                    }
                    accumulate(grads, *x, out);
                }
                if wants(*gamma) {
                    accumulate_with(grads, *gamma, c, |acc| {
                        for (ch, a) in acc.iter_mut().enumerate() {
                            let r = ch * plane..(ch + 1) * plane;
                            *a += g[r.clone()].iter().zip(&xhat[r]).map(|(&u, &v)| u * v).sum::<T>();
                        }
                    });
                }
                if wants(*beta) {
                    accumulate_with(grads, *beta, c, |acc| {
                        for (a, chunk) in acc.iter_mut().zip(g.chunks(plane)) {
                            *a += chunk.iter().copied().sum::<T>();
                        }
                    });
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let co = node.value.shape()[0];
                let spatial = geom.col_cols();
                let gm = MatRef::new(g, co, spatial);
                if wants(*w) {
                    let len = co * geom.col_rows();
                    accumulate_with(grads, *w, len, |acc| {
                        gemm(gm, MatRef::new(cols, geom.col_rows(), spatial).t(), acc, T::one());
                    });
                }
                if wants(*x) {
                    let mut dcols = vec![T::zero(); geom.col_rows() * spatial];
                    gemm(MatRef::new(val(*w), co, geom.col_rows()).t(), gm, &mut dcols, T::zero());
                    let len = geom.channels * geom.height * geom.width;
                    accumulate_with(grads, *x, len, |acc| kernels::col2im(&dcols, geom, acc));
                }
                if let Some(b) = b.filter(|b| wants(*b)) {
                    accumulate_with(grads, b, co, |acc| {
                        for (a, chunk) in acc.iter_mut().zip(g.chunks(spatial)) {
                            *a += chunk.iter().copied().sum::<T>();
                        }
                    });
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let xs = self.nodes[x.0].value.shape();
                let (ci, spatial) = (xs[0], xs[1] * xs[2]);
                let needs_cols = wants(*x) || wants(*w);
                let mut gcols = Vec::new();
                if needs_cols {
                    gcols = vec![T::zero(); geom.col_rows() * spatial];
                    kernels::im2col(g, geom, &mut gcols);
                }
                let gc = MatRef::new(&gcols, geom.col_rows(), spatial);
                if wants(*x) {
                    accumulate_with(grads, *x, ci * spatial, |acc| {
                        gemm(MatRef::new(val(*w), ci, geom.col_rows()), gc, acc, T::one());
                    });
                }
                if wants(*w) {
                    accumulate_with(grads, *w, ci * geom.col_rows(), |acc| {
                        gemm(MatRef::new(val(*x), ci, spatial), gc.t(), acc, T::one());
                    });
                }
                if let Some(b) = b.filter(|b| wants(*b)) {
                    let plane = geom.height * geom.width;
                    accumulate_with(grads, b, geom.channels, |acc| {
                        for (a, chunk) in acc.iter_mut().zip(g.chunks(plane)) {
                            *a += chunk.iter().copied().sum::<T>();
                        }
                    });
                }
            }
            Op::MaxPool { x, argmax } => {
                if wants(*x) {
                    let len = val(*x).len();
                    accumulate_with(grads, *x, len, |acc| {
                        for (&gv, &at) in g.iter().zip(argmax) {
                            acc[at] += gv;
                        }
                    });
                }
            }
            Op::Resize { x, planes, from, to } => {
                if wants(*x) {
                    let out = kernels::bilinear_resize_adjoint(g, *planes, *from, *to);
                    accumulate(grads, *x, out);
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    accumulate(grads, *x, vec![g[0]; val(*x).len()]);
                }
            }
            Op::Mean(x) => {
                if wants(*x) {
                    let n = val(*x).len();
                    accumulate(grads, *x, vec![g[0] / T::of(n as f64); n]);
                }
            }
            Op::MeanLast(x) => {
                if wants(*x) {
                    let n = val(*x).len();
                    let c = n / g.len();
                    let cn = T::of(c as f64);
                    let out = (0..n).map(|i| g[i / c] / cn).collect();
                    accumulate(grads, *x, out);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    if wants(p) {
                        accumulate(grads, p, g[off..off + len].to_vec());
                    }
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                if wants(*x) {
                    let c = node.value.shape()[1];
                    let len = val(*x).len();
                    accumulate_with(grads, *x, len, |acc| {
                        for (a, &v) in acc[start * c..start * c + g.len()].iter_mut().zip(g) {
                            *a += v;
                        }
                    });
                }
            }
            Op::ConcatCols(parts) => {
                let r = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut off = 0;
                for &p in parts {
                    let pc = self.nodes[p.0].value.shape()[1];
                    if wants(p) {
                        let mut out = Vec::with_capacity(r * pc);
                        for i in 0..r {
                            out.extend_from_slice(&g[i * total + off..i * total + off + pc]);
                        }
                        accumulate(grads, p, out);
                    }
                    off += pc;
                }
            }
            Op::SliceCols { x, start } => {
                if wants(*x) {
                    let xs = self.nodes[x.0].value.shape();
                    let (r, c) = (xs[0], xs[1]);
                    let len = node.value.shape()[1];
                    accumulate_with(grads, *x, r * c, |acc| {
                        for i in 0..r {
                            for j in 0..len {
                                acc[i * c + start + j] += g[i * len + j];
                            }
                        }
                    });
                }
            }
            Op::Bce { logits, target, eps } => {
                if wants(*logits) {
                    let x = val(*logits);
                    let n = T::of(x.len() as f64);
                    let (lo, hi) = (eps.ln(), (T::one() - *eps).ln());
                    let inside = |v: T| {
                        let l = log_sigmoid(v);
                        l > lo && l < hi
                    };
                    let out = x
                        .iter()
                        .zip(target)
                        .map(|(&xi, &yi)| {
                            let p = sigmoid(xi);
                            let q = sigmoid(-xi);
                            let mut d = T::zero();
                            if inside(xi) {
                                d -= yi * q;
                            }
                            if inside(-xi) {
                                d += (T::one() - yi) * p;
                            }
                            g[0] * d / n
                        })
                        .collect();
                    accumulate(grads, *logits, out);
                }
            }
        }
    }
}

/// Logistic function, stable for large magnitudes.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(clamp(sigmoid(x), eps, 1 - eps))`; NaN stays NaN.
pub fn clamped_log_sigmoid<T: Scalar>(x: T, eps: T) -> T {
    let (lo, hi) = (eps.ln(), (T::one() - eps).ln());
    let v = log_sigmoid(x);
    if v < lo {
        lo
    } else if v > hi {
        hi
    } else {
        v
    }
}

/// `ln(sigmoid(x))` without overflow.
pub fn log_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}
