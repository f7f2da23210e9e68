//! Slice-level kernels shared by the forward and backward passes.

use super::Scalar;

/// Row-major matrix operand, optionally read transposed.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T> MatRef<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            transposed: !self.transposed,
            ..self
        }
    }

    /// Logical (rows, cols) after the optional transpose.
    pub fn dims(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out <- beta * out + a * b` with `out` row-major `m x n`.
pub fn gemm<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, out: &mut [T], beta: T) {
    let (m, k) = a.dims();
    let (k2, n) = b.dims();
    assert_eq!(k, k2, "gemm inner dimension");
    assert_eq!(out.len(), m * n, "gemm output size");
    assert!(a.data.len() >= a.rows * a.cols && b.data.len() >= b.rows * b.cols);
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: lengths checked above; strides describe the row-major buffers.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel 2-D convolution over a `C x H x W` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfold `image` into a `(C*k*k) x (H'*W')` column matrix.
pub fn im2col<T: Scalar>(image: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let pad = g.padding as isize;
    debug_assert_eq!(cols.len(), g.col_rows() * oh * ow);
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        *v = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: fold columns back, accumulating into `image`.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, image: &mut [T]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            line[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// One output coordinate of a bilinear resample: two source taps and the
/// weight of the upper tap.
#[derive(Debug, Clone, Copy)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

/// Half-pixel-centre sampling positions (no corner alignment).
pub fn bilinear_taps(src: usize, dst: usize) -> Vec<Tap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let pos = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            Tap {
                lo,
                hi,
                frac: pos - lo as f64,
            }
        })
        .collect()
}

/// Resample each `h x w` plane of `input` to `oh x ow`.
pub fn bilinear_resize<T: Scalar>(
    input: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (y, t) in ty.iter().enumerate() {
            let fy = T::of(t.frac);
            let r0 = &src[t.lo * w..(t.lo + 1) * w];
            let r1 = &src[t.hi * w..(t.hi + 1) * w];
            for (x, s) in tx.iter().enumerate() {
                let fx = T::of(s.frac);
                let top = r0[s.lo] + (r0[s.hi] - r0[s.lo]) * fx;
                let bot = r1[s.lo] + (r1[s.hi] - r1[s.lo]) * fx;
                dst[y * ow + x] = top + (bot - top) * fy;
            }
        }
    }
    out
}

/// Adjoint of [`bilinear_resize`].
pub fn bilinear_resize_adjoint<T: Scalar>(
    grad_out: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let g = &grad_out[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for (y, t) in ty.iter().enumerate() {
            let fy = T::of(t.frac);
            for (x, s) in tx.iter().enumerate() {
                let fx = T::of(s.frac);
                let v = g[y * ow + x];
                let one = T::one();
                dst[t.lo * w + s.lo] += v * (one - fy) * (one - fx);
                dst[t.lo * w + s.hi] += v * (one - fy) * fx;
                dst[t.hi * w + s.lo] += v * fy * (one - fx);
                dst[t.hi * w + s.hi] += v * fy * fx;
            }
        }
    }
    out
}

/// Nearest-neighbour resample of a single plane (masks).
pub fn nearest_resize<T: Copy>(input: &[T], (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<T> {
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let sy = ((y as f64 + 0.5) * h as f64 / oh as f64).floor() as usize;
        let sy = sy.min(h - 1);
        for x in 0..ow {
            let sx = ((x as f64 + 0.5) * w as f64 / ow as f64).floor() as usize;
            out.push(input[sy * w + sx.min(w - 1)]);
        }
    }
    out
}

/// Tempered, optionally masked softmax of one row, written into `out`.
///
/// Masked entries get probability zero. A row with no allowed entry is
/// treated as fully allowed.
pub fn softmax_row<T: Scalar>(logits: &[T], tau: T, allowed: Option<&[bool]>, out: &mut [T]) {
    let allowed = allowed.filter(|m| m.iter().any(|&a| a));
    let ok = |i: usize| allowed.is_none_or(|m| m[i]);
    let mut max = T::neg_infinity();
    for (i, &v) in logits.iter().enumerate() {
        if ok(i) && v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for (i, (o, &v)) in out.iter_mut().zip(logits).enumerate() {
        *o = if ok(i) { ((v - max) / tau).exp() } else { T::zero() };
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}
