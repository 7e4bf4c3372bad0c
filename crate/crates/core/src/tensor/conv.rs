//! Same-padded 2-D convolution via im2col + GEMM.
//!
//! Columns are built one band of output rows at a time so the scratch buffer
//! stays bounded on large images. Work is split across batch elements; the
//! weight gradient is reduced over samples in index order, which keeps the
//! result independent of the worker count.

use rayon::prelude::*;

use super::{check_finite, Result, Scalar, Tensor, TensorError};

/// Upper bound on the element count of one im2col band.
const MAX_COLUMN_ELEMS: usize = 1 << 22;

/// Borrowed view of a convolution's weights `(c_out, c_in, k, k)` and bias.
#[derive(Debug, Clone, Copy)]
pub struct ConvParams<'a, T> {
    weight: &'a Tensor<T>,
    bias: &'a [T],
}

impl<'a, T: Scalar> ConvParams<'a, T> {
    pub fn new(weight: &'a Tensor<T>, bias: &'a [T]) -> Result<Self> {
        let [c_out, c_in, kh, kw] = weight.shape();
        if kh != kw || !matches!(kh, 1 | 3 | 5) {
            return Err(TensorError::InvalidKernel { kh, kw });
        }
        if c_out == 0 || c_in == 0 {
            return Err(TensorError::InvalidParams(format!(
                "conv channels must be positive, got {c_out}x{c_in}"
            )));
        }
        if bias.len() != c_out {
            return Err(TensorError::InvalidParams(format!(
                "bias length {} does not match {c_out} output channels",
                bias.len()
            )));
        }
        Ok(ConvParams { weight, bias })
    }

    pub fn weight(&self) -> &'a Tensor<T> {
        self.weight
    }
    pub fn bias(&self) -> &'a [T] {
        self.bias
    }
    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }
    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }
    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }
}

/// Gradients returned by [`conv2d_backward`].
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub grad_input: Tensor<T>,
    pub grad_weight: Tensor<T>,
    pub grad_bias: Vec<T>,
}

struct Geometry {
    c_in: usize,
    c_out: usize,
    k: usize,
    h: usize,
    w: usize,
}

impl Geometry {
    fn pad(&self) -> usize {
        (self.k - 1) / 2
    }
    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }
    fn plane(&self) -> usize {
        self.h * self.w
    }
    fn band_rows(&self) -> usize {
        let per_row = self.patch_len() * self.w;
        (MAX_COLUMN_ELEMS / per_row.max(1)).clamp(1, self.h)
    }
}

fn geometry<T: Scalar>(input: &Tensor<T>, p: &ConvParams<'_, T>) -> Result<Geometry> {
    let [_, c, h, w] = input.shape();
    if c != p.c_in() {
        return Err(TensorError::ChannelMismatch {
            expected: p.c_in(),
            found: c,
        });
    }
    if h == 0 || w == 0 {
        return Err(TensorError::EmptySpatial { h, w });
    }
    Ok(Geometry {
        c_in: c,
        c_out: p.c_out(),
        k: p.kernel(),
        h,
        w,
    })
}

/// Fill `cols` (patch_len x rows*w) with the zero-padded neighbourhoods of
/// output rows `y0..y0 + rows`.
fn im2col<T: Scalar>(x: &[T], g: &Geometry, y0: usize, rows: usize, cols: &mut [T]) {
    let (k, h, w, pad) = (g.k, g.h, g.w, g.pad() as isize);
    let span = rows * w;
    for ci in 0..g.c_in {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for dy in 0..k {
            for dx in 0..k {
                let row = (ci * k + dy) * k + dx;
                let dst = &mut cols[row * span..(row + 1) * span];
                let off_x = dx as isize - pad;
                for r in 0..rows {
                    let sy = (y0 + r) as isize + dy as isize - pad;
                    let out = &mut dst[r * w..(r + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (xo, o) in out.iter_mut().enumerate() {
                        let sx = xo as isize + off_x;
                        *o = if sx < 0 || sx >= w as isize {
                            T::zero()
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add `cols` back onto the input-gradient sample (inverse of
/// [`im2col`]'s gather).
fn col2im<T: Scalar>(cols: &[T], g: &Geometry, y0: usize, rows: usize, gx: &mut [T]) {
    let (k, h, w, pad) = (g.k, g.h, g.w, g.pad() as isize);
    let span = rows * w;
    for ci in 0..g.c_in {
        let plane = &mut gx[ci * h * w..(ci + 1) * h * w];
        for dy in 0..k {
            for dx in 0..k {
                let row = (ci * k + dy) * k + dx;
                let src = &cols[row * span..(row + 1) * span];
                let off_x = dx as isize - pad;
                for r in 0..rows {
                    let sy = (y0 + r) as isize + dy as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for (xo, &v) in src[r * w..(r + 1) * w].iter().enumerate() {
                        let sx = xo as isize + off_x;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Same-padded stride-1 convolution: `out[o] = bias[o] + sum_i w[o,i] * x[i]`.
pub fn conv2d_forward<T: Scalar>(input: &Tensor<T>, p: &ConvParams<'_, T>) -> Result<Tensor<T>> {
    let g = geometry(input, p)?;
    let n = input.n();
    let mut out = Tensor::zeros([n, g.c_out, g.h, g.w]);
    let plane = g.plane();
    let kk = g.patch_len();
    let wdata = p.weight.data();

    out.data_mut()
        .par_chunks_mut(g.c_out * plane)
        .enumerate()
        .for_each(|(b, ob)| {
            for (o, chunk) in ob.chunks_mut(plane).enumerate() {
                chunk.fill(p.bias[o]);
            }
            let x = input.sample(b);
            if g.k == 1 {
                // SAFETY: W is c_out x c_in, x is c_in x plane, ob is c_out x plane.
                unsafe {
                    T::gemm(
                        g.c_out,
                        kk,
                        plane,
                        T::one(),
                        wdata.as_ptr(),
                        kk as isize,
                        1,
                        x.as_ptr(),
                        plane as isize,
                        1,
                        T::one(),
                        ob.as_mut_ptr(),
                        plane as isize,
                        1,
                    );
                }
                return;
            }
            let band = g.band_rows();
            let mut cols = vec![T::zero(); kk * band * g.w];
            let mut y0 = 0;
            while y0 < g.h {
                let rows = band.min(g.h - y0);
                let span = rows * g.w;
                im2col(x, &g, y0, rows, &mut cols[..kk * span]);
                // SAFETY: the output band starts at row y0 of every channel
                // plane; channel stride is `plane`, band width `span`.
                unsafe {
                    T::gemm(
                        g.c_out,
                        kk,
                        span,
                        T::one(),
                        wdata.as_ptr(),
                        kk as isize,
                        1,
                        cols.as_ptr(),
                        span as isize,
                        1,
                        T::one(),
                        ob.as_mut_ptr().add(y0 * g.w),
                        plane as isize,
                        1,
                    );
                }
                y0 += rows;
            }
        });
    check_finite("conv2d_forward", out.data())?;
    Ok(out)
}

/// Exact gradients of [`conv2d_forward`] with respect to input, weights and bias.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    p: &ConvParams<'_, T>,
) -> Result<ConvGrads<T>> {
    let g = geometry(input, p)?;
    let n = input.n();
    let expected = [n, g.c_out, g.h, g.w];
    if grad_out.shape() != expected {
        return Err(TensorError::ShapeMismatch {
            left: grad_out.shape(),
            right: expected,
        });
    }
    let plane = g.plane();
    let kk = g.patch_len();
    let wdata = p.weight.data();

    let mut grad_input = Tensor::zeros(input.shape());
    let partial_w: Vec<Vec<T>> = grad_input
        .data_mut()
        .par_chunks_mut(g.c_in * plane)
        .enumerate()
        .map(|(b, gx)| {
            let x = input.sample(b);
            let gy = grad_out.sample(b);
            let mut gw = vec![T::zero(); g.c_out * kk];
            if g.k == 1 {
                // SAFETY: gw (c_out x c_in) += gy (c_out x plane) * x^T (plane x c_in);
                // gx (c_in x plane) = W^T (c_in x c_out) * gy.
                unsafe {
                    T::gemm(
                        g.c_out,
                        plane,
                        kk,
                        T::one(),
                        gy.as_ptr(),
                        plane as isize,
                        1,
                        x.as_ptr(),
                        1,
                        plane as isize,
                        T::zero(),
                        gw.as_mut_ptr(),
                        kk as isize,
                        1,
                    );
                    T::gemm(
                        kk,
                        g.c_out,
                        plane,
                        T::one(),
                        wdata.as_ptr(),
                        1,
                        kk as isize,
                        gy.as_ptr(),
                        plane as isize,
                        1,
                        T::zero(),
                        gx.as_mut_ptr(),
                        plane as isize,
                        1,
                    );
                }
                return gw;
            }
            let band = g.band_rows();
            let mut cols = vec![T::zero(); kk * band * g.w];
            let mut y0 = 0;
            while y0 < g.h {
                let rows = band.min(g.h - y0);
                let span = rows * g.w;
                let cols = &mut cols[..kk * span];
                im2col(x, &g, y0, rows, cols);
                // SAFETY: gy band is c_out x span with row stride `plane`;
                // cols is kk x span contiguous; gw is c_out x kk.
                unsafe {
                    let gy_band = gy.as_ptr().add(y0 * g.w);
                    T::gemm(
                        g.c_out,
                        span,
                        kk,
                        T::one(),
                        gy_band,
                        plane as isize,
                        1,
                        cols.as_ptr(),
                        1,
                        span as isize,
                        T::one(),
                        gw.as_mut_ptr(),
                        kk as isize,
                        1,
                    );
                    // Reuse the column buffer for the column-space gradient.
                    T::gemm(
                        kk,
                        g.c_out,
                        span,
                        T::one(),
                        wdata.as_ptr(),
                        1,
                        kk as isize,
                        gy_band,
                        plane as isize,
                        1,
                        T::zero(),
                        cols.as_mut_ptr(),
                        span as isize,
                        1,
                    );
                }
                col2im(cols, &g, y0, rows, gx);
                y0 += rows;
            }
            gw
        })
        .collect();

    let mut gw_total = vec![T::zero(); g.c_out * kk];
    for gw in &partial_w {
        for (acc, &v) in gw_total.iter_mut().zip(gw) {
            *acc += v;
        }
    }
    let grad_weight = Tensor::from_vec(p.weight.shape(), gw_total)?;

    let mut grad_bias = Vec::with_capacity(g.c_out);
    for o in 0..g.c_out {
        let mut s = 0.0f64;
        for b in 0..n {
            s += grad_out.sample(b)[o * plane..(o + 1) * plane]
                .iter()
                .map(|v| v.as_f64())
                .sum::<f64>();
        }
        grad_bias.push(T::of(s));
    }

    check_finite("conv2d_backward", grad_input.data())?;
    check_finite("conv2d_backward", grad_weight.data())?;
    Ok(ConvGrads {
        grad_input,
        grad_weight,
        grad_bias,
    })
}
