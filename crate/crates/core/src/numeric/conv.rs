//! Causal strided 1-d convolution and its transposed counterpart.
//!
//! Both are lowered to GEMMs. For a kernel of width `K` and stride `S`,
//! column `(c, k)` of frame `f` addresses input position `f*S + k - offset`;
//! the forward convolution uses `offset = K - S` (left zero padding) and the
//! transposed convolution uses `offset = 0` with the trailing `K - S` output
//! samples dropped.

use super::linalg::{gemm, matmul, MatMut, MatRef};
use super::{Graph, Real, Tensor, Var};
use crate::error::{shape_err, Result};

/// Gathers `cols[(c*kernel + k), f] = x[c, f*stride + k - offset]`, zero
/// outside `0..len`.
pub(crate) fn im2col<R: Real>(
    x: &[R],
    channels: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    offset: usize,
    frames: usize,
) -> Vec<R> {
    let mut cols = vec![R::zero(); channels * kernel * frames];
    for c in 0..channels {
        let xrow = &x[c * len..(c + 1) * len];
        for k in 0..kernel {
            let out = &mut cols[(c * kernel + k) * frames..(c * kernel + k + 1) * frames];
            for (f, slot) in out.iter_mut().enumerate() {
                let pos = f * stride + k;
                if pos >= offset && pos - offset < len {
                    *slot = xrow[pos - offset];
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds columns back into `out[channels, len]`.
/// Frames are visited in ascending order for every output position.
pub(crate) fn col2im_add<R: Real>(
    cols: &[R],
    channels: usize,
    kernel: usize,
    stride: usize,
    offset: usize,
    frames: usize,
    out: &mut [R],
    len: usize,
) {
    for c in 0..channels {
        let orow = &mut out[c * len..(c + 1) * len];
        for f in 0..frames {
            for k in 0..kernel {
                let pos = f * stride + k;
                if pos >= offset && pos - offset < len {
                    orow[pos - offset] = orow[pos - offset] + cols[(c * kernel + k) * frames + f];
                }
            }
        }
    }
}

fn add_row_bias<R: Real>(out: &mut [R], bias: &[R], cols: usize) {
    for (row, &b) in out.chunks_mut(cols).zip(bias) {
        for v in row {
            *v = *v + b;
        }
    }
}

fn row_sums<R: Real>(g: &[R], rows: usize, cols: usize) -> Vec<R> {
    (0..rows).map(|r| g[r * cols..(r + 1) * cols].iter().copied().sum()).collect()
}

/// Strided convolution over `x[cin, len]` producing `frames` output frames,
/// with input position `f*stride + k - offset`. `w` is `[cout, cin, kernel]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_kernel<R: Real>(
    x: &[R],
    cin: usize,
    len: usize,
    w: &[R],
    cout: usize,
    kernel: usize,
    bias: &[R],
    stride: usize,
    offset: usize,
    frames: usize,
) -> Vec<R> {
    let owned;
    let cols: &[R] = if kernel == 1 && stride == 1 && offset == 0 && frames == len {
        x
    } else {
        owned = im2col(x, cin, len, kernel, stride, offset, frames);
        &owned
    };
    let mut out = matmul(MatRef::row_major(w, cout, cin * kernel), MatRef::row_major(cols, cin * kernel, frames));
    add_row_bias(&mut out, bias, frames);
    out
}

/// Transposed-convolution columns `cols[(co*kernel + k), f] = sum_ci w[ci, co, k] x[ci, f]`.
pub(crate) fn conv_transpose_cols<R: Real>(x: &[R], cin: usize, frames: usize, w: &[R], cout: usize, kernel: usize) -> Vec<R> {
    matmul(MatRef::row_major(w, cin, cout * kernel).t(), MatRef::row_major(x, cin, frames))
}

pub(crate) fn conv_transpose1d_kernel<R: Real>(
    x: &[R],
    cin: usize,
    frames: usize,
    w: &[R],
    cout: usize,
    kernel: usize,
    bias: &[R],
    stride: usize,
) -> Vec<R> {
    let cols = conv_transpose_cols(x, cin, frames, w, cout, kernel);
    let len = frames * stride;
    let mut out = vec![R::zero(); cout * len];
    col2im_add(&cols, cout, kernel, stride, 0, frames, &mut out, len);
    add_row_bias(&mut out, bias, len);
    out
}

fn check_conv_shapes<R: Real>(x: &Tensor<R>, w: &Tensor<R>, b: &Tensor<R>, stride: usize, transposed: bool) -> Result<(usize, usize, usize, usize)> {
    if x.ndim() != 2 || w.ndim() != 3 || b.ndim() != 1 {
        return Err(shape_err!("conv expects x[C,T], w[3-d], b[1-d]; got {:?}, {:?}, {:?}", x.shape(), w.shape(), b.shape()));
    }
    let (cin, len) = (x.dim(0), x.dim(1));
    let (wa, wb, kernel) = (w.dim(0), w.dim(1), w.dim(2));
    let (w_in, cout) = if transposed { (wa, wb) } else { (wb, wa) };
    if w_in != cin || b.dim(0) != cout {
        return Err(shape_err!("conv channels: x {:?}, w {:?}, b {:?}", x.shape(), w.shape(), b.shape()));
    }
    if stride == 0 || kernel < stride {
        return Err(shape_err!("conv needs kernel >= stride >= 1, got K={kernel} S={stride}"));
    }
    Ok((cin, len, cout, kernel))
}

impl<R: Real> Graph<R> {
    /// Causal strided convolution: `x[Cin,T]`, `w[Cout,Cin,K]`, `b[Cout]`
    /// to `[Cout, T/S]`, left-padding `K - S` zeros.
    pub fn conv1d_causal(&self, x: &Var<R>, w: &Var<R>, b: &Var<R>, stride: usize) -> Result<Var<R>> {
        let (cin, len, cout, kernel) = check_conv_shapes(x.value(), w.value(), b.value(), stride, false)?;
        if len % stride != 0 {
            return Err(shape_err!("conv1d input length {len} not divisible by stride {stride}"));
        }
        let frames = len / stride;
        let offset = kernel - stride;
        let out = conv1d_kernel(x.value().data(), cin, len, w.value().data(), cout, kernel, b.value().data(), stride, offset, frames);
        let (xv, wv) = (x.value_arc().clone(), w.value_arc().clone());
        Ok(self.record(Tensor::from_parts(vec![cout, frames], out), &[x, w, b], move |g, needs| {
            let g = g.data();
            let gx = needs[0].then(|| {
                let dcols = matmul(MatRef::row_major(wv.data(), cout, cin * kernel).t(), MatRef::row_major(g, cout, frames));
                let mut dx = vec![R::zero(); cin * len];
                col2im_add(&dcols, cin, kernel, stride, offset, frames, &mut dx, len);
                Tensor::from_parts(vec![cin, len], dx)
            });
            let gw = needs[1].then(|| {
                let cols = im2col(xv.data(), cin, len, kernel, stride, offset, frames);
                let dw = matmul(MatRef::row_major(g, cout, frames), MatRef::row_major(&cols, cin * kernel, frames).t());
                Tensor::from_parts(vec![cout, cin, kernel], dw)
            });
            let gb = needs[2].then(|| Tensor::from_parts(vec![cout], row_sums(g, cout, frames)));
            vec![gx, gw, gb]
        }))
    }

    /// Causal transposed convolution: `x[Cin,F]`, `w[Cin,Cout,K]`, `b[Cout]`
    /// to `[Cout, F*S]`, dropping the trailing `K - S` samples of the full
    /// output.
    pub fn conv_transpose1d_causal(&self, x: &Var<R>, w: &Var<R>, b: &Var<R>, stride: usize) -> Result<Var<R>> {
        let (cin, frames, cout, kernel) = check_conv_shapes(x.value(), w.value(), b.value(), stride, true)?;
        let len = frames * stride;
        let out = conv_transpose1d_kernel(x.value().data(), cin, frames, w.value().data(), cout, kernel, b.value().data(), stride);
        let (xv, wv) = (x.value_arc().clone(), w.value_arc().clone());
        Ok(self.record(Tensor::from_parts(vec![cout, len], out), &[x, w, b], move |g, needs| {
            let g = g.data();
            let dcols = im2col(g, cout, len, kernel, stride, 0, frames);
            let gx = needs[0].then(|| {
                let dx = matmul(MatRef::row_major(wv.data(), cin, cout * kernel), MatRef::row_major(&dcols, cout * kernel, frames));
                Tensor::from_parts(vec![cin, frames], dx)
            });
            let gw = needs[1].then(|| {
                let mut dw = vec![R::zero(); cin * cout * kernel];
                gemm(
                    R::one(),
                    MatRef::row_major(xv.data(), cin, frames),
                    MatRef::row_major(&dcols, cout * kernel, frames).t(),
                    R::zero(),
                    MatMut::row_major(&mut dw, cin, cout * kernel),
                );
                Tensor::from_parts(vec![cin, cout, kernel], dw)
            });
            let gb = needs[2].then(|| Tensor::from_parts(vec![cout], row_sums(g, cout, len)));
            vec![gx, gw, gb]
        }))
    }
}
