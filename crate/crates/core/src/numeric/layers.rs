//! Affine maps, gating, normalization and causal multi-head attention.

use super::linalg::{gemm, matmul, MatMut, MatRef};
use super::{Graph, Real, Tensor, Var};
use crate::error::{shape_err, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[inline]
pub(crate) fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

pub(crate) fn dense_kernel<R: Real>(x: &[R], rows: usize, din: usize, w: &[R], dout: usize, b: &[R]) -> Vec<R> {
    let mut out = matmul(MatRef::row_major(x, rows, din), MatRef::row_major(w, din, dout));
    for row in out.chunks_mut(dout) {
        for (v, &bb) in row.iter_mut().zip(b) {
            *v = *v + bb;
        }
    }
    out
}

/// GLU over the leading axis: first half linear, second half gate.
pub(crate) fn glu_kernel<R: Real>(x: &[R]) -> Vec<R> {
    let half = x.len() / 2;
    x[..half].iter().zip(&x[half..]).map(|(&a, &g)| a * sigmoid(g)).collect()
}

pub(crate) fn relu_in_place<R: Real>(x: &mut [R]) {
    for v in x {
        *v = v.max(R::zero());
    }
}

/// Normalizes every row of length `dim`; returns the output and, per row,
/// the reciprocal standard deviation.
pub(crate) fn layer_norm_kernel<R: Real>(x: &[R], dim: usize, gamma: &[R], beta: &[R]) -> (Vec<R>, Vec<R>) {
    let eps = R::lit(LAYER_NORM_EPS);
    let n = R::lit(dim as f64);
    let mut out = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(x.len() / dim.max(1));
    for row in x.chunks(dim) {
        let mean = row.iter().copied().sum::<R>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / n;
        let r = R::one() / (var + eps).sqrt();
        out.extend(row.iter().zip(gamma.iter().zip(beta)).map(|(&v, (&gm, &bt))| (v - mean) * r * gm + bt));
        rstd.push(r);
    }
    (out, rstd)
}

/// Row softmax over entries `0..valid` of `row`, with every other entry set
/// to exactly zero (equivalent to an additive `-inf` mask).
fn softmax_prefix<R: Real>(row: &mut [R], valid: usize) {
    let (live, dead) = row.split_at_mut(valid.min(row.len()));
    dead.iter_mut().for_each(|v| *v = R::zero());
    if live.is_empty() {
        return;
    }
    let max = live.iter().copied().fold(R::neg_infinity(), R::max);
    let mut total = R::zero();
    for v in live.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in live.iter_mut() {
        *v = *v / total;
    }
}

/// Geometry of one causal attention evaluation: `nq` queries at absolute
/// frame positions `q_start..` over `nk` cached keys at `k_start..`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnShape {
    pub nq: usize,
    pub nk: usize,
    pub d: usize,
    pub heads: usize,
    pub q_start: usize,
    pub k_start: usize,
}

impl AttnShape {
    fn visible(&self, i: usize) -> usize {
        (self.q_start + i + 1).saturating_sub(self.k_start).min(self.nk)
    }
}

/// Scaled dot-product multi-head attention where the query at absolute
/// position `a` sees only keys at positions `<= a`. Returns the `[nq, d]`
/// output and, if requested, the `[heads, nq, nk]` attention weights.
pub(crate) fn causal_attention_kernel<R: Real>(q: &[R], k: &[R], v: &[R], s: AttnShape, keep_probs: bool) -> (Vec<R>, Vec<R>) {
    let AttnShape { nq, nk, d, heads, .. } = s;
    let dh = d / heads;
    let scale = R::one() / R::lit(dh as f64).sqrt();
    let mut out = vec![R::zero(); nq * d];
    let mut probs = if keep_probs { Vec::with_capacity(heads * nq * nk) } else { Vec::new() };
    let mut p = vec![R::zero(); nq * nk];
    for h in 0..heads {
        let off = h * dh;
        gemm(
            scale,
            MatRef::strided(&q[off..], nq, dh, d, 1),
            MatRef::strided(&k[off..], nk, dh, d, 1).t(),
            R::zero(),
            MatMut::row_major(&mut p, nq, nk),
        );
        for i in 0..nq {
            softmax_prefix(&mut p[i * nk..(i + 1) * nk], s.visible(i));
        }
        gemm(
            R::one(),
            MatRef::row_major(&p, nq, nk),
            MatRef::strided(&v[off..], nk, dh, d, 1),
            R::zero(),
            MatMut::strided(&mut out[off..], nq, dh, d, 1),
        );
        if keep_probs {
            probs.extend_from_slice(&p);
        }
    }
    (out, probs)
}

fn check_affine<R: Real>(x: &Tensor<R>, w: &Tensor<R>, b: &Tensor<R>) -> Result<(usize, usize, usize)> {
    let (rows, din) = x.as_matrix_dims();
    if w.ndim() != 2 || w.dim(0) != din || b.ndim() != 1 || b.dim(0) != w.dim(1) {
        return Err(shape_err!("dense: x {:?}, w {:?}, b {:?}", x.shape(), w.shape(), b.shape()));
    }
    Ok((rows, din, w.dim(1)))
}

impl<R: Real> Graph<R> {
    /// Affine map along the last axis: `x[..., Din] * w[Din, Dout] + b`.
    pub fn dense(&self, x: &Var<R>, w: &Var<R>, b: &Var<R>) -> Result<Var<R>> {
        let (rows, din, dout) = check_affine(x.value(), w.value(), b.value())?;
        let out = dense_kernel(x.value().data(), rows, din, w.value().data(), dout, b.value().data());
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let (xv, wv) = (x.value_arc().clone(), w.value_arc().clone());
        let xshape = x.shape().to_vec();
        Ok(self.record(Tensor::from_parts(shape, out), &[x, w, b], move |g, needs| {
            let g = g.data();
            let gx = needs[0].then(|| {
                Tensor::from_parts(xshape, matmul(MatRef::row_major(g, rows, dout), MatRef::row_major(wv.data(), din, dout).t()))
            });
            let gw = needs[1].then(|| {
                Tensor::from_parts(vec![din, dout], matmul(MatRef::row_major(xv.data(), rows, din).t(), MatRef::row_major(g, rows, dout)))
            });
            let gb = needs[2].then(|| {
                let mut acc = vec![R::zero(); dout];
                for row in g.chunks(dout) {
                    for (a, &v) in acc.iter_mut().zip(row) {
                        *a = *a + v;
                    }
                }
                Tensor::from_parts(vec![dout], acc)
            });
            vec![gx, gw, gb]
        }))
    }

    /// Gated linear unit over the leading axis.
    pub fn glu(&self, x: &Var<R>) -> Result<Var<R>> {
        let shape = x.shape().to_vec();
        if shape.is_empty() || shape[0] % 2 != 0 {
            return Err(shape_err!("glu needs an even leading extent, got {shape:?}"));
        }
        let mut out_shape = shape.clone();
        out_shape[0] /= 2;
        let xv = x.value_arc().clone();
        Ok(self.record(Tensor::from_parts(out_shape, glu_kernel(x.value().data())), &[x], move |g, _| {
            let half = xv.numel() / 2;
            let (a, gate) = xv.data().split_at(half);
            let mut dx = Vec::with_capacity(2 * half);
            dx.extend(g.data().iter().zip(gate).map(|(&g, &z)| g * sigmoid(z)));
            dx.extend(g.data().iter().zip(a.iter().zip(gate)).map(|(&g, (&a, &z))| {
                let s = sigmoid(z);
                g * a * s * (R::one() - s)
            }));
            vec![Some(Tensor::from_parts(shape, dx))]
        }))
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&self, x: &Var<R>, gamma: &Var<R>, beta: &Var<R>) -> Result<Var<R>> {
        let (_, dim) = x.value().as_matrix_dims();
        if gamma.shape() != [dim] || beta.shape() != [dim] {
            return Err(shape_err!("layer_norm: x {:?}, gamma {:?}, beta {:?}", x.shape(), gamma.shape(), beta.shape()));
        }
        let (out, rstd) = layer_norm_kernel(x.value().data(), dim, gamma.value().data(), beta.value().data());
        let (xv, gv) = (x.value_arc().clone(), gamma.value_arc().clone());
        let shape = x.shape().to_vec();
        Ok(self.record(Tensor::from_parts(shape.clone(), out), &[x, gamma, beta], move |g, needs| {
            let n = R::lit(dim as f64);
            let mut dx = Vec::with_capacity(xv.numel());
            let mut dgamma = vec![R::zero(); dim];
            let mut dbeta = vec![R::zero(); dim];
            let mut xhat = vec![R::zero(); dim];
            for ((row, grow), &r) in xv.data().chunks(dim).zip(g.data().chunks(dim)).zip(&rstd) {
                let mean = row.iter().copied().sum::<R>() / n;
                for (xh, &v) in xhat.iter_mut().zip(row) {
                    *xh = (v - mean) * r;
                }
                let mut m1 = R::zero();
                let mut m2 = R::zero();
                for j in 0..dim {
                    let dxh = grow[j] * gv.data()[j];
                    m1 = m1 + dxh;
                    m2 = m2 + dxh * xhat[j];
                    dgamma[j] = dgamma[j] + grow[j] * xhat[j];
                    dbeta[j] = dbeta[j] + grow[j];
                }
                m1 = m1 / n;
                m2 = m2 / n;
                dx.extend((0..dim).map(|j| r * (grow[j] * gv.data()[j] - m1 - xhat[j] * m2)));
            }
            vec![
                needs[0].then(|| Tensor::from_parts(shape, dx)),
                needs[1].then(|| Tensor::from_parts(vec![dim], dgamma)),
                needs[2].then(|| Tensor::from_parts(vec![dim], dbeta)),
            ]
        }))
    }

    /// Softmax over the last axis after adding an optional mask of the same
    /// shape (entries may be `-inf`).
    pub fn softmax_last(&self, x: &Var<R>, mask: Option<&Tensor<R>>) -> Result<Var<R>> {
        let (_, dim) = x.value().as_matrix_dims();
        if let Some(m) = mask {
            if m.shape() != x.shape() {
                return Err(shape_err!("softmax mask {:?} vs input {:?}", m.shape(), x.shape()));
            }
        }
        let mut y = Vec::with_capacity(x.value().numel());
        for (r, row) in x.value().data().chunks(dim).enumerate() {
            let shifted: Vec<R> = match mask {
                Some(m) => row.iter().zip(&m.data()[r * dim..(r + 1) * dim]).map(|(&a, &b)| a + b).collect(),
                None => row.to_vec(),
            };
            let max = shifted.iter().copied().fold(R::neg_infinity(), R::max);
            let e: Vec<R> = shifted.iter().map(|&v| if v == R::neg_infinity() { R::zero() } else { (v - max).exp() }).collect();
            let total: R = e.iter().copied().sum();
            y.extend(e.into_iter().map(|v| v / total));
        }
        let out = Tensor::from_parts(x.shape().to_vec(), y);
        let yv = out.clone();
        Ok(self.record(out, &[x], move |g, _| {
            let mut dx = Vec::with_capacity(yv.numel());
            for (yr, gr) in yv.data().chunks(dim).zip(g.data().chunks(dim)) {
                let dot: R = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                dx.extend(yr.iter().zip(gr).map(|(&y, &g)| y * (g - dot)));
            }
            vec![Some(Tensor::from_parts(yv.shape().to_vec(), dx))]
        }))
    }

    /// Causally masked multi-head attention over `q, k, v: [frames, d]`.
    pub fn causal_attention(&self, q: &Var<R>, k: &Var<R>, v: &Var<R>, heads: usize) -> Result<Var<R>> {
        let shape = q.shape().to_vec();
        if shape.len() != 2 || k.shape() != shape || v.shape() != shape {
            return Err(shape_err!("attention: q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()));
        }
        let (frames, d) = (shape[0], shape[1]);
        if heads == 0 || d % heads != 0 {
            return Err(shape_err!("attention: {heads} heads do not divide model dimension {d}"));
        }
        let geom = AttnShape { nq: frames, nk: frames, d, heads, q_start: 0, k_start: 0 };
        let keep = self.is_recording() && (q.is_tracked() || k.is_tracked() || v.is_tracked());
        let (out, probs) = causal_attention_kernel(q.value().data(), k.value().data(), v.value().data(), geom, keep);
        let (qv, kv, vv) = (q.value_arc().clone(), k.value_arc().clone(), v.value_arc().clone());
        Ok(self.record(Tensor::from_parts(shape.clone(), out), &[q, k, v], move |g, needs| {
            let dh = d / heads;
            let scale = R::one() / R::lit(dh as f64).sqrt();
            let n = frames;
            let (mut dq, mut dk, mut dv) = (vec![R::zero(); n * d], vec![R::zero(); n * d], vec![R::zero(); n * d]);
            let mut dp = vec![R::zero(); n * n];
            for h in 0..heads {
                let off = h * dh;
                let p = &probs[h * n * n..(h + 1) * n * n];
                let go = MatRef::strided(&g.data()[off..], n, dh, d, 1);
                gemm(R::one(), MatRef::row_major(p, n, n).t(), go, R::zero(), MatMut::strided(&mut dv[off..], n, dh, d, 1));
                gemm(R::one(), go, MatRef::strided(&vv.data()[off..], n, dh, d, 1).t(), R::zero(), MatMut::row_major(&mut dp, n, n));
                for i in 0..n {
                    let prow = &p[i * n..(i + 1) * n];
                    let drow = &mut dp[i * n..(i + 1) * n];
                    let dot: R = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                    for (dv, &pv) in drow.iter_mut().zip(prow) {
                        *dv = pv * (*dv - dot);
                    }
                }
                gemm(scale, MatRef::row_major(&dp, n, n), MatRef::strided(&kv.data()[off..], n, dh, d, 1), R::zero(), MatMut::strided(&mut dq[off..], n, dh, d, 1));
                gemm(scale, MatRef::row_major(&dp, n, n).t(), MatRef::strided(&qv.data()[off..], n, dh, d, 1), R::zero(), MatMut::strided(&mut dk[off..], n, dh, d, 1));
            }
            vec![
                needs[0].then(|| Tensor::from_parts(shape.clone(), dq)),
                needs[1].then(|| Tensor::from_parts(shape.clone(), dk)),
                needs[2].then(|| Tensor::from_parts(shape.clone(), dv)),
            ]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::testing::{assert_grads_match, rand_tensor};

    #[test]
    fn dense_hand_values_and_identity() {
        let g = Graph::<f64>::no_grad();
        let x = g.constant(Tensor::new([1, 2], vec![1.0, 2.0]).unwrap());
        let w = g.constant(Tensor::new([2, 1], vec![1.0, 1.0]).unwrap());
        let b = g.constant(Tensor::from_slice(&[3.0]));
        assert_eq!(g.dense(&x, &w, &b).unwrap().value().data(), &[6.0]);

        let xr = rand_tensor(&[3, 4], 1);
        let eye = Tensor::from_fn([4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        let y = g.dense(&g.constant(xr.clone()), &g.constant(eye), &g.constant(Tensor::zeros([4]))).unwrap();
        assert_eq!(y.value(), &xr);
    }

    #[test]
    fn dense_matches_triple_loop() {
        let x = rand_tensor(&[2, 3, 5], 2);
        let w = rand_tensor(&[5, 4], 3);
        let b = rand_tensor(&[4], 4);
        let g = Graph::no_grad();
        let y = g.dense(&g.constant(x.clone()), &g.constant(w.clone()), &g.constant(b.clone())).unwrap();
        assert_eq!(y.shape(), &[2, 3, 4]);
        for r in 0..6 {
            for o in 0..4 {
                let want: f64 = b.data()[o] + (0..5).map(|i| x.data()[r * 5 + i] * w.data()[i * 4 + o]).sum::<f64>();
                assert!((y.value().data()[r * 4 + o] - want).abs() <= 1e-6 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn glu_cases() {
        let g = Graph::<f64>::no_grad();
        let run = |v: Vec<f64>| g.glu(&g.constant(Tensor::new([2, 1], v).unwrap())).unwrap().value().data()[0];
        assert_eq!(run(vec![0.0, 3.0]), 0.0);
        assert!((run(vec![1.7, 100.0]) - 1.7).abs() < 1e-12);
        assert_eq!(run(vec![2.0, 0.0]), 1.0);
        assert!(g.glu(&g.constant(Tensor::<f64>::zeros([3, 2]))).is_err());
    }

    #[test]
    fn relu_and_layer_norm_basics() {
        let g = Graph::<f64>::no_grad();
        let r = g.relu(&g.constant(Tensor::from_slice(&[-1.0, 2.0])));
        assert_eq!(r.value().data(), &[0.0, 2.0]);

        let x = g.constant(Tensor::full([2, 4], 3.5));
        let y = g.layer_norm(&x, &g.constant(Tensor::full([4], 2.0)), &g.constant(Tensor::zeros([4]))).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));

        let x = rand_tensor(&[3, 6], 9);
        let y = g.layer_norm(&g.constant(x), &g.constant(Tensor::full([6], 1.0)), &g.constant(Tensor::zeros([6]))).unwrap();
        for row in y.value().data().chunks(6) {
            let mean: f64 = row.iter().sum::<f64>() / 6.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let g = Graph::<f64>::no_grad();
        let x = g.constant(rand_tensor(&[2, 3], 5));
        let mut mask = Tensor::zeros([2, 3]);
        mask.data_mut()[1] = f64::NEG_INFINITY;
        let y = g.softmax_last(&x, Some(&mask)).unwrap();
        assert_eq!(y.value().data()[1], 0.0);
        for row in y.value().data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    /// Per-head, per-query explicit loops.
    fn naive_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, heads: usize) -> (Vec<f64>, Vec<f64>) {
        let (n, d) = (q.dim(0), q.dim(1));
        let dh = d / heads;
        let mut out = vec![0.0; n * d];
        let mut weights = vec![0.0; heads * n * n];
        for h in 0..heads {
            for i in 0..n {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| (0..dh).map(|c| q.data()[i * d + h * dh + c] * k.data()[j * d + h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    let w = (s - m).exp() / z;
                    weights[(h * n + i) * n + j] = w;
                    for c in 0..dh {
                        out[i * d + h * dh + c] += w * v.data()[j * d + h * dh + c];
                    }
                }
            }
        }
        (out, weights)
    }

    #[test]
    fn attention_matches_naive_loops_and_masks_future() {
        let (q, k, v) = (rand_tensor(&[4, 8], 10), rand_tensor(&[4, 8], 11), rand_tensor(&[4, 8], 12));
        let geom = AttnShape { nq: 4, nk: 4, d: 8, heads: 2, q_start: 0, k_start: 0 };
        let (out, probs) = causal_attention_kernel(q.data(), k.data(), v.data(), geom, true);
        let (want, want_w) = naive_attention(&q, &k, &v, 2);
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
        for h in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    let p = probs[(h * 4 + i) * 4 + j];
                    if j > i {
                        assert_eq!(p, 0.0);
                    } else {
                        assert!((p - want_w[(h * 4 + i) * 4 + j]).abs() < 1e-12);
                    }
                }
            }
        }
        let one = AttnShape { nq: 1, nk: 1, d: 8, heads: 2, q_start: 0, k_start: 0 };
        let (_, p1) = causal_attention_kernel(&q.data()[..8], &k.data()[..8], &v.data()[..8], one, true);
        assert_eq!(p1, vec![1.0, 1.0]);
    }

    #[test]
    fn incremental_query_matches_full_attention() {
        let (q, k, v) = (rand_tensor(&[5, 4], 20), rand_tensor(&[5, 4], 21), rand_tensor(&[5, 4], 22));
        let full = AttnShape { nq: 5, nk: 5, d: 4, heads: 2, q_start: 0, k_start: 0 };
        let (out, _) = causal_attention_kernel(q.data(), k.data(), v.data(), full, false);
        let last = AttnShape { nq: 2, nk: 5, d: 4, heads: 2, q_start: 3, k_start: 0 };
        let (tail, _) = causal_attention_kernel(&q.data()[12..], k.data(), v.data(), last, false);
        for (a, b) in tail.iter().zip(&out[12..]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let x = rand_tensor(&[3, 4], 30);
        let w = rand_tensor(&[4, 6], 31);
        let b = rand_tensor(&[6], 32);
        let gm = rand_tensor(&[6], 33);
        let bt = rand_tensor(&[6], 34);
        assert_grads_match(&[x, w, b, gm, bt], |g, v| {
            let y = g.dense(&v[0], &v[1], &v[2]).unwrap();
            let y = g.layer_norm(&y, &v[3], &v[4]).unwrap();
            let z = g.glu(&g.transpose2d(&y).unwrap()).unwrap();
            let mut mask = Tensor::zeros([3, 3]);
            mask.data_mut()[2] = f64::NEG_INFINITY;
            let s = g.softmax_last(&g.transpose2d(&z).unwrap(), Some(&mask)).unwrap();
            g.sum(&g.mul(&s, &g.transpose2d(&z).unwrap()).unwrap())
        });

        let q = rand_tensor(&[5, 4], 40);
        let k = rand_tensor(&[5, 4], 41);
        let vv = rand_tensor(&[5, 4], 42);
        let wt = rand_tensor(&[5, 4], 43);
        assert_grads_match(&[q, k, vv], move |g, v| {
            let o = g.causal_attention(&v[0], &v[1], &v[2], 2).unwrap();
            g.sum(&g.mul(&o, &g.constant(wt.clone())).unwrap())
        });
    }
}
