//! Elementwise arithmetic, reductions and shape manipulation.

use super::tensor::transpose;
use super::{Graph, Real, Tensor, Var};
use crate::error::{shape_err, Result};

fn same_shape<R: Real>(op: &str, a: &Var<R>, b: &Var<R>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!("{op}: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn map<R: Real>(t: &Tensor<R>, f: impl Fn(R) -> R) -> Tensor<R> {
    Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
}

fn zip<R: Real>(a: &Tensor<R>, b: &Tensor<R>, f: impl Fn(R, R) -> R) -> Tensor<R> {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

impl<R: Real> Graph<R> {
    pub fn add(&self, a: &Var<R>, b: &Var<R>) -> Result<Var<R>> {
        same_shape("add", a, b)?;
        let out = zip(a.value(), b.value(), |x, y| x + y);
        Ok(self.record(out, &[a, b], |g, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
        }))
    }

    pub fn sub(&self, a: &Var<R>, b: &Var<R>) -> Result<Var<R>> {
        same_shape("sub", a, b)?;
        let out = zip(a.value(), b.value(), |x, y| x - y);
        Ok(self.record(out, &[a, b], |g, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| map(g, |v| -v))]
        }))
    }

    pub fn mul(&self, a: &Var<R>, b: &Var<R>) -> Result<Var<R>> {
        same_shape("mul", a, b)?;
        let out = zip(a.value(), b.value(), |x, y| x * y);
        let (av, bv) = (a.value_arc().clone(), b.value_arc().clone());
        Ok(self.record(out, &[a, b], move |g, needs| {
            vec![needs[0].then(|| zip(g, &bv, |g, y| g * y)), needs[1].then(|| zip(g, &av, |g, x| g * x))]
        }))
    }

    pub fn div(&self, a: &Var<R>, b: &Var<R>) -> Result<Var<R>> {
        same_shape("div", a, b)?;
        let out = zip(a.value(), b.value(), |x, y| x / y);
        let (av, bv) = (a.value_arc().clone(), b.value_arc().clone());
        Ok(self.record(out, &[a, b], move |g, needs| {
            let ga = needs[0].then(|| zip(g, &bv, |g, y| g / y));
            let gb = needs[1].then(|| {
                let t = zip(g, &av, |g, x| g * x);
                zip(&t, &bv, |gx, y| -gx / (y * y))
            });
            vec![ga, gb]
        }))
    }

    pub fn scale(&self, a: &Var<R>, c: R) -> Var<R> {
        self.record(map(a.value(), |v| v * c), &[a], move |g, _| vec![Some(map(g, |v| v * c))])
    }

    pub fn add_scalar(&self, a: &Var<R>, c: R) -> Var<R> {
        self.record(map(a.value(), |v| v + c), &[a], |g, _| vec![Some(g.clone())])
    }

    /// `|x|` with subgradient 0 at 0.
    pub fn abs(&self, a: &Var<R>) -> Var<R> {
        let av = a.value_arc().clone();
        self.record(map(a.value(), |v| v.abs()), &[a], move |g, _| {
            vec![Some(zip(g, &av, |g, x| if x > R::zero() { g } else if x < R::zero() { -g } else { R::zero() }))]
        })
    }

    pub fn ln(&self, a: &Var<R>) -> Var<R> {
        let av = a.value_arc().clone();
        self.record(map(a.value(), |v| v.ln()), &[a], move |g, _| vec![Some(zip(g, &av, |g, x| g / x))])
    }

    pub fn relu(&self, a: &Var<R>) -> Var<R> {
        let av = a.value_arc().clone();
        self.record(map(a.value(), |v| v.max(R::zero())), &[a], move |g, _| {
            vec![Some(zip(g, &av, |g, x| if x > R::zero() { g } else { R::zero() }))]
        })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self, a: &Var<R>) -> Var<R> {
        let s: R = a.value().data().iter().copied().sum();
        let shape = a.shape().to_vec();
        self.record(Tensor::scalar(s), &[a], move |g, _| vec![Some(Tensor::full(shape, g.data()[0]))])
    }

    pub fn mean(&self, a: &Var<R>) -> Var<R> {
        let n = R::lit(a.value().numel() as f64);
        let s = self.sum(a);
        self.scale(&s, R::one() / n)
    }

    /// Frobenius norm; the gradient at the zero tensor is taken as zero.
    pub fn frob_norm(&self, a: &Var<R>) -> Var<R> {
        let norm = a.value().data().iter().map(|&v| v * v).sum::<R>().sqrt();
        let av = a.value_arc().clone();
        self.record(Tensor::scalar(norm), &[a], move |g, _| {
            let k = if norm > R::zero() { g.data()[0] / norm } else { R::zero() };
            vec![Some(map(&av, |x| x * k))]
        })
    }

    pub fn reshape(&self, a: &Var<R>, shape: &[usize]) -> Result<Var<R>> {
        let out = a.value().clone().reshape(shape.to_vec())?;
        let orig = a.shape().to_vec();
        Ok(self.record(out, &[a], move |g, _| vec![Some(Tensor::from_parts(orig, g.data().to_vec()))]))
    }

    pub fn transpose2d(&self, a: &Var<R>) -> Result<Var<R>> {
        let out = a.value().transpose2d()?;
        let (r, c) = (a.shape()[0], a.shape()[1]);
        Ok(self.record(out, &[a], move |g, _| vec![Some(Tensor::from_parts(vec![r, c], transpose(g.data(), c, r)))]))
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&self, a: &Var<R>, axis: usize, start: usize, len: usize) -> Result<Var<R>> {
        let shape = a.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err!("narrow axis {axis} range {start}..{} of {shape:?}", start + len));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let ext = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            data.extend_from_slice(&a.value().data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        Ok(self.record(Tensor::from_parts(out_shape, data), &[a], move |g, _| {
            let mut full = vec![R::zero(); outer * ext * inner];
            for o in 0..outer {
                let base = (o * ext + start) * inner;
                full[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::from_parts(shape, full))]
        }))
    }

    /// Zero-pads the last axis on the right up to `len`.
    pub fn pad_last(&self, a: &Var<R>, len: usize) -> Result<Var<R>> {
        let shape = a.shape().to_vec();
        let cur = *shape.last().ok_or_else(|| shape_err!("pad_last of a scalar"))?;
        if len < cur {
            return Err(shape_err!("pad_last to {len} shorter than {cur}"));
        }
        if len == cur {
            return Ok(a.clone());
        }
        let rows = a.value().numel() / cur;
        let mut data = vec![R::zero(); rows * len];
        for r in 0..rows {
            data[r * len..r * len + cur].copy_from_slice(&a.value().data()[r * cur..(r + 1) * cur]);
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = len;
        Ok(self.record(Tensor::from_parts(out_shape, data), &[a], move |g, _| {
            let mut back = Vec::with_capacity(rows * cur);
            for r in 0..rows {
                back.extend_from_slice(&g.data()[r * len..r * len + cur]);
            }
            vec![Some(Tensor::from_parts(shape, back))]
        }))
    }
}
