//! Differentiable ops recorded on a [`Graph`].

use super::sample::bilinear_corners;
use super::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

fn same_shape(a: &[usize], b: &[usize], op: &str) -> Result<()> {
    if a != b {
        return Err(Error::dim(format!("{op}: shape {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Splits a shape at `axis` into (outer, extent, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow for large `|x|`.
#[inline]
pub fn softplus_scalar<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

impl<T: Real> Graph<T> {
    /// `y[.., j] = sum_i x[.., i] * w[i, j] + b[j]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.rank() != 2 {
            return Err(Error::dim(format!("affine: weight must be 2-D, got {:?}", wv.shape())));
        }
        let (din, dout) = (wv.shape()[0], wv.shape()[1]);
        if xv.rank() == 0 || xv.last_dim() != din {
            return Err(Error::dim(format!("affine: input {:?} vs weight {:?}", xv.shape(), wv.shape())));
        }
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::dim(format!("affine: bias {:?}, expected [{dout}]", self.shape(b))));
            }
        }
        let rows = xv.rows();
        let mut out = vec![T::zero(); rows * dout];
        let (xd, wd) = (xv.data(), wv.data());
        for r in 0..rows {
            let yr = &mut out[r * dout..(r + 1) * dout];
            if let Some(b) = b {
                yr.copy_from_slice(self.value(b).data());
            }
            for (i, &xi) in xd[r * din..(r + 1) * din].iter().enumerate() {
                let wr = &wd[i * dout..(i + 1) * dout];
                for (y, &wij) in yr.iter_mut().zip(wr) {
                    *y = *y + xi * wij;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = dout;
        let value = Tensor::new(&shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            "affine",
            value,
            &inputs,
            Box::new(move |inp, _out, g, needs| {
                let (x, w) = (inp[0], inp[1]);
                let (xd, wd, gd) = (x.data(), w.data(), g.data());
                let rows = x.rows();
                let mut grads = Vec::with_capacity(inp.len());
                grads.push(needs[0].then(|| {
                    let mut dx = vec![T::zero(); x.numel()];
                    for r in 0..rows {
                        let gr = &gd[r * dout..(r + 1) * dout];
                        for i in 0..din {
                            let wr = &wd[i * dout..(i + 1) * dout];
                            dx[r * din + i] = gr.iter().zip(wr).map(|(&a, &b)| a * b).sum();
                        }
                    }
                    Tensor::new(x.shape(), dx).expect("shape")
                }));
                grads.push(needs[1].then(|| {
                    let mut dw = vec![T::zero(); din * dout];
                    for r in 0..rows {
                        let gr = &gd[r * dout..(r + 1) * dout];
                        for (i, &xi) in xd[r * din..(r + 1) * din].iter().enumerate() {
                            let dwr = &mut dw[i * dout..(i + 1) * dout];
                            for (d, &gj) in dwr.iter_mut().zip(gr) {
                                *d = *d + xi * gj;
                            }
                        }
                    }
                    Tensor::new(&[din, dout], dw).expect("shape")
                }));
                if inp.len() == 3 {
                    grads.push(needs[2].then(|| {
                        let mut db = vec![T::zero(); dout];
                        for r in 0..rows {
                            for (d, &gj) in db.iter_mut().zip(&gd[r * dout..(r + 1) * dout]) {
                                *d = *d + gj;
                            }
                        }
                        Tensor::new(&[dout], db).expect("shape")
                    }));
                }
                grads
            }),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), "add")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(
            "add",
            value,
            &[a, b],
            Box::new(|_, _, g, needs| vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), "sub")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(
            "sub",
            value,
            &[a, b],
            Box::new(|_, _, g, needs| vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|x| -x))]),
        ))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), "mul")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(
            "mul",
            value,
            &[a, b],
            Box::new(|inp, _, g, needs| {
                vec![
                    needs[0].then(|| g.zip_map(inp[1], |g, y| g * y).expect("shape")),
                    needs[1].then(|| g.zip_map(inp[0], |g, x| g * x).expect("shape")),
                ]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).scale(s);
        self.push("scale", value, &[a], Box::new(move |_, _, g, _| vec![Some(g.scale(s))]))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push("sum", value, &[a], Box::new(|inp, _, g, _| vec![Some(Tensor::full(inp[0].shape(), g.item()))]))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::lit(self.value(a).numel().max(1) as f64);
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// Sum of a list of scalars (or same-shape tensors).
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms.split_first().ok_or_else(|| Error::dim("add_all: empty term list"))?;
        let mut acc = first;
        for &t in rest {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(
            "reshape",
            value,
            &[a],
            Box::new(|inp, _, g, _| vec![Some(g.reshape(inp[0].shape()).expect("same numel"))]),
        ))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::dim(format!("softmax: axis {axis} out of range for {:?}", xv.shape())));
        }
        if xv.shape()[axis] == 0 {
            return Err(Error::dim("softmax: empty axis"));
        }
        let (outer, n, inner) = axis_split(xv.shape(), axis);
        let xd = xv.data();
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).map(|k| xd[idx(k)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for k in 0..n {
                    let e = (xd[idx(k)] - m).exp();
                    out[idx(k)] = e;
                    z = z + e;
                }
                for k in 0..n {
                    out[idx(k)] = out[idx(k)] / z;
                }
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.push(
            "softmax",
            value,
            &[x],
            Box::new(move |_, y, g, _| {
                let (yd, gd) = (y.data(), g.data());
                let mut dx = vec![T::zero(); yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let dot: T = (0..n).map(|k| yd[idx(k)] * gd[idx(k)]).sum();
                        for k in 0..n {
                            dx[idx(k)] = yd[idx(k)] * (gd[idx(k)] - dot);
                        }
                    }
                }
                vec![Some(Tensor::new(y.shape(), dx).expect("shape"))]
            }),
        ))
    }

    /// Softmax over the trailing axis restricted to unmasked entries.
    ///
    /// `mask` has one flag per element of `x`; masked entries get weight 0
    /// and the rest renormalize. A fully masked row is all zeros.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.numel() {
            return Err(Error::dim(format!("masked_softmax: mask len {} vs {}", mask.len(), xv.numel())));
        }
        let n = xv.last_dim();
        if n == 0 {
            return Err(Error::dim("masked_softmax: empty axis"));
        }
        let xd = xv.data();
        let mut out = vec![T::zero(); xd.len()];
        for r in 0..xv.rows() {
            let span = r * n..(r + 1) * n;
            let m = span.clone().filter(|&k| mask[k]).map(|k| xd[k]).fold(T::neg_infinity(), T::max);
            if m == T::neg_infinity() {
                continue;
            }
            let mut z = T::zero();
            for k in span.clone().filter(|&k| mask[k]) {
                let e = (xd[k] - m).exp();
                out[k] = e;
                z = z + e;
            }
            for k in span {
                out[k] = out[k] / z;
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.push(
            "masked_softmax",
            value,
            &[x],
            Box::new(move |_, y, g, _| {
                let (yd, gd) = (y.data(), g.data());
                let mut dx = vec![T::zero(); yd.len()];
                for r in 0..y.rows() {
                    let span = r * n..(r + 1) * n;
                    let dot: T = span.clone().map(|k| yd[k] * gd[k]).sum();
                    for k in span {
                        dx[k] = yd[k] * (gd[k] - dot);
                    }
                }
                vec![Some(Tensor::new(y.shape(), dx).expect("shape"))]
            }),
        ))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.value(x).map(softplus_scalar);
        self.push(
            "softplus",
            value,
            &[x],
            Box::new(|inp, _, g, _| vec![Some(g.zip_map(inp[0], |g, x| g * sigmoid(x)).expect("shape"))]),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, a) = (T::lit(GELU_C), T::lit(GELU_A));
        let half = T::lit(0.5);
        let value = self.value(x).map(|x| half * x * (T::one() + (c * (x + a * x * x * x)).tanh()));
        self.push(
            "gelu",
            value,
            &[x],
            Box::new(move |inp, _, g, _| {
                let d = inp[0].map(|x| {
                    let t = (c * (x + a * x * x * x)).tanh();
                    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
                });
                vec![Some(g.zip_map(&d, |g, d| g * d).expect("shape"))]
            }),
        )
    }

    /// Layer normalization over the trailing axis with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let k = xv.last_dim();
        if self.shape(gamma) != [k] || self.shape(beta) != [k] {
            return Err(Error::dim(format!("layer_norm: gain/bias must be [{k}]")));
        }
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.rows();
        let kt = T::lit(k as f64);
        let mut out = vec![T::zero(); xv.numel()];
        for r in 0..rows {
            let xr = xv.row(r);
            let mu = xr.iter().copied().sum::<T>() / kt;
            let var = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / kt;
            let inv = T::one() / (var + eps).sqrt();
            for j in 0..k {
                out[r * k + j] = (xr[j] - mu) * inv * gd[j] + bd[j];
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.push(
            "layer_norm",
            value,
            &[x, gamma, beta],
            Box::new(move |inp, _, g, needs| {
                let (x, gamma) = (inp[0], inp[1]);
                let gm = gamma.data();
                let rows = x.rows();
                let mut dx = vec![T::zero(); x.numel()];
                let mut dg = vec![T::zero(); k];
                let mut db = vec![T::zero(); k];
                let mut xhat = vec![T::zero(); k];
                let mut dxhat = vec![T::zero(); k];
                for r in 0..rows {
                    let xr = x.row(r);
                    let gr = g.row(r);
                    let mu = xr.iter().copied().sum::<T>() / kt;
                    let var = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / kt;
                    let inv = T::one() / (var + eps).sqrt();
                    for j in 0..k {
                        xhat[j] = (xr[j] - mu) * inv;
                        dxhat[j] = gr[j] * gm[j];
                        dg[j] = dg[j] + gr[j] * xhat[j];
                        db[j] = db[j] + gr[j];
                    }
                    let m1 = dxhat.iter().copied().sum::<T>() / kt;
                    let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / kt;
                    for j in 0..k {
                        dx[r * k + j] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                vec![
                    needs[0].then(|| Tensor::new(x.shape(), dx).expect("shape")),
                    needs[1].then(|| Tensor::new(&[k], dg).expect("shape")),
                    needs[2].then(|| Tensor::new(&[k], db).expect("shape")),
                ]
            }),
        ))
    }

    /// Concatenates two tensors along the trailing axis (leading dims must agree).
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::dim(format!("concat_last: {sa:?} vs {sb:?}")));
        }
        let (ka, kb) = (av.last_dim(), bv.last_dim());
        let rows = av.rows();
        let mut out = Vec::with_capacity(av.numel() + bv.numel());
        for r in 0..rows {
            out.extend_from_slice(av.row(r));
            out.extend_from_slice(bv.row(r));
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().expect("rank >= 1") = ka + kb;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            "concat_last",
            value,
            &[a, b],
            Box::new(move |inp, _, g, needs| {
                let split = |off: usize, k: usize, like: &Tensor<T>| {
                    let mut d = Vec::with_capacity(rows * k);
                    for r in 0..rows {
                        d.extend_from_slice(&g.row(r)[off..off + k]);
                    }
                    Tensor::new(like.shape(), d).expect("shape")
                };
                vec![needs[0].then(|| split(0, ka, inp[0])), needs[1].then(|| split(ka, kb, inp[1]))]
            }),
        ))
    }

    /// The leading `n` entries of the trailing axis.
    pub fn take_cols(&mut self, x: Var, n: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() == 0 || n > xv.last_dim() {
            return Err(Error::dim(format!("take_cols: {n} columns of {:?}", xv.shape())));
        }
        let (rows, k) = (xv.rows(), xv.last_dim());
        let mut out = Vec::with_capacity(rows * n);
        for r in 0..rows {
            out.extend_from_slice(&xv.row(r)[..n]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = n;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            "take_cols",
            value,
            &[x],
            Box::new(move |inp, _, g, _| {
                let mut dx = Tensor::zeros(inp[0].shape());
                let d = dx.data_mut();
                for r in 0..rows {
                    d[r * k..r * k + n].copy_from_slice(&g.data()[r * n..(r + 1) * n]);
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Rows `idx` of `x` viewed as `[rows, last_dim]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, k) = (xv.rows(), xv.last_dim());
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::dim(format!("gather_rows: index {bad} >= {rows}")));
        }
        let mut out = Vec::with_capacity(idx.len() * k);
        for &i in idx {
            out.extend_from_slice(xv.row(i));
        }
        let value = Tensor::new(&[idx.len(), k], out)?;
        let idx = idx.to_vec();
        Ok(self.push(
            "gather_rows",
            value,
            &[x],
            Box::new(move |inp, _, g, _| {
                let mut dx = Tensor::zeros(inp[0].shape());
                let d = dx.data_mut();
                for (r, &i) in idx.iter().enumerate() {
                    for (a, &b) in d[i * k..(i + 1) * k].iter_mut().zip(g.row(r)) {
                        *a = *a + b;
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Per-row mean over the parts that cover the row, or the fallback row
    /// when none does. Each part is `(values [n_i, C], target rows)`.
    pub fn hit_mean(&mut self, parts: &[(Var, Vec<usize>)], fallback: Var) -> Result<Var> {
        let fb = self.value(fallback);
        let (rows, k) = (fb.rows(), fb.last_dim());
        let mut counts = vec![0usize; rows];
        for (v, target) in parts {
            let pv = self.value(*v);
            if pv.rows() != target.len() || pv.last_dim() != k {
                return Err(Error::dim(format!(
                    "hit_mean: part {:?} vs {} rows of width {k}",
                    pv.shape(),
                    target.len()
                )));
            }
            for &t in target {
                if t >= rows {
                    return Err(Error::dim(format!("hit_mean: row {t} >= {rows}")));
                }
                counts[t] += 1;
            }
        }
        let mut out = vec![T::zero(); rows * k];
        for (v, target) in parts {
            let pv = self.value(*v);
            for (r, &t) in target.iter().enumerate() {
                let inv = T::one() / T::lit(counts[t] as f64);
                for (o, &x) in out[t * k..(t + 1) * k].iter_mut().zip(pv.row(r)) {
                    *o = *o + x * inv;
                }
            }
        }
        for (t, &c) in counts.iter().enumerate() {
            if c == 0 {
                out[t * k..(t + 1) * k].copy_from_slice(fb.row(t));
            }
        }
        let value = Tensor::new(fb.shape(), out)?;
        let mut inputs: Vec<Var> = parts.iter().map(|p| p.0).collect();
        inputs.push(fallback);
        let targets: Vec<Vec<usize>> = parts.iter().map(|p| p.1.clone()).collect();
        Ok(self.push(
            "hit_mean",
            value,
            &inputs,
            Box::new(move |inp, _, g, needs| {
                let mut grads = Vec::with_capacity(inp.len());
                for (p, target) in targets.iter().enumerate() {
                    grads.push(needs[p].then(|| {
                        let mut d = Vec::with_capacity(target.len() * k);
                        for &t in target {
                            let inv = T::one() / T::lit(counts[t] as f64);
                            d.extend(g.row(t).iter().map(|&x| x * inv));
                        }
                        Tensor::new(inp[p].shape(), d).expect("shape")
                    }));
                }
                let last = inp.len() - 1;
                grads.push(needs[last].then(|| {
                    let mut d = vec![T::zero(); rows * k];
                    for (t, &c) in counts.iter().enumerate() {
                        if c == 0 {
                            d[t * k..(t + 1) * k].copy_from_slice(g.row(t));
                        }
                    }
                    Tensor::new(inp[last].shape(), d).expect("shape")
                }));
                grads
            }),
        ))
    }

    /// Bilinear sampling of a `[Hp, Wp, C]` plane at `[N, 2]` (row, col)
    /// points. Out-of-range neighbours contribute zero. Differentiable in
    /// both the plane and the points.
    pub fn grid_sample2d(&mut self, plane: Var, points: Var) -> Result<Var> {
        let (pv, qv) = (self.value(plane), self.value(points));
        if pv.rank() != 3 {
            return Err(Error::dim(format!("grid_sample2d: plane must be [H, W, C], got {:?}", pv.shape())));
        }
        if qv.rank() != 2 || qv.shape()[1] != 2 {
            return Err(Error::dim(format!("grid_sample2d: points must be [N, 2], got {:?}", qv.shape())));
        }
        let (hp, wp, c) = (pv.shape()[0], pv.shape()[1], pv.shape()[2]);
        let n = qv.shape()[0];
        let (pd, qd) = (pv.data(), qv.data());
        let mut out = vec![T::zero(); n * c];
        for i in 0..n {
            let (corners, nc) = bilinear_corners(hp, wp, qd[2 * i], qd[2 * i + 1]);
            let o = &mut out[i * c..(i + 1) * c];
            for cr in &corners[..nc] {
                for (y, &v) in o.iter_mut().zip(&pd[cr.node * c..(cr.node + 1) * c]) {
                    *y = *y + cr.weight * v;
                }
            }
        }
        let value = Tensor::new(&[n, c], out)?;
        Ok(self.push(
            "grid_sample2d",
            value,
            &[plane, points],
            Box::new(move |inp, _, g, needs| {
                let (pd, qd, gd) = (inp[0].data(), inp[1].data(), g.data());
                let mut dplane = needs[0].then(|| vec![T::zero(); pd.len()]);
                let mut dpts = needs[1].then(|| vec![T::zero(); qd.len()]);
                for i in 0..n {
                    let (corners, nc) = bilinear_corners(hp, wp, qd[2 * i], qd[2 * i + 1]);
                    let gi = &gd[i * c..(i + 1) * c];
                    for cr in &corners[..nc] {
                        let node = &pd[cr.node * c..(cr.node + 1) * c];
                        if let Some(dp) = dplane.as_mut() {
                            for (d, &gv) in dp[cr.node * c..(cr.node + 1) * c].iter_mut().zip(gi) {
                                *d = *d + cr.weight * gv;
                            }
                        }
                        if let Some(dq) = dpts.as_mut() {
                            let dot: T = node.iter().zip(gi).map(|(&v, &gv)| v * gv).sum();
                            dq[2 * i] = dq[2 * i] + cr.d_row * dot;
                            dq[2 * i + 1] = dq[2 * i + 1] + cr.d_col * dot;
                        }
                    }
                }
                vec![
                    dplane.map(|d| Tensor::new(&[hp, wp, c], d).expect("shape")),
                    dpts.map(|d| Tensor::new(&[n, 2], d).expect("shape")),
                ]
            }),
        ))
    }

    /// Multi-head deformable sampling kernel.
    ///
    /// For query `q`, head `h` and sample slot `s`, the location
    /// `base[q, s] + offsets[q, h, s]` is bilinearly sampled from
    /// `maps[map_ids[s]]` (each `[Hm, Wm, C]`), restricted to the channel
    /// block of head `h`, and weighted by `attn[q, h, s]`. Output is
    /// `[n, C]` with heads laid out contiguously.
    pub fn deform_gather(
        &mut self,
        maps: &[Var],
        map_ids: &[usize],
        base: &Tensor<T>,
        offsets: Var,
        attn: Var,
    ) -> Result<Var> {
        let (ov, av) = (self.value(offsets), self.value(attn));
        if av.rank() != 3 {
            return Err(Error::dim(format!("deform_gather: attn must be [n, heads, S], got {:?}", av.shape())));
        }
        let (n, heads, slots) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        if ov.shape() != [n, heads, slots, 2] {
            return Err(Error::dim(format!("deform_gather: offsets {:?} vs attn {:?}", ov.shape(), av.shape())));
        }
        if base.shape() != [n, slots, 2] {
            return Err(Error::dim(format!("deform_gather: base {:?}, expected [{n}, {slots}, 2]", base.shape())));
        }
        if map_ids.len() != slots {
            return Err(Error::dim(format!("deform_gather: {} map ids for {slots} slots", map_ids.len())));
        }
        if let Some(&bad) = map_ids.iter().find(|&&m| m >= maps.len()) {
            return Err(Error::Wiring(format!("deform_gather: slot targets missing value map {bad}")));
        }
        let dims: Vec<[usize; 3]> = maps
            .iter()
            .map(|&m| {
                let s = self.shape(m);
                if s.len() == 3 {
                    Ok([s[0], s[1], s[2]])
                } else {
                    Err(Error::dim(format!("deform_gather: value map must be [H, W, C], got {s:?}")))
                }
            })
            .collect::<Result<_>>()?;
        let c = dims.first().map(|d| d[2]).unwrap_or(0);
        if dims.iter().any(|d| d[2] != c) {
            return Err(Error::dim("deform_gather: value maps disagree on channels"));
        }
        if heads == 0 || !c.is_multiple_of(heads) {
            return Err(Error::dim(format!("deform_gather: {c} channels not divisible by {heads} heads")));
        }
        let ch = c / heads;
        let (od, ad, bd) = (ov.data(), av.data(), base.data());
        let map_data: Vec<&[T]> = maps.iter().map(|&m| self.value(m).data()).collect();
        let mut out = vec![T::zero(); n * c];
        for q in 0..n {
            for h in 0..heads {
                let o = &mut out[q * c + h * ch..q * c + (h + 1) * ch];
                for s in 0..slots {
                    let a = ad[(q * heads + h) * slots + s];
                    let oi = ((q * heads + h) * slots + s) * 2;
                    let row = bd[(q * slots + s) * 2] + od[oi];
                    let col = bd[(q * slots + s) * 2 + 1] + od[oi + 1];
                    let [hm, wm, _] = dims[map_ids[s]];
                    let md = map_data[map_ids[s]];
                    let (corners, nc) = bilinear_corners(hm, wm, row, col);
                    for cr in &corners[..nc] {
                        let wgt = a * cr.weight;
                        let src = &md[cr.node * c + h * ch..cr.node * c + (h + 1) * ch];
                        for (y, &v) in o.iter_mut().zip(src) {
                            *y = *y + wgt * v;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[n, c], out)?;
        let n_maps = maps.len();
        let mut inputs = maps.to_vec();
        inputs.push(offsets);
        inputs.push(attn);
        let base = base.clone();
        let map_ids = map_ids.to_vec();
        Ok(self.push(
            "deform_gather",
            value,
            &inputs,
            Box::new(move |inp, _, g, needs| {
                let od = inp[n_maps].data();
                let ad = inp[n_maps + 1].data();
                let bd = base.data();
                let gd = g.data();
                let mut dmaps: Vec<Option<Vec<T>>> =
                    (0..n_maps).map(|m| needs[m].then(|| vec![T::zero(); inp[m].numel()])).collect();
                let mut doff = needs[n_maps].then(|| vec![T::zero(); od.len()]);
                let mut dattn = needs[n_maps + 1].then(|| vec![T::zero(); ad.len()]);
                for q in 0..n {
                    for h in 0..heads {
                        let gq = &gd[q * c + h * ch..q * c + (h + 1) * ch];
                        for s in 0..slots {
                            let ai = (q * heads + h) * slots + s;
                            let a = ad[ai];
                            let row = bd[(q * slots + s) * 2] + od[ai * 2];
                            let col = bd[(q * slots + s) * 2 + 1] + od[ai * 2 + 1];
                            let m = map_ids[s];
                            let [hm, wm, _] = dims[m];
                            let md = inp[m].data();
                            let (corners, nc) = bilinear_corners(hm, wm, row, col);
                            let (mut da, mut dr, mut dc) = (T::zero(), T::zero(), T::zero());
                            for cr in &corners[..nc] {
                                let lo = cr.node * c + h * ch;
                                let src = &md[lo..lo + ch];
                                let dot: T = src.iter().zip(gq).map(|(&v, &gv)| v * gv).sum();
                                da = da + cr.weight * dot;
                                dr = dr + cr.d_row * dot;
                                dc = dc + cr.d_col * dot;
                                if let Some(dm) = dmaps[m].as_mut() {
                                    let wgt = a * cr.weight;
                                    for (d, &gv) in dm[lo..lo + ch].iter_mut().zip(gq) {
                                        *d = *d + wgt * gv;
                                    }
                                }
                            }
                            if let Some(d) = dattn.as_mut() {
                                d[ai] = da;
                            }
                            if let Some(d) = doff.as_mut() {
                                d[ai * 2] = a * dr;
                                d[ai * 2 + 1] = a * dc;
                            }
                        }
                    }
                }
                let mut grads: Vec<Option<Tensor<T>>> = dmaps
                    .into_iter()
                    .enumerate()
                    .map(|(m, d)| d.map(|d| Tensor::new(inp[m].shape(), d).expect("shape")))
                    .collect();
                grads.push(doff.map(|d| Tensor::new(&[n, heads, slots, 2], d).expect("shape")));
                grads.push(dattn.map(|d| Tensor::new(&[n, heads, slots], d).expect("shape")));
                grads
            }),
        ))
    }

    /// Broadcast sum of the three planes onto the voxel grid:
    /// `out[h, w, d] = hw[h, w] + dh[d, h] + wd[w, d]`, shape `[H, W, D, C]`.
    pub fn tpv_broadcast_sum(&mut self, hw: Var, dh: Var, wd: Var) -> Result<Var> {
        let (a, b, e) = (self.value(hw), self.value(dh), self.value(wd));
        if a.rank() != 3 || b.rank() != 3 || e.rank() != 3 {
            return Err(Error::dim("tpv_broadcast_sum: planes must be rank 3"));
        }
        let (h, w, c) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let d = b.shape()[0];
        if b.shape() != [d, h, c] || e.shape() != [w, d, c] {
            return Err(Error::dim(format!(
                "tpv_broadcast_sum: hw {:?}, dh {:?}, wd {:?} disagree",
                a.shape(),
                b.shape(),
                e.shape()
            )));
        }
        let (ad, bd, ed) = (a.data(), b.data(), e.data());
        let mut out = vec![T::zero(); h * w * d * c];
        for i in 0..h {
            for j in 0..w {
                for k in 0..d {
                    let o = ((i * w + j) * d + k) * c;
                    let (pa, pb, pe) = ((i * w + j) * c, (k * h + i) * c, (j * d + k) * c);
                    for x in 0..c {
                        out[o + x] = ad[pa + x] + bd[pb + x] + ed[pe + x];
                    }
                }
            }
        }
        let value = Tensor::new(&[h, w, d, c], out)?;
        Ok(self.push(
            "tpv_broadcast_sum",
            value,
            &[hw, dh, wd],
            Box::new(move |_, _, g, needs| {
                let gd = g.data();
                let mut da = vec![T::zero(); h * w * c];
                let mut db = vec![T::zero(); d * h * c];
                let mut de = vec![T::zero(); w * d * c];
                for i in 0..h {
                    for j in 0..w {
                        for k in 0..d {
                            let o = ((i * w + j) * d + k) * c;
                            let (pa, pb, pe) = ((i * w + j) * c, (k * h + i) * c, (j * d + k) * c);
                            for x in 0..c {
                                let gv = gd[o + x];
                                da[pa + x] = da[pa + x] + gv;
                                db[pb + x] = db[pb + x] + gv;
                                de[pe + x] = de[pe + x] + gv;
                            }
                        }
                    }
                }
                vec![
                    needs[0].then(|| Tensor::new(&[h, w, c], da).expect("shape")),
                    needs[1].then(|| Tensor::new(&[d, h, c], db).expect("shape")),
                    needs[2].then(|| Tensor::new(&[w, d, c], de).expect("shape")),
                ]
            }),
        ))
    }
}
