use super::{numel, strides, Tensor, Var};
use crate::{Error, Result};
use std::rc::Rc;

/// Numpy-style broadcast of two shapes, or `None` when they do not conform.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside the broadcast `out` shape (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

fn binary_map(a: &Tensor, b: &Tensor, out_shape: &[usize], f: impl Fn(f32, f32) -> f32) -> Tensor {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor {
            shape: out_shape.to_vec(),
            data,
        };
    }
    if b.numel() == 1 && a.shape() == out_shape {
        let y = b.data()[0];
        return a.map(|x| f(x, y));
    }
    if a.numel() == 1 && b.shape() == out_shape {
        let x = a.data()[0];
        let mut t = b.map(|y| f(x, y));
        t.shape = out_shape.to_vec();
        return t;
    }
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let n = numel(out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(f(a.data()[ia], b.data()[ib]));
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            ia -= sa[d] * idx[d];
            ib -= sb[d] * idx[d];
            idx[d] = 0;
        }
    }
    Tensor {
        shape: out_shape.to_vec(),
        data,
    }
}

/// Sum a gradient of the broadcast shape back down to `shape`.
fn reduce_to(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let out_shape = grad.shape();
    let s = broadcast_strides(shape, out_shape);
    let rank = out_shape.len();
    let mut acc = vec![0.0f32; numel(shape)];
    let mut idx = vec![0usize; rank];
    let mut j = 0usize;
    for &g in grad.data() {
        acc[j] += g;
        for d in (0..rank).rev() {
            idx[d] += 1;
            j += s[d];
            if idx[d] < out_shape[d] {
                break;
            }
            j -= s[d] * idx[d];
            idx[d] = 0;
        }
    }
    Tensor {
        shape: shape.to_vec(),
        data: acc,
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    Tensor {
        shape: a.shape().to_vec(),
        data: a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    }
}

/// Per-channel batch statistics from a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Biased variance used for normalisation.
    pub var: Vec<f32>,
    /// Number of elements reduced per channel.
    pub count: usize,
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn huber(d: f32, delta: f32) -> f32 {
    let a = d.abs();
    if a <= delta {
        0.5 * d * d
    } else {
        delta * (a - 0.5 * delta)
    }
}

fn huber_grad(d: f32, delta: f32) -> f32 {
    if d.abs() <= delta {
        d
    } else {
        delta * d.signum()
    }
}

impl<'t> Var<'t> {
    fn binary(
        self,
        other: Var<'t>,
        op: &'static str,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<(Tensor, Rc<Tensor>, Rc<Tensor>, Vec<usize>)> {
        let (a, b) = (self.value(), other.value());
        let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })?;
        let out = binary_map(&a, &b, &out_shape, f);
        Ok((out, a, b, out_shape))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (out, a, b, _) = self.binary(other, "add", |x, y| x + y)?;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.tape().record(out, &[self, other], move |g| {
            vec![Some(reduce_to(g, &sa)), Some(reduce_to(g, &sb))]
        }))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (out, a, b, _) = self.binary(other, "sub", |x, y| x - y)?;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.tape().record(out, &[self, other], move |g| {
            vec![Some(reduce_to(g, &sa)), Some(reduce_to(&g.map(|v| -v), &sb))]
        }))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (out, a, b, out_shape) = self.binary(other, "mul", |x, y| x * y)?;
        Ok(self.tape().record(out, &[self, other], move |g| {
            let ga = binary_map(g, &b, &out_shape, |g, y| g * y);
            let gb = binary_map(g, &a, &out_shape, |g, x| g * x);
            vec![Some(reduce_to(&ga, a.shape())), Some(reduce_to(&gb, b.shape()))]
        }))
    }

    pub fn scale(self, c: f32) -> Var<'t> {
        let out = self.value().map(|x| x * c);
        self.tape()
            .record(out, &[self], move |g| vec![Some(g.map(|v| v * c))])
    }

    pub fn add_scalar(self, c: f32) -> Var<'t> {
        let out = self.value().map(|x| x + c);
        self.tape().record(out, &[self], move |g| vec![Some(g.clone())])
    }

    pub fn square(self) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| v * v);
        self.tape().record(out, &[self], move |g| {
            vec![Some(zip_map(g, &x, |g, v| 2.0 * g * v))]
        })
    }

    pub fn sigmoid(self) -> Var<'t> {
        let y = Rc::new(self.value().map(sigmoid));
        let yc = Rc::clone(&y);
        self.tape()
            .record(Rc::unwrap_or_clone(y), &[self], move |g| {
                vec![Some(zip_map(g, &yc, |g, y| g * y * (1.0 - y)))]
            })
    }

    pub fn tanh(self) -> Var<'t> {
        let y = Rc::new(self.value().map(f32::tanh));
        let yc = Rc::clone(&y);
        self.tape()
            .record(Rc::unwrap_or_clone(y), &[self], move |g| {
                vec![Some(zip_map(g, &yc, |g, y| g * (1.0 - y * y)))]
            })
    }

    pub fn relu(self) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| v.max(0.0));
        self.tape().record(out, &[self], move |g| {
            vec![Some(zip_map(g, &x, |g, v| if v > 0.0 { g } else { 0.0 }))]
        })
    }

    pub fn silu(self) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| v * sigmoid(v));
        self.tape().record(out, &[self], move |g| {
            vec![Some(zip_map(g, &x, |g, v| {
                let s = sigmoid(v);
                g * (s + v * s * (1.0 - s))
            }))]
        })
    }

    /// Elementwise Huber penalty of `self - target` with transition `delta`.
    pub fn huber(self, target: Var<'t>, delta: f32) -> Result<Var<'t>> {
        let (x, t) = (self.value(), target.value());
        if x.shape() != t.shape() {
            return Err(Error::ShapeMismatch {
                op: "huber",
                lhs: x.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        let out = zip_map(&x, &t, |a, b| huber(a - b, delta));
        Ok(self.tape().record(out, &[self, target], move |g| {
            let d = zip_map(&x, &t, |a, b| huber_grad(a - b, delta));
            let gx = zip_map(g, &d, |g, d| g * d);
            let gt = gx.map(|v| -v);
            vec![Some(gx), Some(gt)]
        }))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let s: f64 = x.data().iter().map(|&v| v as f64).sum();
        let shape = x.shape().to_vec();
        self.tape().record(Tensor::scalar(s as f32), &[self], move |g| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel().max(1) as f32;
        self.sum().scale(1.0 / n)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0f32; m * n];
        sgemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), &mut out, 0.0);
        let out = Tensor {
            shape: vec![m, n],
            data: out,
        };
        Ok(self.tape().record(out, &[self, other], move |g| {
            // dA = G B^T, dB = A^T G
            let mut ga = vec![0.0f32; m * k];
            sgemm(m, n, k, g.data(), (n, 1), b.data(), (1, n), &mut ga, 0.0);
            let mut gb = vec![0.0f32; k * n];
            sgemm(k, m, n, a.data(), (1, k), g.data(), (n, 1), &mut gb, 0.0);
            vec![
                Some(Tensor {
                    shape: vec![m, k],
                    data: ga,
                }),
                Some(Tensor {
                    shape: vec![k, n],
                    data: gb,
                }),
            ]
        }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let old = x.shape().to_vec();
        let out = Rc::unwrap_or_clone(x).reshape(shape)?;
        Ok(self.tape().record(out, &[self], move |g| {
            vec![Some(g.clone().reshape(&old).expect("reshape back"))]
        }))
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("cannot take [{start}, {}) of axis {axis} in {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let out = Tensor {
            shape: out_shape,
            data,
        };
        Ok(self.tape().record(out, &[self], move |g| {
            let mut full = vec![0.0f32; numel(&shape)];
            for o in 0..outer {
                let base = (o * shape[axis] + start) * inner;
                let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                full[base..base + len * inner].copy_from_slice(src);
            }
            vec![Some(Tensor {
                shape: shape.clone(),
                data: full,
            })]
        }))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let tape = first.tape();
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base_shape = values[0].shape().to_vec();
        if axis >= base_shape.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range")));
        }
        for v in &values[1..] {
            let ok = v.rank() == base_shape.len()
                && v.shape()
                    .iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base_shape.clone(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let outer: usize = base_shape[..axis].iter().product();
        let inner: usize = base_shape[axis + 1..].iter().product();
        let mut out_shape = base_shape.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &s) in values.iter().zip(&sizes) {
                data.extend_from_slice(&v.data()[o * s * inner..(o + 1) * s * inner]);
            }
        }
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        let out = Tensor {
            shape: out_shape,
            data,
        };
        Ok(tape.record(out, parts, move |g| {
            let mut grads: Vec<Vec<f32>> = sizes.iter().map(|s| Vec::with_capacity(outer * s * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gi, &s) in grads.iter_mut().zip(&sizes) {
                    gi.extend_from_slice(&g.data()[off..off + s * inner]);
                    off += s * inner;
                }
            }
            grads
                .into_iter()
                .zip(&shapes)
                .map(|(d, s)| {
                    Some(Tensor {
                        shape: s.clone(),
                        data: d,
                    })
                })
                .collect()
        }))
    }

    /// Bilinear lookup of `[C, H, W]` maps at `uv` in `[0, 1]^2` (u along width).
    ///
    /// Texel `i` is centred at `(i + 0.5) / W`; coordinates are clamped to the
    /// valid texel range. Returns `[N, C]`.
    pub fn bilinear_sample(self, uv: &[[f32; 2]]) -> Result<Var<'t>> {
        let maps = self.value();
        if maps.rank() != 3 {
            return Err(Error::invalid(
                "bilinear_sample",
                format!("expected [C, H, W] maps, got {:?}", maps.shape()),
            ));
        }
        let (c, h, w) = (maps.shape()[0], maps.shape()[1], maps.shape()[2]);
        let taps: Vec<BilinearTaps> = uv.iter().map(|p| BilinearTaps::new(*p, h, w)).collect();
        let n = uv.len();
        let hw = h * w;
        let mut data = vec![0.0f32; n * c];
        for (i, t) in taps.iter().enumerate() {
            for ch in 0..c {
                let m = &maps.data()[ch * hw..(ch + 1) * hw];
                data[i * c + ch] = t.eval(m);
            }
        }
        let out = Tensor {
            shape: vec![n, c],
            data,
        };
        let shape = maps.shape().to_vec();
        Ok(self.tape().record(out, &[self], move |g| {
            let mut gm = vec![0.0f32; c * hw];
            for (i, t) in taps.iter().enumerate() {
                for ch in 0..c {
                    t.scatter(&mut gm[ch * hw..(ch + 1) * hw], g.data()[i * c + ch]);
                }
            }
            vec![Some(Tensor {
                shape: shape.clone(),
                data: gm,
            })]
        }))
    }

    /// Training-mode batch norm over `[N, C, H, W]`, normalising each channel
    /// with the batch statistics.
    pub fn batch_norm_train(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        eps: f32,
    ) -> Result<(Var<'t>, BatchStats)> {
        let x = self.value();
        let c = check_bn(&x, &gamma.value(), &beta.value())?;
        let (n, hw) = (x.shape()[0], x.shape()[2] * x.shape()[3]);
        let count = n * hw;
        let mut mean = vec![0.0f32; c];
        let mut var = vec![0.0f32; c];
        for ch in 0..c {
            let (mut s, mut s2) = (0.0f64, 0.0f64);
            for b in 0..n {
                for &v in &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                    s += v as f64;
                    s2 += (v as f64) * (v as f64);
                }
            }
            let m = s / count as f64;
            mean[ch] = m as f32;
            var[ch] = (s2 / count as f64 - m * m).max(0.0) as f32;
        }
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = gamma.value();
        let bt = beta.value();
        let mut xhat = vec![0.0f32; x.numel()];
        let mut out = vec![0.0f32; x.numel()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                for i in r {
                    let xh = (x.data()[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g.data()[ch] * xh + bt.data()[ch];
                }
            }
        }
        let shape = x.shape().to_vec();
        let out = Tensor {
            shape: shape.clone(),
            data: out,
        };
        let stats = BatchStats {
            mean,
            var,
            count,
        };
        let v = self.tape().record(out, &[self, gamma, beta], move |gy| {
            let mut dgamma = vec![0.0f32; c];
            let mut dbeta = vec![0.0f32; c];
            for b in 0..n {
                for ch in 0..c {
                    for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                        dgamma[ch] += gy.data()[i] * xhat[i];
                        dbeta[ch] += gy.data()[i];
                    }
                }
            }
            let mut dx = vec![0.0f32; xhat.len()];
            for ch in 0..c {
                let k = g.data()[ch] * inv_std[ch];
                let mdy = dbeta[ch] / count as f32;
                let mdyx = dgamma[ch] / count as f32;
                for b in 0..n {
                    for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                        dx[i] = k * (gy.data()[i] - mdy - xhat[i] * mdyx);
                    }
                }
            }
            vec![
                Some(Tensor {
                    shape: shape.clone(),
                    data: dx,
                }),
                Some(Tensor {
                    shape: vec![c],
                    data: dgamma,
                }),
                Some(Tensor {
                    shape: vec![c],
                    data: dbeta,
                }),
            ]
        });
        Ok((v, stats))
    }

    /// Batch norm with fixed (running) statistics: a per-channel affine map.
    pub fn batch_norm_frozen(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        mean: &[f32],
        var: &[f32],
        eps: f32,
    ) -> Result<Var<'t>> {
        let x = self.value();
        let c = check_bn(&x, &gamma.value(), &beta.value())?;
        if mean.len() != c || var.len() != c {
            return Err(Error::invalid("batch_norm", "running statistics length mismatch"));
        }
        let (n, hw) = (x.shape()[0], x.shape()[2] * x.shape()[3]);
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mean = mean.to_vec();
        let g = gamma.value();
        let bt = beta.value();
        let mut out = vec![0.0f32; x.numel()];
        for b in 0..n {
            for ch in 0..c {
                let (k, m, o) = (g.data()[ch] * inv_std[ch], mean[ch], bt.data()[ch]);
                for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                    out[i] = k * (x.data()[i] - m) + o;
                }
            }
        }
        let shape = x.shape().to_vec();
        let out = Tensor {
            shape: shape.clone(),
            data: out,
        };
        Ok(self.tape().record(out, &[self, gamma, beta], move |gy| {
            let mut dx = vec![0.0f32; x.numel()];
            let mut dgamma = vec![0.0f32; c];
            let mut dbeta = vec![0.0f32; c];
            for b in 0..n {
                for ch in 0..c {
                    let k = g.data()[ch] * inv_std[ch];
                    for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                        let gi = gy.data()[i];
                        dx[i] = k * gi;
                        dgamma[ch] += gi * (x.data()[i] - mean[ch]) * inv_std[ch];
                        dbeta[ch] += gi;
                    }
                }
            }
            vec![
                Some(Tensor {
                    shape: shape.clone(),
                    data: dx,
                }),
                Some(Tensor {
                    shape: vec![c],
                    data: dgamma,
                }),
                Some(Tensor {
                    shape: vec![c],
                    data: dbeta,
                }),
            ]
        }))
    }
}

fn check_bn(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<usize> {
    if x.rank() != 4 {
        return Err(Error::invalid(
            "batch_norm",
            format!("expected [N, C, H, W], got {:?}", x.shape()),
        ));
    }
    let c = x.shape()[1];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "batch_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct BilinearTaps {
    idx: [usize; 4],
    w: [f32; 4],
}

impl BilinearTaps {
    pub(crate) fn new(uv: [f32; 2], h: usize, w: usize) -> Self {
        let x = (uv[0] * w as f32 - 0.5).clamp(0.0, (w - 1) as f32);
        let y = (uv[1] * h as f32 - 0.5).clamp(0.0, (h - 1) as f32);
        let x0 = (x.floor() as usize).min(w.saturating_sub(2));
        let y0 = (y.floor() as usize).min(h.saturating_sub(2));
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fx = x - x0 as f32;
        let fy = y - y0 as f32;
        Self {
            idx: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
            w: [
                (1.0 - fx) * (1.0 - fy),
                fx * (1.0 - fy),
                (1.0 - fx) * fy,
                fx * fy,
            ],
        }
    }

    pub(crate) fn eval(&self, map: &[f32]) -> f32 {
        (0..4).map(|k| self.w[k] * map[self.idx[k]]).sum()
    }

    pub(crate) fn scatter(&self, grad: &mut [f32], g: f32) {
        for k in 0..4 {
            grad[self.idx[k]] += self.w[k] * g;
        }
    }
}

/// `c = a * b (+ beta * c)` with explicit (row, col) strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (usize, usize),
    b: &[f32],
    b_strides: (usize, usize),
    c: &mut [f32],
    beta: f32,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    // SAFETY: the slices cover every index addressed by the given strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[1, 4, 1, 1], &[2, 4, 5, 5]), Some(vec![2, 4, 5, 5]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[4]));
        let msg = a.add(b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4]"), "{msg}");
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3, 2, 2]));
        let b = tape.leaf(Tensor::new(vec![1, 3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap());
        let y = a.add(b).unwrap();
        assert_eq!(y.value().data()[4], 2.0);
        let grads = tape.backward(y.sum()).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[8.0, 8.0, 8.0]);
        assert!(grads.get(a).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn narrow_and_concat_invert() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3, 4], |i| i as f32));
        let parts: Vec<_> = (0..2).map(|k| x.narrow(2, 2 * k, 2).unwrap()).collect();
        let back = Var::concat(&parts, 2).unwrap();
        assert_eq!(*back.value(), *x.value());
    }

    #[test]
    fn bilinear_texel_centres_exact() {
        let tape = Tape::new();
        let maps = Tensor::from_fn(&[2, 5, 7], |i| (i as f32 * 0.37).sin());
        let m = tape.constant(maps.clone());
        let mut uv = Vec::new();
        let mut want = Vec::new();
        for y in 0..5 {
            for x in 0..7 {
                uv.push([(x as f32 + 0.5) / 7.0, (y as f32 + 0.5) / 5.0]);
                want.push((maps.data()[y * 7 + x], maps.data()[35 + y * 7 + x]));
            }
        }
        let s = m.bilinear_sample(&uv).unwrap().value();
        for (i, (a, b)) in want.iter().enumerate() {
            assert!((s.data()[2 * i] - a).abs() <= 1e-6);
            assert!((s.data()[2 * i + 1] - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn bilinear_clamps_outside() {
        let tape = Tape::new();
        let m = tape.constant(Tensor::from_fn(&[1, 2, 2], |i| i as f32));
        let s = m.bilinear_sample(&[[0.0, 0.0], [1.0, 1.0]]).unwrap().value();
        assert_eq!(s.data(), &[0.0, 3.0]);
    }
}
