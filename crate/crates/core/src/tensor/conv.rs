use super::ops::sgemm;
use super::{Tensor, Var};
use crate::{Error, Result};

/// Unfold one `[C, H, W]` image into `[C*k*k, H*W]` columns with zero padding `k/2`.
fn im2col(x: &[f32], c: usize, h: usize, w: usize, k: usize, col: &mut [f32]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let img = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ch * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &img[sy as usize * w..(sy as usize + 1) * w];
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    dst[..x_lo.min(w)].fill(0.0);
                    if x_hi > x_lo {
                        let s0 = (x_lo as isize + dx) as usize;
                        dst[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                    }
                    dst[x_hi.max(x_lo)..].fill(0.0);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate columns back into an image gradient.
fn col2im(col: &[f32], c: usize, h: usize, w: usize, k: usize, x: &mut [f32]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let img = &mut x[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ch * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    if x_hi <= x_lo {
                        continue;
                    }
                    let s0 = (x_lo as isize + dx) as usize;
                    let dst = &mut img[sy as usize * w + s0..][..x_hi - x_lo];
                    for (d, s) in dst.iter_mut().zip(&row[y * w + x_lo..y * w + x_hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    /// Stride-1 convolution of `[N, C, H, W]` with `[O, C, k, k]` weights
    /// (odd `k`), zero padding that preserves the spatial size, optional `[O]` bias.
    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let x = self.value();
        let wt = weight.value();
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: wt.shape().to_vec(),
        };
        if x.rank() != 4 || wt.rank() != 4 {
            return Err(mismatch());
        }
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, k) = (wt.shape()[0], wt.shape()[2]);
        if wt.shape()[1] != c || wt.shape()[3] != k || k % 2 == 0 {
            return Err(mismatch());
        }
        if let Some(b) = bias {
            if b.shape() != [o] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![o],
                    rhs: b.shape(),
                });
            }
        }
        let bias_val = bias.map(|b| b.value());
        let (hw, ckk) = (h * w, c * k * k);
        let mut col = vec![0.0f32; ckk * hw];
        let mut out = vec![0.0f32; n * o * hw];
        for b in 0..n {
            im2col(&x.data()[b * c * hw..(b + 1) * c * hw], c, h, w, k, &mut col);
            let dst = &mut out[b * o * hw..(b + 1) * o * hw];
            if let Some(bv) = &bias_val {
                for (oc, row) in dst.chunks_mut(hw).enumerate() {
                    row.fill(bv.data()[oc]);
                }
            }
            let beta = if bias_val.is_some() { 1.0 } else { 0.0 };
            sgemm(o, ckk, hw, wt.data(), (ckk, 1), &col, (hw, 1), dst, beta);
        }
        let out = Tensor {
            shape: vec![n, o, h, w],
            data: out,
        };
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        let (xs, ws) = (x.shape().to_vec(), wt.shape().to_vec());
        Ok(self.tape().record(out, &inputs, move |g| {
            let mut dx = vec![0.0f32; n * c * hw];
            let mut dw = vec![0.0f32; o * ckk];
            let mut col = vec![0.0f32; ckk * hw];
            let mut dcol = vec![0.0f32; ckk * hw];
            for b in 0..n {
                let gy = &g.data()[b * o * hw..(b + 1) * o * hw];
                im2col(&x.data()[b * c * hw..(b + 1) * c * hw], c, h, w, k, &mut col);
                // dW += dY col^T
                sgemm(o, hw, ckk, gy, (hw, 1), &col, (1, hw), &mut dw, 1.0);
                // dcol = W^T dY
                sgemm(ckk, o, hw, wt.data(), (1, ckk), gy, (hw, 1), &mut dcol, 0.0);
                col2im(&dcol, c, h, w, k, &mut dx[b * c * hw..(b + 1) * c * hw]);
            }
            let mut grads = vec![
                Some(Tensor {
                    shape: xs.clone(),
                    data: dx,
                }),
                Some(Tensor {
                    shape: ws.clone(),
                    data: dw,
                }),
            ];
            if has_bias {
                let mut db = vec![0.0f32; o];
                for b in 0..n {
                    for (oc, d) in db.iter_mut().enumerate() {
                        *d += g.data()[(b * o + oc) * hw..(b * o + oc + 1) * hw]
                            .iter()
                            .sum::<f32>();
                    }
                }
                grads.push(Some(Tensor {
                    shape: vec![o],
                    data: db,
                }));
            }
            grads
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution used as the reference.
    fn conv_naive(x: &Tensor, w: &Tensor, b: &[f32]) -> Tensor {
        let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, k) = (w.shape()[0], w.shape()[2]);
        let p = (k / 2) as isize;
        let mut out = Tensor::zeros(&[n, o, h, wd]);
        for bi in 0..n {
            for oc in 0..o {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut s = b[oc];
                        for ic in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = y as isize + ky as isize - p;
                                    let sx = xx as isize + kx as isize - p;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                        continue;
                                    }
                                    s += w.data()[((oc * c + ic) * k + ky) * k + kx]
                                        * x.data()[((bi * c + ic) * h + sy as usize) * wd + sx as usize];
                                }
                            }
                        }
                        out.data_mut()[((bi * o + oc) * h + y) * wd + xx] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[2, 3, 6, 5], &mut rng);
        let w = Tensor::randn(&[4, 3, 3, 3], &mut rng);
        let b = vec![0.1, -0.2, 0.3, 0.0];
        let tape = Tape::new();
        let y = tape
            .constant(x.clone())
            .conv2d(
                tape.constant(w.clone()),
                Some(tape.constant(Tensor::new(vec![4], b.clone()).unwrap())),
            )
            .unwrap();
        assert!(y.value().max_abs_diff(&conv_naive(&x, &w, &b)) < 1e-5);
    }

    #[test]
    fn zero_kernel_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[1, 2, 5, 5], &mut rng));
        let y = x.conv2d(tape.constant(Tensor::zeros(&[3, 2, 3, 3])), None).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_channel_mismatch() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let err = x.conv2d(tape.constant(Tensor::zeros(&[3, 5, 3, 3])), None).unwrap_err();
        assert!(err.to_string().contains("[1, 2, 4, 4]"));
    }
}
