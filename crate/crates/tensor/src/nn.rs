//! Dense and convolutional ops built on the tape.

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `c = a·b + beta·c` for row-major `c` of size m×n, with arbitrary strides
/// on `a` (m×k) and `b` (k×n).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    let max_a = (m as isize - 1) * a_strides.0 + (k as isize - 1) * a_strides.1;
    let max_b = (k as isize - 1) * b_strides.0 + (n as isize - 1) * b_strides.1;
    assert!(
        (max_a as usize) < a.len() && (max_b as usize) < b.len(),
        "gemm bounds"
    );
    // SAFETY: bounds of every addressed element were checked above, strides
    // are non-negative, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    cols: &mut [f64],
) {
    let p = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(
    cols: &[f64],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    x: &mut [f64],
) {
    let p = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Tape {
    /// `[m,k] × [k,n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul {sa:?} x {sb:?}"
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            0.0,
            &mut out,
        );
        self.custom(
            &[a, b],
            Tensor::new(&[m, n], out),
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let ga = ctx.needs[0].then(|| {
                    let mut d = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        g,
                        (n as isize, 1),
                        ctx.inputs[1].data(),
                        (1, n as isize),
                        0.0,
                        &mut d,
                    );
                    Tensor::new(&[m, k], d)
                });
                let gb = ctx.needs[1].then(|| {
                    let mut d = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        ctx.inputs[0].data(),
                        (1, k as isize),
                        g,
                        (n as isize, 1),
                        0.0,
                        &mut d,
                    );
                    Tensor::new(&[k, n], d)
                });
                vec![ga, gb]
            }),
        )
    }

    /// Broadcast-add `b` (length C) along axis 1 of `x` (`[N, C, ...]`).
    pub fn add_bias(&self, x: Var, b: Var) -> Var {
        let sx = self.shape(x);
        let c = sx[1];
        assert_eq!(self.shape(b), vec![c], "add_bias: bias length");
        let inner: usize = sx[2..].iter().product();
        let mut value = self.value(x).clone();
        {
            let bv = self.value(b);
            for (i, v) in value.data_mut().iter_mut().enumerate() {
                *v += bv.data()[(i / inner) % c];
            }
        }
        self.custom(
            &[x, b],
            value,
            Box::new(move |ctx| {
                let gb = ctx.needs[1].then(|| {
                    let mut d = vec![0.0; c];
                    for (i, g) in ctx.grad.data().iter().enumerate() {
                        d[(i / inner) % c] += g;
                    }
                    Tensor::new(&[c], d)
                });
                vec![Some(ctx.grad.clone()), gb]
            }),
        )
    }

    /// Broadcast-multiply by `s` (length C) along axis 1 of `x`.
    pub fn mul_channel(&self, x: Var, s: Var) -> Var {
        let sx = self.shape(x);
        let c = sx[1];
        assert_eq!(self.shape(s), vec![c], "mul_channel: scale length");
        let inner: usize = sx[2..].iter().product();
        let mut value = self.value(x).clone();
        {
            let sv = self.value(s);
            for (i, v) in value.data_mut().iter_mut().enumerate() {
                *v *= sv.data()[(i / inner) % c];
            }
        }
        self.custom(
            &[x, s],
            value,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let gx = ctx.needs[0].then(|| {
                    let sv = ctx.inputs[1].data();
                    Tensor::from_fn(ctx.grad.shape(), |i| g[i] * sv[(i / inner) % c])
                });
                let gs = ctx.needs[1].then(|| {
                    let xv = ctx.inputs[0].data();
                    let mut d = vec![0.0; c];
                    for i in 0..g.len() {
                        d[(i / inner) % c] += g[i] * xv[i];
                    }
                    Tensor::new(&[c], d)
                });
                vec![gx, gs]
            }),
        )
    }

    /// `x·w + b` for `x: [N, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }

    /// 2-D cross-correlation, square kernel, zero padding, no bias.
    /// `x: [B,C,H,W]`, `w: [O,C,k,k]` → `[B,O,Ho,Wo]`.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let sx = self.shape(x);
        let sw = self.shape(w);
        assert!(sx.len() == 4 && sw.len() == 4, "conv2d rank");
        let (bsz, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, k) = (sw[0], sw[2]);
        assert!(
            sw[1] == c && sw[3] == k,
            "conv2d weight {sw:?} for input {sx:?}"
        );
        assert!(
            h + 2 * pad >= k && wd + 2 * pad >= k,
            "conv2d kernel larger than input"
        );
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let (p, r) = (ho * wo, c * k * k);
        let direct = k == 1 && stride == 1 && pad == 0;
        let mut out = vec![0.0; bsz * o * p];
        {
            let xv = self.value(x);
            let wv = self.value(w);
            let mut cols = vec![0.0; if direct { 0 } else { r * p }];
            for bi in 0..bsz {
                let xb = &xv.data()[bi * c * h * wd..(bi + 1) * c * h * wd];
                let src: &[f64] = if direct {
                    xb
                } else {
                    im2col(xb, (c, h, wd), k, stride, pad, (ho, wo), &mut cols);
                    &cols
                };
                gemm(
                    o,
                    r,
                    p,
                    wv.data(),
                    (r as isize, 1),
                    src,
                    (p as isize, 1),
                    0.0,
                    &mut out[bi * o * p..(bi + 1) * o * p],
                );
            }
        }
        self.custom(
            &[x, w],
            Tensor::new(&[bsz, o, ho, wo], out),
            Box::new(move |ctx| {
                let xv = ctx.inputs[0].data();
                let wv = ctx.inputs[1].data();
                let g = ctx.grad.data();
                let mut gx = ctx.needs[0].then(|| vec![0.0; bsz * c * h * wd]);
                let mut gw = ctx.needs[1].then(|| vec![0.0; o * r]);
                let mut cols = vec![0.0; if direct { 0 } else { r * p }];
                let mut gcols = vec![0.0; if gx.is_some() { r * p } else { 0 }];
                for bi in 0..bsz {
                    let gb = &g[bi * o * p..(bi + 1) * o * p];
                    let xb = &xv[bi * c * h * wd..(bi + 1) * c * h * wd];
                    if let Some(gw) = gw.as_mut() {
                        let src: &[f64] = if direct {
                            xb
                        } else {
                            im2col(xb, (c, h, wd), k, stride, pad, (ho, wo), &mut cols);
                            &cols
                        };
                        gemm(o, p, r, gb, (p as isize, 1), src, (1, p as isize), 1.0, gw);
                    }
                    if let Some(gx) = gx.as_mut() {
                        let dst = &mut gx[bi * c * h * wd..(bi + 1) * c * h * wd];
                        if direct {
                            gemm(r, o, p, wv, (1, r as isize), gb, (p as isize, 1), 0.0, dst);
                        } else {
                            gemm(
                                r,
                                o,
                                p,
                                wv,
                                (1, r as isize),
                                gb,
                                (p as isize, 1),
                                0.0,
                                &mut gcols,
                            );
                            col2im(&gcols, (c, h, wd), k, stride, pad, (ho, wo), dst);
                        }
                    }
                }
                vec![
                    gx.map(|d| Tensor::new(&[bsz, c, h, wd], d)),
                    gw.map(|d| Tensor::new(&[o, c, k, k], d)),
                ]
            }),
        )
    }

    /// Repeat `[B,C]` over an `h×w` grid → `[B,C,h,w]`.
    pub fn tile_spatial(&self, x: Var, h: usize, w: usize) -> Var {
        let s = self.shape(x);
        assert_eq!(s.len(), 2, "tile_spatial needs [B,C]");
        let hw = h * w;
        let value = {
            let v = self.value(x);
            let d = v.data();
            Tensor::from_fn(&[s[0], s[1], h, w], |i| d[i / hw])
        };
        self.custom(
            &[x],
            value,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let d = Tensor::from_fn(ctx.inputs[0].shape(), |i| {
                    g[i * hw..(i + 1) * hw].iter().sum()
                });
                vec![Some(d)]
            }),
        )
    }

    /// Nearest-neighbour ×2 upsampling of `[B,C,H,W]`.
    pub fn upsample2(&self, x: Var) -> Var {
        let s = self.shape(x);
        let (n, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut out = vec![0.0; n * 4 * h * w];
        {
            let v = self.value(x);
            let d = v.data();
            for ch in 0..n {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        out[(ch * 2 * h + y) * 2 * w + xx] = d[(ch * h + y / 2) * w + xx / 2];
                    }
                }
            }
        }
        self.custom(
            &[x],
            Tensor::new(&[s[0], s[1], 2 * h, 2 * w], out),
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut d = vec![0.0; n * h * w];
                for ch in 0..n {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            d[(ch * h + y / 2) * w + xx / 2] += g[(ch * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                vec![Some(Tensor::new(ctx.inputs[0].shape(), d))]
            }),
        )
    }

    /// 2×2 area averaging of `[B,C,H,W]`; H and W must be even.
    pub fn avg_pool2(&self, x: Var) -> Var {
        let s = self.shape(x);
        let (n, h, w) = (s[0] * s[1], s[2], s[3]);
        assert!(
            h % 2 == 0 && w % 2 == 0,
            "avg_pool2 needs even sizes, got {s:?}"
        );
        let (h2, w2) = (h / 2, w / 2);
        let mut out = vec![0.0; n * h2 * w2];
        {
            let v = self.value(x);
            let d = v.data();
            for ch in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        out[(ch * h2 + y / 2) * w2 + xx / 2] += 0.25 * d[(ch * h + y) * w + xx];
                    }
                }
            }
        }
        self.custom(
            &[x],
            Tensor::new(&[s[0], s[1], h2, w2], out),
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let d = Tensor::from_fn(ctx.inputs[0].shape(), |i| {
                    let xx = i % w;
                    let y = (i / w) % h;
                    let ch = i / (w * h);
                    0.25 * g[(ch * h2 + y / 2) * w2 + xx / 2]
                });
                vec![Some(d)]
            }),
        )
    }

    /// Per-channel normalisation over every axis except 1, using the batch's
    /// own (biased) statistics. Returns the normalised value together with
    /// the per-channel mean and variance that were used.
    pub fn batch_norm(&self, x: Var, eps: f64) -> (Var, Vec<f64>, Vec<f64>) {
        let s = self.shape(x);
        let c = s[1];
        let inner: usize = s[2..].iter().product();
        let count = (s[0] * inner) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let normed;
        {
            let v = self.value(x);
            let d = v.data();
            for (i, &val) in d.iter().enumerate() {
                mean[(i / inner) % c] += val;
            }
            mean.iter_mut().for_each(|m| *m /= count);
            for (i, &val) in d.iter().enumerate() {
                let ch = (i / inner) % c;
                var[ch] += (val - mean[ch]).powi(2);
            }
            var.iter_mut().for_each(|v| *v /= count);
            normed = Tensor::from_fn(&s, |i| {
                let ch = (i / inner) % c;
                (d[i] - mean[ch]) / (var[ch] + eps).sqrt()
            });
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let y = self.custom(
            &[x],
            normed,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let yv = ctx.output.data();
                let mut mg = vec![0.0; c];
                let mut mgy = vec![0.0; c];
                for i in 0..g.len() {
                    let ch = (i / inner) % c;
                    mg[ch] += g[i];
                    mgy[ch] += g[i] * yv[i];
                }
                let d = Tensor::from_fn(ctx.grad.shape(), |i| {
                    let ch = (i / inner) % c;
                    inv_std[ch] * (g[i] - mg[ch] / count - yv[i] * mgy[ch] / count)
                });
                vec![Some(d)]
            }),
        );
        (y, mean, var)
    }

    /// Mean softmax cross-entropy of `logits: [N,K]` against class labels.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Var {
        let s = self.shape(logits);
        assert_eq!(s.len(), 2, "cross_entropy needs [N,K] logits");
        let (n, k) = (s[0], s[1]);
        assert_eq!(labels.len(), n, "one label per row");
        assert!(labels.iter().all(|&l| l < k), "label out of range");
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        {
            let v = self.value(logits);
            let d = v.data();
            for r in 0..n {
                let row = &d[r * k..(r + 1) * k];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
                for j in 0..k {
                    probs[r * k + j] = (row[j] - m).exp() / z;
                }
                loss += -(row[labels[r]] - m - z.ln());
            }
        }
        let labels = labels.to_vec();
        self.custom(
            &[logits],
            Tensor::scalar(loss / n as f64),
            Box::new(move |ctx| {
                let g = ctx.grad.item() / n as f64;
                let mut d = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * k + l] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= g);
                vec![Some(Tensor::new(&[n, k], d))]
            }),
        )
    }
}
