//! Differentiable operations recorded on a [`Graph`].
//!
//! Image-like tensors use `[N, C, H, W]` layout.

use super::{Graph, Var};
use crate::tensor::{gemm, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid_value(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Unfolds one `[C, H, W]` image into `[C*k*k, Ho*Wo]` patch columns.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [f64],
) {
    let hw_out = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
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

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [f64],
) {
    let hw_out = ho * wo;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv_output_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

impl Graph {
    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(&self.value(b), |x, y| x + y);
        self.op(&[a, b], value, |g, _, _| {
            vec![Some(g.clone()), Some(g.clone())]
        })
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(&self.value(b), |x, y| x - y);
        self.op(&[a, b], value, |g, _, _| {
            vec![Some(g.clone()), Some(g.map(|v| -v))]
        })
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(&self.value(b), |x, y| x * y);
        self.op(&[a, b], value, |g, inp, _| {
            vec![
                Some(g.zip_map(inp[1], |g, y| g * y)),
                Some(g.zip_map(inp[0], |g, x| g * x)),
            ]
        })
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.op(&[a], value, move |g, _, _| vec![Some(g.map(|v| v * s))])
    }

    /// `Σ_i w_i · x_i` over scalar or same-shaped inputs.
    pub fn weighted_sum(&self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty());
        let shape = self.shape(terms[0].0);
        let mut value = Tensor::zeros(&shape);
        for &(v, w) in terms {
            value.add_assign(&self.value(v).map(|x| x * w));
        }
        let weights: Vec<f64> = terms.iter().map(|t| t.1).collect();
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.op(&vars, value, move |g, _, _| {
            weights.iter().map(|&w| Some(g.map(|v| v * w))).collect()
        })
    }

    pub fn sum(&self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.op(&[a], value, |g, inp, _| {
            vec![Some(Tensor::full(inp[0].shape(), g.item()))]
        })
    }

    pub fn mean(&self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.numel() as f64;
        let value = Tensor::scalar(t.sum() / n);
        self.op(&[a], value, move |g, inp, _| {
            vec![Some(Tensor::full(inp[0].shape(), g.item() / n))]
        })
    }

    pub fn gelu(&self, a: Var) -> Var {
        let value = self.value(a).map(gelu_value);
        self.op(&[a], value, |g, inp, _| {
            vec![Some(g.zip_map(inp[0], |g, x| g * gelu_grad(x)))]
        })
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid_value);
        self.op(&[a], value, |g, _, out| {
            vec![Some(g.zip_map(out, |g, y| g * y * (1.0 - y)))]
        })
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let value = (*self.value(a))
            .clone()
            .reshape(shape)
            .expect("reshape size mismatch");
        self.op(&[a], value, |g, inp, _| {
            vec![Some(
                g.clone().reshape(inp[0].shape()).expect("reshape back"),
            )]
        })
    }

    /// Copy of `a` that blocks gradient flow.
    pub fn detach(&self, a: Var) -> Var {
        self.constant((*self.value(a)).clone())
    }

    /// Mean absolute error; the subgradient at zero difference is zero.
    pub fn mae(&self, pred: Var, target: Var) -> Var {
        let p = self.value(pred);
        let t = self.value(target);
        assert_eq!(p.shape(), t.shape(), "mae shape mismatch");
        let n = p.numel() as f64;
        let value = Tensor::scalar(
            p.data()
                .iter()
                .zip(t.data())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / n,
        );
        self.op(&[pred, target], value, move |g, inp, _| {
            let s = g.item() / n;
            let d = inp[0].zip_map(inp[1], |a, b| {
                if a > b {
                    s
                } else if a < b {
                    -s
                } else {
                    0.0
                }
            });
            let neg = d.map(|v| -v);
            vec![Some(d), Some(neg)]
        })
    }

    /// Mean squared difference.
    pub fn mse(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "mse shape mismatch");
        let n = av.numel() as f64;
        let value = Tensor::scalar(
            av.data()
                .iter()
                .zip(bv.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                / n,
        );
        self.op(&[a, b], value, move |g, inp, _| {
            let s = 2.0 * g.item() / n;
            let d = inp[0].zip_map(inp[1], |x, y| s * (x - y));
            let neg = d.map(|v| -v);
            vec![Some(d), Some(neg)]
        })
    }

    /// 2-d convolution with square kernel `w: [Co, Ci, k, k]` and optional
    /// bias `[Co]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, ci, h, wd) = xv.dims4();
        let (co, ci_w, k, k2) = wv.dims4();
        assert_eq!(ci, ci_w, "conv2d input channels {ci} vs weight {ci_w}");
        assert_eq!(k, k2);
        let ho = conv_output_size(h, k, stride, pad);
        let wo = conv_output_size(wd, k, stride, pad);
        let ckk = ci * k * k;
        let hw = ho * wo;
        let direct = k == 1 && stride == 1 && pad == 0;
        let mut out = vec![0.0; n * co * hw];
        let mut cols = if direct {
            Vec::new()
        } else {
            vec![0.0; ckk * hw]
        };
        for s in 0..n {
            let xs = &xv.data()[s * ci * h * wd..(s + 1) * ci * h * wd];
            let src: &[f64] = if direct {
                xs
            } else {
                im2col(xs, ci, h, wd, k, stride, pad, ho, wo, &mut cols);
                &cols
            };
            gemm(
                co,
                ckk,
                hw,
                1.0,
                wv.data(),
                false,
                src,
                false,
                0.0,
                &mut out[s * co * hw..(s + 1) * co * hw],
            );
        }
        let mut parents = vec![x, w];
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.numel(), co, "conv2d bias length");
            for s in 0..n {
                for c in 0..co {
                    let bias = bv.data()[c];
                    out[(s * co + c) * hw..(s * co + c + 1) * hw]
                        .iter_mut()
                        .for_each(|v| *v += bias);
                }
            }
            parents.push(b);
        }
        let value = Tensor::from_parts(vec![n, co, ho, wo], out);
        let need_dx = self.requires_grad(x);
        self.op(&parents, value, move |g, inp, _| {
            let xv = inp[0];
            let wv = inp[1];
            let gd = g.data();
            let mut dx = vec![0.0; if need_dx { xv.numel() } else { 0 }];
            let mut dw = vec![0.0; wv.numel()];
            let mut cols = vec![0.0; ckk * hw];
            let mut dcols = vec![0.0; ckk * hw];
            for s in 0..n {
                let xs = &xv.data()[s * ci * h * wd..(s + 1) * ci * h * wd];
                let gs = &gd[s * co * hw..(s + 1) * co * hw];
                if direct {
                    gemm(co, hw, ckk, 1.0, gs, false, xs, true, 1.0, &mut dw);
                } else {
                    im2col(xs, ci, h, wd, k, stride, pad, ho, wo, &mut cols);
                    gemm(co, hw, ckk, 1.0, gs, false, &cols, true, 1.0, &mut dw);
                }
                if !need_dx {
                    continue;
                }
                let dxs = &mut dx[s * ci * h * wd..(s + 1) * ci * h * wd];
                if direct {
                    gemm(ckk, co, hw, 1.0, wv.data(), true, gs, false, 0.0, dxs);
                } else {
                    gemm(
                        ckk,
                        co,
                        hw,
                        1.0,
                        wv.data(),
                        true,
                        gs,
                        false,
                        0.0,
                        &mut dcols,
                    );
                    col2im(&dcols, ci, h, wd, k, stride, pad, ho, wo, dxs);
                }
            }
            let mut grads = vec![
                need_dx.then(|| Tensor::from_parts(xv.shape().to_vec(), dx)),
                Some(Tensor::from_parts(wv.shape().to_vec(), dw)),
            ];
            if inp.len() == 3 {
                let mut db = vec![0.0; co];
                for s in 0..n {
                    for (c, d) in db.iter_mut().enumerate() {
                        *d += gd[(s * co + c) * hw..(s * co + c + 1) * hw]
                            .iter()
                            .sum::<f64>();
                    }
                }
                grads.push(Some(Tensor::from_parts(vec![co], db)));
            }
            grads
        })
    }

    /// Per-channel convolution, stride 1, `w: [C, 1, k, k]`, bias `[C]`.
    pub fn depthwise_conv2d(&self, x: Var, w: Var, b: Var, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let (n, c, h, wd) = xv.dims4();
        let (cw, one, k, _) = wv.dims4();
        assert!(
            cw == c && one == 1,
            "depthwise weight shape {:?}",
            wv.shape()
        );
        let ho = conv_output_size(h, k, 1, pad);
        let wo = conv_output_size(wd, k, 1, pad);
        let mut out = vec![0.0; n * c * ho * wo];
        for s in 0..n {
            for ch in 0..c {
                let plane = &xv.data()[(s * c + ch) * h * wd..(s * c + ch + 1) * h * wd];
                let ker = &wv.data()[ch * k * k..(ch + 1) * k * k];
                let dst = &mut out[(s * c + ch) * ho * wo..(s * c + ch + 1) * ho * wo];
                dst.fill(bv.data()[ch]);
                for ky in 0..k {
                    for kx in 0..k {
                        let kv = ker[ky * k + kx];
                        for oy in 0..ho {
                            let iy = (oy + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..wo {
                                let ix = (ox + kx) as isize - pad as isize;
                                if ix >= 0 && ix < wd as isize {
                                    dst[oy * wo + ox] += kv * plane[iy as usize * wd + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, ho, wo], out);
        self.op(&[x, w, b], value, move |g, inp, _| {
            let xv = inp[0];
            let wv = inp[1];
            let gd = g.data();
            let mut dx = vec![0.0; xv.numel()];
            let mut dw = vec![0.0; wv.numel()];
            let mut db = vec![0.0; c];
            for s in 0..n {
                for ch in 0..c {
                    let base_x = (s * c + ch) * h * wd;
                    let base_g = (s * c + ch) * ho * wo;
                    let gp = &gd[base_g..base_g + ho * wo];
                    db[ch] += gp.iter().sum::<f64>();
                    for ky in 0..k {
                        for kx in 0..k {
                            let kv = wv.data()[ch * k * k + ky * k + kx];
                            let mut acc = 0.0;
                            for oy in 0..ho {
                                let iy = (oy + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for ox in 0..wo {
                                    let ix = (ox + kx) as isize - pad as isize;
                                    if ix >= 0 && ix < wd as isize {
                                        let xi = base_x + iy as usize * wd + ix as usize;
                                        let gv = gp[oy * wo + ox];
                                        acc += gv * xv.data()[xi];
                                        dx[xi] += gv * kv;
                                    }
                                }
                            }
                            dw[ch * k * k + ky * k + kx] += acc;
                        }
                    }
                }
            }
            vec![
                Some(Tensor::from_parts(xv.shape().to_vec(), dx)),
                Some(Tensor::from_parts(wv.shape().to_vec(), dw)),
                Some(Tensor::from_parts(vec![c], db)),
            ]
        })
    }

    pub fn concat_channels(&self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let vals: Vec<_> = xs.iter().map(|&v| self.value(v)).collect();
        let (n, _, h, w) = vals[0].dims4();
        let chans: Vec<usize> = vals
            .iter()
            .map(|v| {
                let (n2, c, h2, w2) = v.dims4();
                assert!(
                    n2 == n && h2 == h && w2 == w,
                    "concat_channels spatial mismatch"
                );
                c
            })
            .collect();
        let total: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for s in 0..n {
            for (v, &c) in vals.iter().zip(&chans) {
                out.extend_from_slice(&v.data()[s * c * hw..(s + 1) * c * hw]);
            }
        }
        let value = Tensor::from_parts(vec![n, total, h, w], out);
        self.op(xs, value, move |g, _, _| {
            let mut grads: Vec<Vec<f64>> = chans
                .iter()
                .map(|c| Vec::with_capacity(n * c * hw))
                .collect();
            let gd = g.data();
            for s in 0..n {
                let mut off = s * total * hw;
                for (gr, &c) in grads.iter_mut().zip(&chans) {
                    gr.extend_from_slice(&gd[off..off + c * hw]);
                    off += c * hw;
                }
            }
            grads
                .into_iter()
                .zip(&chans)
                .map(|(d, &c)| Some(Tensor::from_parts(vec![n, c, h, w], d)))
                .collect()
        })
    }

    /// Channels `[start, start+len)` of `x`.
    pub fn slice_channels(&self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        assert!(start + len <= c);
        let hw = h * w;
        let mut out = Vec::with_capacity(n * len * hw);
        for s in 0..n {
            out.extend_from_slice(&xv.data()[(s * c + start) * hw..(s * c + start + len) * hw]);
        }
        let value = Tensor::from_parts(vec![n, len, h, w], out);
        self.op(&[x], value, move |g, _, _| {
            let mut dx = vec![0.0; n * c * hw];
            for s in 0..n {
                dx[(s * c + start) * hw..(s * c + start + len) * hw]
                    .copy_from_slice(&g.data()[s * len * hw..(s + 1) * len * hw]);
            }
            vec![Some(Tensor::from_parts(vec![n, c, h, w], dx))]
        })
    }

    /// Nearest-neighbour resampling to `oh × ow`.
    pub fn resize_nearest(&self, x: Var, oh: usize, ow: usize) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        if h == oh && w == ow {
            return x;
        }
        let ys: Vec<usize> = (0..oh).map(|oy| oy * h / oh).collect();
        let xs: Vec<usize> = (0..ow).map(|ox| ox * w / ow).collect();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let plane = &xv.data()[p * h * w..(p + 1) * h * w];
            for &iy in &ys {
                for &ix in &xs {
                    out.push(plane[iy * w + ix]);
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, oh, ow], out);
        self.op(&[x], value, move |g, _, _| {
            let mut dx = vec![0.0; n * c * h * w];
            for p in 0..n * c {
                let gp = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                let dp = &mut dx[p * h * w..(p + 1) * h * w];
                for (oy, &iy) in ys.iter().enumerate() {
                    for (ox, &ix) in xs.iter().enumerate() {
                        dp[iy * w + ix] += gp[oy * ow + ox];
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![n, c, h, w], dx))]
        })
    }

    /// Spatial average `[N, C, H, W] -> [N, C]`.
    pub fn spatial_mean(&self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let hw = h * w;
        let out: Vec<f64> = xv
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::from_parts(vec![n, c], out);
        self.op(&[x], value, move |g, _, _| {
            let mut dx = Vec::with_capacity(n * c * hw);
            for &gv in g.data() {
                dx.extend(std::iter::repeat_n(gv / hw as f64, hw));
            }
            vec![Some(Tensor::from_parts(vec![n, c, h, w], dx))]
        })
    }

    /// `x[n, c, :, :] * s[n, c]`.
    pub fn scale_channels(&self, x: Var, s: Var) -> Var {
        let xv = self.value(x);
        let sv = self.value(s);
        let (n, c, h, w) = xv.dims4();
        assert_eq!(sv.shape(), &[n, c], "scale_channels factor shape");
        let hw = h * w;
        let mut out = xv.data().to_vec();
        for (p, chunk) in out.chunks_mut(hw).enumerate() {
            let f = sv.data()[p];
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        let value = Tensor::from_parts(vec![n, c, h, w], out);
        self.op(&[x, s], value, move |g, inp, _| {
            let mut dx = g.data().to_vec();
            let mut ds = vec![0.0; n * c];
            for p in 0..n * c {
                let f = inp[1].data()[p];
                let xs = &inp[0].data()[p * hw..(p + 1) * hw];
                let gs = &mut dx[p * hw..(p + 1) * hw];
                ds[p] = gs.iter().zip(xs).map(|(a, b)| a * b).sum();
                gs.iter_mut().for_each(|v| *v *= f);
            }
            vec![
                Some(Tensor::from_parts(vec![n, c, h, w], dx)),
                Some(Tensor::from_parts(vec![n, c], ds)),
            ]
        })
    }

    /// `[N, C, H, W] -> [N*H*W, C]`: one row per spatial position.
    pub fn to_rows(&self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let value = Tensor::from_parts(vec![n * h * w, c], nchw_to_rows(xv.data(), n, c, h * w));
        self.op(&[x], value, move |g, _, _| {
            let hw = h * w;
            let mut dx = vec![0.0; n * c * hw];
            for s in 0..n {
                for p in 0..hw {
                    for ch in 0..c {
                        dx[(s * c + ch) * hw + p] = g.data()[(s * hw + p) * c + ch];
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![n, c, h, w], dx))]
        })
    }

    /// Rows `idx` of a 2-d tensor.
    pub fn gather_rows(&self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let (r, f) = xv.dims2();
        let mut out = Vec::with_capacity(idx.len() * f);
        for &i in idx {
            assert!(i < r, "gather_rows index out of range");
            out.extend_from_slice(xv.row(i));
        }
        let value = Tensor::from_parts(vec![idx.len(), f], out);
        let idx = idx.to_vec();
        self.op(&[x], value, move |g, _, _| {
            let mut dx = vec![0.0; r * f];
            for (o, &i) in idx.iter().enumerate() {
                for (d, gv) in dx[i * f..(i + 1) * f].iter_mut().zip(g.row(o)) {
                    *d += gv;
                }
            }
            vec![Some(Tensor::from_parts(vec![r, f], dx))]
        })
    }

    /// Batched matrix product `a[B,m,k] · b[B,k,n]`, or `a · bᵀ` with
    /// `b[B,n,k]` when `trans_b`.
    pub fn bmm(&self, a: Var, b: Var, trans_b: bool) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (ba, m, k) = dims3(&av);
        let (bb, b1, b2) = dims3(&bv);
        assert_eq!(ba, bb);
        let (kb, n) = if trans_b { (b2, b1) } else { (b1, b2) };
        assert_eq!(k, kb, "bmm inner dimension");
        let mut out = vec![0.0; ba * m * n];
        for i in 0..ba {
            gemm(
                m,
                k,
                n,
                1.0,
                &av.data()[i * m * k..(i + 1) * m * k],
                false,
                &bv.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let value = Tensor::from_parts(vec![ba, m, n], out);
        self.op(&[a, b], value, move |g, inp, _| {
            let mut da = vec![0.0; ba * m * k];
            let mut db = vec![0.0; ba * k * n];
            for i in 0..ba {
                let gi = &g.data()[i * m * n..(i + 1) * m * n];
                let ai = &inp[0].data()[i * m * k..(i + 1) * m * k];
                let bi = &inp[1].data()[i * k * n..(i + 1) * k * n];
                // dA = G · Bᵀ (or G · B when b was stored transposed)
                gemm(
                    m,
                    n,
                    k,
                    1.0,
                    gi,
                    false,
                    bi,
                    !trans_b,
                    0.0,
                    &mut da[i * m * k..(i + 1) * m * k],
                );
                if trans_b {
                    // dB[n,k] = Gᵀ · A
                    gemm(
                        n,
                        m,
                        k,
                        1.0,
                        gi,
                        true,
                        ai,
                        false,
                        0.0,
                        &mut db[i * k * n..(i + 1) * k * n],
                    );
                } else {
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        ai,
                        true,
                        gi,
                        false,
                        0.0,
                        &mut db[i * k * n..(i + 1) * k * n],
                    );
                }
            }
            vec![
                Some(Tensor::from_parts(inp[0].shape().to_vec(), da)),
                Some(Tensor::from_parts(inp[1].shape().to_vec(), db)),
            ]
        })
    }

    /// Softmax over the last dimension.
    pub fn softmax_last(&self, x: Var) -> Var {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        self.op(&[x], value, move |g, _, y| {
            let mut dx = vec![0.0; y.numel()];
            for ((dr, gr), yr) in dx
                .chunks_mut(d)
                .zip(g.data().chunks(d))
                .zip(y.data().chunks(d))
            {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((o, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                    *o = yv * (gv - dot);
                }
            }
            vec![Some(Tensor::from_parts(y.shape().to_vec(), dx))]
        })
    }

    /// `x / sqrt(Σ x² + eps)` along the last dimension.
    pub fn l2_normalize_last(&self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap();
        let norms: Vec<f64> = xv
            .data()
            .chunks(d)
            .map(|r| (r.iter().map(|v| v * v).sum::<f64>() + eps).sqrt())
            .collect();
        let mut out = xv.data().to_vec();
        for (row, n) in out.chunks_mut(d).zip(&norms) {
            row.iter_mut().for_each(|v| *v /= n);
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        self.op(&[x], value, move |g, _, y| {
            let mut dx = vec![0.0; y.numel()];
            for (((dr, gr), yr), n) in dx
                .chunks_mut(d)
                .zip(g.data().chunks(d))
                .zip(y.data().chunks(d))
                .zip(&norms)
            {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((o, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                    *o = (gv - yv * dot) / n;
                }
            }
            vec![Some(Tensor::from_parts(y.shape().to_vec(), dx))]
        })
    }

    /// Multiplies batch `b` of `x[B, ...]` by `t[b % heads]`.
    pub fn scale_per_head(&self, x: Var, t: Var) -> Var {
        let xv = self.value(x);
        let tv = self.value(t);
        let heads = tv.numel();
        let b = xv.shape()[0];
        let per = xv.numel() / b;
        let mut out = xv.data().to_vec();
        for (i, chunk) in out.chunks_mut(per).enumerate() {
            let f = tv.data()[i % heads];
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        self.op(&[x, t], value, move |g, inp, _| {
            let mut dx = g.data().to_vec();
            let mut dt = vec![0.0; heads];
            for (i, chunk) in dx.chunks_mut(per).enumerate() {
                let xs = &inp[0].data()[i * per..(i + 1) * per];
                dt[i % heads] += chunk.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                let f = inp[1].data()[i % heads];
                chunk.iter_mut().for_each(|v| *v *= f);
            }
            vec![
                Some(Tensor::from_parts(inp[0].shape().to_vec(), dx)),
                Some(Tensor::from_parts(inp[1].shape().to_vec(), dt)),
            ]
        })
    }

    /// Layer normalisation across channels at every pixel, with per-channel
    /// affine `weight`/`bias`.
    pub fn layer_norm_channels(&self, x: Var, weight: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let wv = self.value(weight);
        let bv = self.value(bias);
        let (n, c, h, w) = xv.dims4();
        let hw = h * w;
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; n * hw];
        for s in 0..n {
            let xs = &xv.data()[s * c * hw..(s + 1) * c * hw];
            for p in 0..hw {
                let mean = (0..c).map(|ch| xs[ch * hw + p]).sum::<f64>() / c as f64;
                let var = (0..c)
                    .map(|ch| (xs[ch * hw + p] - mean).powi(2))
                    .sum::<f64>()
                    / c as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[s * hw + p] = is;
                for ch in 0..c {
                    xhat[s * c * hw + ch * hw + p] = (xs[ch * hw + p] - mean) * is;
                }
            }
        }
        let mut out = xhat.clone();
        for s in 0..n {
            for ch in 0..c {
                let (gm, bt) = (wv.data()[ch], bv.data()[ch]);
                out[(s * c + ch) * hw..(s * c + ch + 1) * hw]
                    .iter_mut()
                    .for_each(|v| *v = *v * gm + bt);
            }
        }
        let value = Tensor::from_parts(vec![n, c, h, w], out);
        self.op(&[x, weight, bias], value, move |g, inp, _| {
            let wv = inp[1];
            let gd = g.data();
            let mut dx = vec![0.0; n * c * hw];
            let mut dw = vec![0.0; c];
            let mut db = vec![0.0; c];
            for s in 0..n {
                for p in 0..hw {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for ch in 0..c {
                        let i = s * c * hw + ch * hw + p;
                        let d = gd[i] * wv.data()[ch];
                        dw[ch] += gd[i] * xhat[i];
                        db[ch] += gd[i];
                        mean_d += d;
                        mean_dx += d * xhat[i];
                    }
                    mean_d /= c as f64;
                    mean_dx /= c as f64;
                    let is = inv_std[s * hw + p];
                    for ch in 0..c {
                        let i = s * c * hw + ch * hw + p;
                        let d = gd[i] * wv.data()[ch];
                        dx[i] = is * (d - mean_d - xhat[i] * mean_dx);
                    }
                }
            }
            vec![
                Some(Tensor::from_parts(vec![n, c, h, w], dx)),
                Some(Tensor::from_parts(vec![c], dw)),
                Some(Tensor::from_parts(vec![c], db)),
            ]
        })
    }
}

fn dims3(t: &Tensor) -> (usize, usize, usize) {
    assert_eq!(
        t.shape().len(),
        3,
        "expected 3-d tensor, got {:?}",
        t.shape()
    );
    (t.shape()[0], t.shape()[1], t.shape()[2])
}

/// `[N, C, HW]` planes to `[N*HW, C]` rows.
pub(crate) fn nchw_to_rows(data: &[f64], n: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * hw * c];
    for s in 0..n {
        for ch in 0..c {
            for p in 0..hw {
                out[(s * hw + p) * c + ch] = data[(s * c + ch) * hw + p];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{check_gradients, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        let mut r = rng(1);
        let x = random_tensor(&mut r, &[1, 2, 4, 5]);
        let w = random_tensor(&mut r, &[3, 2, 3, 3]);
        let g = Graph::inference();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.value(g.conv2d(xv, wv, None, 1, 1));
        for co in 0..3 {
            for oy in 0..4 {
                for ox in 0..5 {
                    let mut acc = 0.0;
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = oy as isize + ky as isize - 1;
                                let ix = ox as isize + kx as isize - 1;
                                if (0..4).contains(&iy) && (0..5).contains(&ix) {
                                    acc += w.data()[((co * 2 + ci) * 3 + ky) * 3 + kx]
                                        * x.data()[(ci * 4 + iy as usize) * 5 + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((y.data()[(co * 4 + oy) * 5 + ox] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv2d_gradients() {
        for (k, stride, pad) in [(3, 1, 1), (2, 2, 0), (1, 1, 0), (3, 2, 1)] {
            let mut r = rng(k as u64 * 10 + stride as u64);
            let x = random_tensor(&mut r, &[2, 3, 6, 6]);
            let w = random_tensor(&mut r, &[4, 3, k, k]);
            let b = random_tensor(&mut r, &[4]);
            check_gradients(&[x, w, b], 1e-6, |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad);
                let y2 = g.mul(y, y);
                g.sum(y2)
            });
        }
    }

    #[test]
    fn depthwise_gradients() {
        let mut r = rng(3);
        let x = random_tensor(&mut r, &[2, 3, 5, 4]);
        let w = random_tensor(&mut r, &[3, 1, 3, 3]);
        let b = random_tensor(&mut r, &[3]);
        check_gradients(&[x, w, b], 1e-6, |g, v| {
            let y = g.depthwise_conv2d(v[0], v[1], v[2], 1);
            g.sum(g.mul(y, y))
        });
    }

    #[test]
    fn elementwise_and_layout_gradients() {
        let mut r = rng(4);
        let x = random_tensor(&mut r, &[2, 3, 4, 4]);
        let s = random_tensor(&mut r, &[2, 3]);
        let y = random_tensor(&mut r, &[2, 2, 4, 4]);
        check_gradients(&[x, s, y], 1e-6, |g, v| {
            let a = g.gelu(v[0]);
            let a = g.scale_channels(a, v[1]);
            let c = g.concat_channels(&[a, v[2]]);
            let c = g.resize_nearest(c, 6, 3);
            let c = g.slice_channels(c, 1, 3);
            let m = g.spatial_mean(c);
            let m = g.sigmoid(m);
            let rows = g.to_rows(c);
            let rows = g.gather_rows(rows, &[0, 5, 5, 17]);
            let t = g.add(g.sum(g.mul(rows, rows)), g.sum(m));
            g.scale(t, 0.5)
        });
    }

    #[test]
    fn attention_primitive_gradients() {
        let mut r = rng(5);
        let q = random_tensor(&mut r, &[2, 3, 5]);
        let k = random_tensor(&mut r, &[2, 3, 5]);
        let v = random_tensor(&mut r, &[2, 3, 5]);
        let t = random_tensor(&mut r, &[2]);
        check_gradients(&[q, k, v, t], 1e-6, |g, x| {
            let qn = g.l2_normalize_last(x[0], 1e-6);
            let kn = g.l2_normalize_last(x[1], 1e-6);
            let s = g.bmm(qn, kn, true);
            let s = g.scale_per_head(s, x[3]);
            let a = g.softmax_last(s);
            let o = g.bmm(a, x[2], false);
            g.sum(g.mul(o, o))
        });
    }

    #[test]
    fn layer_norm_gradients() {
        let mut r = rng(6);
        let x = random_tensor(&mut r, &[2, 4, 3, 2]);
        let w = random_tensor(&mut r, &[4]);
        let b = random_tensor(&mut r, &[4]);
        let o = random_tensor(&mut r, &[2, 4, 3, 2]);
        check_gradients(&[x, w, b, o], 1e-6, |g, v| {
            let y = g.layer_norm_channels(v[0], v[1], v[2], 1e-5);
            g.sum(g.mul(y, v[3]))
        });
    }

    #[test]
    fn losses_gradients() {
        let mut r = rng(7);
        let a = random_tensor(&mut r, &[3, 4]);
        let b = random_tensor(&mut r, &[3, 4]);
        check_gradients(&[a, b], 1e-6, |g, v| {
            let l1 = g.mae(v[0], v[1]);
            let l2 = g.mse(v[0], v[1]);
            g.weighted_sum(&[(l1, 1.0), (l2, 0.3)])
        });
    }
}
