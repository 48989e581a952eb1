//! Spatial ops on `[C, H, W]` tensors: convolution (im2col + matmul),
//! transposed convolution, pooling, nearest-neighbor upsampling and
//! reflection padding.

use super::ops::{matmul_nn, matmul_nt, matmul_tn};
use super::{GradCtx, Tape, TensorError, Value};
use crate::tensor::Tensor;

fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    (input + 2 * pad).checked_sub(kernel).map(|v| v / stride + 1)
}

/// Lower `[C,H,W]` into the `[C*kh*kw, Ho*Wo]` patch matrix.
fn im2col(
    x: &[f32],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
) -> Vec<f32> {
    let mut col = vec![0.0f32; c * kh * kw * ho * wo];
    let plane = ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * plane;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[row + oy * wo + ox] = x[src_row + ix as usize];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add the patch matrix back into `[C,H,W]`.
fn col2im(
    col: &[f32],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
) -> Vec<f32> {
    let mut x = vec![0.0f32; c * h * w];
    let plane = ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * plane;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[dst_row + ix as usize] += col[row + oy * wo + ox];
                    }
                }
            }
        }
    }
    x
}

impl Tape {
    /// 2-D convolution. `x` is `[Cin,H,W]`, `weight` is `[Cout,Cin,kh,kw]`,
    /// zero padding.
    pub fn conv2d(
        &mut self,
        x: Value,
        weight: Value,
        stride: usize,
        pad: usize,
    ) -> Result<Value, TensorError> {
        let (xt, wt) = (self.value(x), self.value(weight));
        if xt.rank() != 3 || wt.rank() != 4 || xt.shape()[0] != wt.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: xt.shape().to_vec(),
                rhs: wt.shape().to_vec(),
            });
        }
        let (cin, h, w) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        let (cout, kh, kw) = (wt.shape()[0], wt.shape()[2], wt.shape()[3]);
        let (ho, wo) = match (
            conv_out_dim(h, kh, stride, pad),
            conv_out_dim(w, kw, stride, pad),
        ) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => {
                return Err(TensorError::Invalid {
                    op: "conv2d",
                    msg: format!(
                        "kernel {kh}x{kw} does not fit input {h}x{w} with pad {pad}"
                    ),
                })
            }
        };
        let k_total = cin * kh * kw;
        let col = std::sync::Arc::new(im2col(
            xt.data(),
            (cin, h, w),
            (kh, kw),
            stride,
            pad,
            (ho, wo),
        ));
        let out_data = matmul_nn(wt.data(), &col, cout, k_total, ho * wo);
        let out = Tensor::new(&[cout, ho, wo], out_data)?;
        // The patch matrix is kept for the backward pass; recomputing it
        // costs more than the tape memory at these sizes.
        Ok(self.push(
            &[x, weight],
            out,
            Some(Box::new(move |ctx: &GradCtx| {
                let wd = ctx.inputs[1].data();
                let g = ctx.grad.data();
                let gw = matmul_nt(g, &col, cout, ho * wo, k_total);
                let gcol = matmul_tn(wd, g, cout, k_total, ho * wo);
                let gx = col2im(&gcol, (cin, h, w), (kh, kw), stride, pad, (ho, wo));
                vec![
                    Some(Tensor::new(&[cin, h, w], gx).unwrap()),
                    Some(Tensor::new(&[cout, cin, kh, kw], gw).unwrap()),
                ]
            })),
        ))
    }

    /// Transposed 2-D convolution (adjoint of `conv2d` in its input).
    /// `x` is `[Cin,H,W]`, `weight` is `[Cin,Cout,kh,kw]`; output spatial
    /// size is `(H-1)*stride + kh - 2*pad`.
    pub fn conv_transpose2d(
        &mut self,
        x: Value,
        weight: Value,
        stride: usize,
        pad: usize,
    ) -> Result<Value, TensorError> {
        let (xt, wt) = (self.value(x), self.value(weight));
        if xt.rank() != 3 || wt.rank() != 4 || xt.shape()[0] != wt.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: xt.shape().to_vec(),
                rhs: wt.shape().to_vec(),
            });
        }
        let (cin, h, w) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        let (cout, kh, kw) = (wt.shape()[1], wt.shape()[2], wt.shape()[3]);
        let ho = (h - 1) * stride + kh;
        let wo = (w - 1) * stride + kw;
        if ho <= 2 * pad || wo <= 2 * pad {
            return Err(TensorError::Invalid {
                op: "conv_transpose2d",
                msg: format!("pad {pad} swallows the whole {ho}x{wo} output"),
            });
        }
        let (ho, wo) = (ho - 2 * pad, wo - 2 * pad);
        let forward = move |xd: &[f32], wd: &[f32]| {
            let mut out = vec![0.0f32; cout * ho * wo];
            for ci in 0..cin {
                for iy in 0..h {
                    for ix in 0..w {
                        let v = xd[(ci * h + iy) * w + ix];
                        if v == 0.0 {
                            continue;
                        }
                        for co in 0..cout {
                            let w_base = ((ci * cout + co) * kh) * kw;
                            for ki in 0..kh {
                                let oy = (iy * stride + ki) as isize - pad as isize;
                                if oy < 0 || oy >= ho as isize {
                                    continue;
                                }
                                for kj in 0..kw {
                                    let ox = (ix * stride + kj) as isize - pad as isize;
                                    if ox < 0 || ox >= wo as isize {
                                        continue;
                                    }
                                    out[(co * ho + oy as usize) * wo + ox as usize] +=
                                        v * wd[w_base + ki * kw + kj];
                                }
                            }
                        }
                    }
                }
            }
            out
        };
        let out = Tensor::new(&[cout, ho, wo], forward(xt.data(), wt.data()))?;
        Ok(self.push(
            &[x, weight],
            out,
            Some(Box::new(move |ctx: &GradCtx| {
                let xd = ctx.inputs[0].data();
                let wd = ctx.inputs[1].data();
                let g = ctx.grad.data();
                let mut gx = vec![0.0f32; cin * h * w];
                let mut gw = vec![0.0f32; cin * cout * kh * kw];
                for ci in 0..cin {
                    for iy in 0..h {
                        for ix in 0..w {
                            let xi = (ci * h + iy) * w + ix;
                            let mut acc = 0.0f32;
                            for co in 0..cout {
                                let w_base = ((ci * cout + co) * kh) * kw;
                                for ki in 0..kh {
                                    let oy = (iy * stride + ki) as isize - pad as isize;
                                    if oy < 0 || oy >= ho as isize {
                                        continue;
                                    }
                                    for kj in 0..kw {
                                        let ox = (ix * stride + kj) as isize - pad as isize;
                                        if ox < 0 || ox >= wo as isize {
                                            continue;
                                        }
                                        let go = g[(co * ho + oy as usize) * wo + ox as usize];
                                        acc += go * wd[w_base + ki * kw + kj];
                                        gw[w_base + ki * kw + kj] += go * xd[xi];
                                    }
                                }
                            }
                            gx[xi] = acc;
                        }
                    }
                }
                vec![
                    Some(Tensor::new(&[cin, h, w], gx).unwrap()),
                    Some(Tensor::new(&[cin, cout, kh, kw], gw).unwrap()),
                ]
            })),
        ))
    }

    /// Average pooling over full `k x k` windows.
    pub fn avg_pool2d(&mut self, x: Value, k: usize, stride: usize) -> Result<Value, TensorError> {
        let xt = self.value(x);
        if xt.rank() != 3 {
            return Err(TensorError::Invalid {
                op: "avg_pool2d",
                msg: format!("expected [C,H,W], got {:?}", xt.shape()),
            });
        }
        let (c, h, w) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        if k > h || k > w {
            return Err(TensorError::Invalid {
                op: "avg_pool2d",
                msg: format!("window {k} larger than input {h}x{w}"),
            });
        }
        let ho = (h - k) / stride + 1;
        let wo = (w - k) / stride + 1;
        let inv = 1.0 / (k * k) as f32;
        let xd = xt.data();
        let mut data = vec![0.0f32; c * ho * wo];
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0f32;
                    for ki in 0..k {
                        for kj in 0..k {
                            s += xd[(ci * h + oy * stride + ki) * w + ox * stride + kj];
                        }
                    }
                    data[(ci * ho + oy) * wo + ox] = s * inv;
                }
            }
        }
        let out = Tensor::new(&[c, ho, wo], data)?;
        Ok(self.push(
            &[x],
            out,
            Some(Box::new(move |ctx: &GradCtx| {
                let g = ctx.grad.data();
                let mut gx = vec![0.0f32; c * h * w];
                for ci in 0..c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = g[(ci * ho + oy) * wo + ox] * inv;
                            for ki in 0..k {
                                for kj in 0..k {
                                    gx[(ci * h + oy * stride + ki) * w + ox * stride + kj] += gv;
                                }
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(&[c, h, w], gx).unwrap())]
            })),
        ))
    }

    /// Nearest-neighbor upsampling by an integer factor.
    pub fn upsample_nearest2d(&mut self, x: Value, factor: usize) -> Result<Value, TensorError> {
        let xt = self.value(x);
        if xt.rank() != 3 || factor == 0 {
            return Err(TensorError::Invalid {
                op: "upsample_nearest2d",
                msg: format!("shape {:?}, factor {factor}", xt.shape()),
            });
        }
        let (c, h, w) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        let (ho, wo) = (h * factor, w * factor);
        let xd = xt.data();
        let mut data = vec![0.0f32; c * ho * wo];
        for ci in 0..c {
            for oy in 0..ho {
                let src = (ci * h + oy / factor) * w;
                let dst = (ci * ho + oy) * wo;
                for ox in 0..wo {
                    data[dst + ox] = xd[src + ox / factor];
                }
            }
        }
        let out = Tensor::new(&[c, ho, wo], data)?;
        Ok(self.push(
            &[x],
            out,
            Some(Box::new(move |ctx: &GradCtx| {
                let g = ctx.grad.data();
                let mut gx = vec![0.0f32; c * h * w];
                for ci in 0..c {
                    for oy in 0..ho {
                        let dst = (ci * h + oy / factor) * w;
                        let src = (ci * ho + oy) * wo;
                        for ox in 0..wo {
                            gx[dst + ox / factor] += g[src + ox];
                        }
                    }
                }
                vec![Some(Tensor::new(&[c, h, w], gx).unwrap())]
            })),
        ))
    }

    /// Reflection padding (edge pixels not repeated). Each pad amount must
    /// be smaller than the corresponding input dimension.
    pub fn pad_reflect2d(
        &mut self,
        x: Value,
        (top, bottom): (usize, usize),
        (left, right): (usize, usize),
    ) -> Result<Value, TensorError> {
        let xt = self.value(x);
        if xt.rank() != 3 {
            return Err(TensorError::Invalid {
                op: "pad_reflect2d",
                msg: format!("expected [C,H,W], got {:?}", xt.shape()),
            });
        }
        let (c, h, w) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        if top >= h || bottom >= h || left >= w || right >= w {
            return Err(TensorError::Invalid {
                op: "pad_reflect2d",
                msg: format!("pad ({top},{bottom},{left},{right}) too large for {h}x{w}"),
            });
        }
        let (ho, wo) = (h + top + bottom, w + left + right);
        let reflect = |i: isize, n: usize| -> usize {
            let mut i = i;
            if i < 0 {
                i = -i;
            }
            if i >= n as isize {
                i = 2 * (n as isize - 1) - i;
            }
            i as usize
        };
        let xd = xt.data();
        let mut data = vec![0.0f32; c * ho * wo];
        for ci in 0..c {
            for oy in 0..ho {
                let sy = reflect(oy as isize - top as isize, h);
                for ox in 0..wo {
                    let sx = reflect(ox as isize - left as isize, w);
                    data[(ci * ho + oy) * wo + ox] = xd[(ci * h + sy) * w + sx];
                }
            }
        }
        let out = Tensor::new(&[c, ho, wo], data)?;
        Ok(self.push(
            &[x],
            out,
            Some(Box::new(move |ctx: &GradCtx| {
                let g = ctx.grad.data();
                let mut gx = vec![0.0f32; c * h * w];
                for ci in 0..c {
                    for oy in 0..ho {
                        let sy = reflect(oy as isize - top as isize, h);
                        for ox in 0..wo {
                            let sx = reflect(ox as isize - left as isize, w);
                            gx[(ci * h + sy) * w + sx] += g[(ci * ho + oy) * wo + ox];
                        }
                    }
                }
                vec![Some(Tensor::new(&[c, h, w], gx).unwrap())]
            })),
        ))
    }
}
