//! Differentiable tensor ops recorded on the tape.

use rayon::prelude::*;

use super::{GradCtx, Tape, TensorError, Value};
use crate::tensor::{broadcast_shape, BroadcastPairs, Tensor};

fn binary_forward(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f32, f32) -> f32,
) -> Result<Tensor, TensorError> {
    let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or(TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })?;
    let numel: usize = out_shape.iter().product();
    let data = if a.shape() == b.shape() {
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
    } else {
        let mut data = Vec::with_capacity(numel);
        for (ia, ib) in BroadcastPairs::new(a.shape(), b.shape(), &out_shape) {
            data.push(f(a.data()[ia], b.data()[ib]));
        }
        data
    };
    Tensor::new(&out_shape, data)
}

impl Tape {
    fn unary(
        &mut self,
        v: Value,
        forward: impl Fn(f32) -> f32,
        // (input, output, grad_out) -> grad_in, elementwise
        backward: impl Fn(f32, f32, f32) -> f32 + 'static,
    ) -> Value {
        let out = self.value(v).map(&forward);
        self.push(
            &[v],
            out,
            Some(Box::new(move |ctx: &GradCtx| {
                let x = ctx.inputs[0].data();
                let y = ctx.output.data();
                let g = ctx.grad.data();
                let data = (0..x.len()).map(|i| backward(x[i], y[i], g[i])).collect();
                vec![Some(Tensor::new(ctx.inputs[0].shape(), data).unwrap())]
            })),
        )
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Value,
        b: Value,
        forward: impl Fn(f32, f32) -> f32,
        // (x, y, grad_out) -> (grad_x, grad_y), elementwise in broadcast space
        backward: impl Fn(f32, f32, f32) -> (f32, f32) + 'static,
    ) -> Result<Value, TensorError> {
        let out = binary_forward(op, self.value(a), self.value(b), forward)?;
        Ok(self.push(
            &[a, b],
            out,
            Some(Box::new(move |ctx: &GradCtx| {
                let (a_t, b_t) = (ctx.inputs[0], ctx.inputs[1]);
                let g = ctx.grad.data();
                if a_t.shape() == b_t.shape() {
                    let n = g.len();
                    let mut ga = vec![0.0f32; n];
                    let mut gb = vec![0.0f32; n];
                    for i in 0..n {
                        let (da, db) = backward(a_t.data()[i], b_t.data()[i], g[i]);
                        ga[i] = da;
                        gb[i] = db;
                    }
                    return vec![
                        Some(Tensor::new(a_t.shape(), ga).unwrap()),
                        Some(Tensor::new(b_t.shape(), gb).unwrap()),
                    ];
                }
                // Broadcast case: accumulate straight into the reduced
                // operand gradients while walking the output.
                let mut ga = vec![0.0f32; a_t.numel()];
                let mut gb = vec![0.0f32; b_t.numel()];
                let pairs = BroadcastPairs::new(a_t.shape(), b_t.shape(), ctx.output.shape());
                for (flat, (ia, ib)) in pairs.enumerate() {
                    let (da, db) = backward(a_t.data()[ia], b_t.data()[ib], g[flat]);
                    ga[ia] += da;
                    gb[ib] += db;
                }
                vec![
                    Some(Tensor::new(a_t.shape(), ga).unwrap()),
                    Some(Tensor::new(b_t.shape(), gb).unwrap()),
                ]
            })),
        ))
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value, TensorError> {
        self.binary("add", a, b, |x, y| x + y, |_, _, g| (g, g))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, |_, _, g| (g, -g))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, |x, y, g| (g * y, g * x))
    }

    pub fn div(&mut self, a: Value, b: Value) -> Result<Value, TensorError> {
        self.binary(
            "div",
            a,
            b,
            |x, y| x / y,
            |x, y, g| (g / y, -g * x / (y * y)),
        )
    }

    pub fn neg(&mut self, v: Value) -> Value {
        self.unary(v, |x| -x, |_, _, g| -g)
    }

    pub fn abs(&mut self, v: Value) -> Value {
        self.unary(
            v,
            f32::abs,
            |x, _, g| {
                if x > 0.0 {
                    g
                } else if x < 0.0 {
                    -g
                } else {
                    0.0
                }
            },
        )
    }

    pub fn exp(&mut self, v: Value) -> Value {
        self.unary(v, f32::exp, |_, y, g| g * y)
    }

    pub fn log(&mut self, v: Value) -> Value {
        self.unary(v, f32::ln, |x, _, g| g / x)
    }

    pub fn sqrt(&mut self, v: Value) -> Value {
        self.unary(v, f32::sqrt, |_, y, g| g * 0.5 / y)
    }

    pub fn sigmoid(&mut self, v: Value) -> Value {
        self.unary(
            v,
            |x| 1.0 / (1.0 + (-x).exp()),
            |_, y, g| g * y * (1.0 - y),
        )
    }

    /// ELU with alpha = 1.
    pub fn elu(&mut self, v: Value) -> Value {
        self.unary(
            v,
            |x| if x > 0.0 { x } else { x.exp() - 1.0 },
            |x, y, g| if x > 0.0 { g } else { g * (y + 1.0) },
        )
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, v: Value, c: f32) -> Value {
        self.unary(v, move |x| x * c, move |_, _, g| g * c)
    }

    /// Add a compile-time constant.
    pub fn add_scalar(&mut self, v: Value, c: f32) -> Value {
        self.unary(v, move |x| x + c, |_, _, g| g)
    }

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value, TensorError> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.rank() != 2 || bt.rank() != 2 || at.shape()[1] != bt.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: at.shape().to_vec(),
                rhs: bt.shape().to_vec(),
            });
        }
        let (m, k, n) = (at.shape()[0], at.shape()[1], bt.shape()[1]);
        let out = Tensor::new(&[m, n], matmul_nn(at.data(), bt.data(), m, k, n))?;
        Ok(self.push(
            &[a, b],
            out,
            Some(Box::new(move |ctx: &GradCtx| {
                let g = ctx.grad.data();
                let a_d = ctx.inputs[0].data();
                let b_d = ctx.inputs[1].data();
                // dA = G  B^T, dB = A^T  G
                let ga = matmul_nt(g, b_d, m, n, k);
                let gb = matmul_tn(a_d, g, m, k, n);
                vec![
                    Some(Tensor::new(&[m, k], ga).unwrap()),
                    Some(Tensor::new(&[k, n], gb).unwrap()),
                ]
            })),
        ))
    }

    /// Sum of all elements, scalar result.
    pub fn sum(&mut self, v: Value) -> Result<Value, TensorError> {
        let t = self.value(v);
        let s = t.data().iter().map(|&x| x as f64).sum::<f64>() as f32;
        let shape = t.shape().to_vec();
        Ok(self.push(
            &[v],
            Tensor::scalar(s),
            Some(Box::new(move |ctx: &GradCtx| {
                let g = ctx.grad.item();
                vec![Some(Tensor::full(&shape, g))]
            })),
        ))
    }

    /// Mean of all elements, scalar result.
    pub fn mean(&mut self, v: Value) -> Result<Value, TensorError> {
        let n = self.value(v).numel() as f32;
        let s = self.sum(v)?;
        Ok(self.scale(s, 1.0 / n))
    }

    /// Sum along one axis. With `keepdims` the axis stays as size 1.
    pub fn sum_axis(&mut self, v: Value, axis: usize, keepdims: bool) -> Result<Value, TensorError> {
        let t = self.value(v);
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange { axis, shape });
        }
        let dim = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut acc = vec![0.0f64; outer * inner];
        for o in 0..outer {
            for i_ax in 0..dim {
                let base = (o * dim + i_ax) * inner;
                let dst = o * inner;
                for i_in in 0..inner {
                    acc[dst + i_in] += t.data()[base + i_in] as f64;
                }
            }
        }
        let data: Vec<f32> = acc.into_iter().map(|v| v as f32).collect();
        let mut out_shape: Vec<usize> = shape.clone();
        if keepdims {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
            if out_shape.is_empty() {
                out_shape.push(1);
            }
        }
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            &[v],
            out,
            Some(Box::new(move |ctx: &GradCtx| {
                let g = ctx.grad.data();
                let mut gi = vec![0.0f32; outer * dim * inner];
                for o in 0..outer {
                    for i_ax in 0..dim {
                        let base = (o * dim + i_ax) * inner;
                        let src = o * inner;
                        for i_in in 0..inner {
                            gi[base + i_in] = g[src + i_in];
                        }
                    }
                }
                vec![Some(Tensor::new(&shape, gi).unwrap())]
            })),
        ))
    }

    /// Contiguous range along one axis.
    pub fn slice(
        &mut self,
        v: Value,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Value, TensorError> {
        let t = self.value(v);
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange { axis, shape });
        }
        if start + len > shape[axis] || len == 0 {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!(
                    "range {start}..{} out of bounds for axis {axis} of {shape:?}",
                    start + len
                ),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            &[v],
            out,
            Some(Box::new(move |ctx: &GradCtx| {
                let g = ctx.grad.data();
                let mut gi = vec![0.0f32; outer * dim * inner];
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    let src = o * len * inner;
                    gi[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![Some(Tensor::new(&shape, gi).unwrap())]
            })),
        ))
    }

    /// Concatenate along one axis. All other dims must agree.
    pub fn concat(&mut self, parts: &[Value], axis: usize) -> Result<Value, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: "no inputs".into(),
            });
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(TensorError::AxisOutOfRange { axis, shape: first });
        }
        let mut lens = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (&a, &b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            lens.push(s[axis]);
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut data = vec![0.0f32; outer * total * inner];
        let mut off = 0;
        for (&p, &len) in parts.iter().zip(&lens) {
            let src = self.value(p).data();
            for o in 0..outer {
                let dst = (o * total + off) * inner;
                let s = o * len * inner;
                data[dst..dst + len * inner].copy_from_slice(&src[s..s + len * inner]);
            }
            off += len;
        }
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            parts,
            out,
            Some(Box::new(move |ctx: &GradCtx| {
                let g = ctx.grad.data();
                let mut grads = Vec::with_capacity(lens.len());
                let mut off = 0;
                for (idx, &len) in lens.iter().enumerate() {
                    let shape = ctx.inputs[idx].shape();
                    let mut gi = vec![0.0f32; outer * len * inner];
                    for o in 0..outer {
                        let src = (o * total + off) * inner;
                        let dst = o * len * inner;
                        gi[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                    grads.push(Some(Tensor::new(shape, gi).unwrap()));
                    off += len;
                }
                grads
            })),
        ))
    }

    /// Gather rows (axis 0) by index; duplicates allowed. Backward
    /// scatter-adds into the source rows.
    pub fn index_select(&mut self, v: Value, indices: &[usize]) -> Result<Value, TensorError> {
        let t = self.value(v);
        let shape = t.shape().to_vec();
        let rows = shape[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Invalid {
                op: "index_select",
                msg: format!("row {bad} out of range ({rows} rows)"),
            });
        }
        if indices.is_empty() {
            return Err(TensorError::Invalid {
                op: "index_select",
                msg: "empty index list".into(),
            });
        }
        let inner: usize = shape[1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            data.extend_from_slice(&t.data()[i * inner..(i + 1) * inner]);
        }
        let idx: Vec<usize> = indices.to_vec();
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            &[v],
            out,
            Some(Box::new(move |ctx: &GradCtx| {
                let g = ctx.grad.data();
                let mut gi = vec![0.0f32; rows * inner];
                for (r, &i) in idx.iter().enumerate() {
                    let src = r * inner;
                    let dst = i * inner;
                    for c in 0..inner {
                        gi[dst + c] += g[src + c];
                    }
                }
                vec![Some(Tensor::new(&shape, gi).unwrap())]
            })),
        ))
    }

    /// View with a new shape (same element count).
    pub fn reshape(&mut self, v: Value, shape: &[usize]) -> Result<Value, TensorError> {
        let out = self.value(v).reshape(shape)?;
        let in_shape = self.value(v).shape().to_vec();
        Ok(self.push(
            &[v],
            out,
            Some(Box::new(move |ctx: &GradCtx| {
                vec![Some(ctx.grad.reshape(&in_shape).unwrap())]
            })),
        ))
    }

    /// Normalize each row (last axis) to unit length. Rows with norm below
    /// 1e-12 are replaced by `fallback` and receive zero gradient.
    pub fn normalize_rows(&mut self, v: Value, fallback: &[f32]) -> Result<Value, TensorError> {
        let t = self.value(v);
        let d = *t.shape().last().unwrap();
        if fallback.len() != d {
            return Err(TensorError::ShapeMismatch {
                op: "normalize_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![fallback.len()],
            });
        }
        let rows = t.numel() / d;
        let mut data = vec![0.0f32; t.numel()];
        let mut norms = vec![0.0f32; rows];
        for r in 0..rows {
            let x = &t.data()[r * d..(r + 1) * d];
            let n = x.iter().map(|v| v * v).sum::<f32>().sqrt();
            norms[r] = n;
            if n < 1e-12 {
                data[r * d..(r + 1) * d].copy_from_slice(fallback);
            } else {
                for c in 0..d {
                    data[r * d + c] = x[c] / n;
                }
            }
        }
        let out = Tensor::new(t.shape(), data)?;
        Ok(self.push(
            &[v],
            out,
            Some(Box::new(move |ctx: &GradCtx| {
                let y = ctx.output.data();
                let g = ctx.grad.data();
                let mut gi = vec![0.0f32; y.len()];
                for r in 0..rows {
                    let n = norms[r];
                    if n < 1e-12 {
                        continue;
                    }
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..d {
                        gi[r * d + c] = (gr[c] - yr[c] * dot) / n;
                    }
                }
                vec![Some(Tensor::new(ctx.inputs[0].shape(), gi).unwrap())]
            })),
        ))
    }

    /// Layer normalization across one axis (no affine part; fold learnable
    /// gain/bias in with `mul`/`add`).
    pub fn layer_norm(&mut self, v: Value, axis: usize, eps: f32) -> Result<Value, TensorError> {
        let t = self.value(v);
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange { axis, shape });
        }
        let dim = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![0.0f32; t.numel()];
        let mut inv_std = vec![0.0f32; outer * inner];
        let x = t.data();
        for o in 0..outer {
            for i_in in 0..inner {
                let idx = |i_ax: usize| (o * dim + i_ax) * inner + i_in;
                let mut mean = 0.0f64;
                for i_ax in 0..dim {
                    mean += x[idx(i_ax)] as f64;
                }
                let mean = (mean / dim as f64) as f32;
                let mut var = 0.0f64;
                for i_ax in 0..dim {
                    let c = (x[idx(i_ax)] - mean) as f64;
                    var += c * c;
                }
                let var = (var / dim as f64) as f32;
                let istd = 1.0 / (var + eps).sqrt();
                inv_std[o * inner + i_in] = istd;
                for i_ax in 0..dim {
                    data[idx(i_ax)] = (x[idx(i_ax)] - mean) * istd;
                }
            }
        }
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(
            &[v],
            out,
            Some(Box::new(move |ctx: &GradCtx| {
                let y = ctx.output.data();
                let g = ctx.grad.data();
                let mut gi = vec![0.0f32; y.len()];
                for o in 0..outer {
                    for i_in in 0..inner {
                        let idx = |i_ax: usize| (o * dim + i_ax) * inner + i_in;
                        let istd = inv_std[o * inner + i_in];
                        let mut g_mean = 0.0f64;
                        let mut gy_mean = 0.0f64;
                        for i_ax in 0..dim {
                            g_mean += g[idx(i_ax)] as f64;
                            gy_mean += (g[idx(i_ax)] * y[idx(i_ax)]) as f64;
                        }
                        let g_mean = (g_mean / dim as f64) as f32;
                        let gy_mean = (gy_mean / dim as f64) as f32;
                        for i_ax in 0..dim {
                            let i = idx(i_ax);
                            gi[i] = istd * (g[i] - g_mean - y[i] * gy_mean);
                        }
                    }
                }
                vec![Some(Tensor::new(ctx.inputs[0].shape(), gi).unwrap())]
            })),
        ))
    }
}

const PAR_MATMUL_WORK: usize = 1 << 18;

// All three kernels accumulate in f64: long f32 accumulation chains other-
// wise dominate the error of both training steps and the finite-difference
// suites. Storage stays f32.

/// C = A  B with A `[m,k]`, B `[k,n]`, all row-major.
pub(crate) fn matmul_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    let row = |ci: &mut [f32], i: usize| {
        let mut acc = vec![0.0f64; n];
        for kk in 0..k {
            let aik = a[i * k + kk] as f64;
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (cj, bj) in acc.iter_mut().zip(brow) {
                *cj += aik * *bj as f64;
            }
        }
        for (cj, v) in ci.iter_mut().zip(&acc) {
            *cj = *v as f32;
        }
    };
    if m * n * k >= PAR_MATMUL_WORK && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, ci)| row(ci, i));
    } else {
        for (i, ci) in c.chunks_mut(n).enumerate() {
            row(ci, i);
        }
    }
    c
}

/// Dot product with eight independent f64 accumulators; breaks the FMA
/// latency chain so the loop vectorizes.
#[inline]
pub(crate) fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = [0.0f64; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let i = c * 8;
        for lane in 0..8 {
            acc[lane] += a[i + lane] as f64 * b[i + lane] as f64;
        }
    }
    let mut tail = 0.0f64;
    for i in chunks * 8..a.len() {
        tail += a[i] as f64 * b[i] as f64;
    }
    (acc[0] + acc[4]) + (acc[1] + acc[5]) + (acc[2] + acc[6]) + (acc[3] + acc[7]) + tail
}

/// C = A  B^T with A `[m,n]`, B `[k,n]` (row dots).
pub(crate) fn matmul_nt(a: &[f32], b: &[f32], m: usize, n: usize, k: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * k];
    let row = |ci: &mut [f32], i: usize| {
        let arow = &a[i * n..(i + 1) * n];
        for (kk, cj) in ci.iter_mut().enumerate() {
            *cj = dot_f64(arow, &b[kk * n..(kk + 1) * n]) as f32;
        }
    };
    if m * n * k >= PAR_MATMUL_WORK && m > 1 {
        c.par_chunks_mut(k).enumerate().for_each(|(i, ci)| row(ci, i));
    } else {
        for (i, ci) in c.chunks_mut(k).enumerate() {
            row(ci, i);
        }
    }
    c
}

/// C = A^T  B with A `[m,k]`, B `[m,n]`. Row-by-row so the f64
/// accumulator stays cache-resident.
pub(crate) fn matmul_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; k * n];
    let mut acc = vec![0.0f64; n];
    for (kk, crow) in c.chunks_mut(n).enumerate() {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..m {
            let aik = a[i * k + kk] as f64;
            if aik == 0.0 {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            for (cj, bj) in acc.iter_mut().zip(brow) {
                *cj += aik * *bj as f64;
            }
        }
        for (cj, v) in crow.iter_mut().zip(&acc) {
            *cj = *v as f32;
        }
    }
    c
}
