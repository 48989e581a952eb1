//! Training losses and evaluation metrics.
//!
//! The photometric term mixes mean absolute error with structural
//! dissimilarity, the diffuse branch is supervised against the same ground
//! truth with a small weight, and predicted normals are pulled toward the
//! per-Gaussian pseudo-normals by cosine similarity.

use crate::autodiff::{Tape, TensorError, Value};
use crate::tensor::Tensor;

/// Loss weights. `lambda_dssim` balances L1 against D-SSIM inside both
/// photometric terms.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda_dssim: f32,
    pub lambda_diffuse: f32,
    pub lambda_normal: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_dssim: 0.2,
            lambda_diffuse: 0.05,
            lambda_normal: 0.001,
        }
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f32 = 1.5;
const SSIM_C1: f32 = 0.01 * 0.01;
const SSIM_C2: f32 = 0.03 * 0.03;

/// Mean absolute difference.
pub fn l1(tape: &mut Tape, a: Value, b: Value) -> Result<Value, TensorError> {
    if tape.shape(a) != tape.shape(b) {
        return Err(TensorError::ShapeMismatch {
            op: "l1",
            lhs: tape.shape(a).to_vec(),
            rhs: tape.shape(b).to_vec(),
        });
    }
    let d = tape.sub(a, b)?;
    let d = tape.abs(d);
    tape.mean(d)
}

fn gaussian_window() -> Tensor {
    let half = (SSIM_WINDOW / 2) as f32;
    let mut w1 = [0.0f32; SSIM_WINDOW];
    let mut sum = 0.0;
    for (i, w) in w1.iter_mut().enumerate() {
        *w = (-(i as f32 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *w;
    }
    w1.iter_mut().for_each(|w| *w /= sum);
    let mut w2 = vec![0.0f32; SSIM_WINDOW * SSIM_WINDOW];
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            w2[i * SSIM_WINDOW + j] = w1[i] * w1[j];
        }
    }
    Tensor::new(&[1, 1, SSIM_WINDOW, SSIM_WINDOW], w2).unwrap()
}

/// Mean structural similarity over `[C, H, W]` images with an 11x11
/// Gaussian window (sigma 1.5), computed per channel then averaged.
pub fn ssim(tape: &mut Tape, a: Value, b: Value) -> Result<Value, TensorError> {
    let shape = tape.shape(a).to_vec();
    if shape != tape.shape(b) || shape.len() != 3 {
        return Err(TensorError::ShapeMismatch {
            op: "ssim",
            lhs: shape,
            rhs: tape.shape(b).to_vec(),
        });
    }
    let channels = shape[0];
    let window = tape.constant(gaussian_window());
    let pad = SSIM_WINDOW / 2;
    let mut per_channel = Vec::with_capacity(channels);
    for c in 0..channels {
        let x = tape.slice(a, 0, c, 1)?;
        let y = tape.slice(b, 0, c, 1)?;
        let mu_x = tape.conv2d(x, window, 1, pad)?;
        let mu_y = tape.conv2d(y, window, 1, pad)?;
        let mu_xx = tape.mul(mu_x, mu_x)?;
        let mu_yy = tape.mul(mu_y, mu_y)?;
        let mu_xy = tape.mul(mu_x, mu_y)?;
        let xx = tape.mul(x, x)?;
        let yy = tape.mul(y, y)?;
        let xy = tape.mul(x, y)?;
        let exx = tape.conv2d(xx, window, 1, pad)?;
        let eyy = tape.conv2d(yy, window, 1, pad)?;
        let exy = tape.conv2d(xy, window, 1, pad)?;
        let var_x = tape.sub(exx, mu_xx)?;
        let var_y = tape.sub(eyy, mu_yy)?;
        let cov = tape.sub(exy, mu_xy)?;

        let two_mu = tape.scale(mu_xy, 2.0);
        let num1 = tape.add_scalar(two_mu, SSIM_C1);
        let two_cov = tape.scale(cov, 2.0);
        let num2 = tape.add_scalar(two_cov, SSIM_C2);
        let num = tape.mul(num1, num2)?;
        let mu_sum = tape.add(mu_xx, mu_yy)?;
        let den1 = tape.add_scalar(mu_sum, SSIM_C1);
        let var_sum = tape.add(var_x, var_y)?;
        let den2 = tape.add_scalar(var_sum, SSIM_C2);
        let den = tape.mul(den1, den2)?;
        let map = tape.div(num, den)?;
        per_channel.push(tape.mean(map)?);
    }
    let stacked = tape.concat(&per_channel, 0)?;
    tape.mean(stacked)
}

/// Structural dissimilarity `(1 - ssim) / 2`.
pub fn dssim(tape: &mut Tape, a: Value, b: Value) -> Result<Value, TensorError> {
    let s = ssim(tape, a, b)?;
    let neg = tape.neg(s);
    let one_minus = tape.add_scalar(neg, 1.0);
    Ok(tape.scale(one_minus, 0.5))
}

/// Mean cosine-distance `1 - (n . p) / (|n| |p|)` over rows of `[M, 3]`.
pub fn normal_loss(tape: &mut Tape, normals: Value, pseudo: Value) -> Result<Value, TensorError> {
    if tape.shape(normals) != tape.shape(pseudo) {
        return Err(TensorError::ShapeMismatch {
            op: "normal_loss",
            lhs: tape.shape(normals).to_vec(),
            rhs: tape.shape(pseudo).to_vec(),
        });
    }
    let prod = tape.mul(normals, pseudo)?;
    let dot = tape.sum_axis(prod, 1, false)?;
    let nn = tape.mul(normals, normals)?;
    let nn = tape.sum_axis(nn, 1, false)?;
    let nn = tape.sqrt(nn);
    let pp = tape.mul(pseudo, pseudo)?;
    let pp = tape.sum_axis(pp, 1, false)?;
    let pp = tape.sqrt(pp);
    let denom = tape.mul(nn, pp)?;
    let cos = tape.div(dot, denom)?;
    let mean_cos = tape.mean(cos)?;
    let neg = tape.neg(mean_cos);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Photometric term `(1 - lambda) L1 + lambda D-SSIM`.
pub fn photometric(
    tape: &mut Tape,
    pred: Value,
    gt: Value,
    lambda_dssim: f32,
) -> Result<Value, TensorError> {
    let l1_term = l1(tape, pred, gt)?;
    let l1_term = tape.scale(l1_term, 1.0 - lambda_dssim);
    if lambda_dssim == 0.0 {
        return Ok(l1_term);
    }
    let ds = dssim(tape, pred, gt)?;
    let ds = tape.scale(ds, lambda_dssim);
    tape.add(l1_term, ds)
}

/// Full training objective: photometric render loss, weighted photometric
/// diffuse loss, and (when normals are supervised) the cosine normal term.
pub fn total_loss(
    tape: &mut Tape,
    render: Value,
    diffuse: Value,
    gt: Value,
    normals: Option<(Value, Value)>,
    w: &LossWeights,
) -> Result<Value, TensorError> {
    let render_term = photometric(tape, render, gt, w.lambda_dssim)?;
    let diffuse_term = photometric(tape, diffuse, gt, w.lambda_dssim)?;
    let diffuse_term = tape.scale(diffuse_term, w.lambda_diffuse);
    let mut loss = tape.add(render_term, diffuse_term)?;
    if let Some((n, pseudo)) = normals {
        let nl = normal_loss(tape, n, pseudo)?;
        let nl = tape.scale(nl, w.lambda_normal);
        loss = tape.add(loss, nl)?;
    }
    Ok(loss)
}

/// Peak signal-to-noise ratio in dB for images in [0, 1]. Identical images
/// report the 100 dB cap instead of infinity.
pub fn psnr(a: &Tensor, b: &Tensor) -> f32 {
    assert_eq!(a.shape(), b.shape(), "psnr shape mismatch");
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum::<f64>()
        / a.numel() as f64;
    if mse <= 0.0 {
        return 100.0;
    }
    (10.0 * (1.0 / mse).log10()).min(100.0) as f32
}

/// Non-tape SSIM convenience for evaluation.
pub fn ssim_metric(a: &Tensor, b: &Tensor) -> f32 {
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let bv = tape.constant(b.clone());
    let s = ssim(&mut tape, av, bv).expect("metric images share a shape");
    tape.value(s).item()
}
