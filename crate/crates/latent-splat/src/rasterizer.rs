//! Tile-based feature splatting: forward, analytic backward, and a
//! brute-force per-pixel oracle for tests.
//!
//! Per pixel `p` the splat accumulates `f(p) = sum_i T_i a_i f_i` over the
//! front-to-back sorted Gaussians, with `a_i = opacity_i * exp(power)`
//! clamped to 0.99, skipping contributions below 1/255 and stopping once
//! transmittance would drop under 1e-4. The tile path and the oracle share
//! the per-Gaussian evaluation in [`splat_eval`], and tile coverage is wide
//! enough to include every pixel that can pass the 1/255 test, so both
//! paths produce bit-identical images.
//!
//! The backward pass replays each pixel back-to-front, reconstructing
//! transmittance from the stored final value, so memory stays O(pixels)
//! instead of O(pixels x contributors).

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use crate::autodiff::{GradCtx, Tape, TensorError, Value};
use crate::projection::ProjectedGaussian;
use crate::scene::FeatureDims;
use crate::tensor::Tensor;

pub const TILE_SIZE: usize = 16;
/// Alpha ceiling keeping the transmittance replay invertible.
pub const ALPHA_CEIL: f32 = 0.99;
/// Contributions below this opacity are skipped.
pub const ALPHA_MIN: f32 = 1.0 / 255.0;
/// Accumulation stops when transmittance would fall below this.
pub const T_MIN: f32 = 1e-4;
/// Tile coverage multiplier. exp(-TILE_SIGMA^2/2) < 1/255, so any pixel
/// outside a Gaussian's tile rectangle fails the ALPHA_MIN test anyway and
/// the tile path stays exactly equal to the oracle.
pub const TILE_SIGMA: f32 = 3.34;

#[derive(Debug, thiserror::Error)]
pub enum RasterError {
    #[error("shape mismatch: {msg}")]
    Shape { msg: String },
    #[error("backward called without a preceding forward")]
    MissingForward,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One Gaussian prepared for per-pixel evaluation.
#[derive(Clone, Copy, Debug)]
pub struct Kernel {
    pub mean: (f32, f32),
    /// Inverse covariance (conic_a, conic_b, conic_c).
    pub conic: (f32, f32, f32),
    pub opacity: f32,
    /// Coverage radius for tile assignment, pixels.
    pub tile_radius: f32,
}

fn kernel_from_cov(mean: (f32, f32), cov: (f32, f32, f32), opacity: f32) -> Option<Kernel> {
    let (a, b, c) = cov;
    let det = a * c - b * b;
    if det <= 0.0 {
        return None;
    }
    let mid = 0.5 * (a + c);
    let lambda_max = mid + (mid * mid - det).max(1e-10).sqrt();
    Some(Kernel {
        mean,
        conic: (c / det, -b / det, a / det),
        opacity,
        tile_radius: TILE_SIGMA * lambda_max.sqrt(),
    })
}

fn kernels_from_projected(projected: &[ProjectedGaussian], opacities: &[f32]) -> Vec<Kernel> {
    projected
        .iter()
        .zip(opacities)
        .filter_map(|(p, &o)| kernel_from_cov(p.mean2d, p.cov2d, o))
        .collect()
}

/// Sampled quantities for one (Gaussian, pixel) pair.
#[derive(Clone, Copy, Debug)]
pub struct SplatSample {
    pub alpha: f32,
    /// exp(power), before the opacity multiply.
    pub gexp: f32,
    pub dx: f32,
    pub dy: f32,
}

/// Evaluate one Gaussian at one pixel center. `None` when the contribution
/// is skipped. Both the tile renderer and the oracle call exactly this.
#[inline]
pub fn splat_eval(
    mean: (f32, f32),
    conic: (f32, f32, f32),
    opacity: f32,
    px: f32,
    py: f32,
) -> Option<SplatSample> {
    let dx = px - mean.0;
    let dy = py - mean.1;
    let power = -0.5 * (conic.0 * dx * dx + conic.2 * dy * dy) - conic.1 * dx * dy;
    if power > 0.0 {
        return None;
    }
    let gexp = power.exp();
    let alpha = (opacity * gexp).min(ALPHA_CEIL);
    if alpha < ALPHA_MIN {
        return None;
    }
    Some(SplatSample { alpha, gexp, dx, dy })
}

/// Splatted screen-space buffers for the full pipeline channel layout:
/// diffuse, specular, then the view-mask channel.
#[derive(Clone, Debug)]
pub struct FeatureMaps {
    pub width: usize,
    pub height: usize,
    pub dims: FeatureDims,
    /// `[diffuse + specular + 1, H, W]`.
    pub features: Tensor,
    /// `[H, W]`, final accumulated opacity `1 - T`.
    pub alpha: Tensor,
    /// Contributing Gaussians per pixel, diagnostics only.
    pub contributors: Vec<u32>,
}

impl FeatureMaps {
    pub fn diffuse(&self) -> Tensor {
        self.channel_range(0, self.dims.diffuse)
    }

    pub fn specular(&self) -> Tensor {
        self.channel_range(self.dims.diffuse, self.dims.specular)
    }

    pub fn mask(&self) -> Tensor {
        self.channel_range(self.dims.diffuse + self.dims.specular, 1)
    }

    fn channel_range(&self, start: usize, len: usize) -> Tensor {
        let hw = self.width * self.height;
        let data = self.features.data()[start * hw..(start + len) * hw].to_vec();
        Tensor::new(&[len, self.height, self.width], data).unwrap()
    }

    /// Write the buffers as one flat little-endian f32 raster plus a JSON
    /// sidecar naming shape and channels. `base` gets `.f32`/`.json`
    /// extensions appended.
    pub fn dump(&self, base: &Path) -> Result<(), RasterError> {
        let mut names: Vec<String> = Vec::new();
        for i in 0..self.dims.diffuse {
            names.push(format!("diffuse_{i}"));
        }
        for i in 0..self.dims.specular {
            names.push(format!("specular_{i}"));
        }
        names.push("mask".into());
        names.push("alpha".into());
        let mut raw = std::fs::File::create(base.with_extension("f32"))?;
        for &v in self.features.data().iter().chain(self.alpha.data()) {
            raw.write_all(&v.to_le_bytes())?;
        }
        let sidecar = serde_json::json!({
            "dtype": "f32-le",
            "shape": [names.len(), self.height, self.width],
            "channels": names,
        });
        std::fs::write(
            base.with_extension("json"),
            serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"),
        )?;
        Ok(())
    }
}

/// Raw output of one splat pass over `C` feature channels.
#[derive(Clone, Debug)]
pub struct RasterOutput {
    /// `[C, H, W]` accumulated features, zero where nothing splats.
    pub features: Tensor,
    /// `[H, W]` accumulated opacity `1 - T`.
    pub alpha: Tensor,
    /// Contributing Gaussians per pixel.
    pub contributors: Vec<u32>,
}

/// Gradients produced by the splat backward pass, rows matching the
/// forward's sorted input order.
#[derive(Clone, Debug)]
pub struct SplatGrads {
    /// `[M, C]`.
    pub features: Tensor,
    /// `[M]`, w.r.t. activated opacity.
    pub opacities: Tensor,
    /// `[M, 2]`.
    pub mean2d: Tensor,
    /// `[M, 3]`, w.r.t. the (a, b, c) covariance entries.
    pub cov2d: Tensor,
}

struct SavedState {
    kernels: Vec<Kernel>,
    features: Tensor,
    channels: usize,
    final_t: Vec<f32>,
    /// 1-based index (into the pixel's tile list) of the last contributor.
    last_contrib: Vec<u32>,
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
}

fn tile_range(center: f32, radius: f32, tiles: usize) -> (usize, usize) {
    let lo = ((center - radius) / TILE_SIZE as f32).floor().max(0.0) as usize;
    let hi = (((center + radius) / TILE_SIZE as f32).floor() as isize + 1)
        .clamp(0, tiles as isize) as usize;
    (lo.min(tiles), hi)
}

fn build_tiles(kernels: &[Kernel], width: usize, height: usize) -> (Vec<Vec<u32>>, usize) {
    let tiles_x = width.div_ceil(TILE_SIZE);
    let tiles_y = height.div_ceil(TILE_SIZE);
    let mut tiles: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (i, k) in kernels.iter().enumerate() {
        let (x0, x1) = tile_range(k.mean.0, k.tile_radius, tiles_x);
        let (y0, y1) = tile_range(k.mean.1, k.tile_radius, tiles_y);
        for ty in y0..y1 {
            for tx in x0..x1 {
                tiles[ty * tiles_x + tx].push(i as u32);
            }
        }
    }
    (tiles, tiles_x)
}

fn forward_core(
    kernels: &[Kernel],
    features: &Tensor,
    width: usize,
    height: usize,
) -> (RasterOutput, SavedState) {
    let channels = features.shape()[1];
    let hw = width * height;
    let (tiles, tiles_x) = build_tiles(kernels, width, height);
    let mut out = vec![0.0f32; channels * hw];
    let mut final_t = vec![1.0f32; hw];
    let mut last_contrib = vec![0u32; hw];
    let mut contributors = vec![0u32; hw];
    let feat = features.data();

    for (tile_idx, list) in tiles.iter().enumerate() {
        if list.is_empty() {
            continue;
        }
        let tx = tile_idx % tiles_x;
        let ty = tile_idx / tiles_x;
        let x_end = ((tx + 1) * TILE_SIZE).min(width);
        let y_end = ((ty + 1) * TILE_SIZE).min(height);
        for y in ty * TILE_SIZE..y_end {
            for x in tx * TILE_SIZE..x_end {
                let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                let pix = y * width + x;
                let mut t = 1.0f32;
                for (pos, &i) in list.iter().enumerate() {
                    let k = &kernels[i as usize];
                    let Some(s) = splat_eval(k.mean, k.conic, k.opacity, px, py) else {
                        continue;
                    };
                    let test_t = t * (1.0 - s.alpha);
                    if test_t < T_MIN {
                        break;
                    }
                    let w = t * s.alpha;
                    let row = i as usize * channels;
                    for c in 0..channels {
                        out[c * hw + pix] += w * feat[row + c];
                    }
                    t = test_t;
                    last_contrib[pix] = pos as u32 + 1;
                    contributors[pix] += 1;
                }
                final_t[pix] = t;
            }
        }
    }

    let alpha: Vec<f32> = final_t.iter().map(|&t| 1.0 - t).collect();
    (
        RasterOutput {
            features: Tensor::new(&[channels, height, width], out).unwrap(),
            alpha: Tensor::new(&[height, width], alpha).unwrap(),
            contributors,
        },
        SavedState {
            kernels: kernels.to_vec(),
            features: features.clone(),
            channels,
            final_t,
            last_contrib,
            tiles,
            tiles_x,
        },
    )
}

fn backward_core(state: &SavedState, grad: &Tensor, width: usize, height: usize) -> SplatGrads {
    let channels = state.channels;
    let hw = width * height;
    let rows = state.kernels.len();
    let g = grad.data();
    let feat = state.features.data();
    let mut g_feat = vec![0.0f32; rows * channels];
    let mut g_opac = vec![0.0f32; rows];
    let mut g_mean = vec![0.0f32; rows * 2];
    let mut g_conic = vec![0.0f32; rows * 3];
    let mut accum = vec![0.0f32; channels];

    for (tile_idx, list) in state.tiles.iter().enumerate() {
        if list.is_empty() {
            continue;
        }
        let tx = tile_idx % state.tiles_x;
        let ty = tile_idx / state.tiles_x;
        let x_end = ((tx + 1) * TILE_SIZE).min(width);
        let y_end = ((ty + 1) * TILE_SIZE).min(height);
        for y in ty * TILE_SIZE..y_end {
            for x in tx * TILE_SIZE..x_end {
                let pix = y * width + x;
                let n = state.last_contrib[pix] as usize;
                if n == 0 {
                    continue;
                }
                let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                let mut t_front = state.final_t[pix];
                accum.iter_mut().for_each(|v| *v = 0.0);
                let mut last_alpha = 0.0f32;
                let mut last_row: Option<usize> = None;
                for &i in list[..n].iter().rev() {
                    let i = i as usize;
                    let k = &state.kernels[i];
                    let Some(s) = splat_eval(k.mean, k.conic, k.opacity, px, py) else {
                        continue;
                    };
                    // Transmittance in front of this contributor.
                    t_front /= 1.0 - s.alpha;
                    // Suffix blend of everything behind it.
                    if let Some(j) = last_row {
                        for c in 0..channels {
                            accum[c] =
                                last_alpha * feat[j * channels + c] + (1.0 - last_alpha) * accum[c];
                        }
                    }
                    let w = t_front * s.alpha;
                    let mut d_alpha = 0.0f32;
                    for c in 0..channels {
                        let gp = g[c * hw + pix];
                        g_feat[i * channels + c] += w * gp;
                        d_alpha += (feat[i * channels + c] - accum[c]) * gp;
                    }
                    d_alpha *= t_front;
                    // The ceiling zeroes the chain through alpha.
                    if s.alpha < ALPHA_CEIL {
                        g_opac[i] += d_alpha * s.gexp;
                        let d_power = d_alpha * k.opacity * s.gexp;
                        let (ca, cb, cc) = k.conic;
                        let ddx = d_power * (-ca * s.dx - cb * s.dy);
                        let ddy = d_power * (-cc * s.dy - cb * s.dx);
                        g_mean[i * 2] -= ddx;
                        g_mean[i * 2 + 1] -= ddy;
                        g_conic[i * 3] += d_power * (-0.5 * s.dx * s.dx);
                        g_conic[i * 3 + 1] += d_power * (-s.dx * s.dy);
                        g_conic[i * 3 + 2] += d_power * (-0.5 * s.dy * s.dy);
                    }
                    last_alpha = s.alpha;
                    last_row = Some(i);
                }
            }
        }
    }

    // Chain conic gradients back to the covariance entries.
    let mut g_cov = vec![0.0f32; rows * 3];
    for (i, k) in state.kernels.iter().enumerate() {
        let (ca, cb, cc) = k.conic;
        // Recover (a, b, c) from the conic: the inverse of the inverse.
        let det_inv = ca * cc - cb * cb;
        if det_inv <= 0.0 {
            continue;
        }
        let a = cc / det_inv;
        let b = -cb / det_inv;
        let c = ca / det_inv;
        let det = a * c - b * b;
        let d2 = det * det;
        let (ga, gb, gc) = (g_conic[i * 3], g_conic[i * 3 + 1], g_conic[i * 3 + 2]);
        g_cov[i * 3] = (ga * (-c * c) + gb * (b * c) + gc * (-b * b)) / d2;
        g_cov[i * 3 + 1] = (ga * (2.0 * b * c) + gb * (-(a * c + b * b)) + gc * (2.0 * a * b)) / d2;
        g_cov[i * 3 + 2] = (ga * (-b * b) + gb * (a * b) + gc * (-a * a)) / d2;
    }

    SplatGrads {
        features: Tensor::new(&[rows, channels], g_feat).unwrap(),
        opacities: Tensor::new(&[rows], g_opac).unwrap(),
        mean2d: Tensor::new(&[rows, 2], g_mean).unwrap(),
        cov2d: Tensor::new(&[rows, 3], g_cov).unwrap(),
    }
}

/// Stateful forward/backward pair over one image.
pub struct Rasterizer {
    pub width: usize,
    pub height: usize,
    state: Option<SavedState>,
}

impl Rasterizer {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            state: None,
        }
    }

    /// Splat the sorted Gaussians. `features` is `[M, C]` with row `i`
    /// matching `projected[i]`; `opacities` are activated values.
    pub fn forward(
        &mut self,
        projected: &[ProjectedGaussian],
        features: &Tensor,
        opacities: &[f32],
    ) -> Result<RasterOutput, RasterError> {
        if features.rank() != 2 || features.shape()[0] != projected.len() {
            return Err(RasterError::Shape {
                msg: format!(
                    "features {:?} vs {} projected Gaussians",
                    features.shape(),
                    projected.len()
                ),
            });
        }
        if opacities.len() != projected.len() {
            return Err(RasterError::Shape {
                msg: format!(
                    "{} opacities vs {} projected Gaussians",
                    opacities.len(),
                    projected.len()
                ),
            });
        }
        let kernels = kernels_from_projected(projected, opacities);
        let (out, state) = forward_core(&kernels, features, self.width, self.height);
        self.state = Some(state);
        Ok(out)
    }

    /// Exact adjoint of the last forward. `grad` is `[C, H, W]`.
    pub fn backward(&self, grad: &Tensor) -> Result<SplatGrads, RasterError> {
        let state = self.state.as_ref().ok_or(RasterError::MissingForward)?;
        if grad.shape() != [state.channels, self.height, self.width] {
            return Err(RasterError::Shape {
                msg: format!(
                    "grad {:?} vs output [{}, {}, {}]",
                    grad.shape(),
                    state.channels,
                    self.height,
                    self.width
                ),
            });
        }
        Ok(backward_core(state, grad, self.width, self.height))
    }
}

/// Zero buffers for a scene with nothing visible. Tensors cannot be
/// zero-row, so the empty case is explicit.
pub fn splat_empty(channels: usize, width: usize, height: usize) -> RasterOutput {
    RasterOutput {
        features: Tensor::zeros(&[channels, height, width]),
        alpha: Tensor::zeros(&[height, width]),
        contributors: vec![0; width * height],
    }
}

/// Brute-force reference: every Gaussian evaluated at every pixel, same
/// skip rules, no tiles. Used by tests as the ground truth for the tile
/// renderer.
pub fn splat_oracle(
    projected: &[ProjectedGaussian],
    features: &Tensor,
    opacities: &[f32],
    width: usize,
    height: usize,
) -> Result<RasterOutput, RasterError> {
    if features.rank() != 2 || features.shape()[0] != projected.len() {
        return Err(RasterError::Shape {
            msg: format!(
                "features {:?} vs {} projected Gaussians",
                features.shape(),
                projected.len()
            ),
        });
    }
    let kernels = kernels_from_projected(projected, opacities);
    let channels = features.shape()[1];
    let hw = width * height;
    let feat = features.data();
    let mut out = vec![0.0f32; channels * hw];
    let mut alpha = vec![0.0f32; hw];
    let mut contributors = vec![0u32; hw];
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let pix = y * width + x;
            let mut t = 1.0f32;
            for (i, k) in kernels.iter().enumerate() {
                let Some(s) = splat_eval(k.mean, k.conic, k.opacity, px, py) else {
                    continue;
                };
                let test_t = t * (1.0 - s.alpha);
                if test_t < T_MIN {
                    break;
                }
                let w = t * s.alpha;
                for c in 0..channels {
                    out[c * hw + pix] += w * feat[i * channels + c];
                }
                t = test_t;
                contributors[pix] += 1;
            }
            alpha[pix] = 1.0 - t;
        }
    }
    Ok(RasterOutput {
        features: Tensor::new(&[channels, height, width], out).unwrap(),
        alpha: Tensor::new(&[height, width], alpha).unwrap(),
        contributors,
    })
}

/// Differentiable splat on the tape.
///
/// `features` `[M, C]`, `opacities` `[M]` and `meancov` `[M, 5]`
/// (mean_x, mean_y, cov_a, cov_b, cov_c) must already be in front-to-back
/// order. Returns the `[C, H, W]` feature value plus the non-differentiable
/// alpha/contributor buffers.
pub fn splat_op(
    tape: &mut Tape,
    features: Value,
    opacities: Value,
    meancov: Value,
    width: usize,
    height: usize,
) -> Result<(Value, Tensor, Vec<u32>), TensorError> {
    let rows = {
        let f = tape.value(features);
        let o = tape.value(opacities);
        let mc = tape.value(meancov);
        if f.rank() != 2
            || o.shape() != [f.shape()[0]]
            || mc.shape() != [f.shape()[0], 5]
        {
            return Err(TensorError::ShapeMismatch {
                op: "splat_op",
                lhs: f.shape().to_vec(),
                rhs: mc.shape().to_vec(),
            });
        }
        f.shape()[0]
    };
    let kernels: Vec<Kernel> = {
        let mc = tape.value(meancov).data();
        let o = tape.value(opacities).data();
        (0..rows)
            .map(|r| {
                kernel_from_cov(
                    (mc[r * 5], mc[r * 5 + 1]),
                    (mc[r * 5 + 2], mc[r * 5 + 3], mc[r * 5 + 4]),
                    o[r],
                )
                .ok_or(TensorError::Invalid {
                    op: "splat_op",
                    msg: format!("degenerate covariance in row {r}"),
                })
            })
            .collect::<Result<_, _>>()?
    };
    let feat_t = tape.value(features).clone();
    let (out, state) = forward_core(&kernels, &feat_t, width, height);
    let state = Arc::new(state);
    let alpha = out.alpha;
    let contributors = out.contributors;
    let value = tape.custom_op(
        &[features, opacities, meancov],
        out.features,
        move |ctx: &GradCtx| {
            let grads = backward_core(&state, ctx.grad, width, height);
            let m = grads.opacities.numel();
            let mut meancov_grad = vec![0.0f32; m * 5];
            for r in 0..m {
                meancov_grad[r * 5] = grads.mean2d.data()[r * 2];
                meancov_grad[r * 5 + 1] = grads.mean2d.data()[r * 2 + 1];
                meancov_grad[r * 5 + 2] = grads.cov2d.data()[r * 3];
                meancov_grad[r * 5 + 3] = grads.cov2d.data()[r * 3 + 1];
                meancov_grad[r * 5 + 4] = grads.cov2d.data()[r * 3 + 2];
            }
            vec![
                Some(grads.features),
                Some(grads.opacities),
                Some(Tensor::new(&[m, 5], meancov_grad).unwrap()),
            ]
        },
    );
    Ok((value, alpha, contributors))
}

/// Assemble the typed feature maps from a raster pass with the pipeline's
/// channel layout (diffuse, specular, mask).
pub fn feature_maps(
    out: &RasterOutput,
    dims: FeatureDims,
    width: usize,
    height: usize,
) -> Result<FeatureMaps, RasterError> {
    if out.features.shape()[0] != dims.splat_channels() {
        return Err(RasterError::Shape {
            msg: format!(
                "raster has {} channels, layout expects {}",
                out.features.shape()[0],
                dims.splat_channels()
            ),
        });
    }
    Ok(FeatureMaps {
        width,
        height,
        dims,
        features: out.features.clone(),
        alpha: out.alpha.clone(),
        contributors: out.contributors.clone(),
    })
}
