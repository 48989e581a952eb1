//! Perspective projection of 3D Gaussians to screen space.
//!
//! The 2D covariance comes from the local affine approximation of the
//! perspective map: `cov2d = J W cov3d W^T J^T` with the standard
//! tangent-plane clamping of x/z and y/z. A `+0.3` px^2 floor on the
//! diagonal keeps every projected Gaussian at least a pixel wide.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};

use crate::autodiff::{GradCtx, Tape, TensorError, Value};
use crate::scene::{activate, CameraView, GaussianCloud, LatentGaussian, SceneError};
use crate::tensor::Tensor;

/// Low-pass floor added to both diagonal entries of the 2D covariance.
pub const COV2D_FLOOR: f32 = 0.3;

/// Screen-space radius is reported at three standard deviations.
pub const RADIUS_SIGMA: f32 = 3.0;

/// Cull radius multiplier. Any Gaussian kept must contribute at most
/// `exp(-CULL_SIGMA^2 / 2) < 1e-6` of its opacity to the nearest image
/// pixel, so frustum culling never removes a visible contribution.
pub const CULL_SIGMA: f32 = 5.26;

/// Default near plane in world units.
pub const DEFAULT_NEAR: f32 = 0.01;

/// Tangent-plane clamp factor for the projection Jacobian.
const CLAMP_FACTOR: f32 = 1.3;

/// A Gaussian after projection, still referencing its source primitive.
#[derive(Clone, Debug)]
pub struct ProjectedGaussian {
    /// Center on the image plane, pixels.
    pub mean2d: (f32, f32),
    /// Symmetric 2x2 screen-space covariance stored as (a, b, c) =
    /// (cov00, cov01, cov11), pixels^2, floor included.
    pub cov2d: (f32, f32, f32),
    /// Camera-space depth.
    pub depth: f32,
    /// Screen-space radius at three standard deviations, pixels.
    pub radius: f32,
    /// Index into the originating cloud.
    pub source_index: usize,
}

impl ProjectedGaussian {
    /// Largest eigenvalue of the stored covariance.
    pub fn max_eigenvalue(&self) -> f32 {
        let (a, b, c) = self.cov2d;
        let mid = 0.5 * (a + c);
        let det = a * c - b * b;
        mid + (mid * mid - det).max(1e-10).sqrt()
    }

    /// Inverse covariance as (conic_a, conic_b, conic_c); `None` only if
    /// the determinant degenerates, which the floor prevents.
    pub fn conic(&self) -> Option<(f32, f32, f32)> {
        let (a, b, c) = self.cov2d;
        let det = a * c - b * b;
        if det <= 0.0 {
            return None;
        }
        Some((c / det, -b / det, a / det))
    }
}

/// `cov3d = (R S) (R S)^T` for rotation `R` and per-axis deviations `S`.
pub fn build_covariance(rotation: &Matrix3<f32>, scale: &Vector3<f32>) -> Matrix3<f32> {
    let m = rotation * Matrix3::from_diagonal(scale);
    m * m.transpose()
}

/// Everything the forward projection computes for one Gaussian, kept for
/// the analytic backward pass.
struct ProjCore {
    /// Camera-space position.
    t: Vector3<f32>,
    /// Clamped tangent-plane coordinates and their clamp flags.
    u: f32,
    v: f32,
    clamped_u: bool,
    clamped_v: bool,
    /// T = J W_R.
    tmat: Matrix2x3<f32>,
    sigma: Matrix3<f32>,
    /// M = R S.
    m: Matrix3<f32>,
    mean: (f32, f32),
    /// Floored (a, b, c).
    cov: (f32, f32, f32),
}

fn project_core(
    position: &Vector3<f32>,
    rotation: &Matrix3<f32>,
    scale: &Vector3<f32>,
    view: &CameraView,
) -> ProjCore {
    let w_r = view.rotation();
    let t = w_r * position + view.translation();
    let (fx, fy) = (view.focal_x, view.focal_y);
    let lim_x = CLAMP_FACTOR * view.width as f32 / (2.0 * fx);
    let lim_y = CLAMP_FACTOR * view.height as f32 / (2.0 * fy);
    let u_raw = t.x / t.z;
    let v_raw = t.y / t.z;
    let u = u_raw.clamp(-lim_x, lim_x);
    let v = v_raw.clamp(-lim_y, lim_y);
    let j = Matrix2x3::new(
        fx / t.z,
        0.0,
        -fx * u / t.z,
        0.0,
        fy / t.z,
        -fy * v / t.z,
    );
    let tmat = j * w_r;
    let m = rotation * Matrix3::from_diagonal(scale);
    let sigma = m * m.transpose();
    let cov_mat = tmat * sigma * tmat.transpose();
    let mean = (
        fx * u_raw + view.principal_point.x,
        fy * v_raw + view.principal_point.y,
    );
    ProjCore {
        t,
        u,
        v,
        clamped_u: u != u_raw,
        clamped_v: v != v_raw,
        tmat,
        sigma,
        m,
        mean,
        cov: (
            cov_mat[(0, 0)] + COV2D_FLOOR,
            cov_mat[(0, 1)],
            cov_mat[(1, 1)] + COV2D_FLOOR,
        ),
    }
}

/// Project one Gaussian. Returns `None` when the center lies behind the
/// near plane or the conservative screen extent misses the image.
pub fn project(
    g: &LatentGaussian,
    view: &CameraView,
    near: f32,
    source_index: usize,
) -> Result<Option<ProjectedGaussian>, SceneError> {
    let act = activate(g)?;
    let core = project_core(&g.position, &act.rotation, &act.scale, view);
    if core.t.z <= near {
        return Ok(None);
    }
    let projected = ProjectedGaussian {
        mean2d: core.mean,
        cov2d: core.cov,
        depth: core.t.z,
        radius: RADIUS_SIGMA * 0.0, // filled below
        source_index,
    };
    let lambda_max = projected.max_eigenvalue();
    let radius = RADIUS_SIGMA * lambda_max.sqrt();
    let cull_radius = CULL_SIGMA * lambda_max.sqrt();
    let (mx, my) = core.mean;
    if mx + cull_radius < 0.0
        || mx - cull_radius > view.width as f32
        || my + cull_radius < 0.0
        || my - cull_radius > view.height as f32
    {
        return Ok(None);
    }
    Ok(Some(ProjectedGaussian { radius, ..projected }))
}

/// Project every Gaussian in the cloud, dropping culled ones.
pub fn project_cloud(
    cloud: &GaussianCloud,
    view: &CameraView,
    near: f32,
) -> Result<Vec<ProjectedGaussian>, SceneError> {
    let mut out = Vec::with_capacity(cloud.len());
    for (i, g) in cloud.gaussians.iter().enumerate() {
        if let Some(p) = project(g, view, near, i)? {
            out.push(p);
        }
    }
    Ok(out)
}

/// Front-to-back order: ascending depth, ties broken by source index so the
/// result never depends on input order.
pub fn sort_by_depth(list: &mut [ProjectedGaussian]) {
    list.sort_by(|x, y| {
        x.depth
            .partial_cmp(&y.depth)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(x.source_index.cmp(&y.source_index))
    });
}

/// Differentiable batched projection on the tape.
///
/// Inputs are the already-gathered visible rows: world positions `[M,3]`,
/// unit quaternions `[M,4]` and activated scales `[M,3]`. The output packs
/// `(mean_x, mean_y, cov_a, cov_b, cov_c)` into `[M,5]`. Gradients flow to
/// all three inputs through the full projection chain.
pub fn project_op(
    tape: &mut Tape,
    positions: Value,
    quaternions: Value,
    scales: Value,
    view: &CameraView,
) -> Result<Value, TensorError> {
    let m_rows = {
        let p = tape.value(positions);
        let q = tape.value(quaternions);
        let s = tape.value(scales);
        if p.rank() != 2 || p.shape()[1] != 3 || q.shape() != [p.shape()[0], 4] || s.shape() != p.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "project_op",
                lhs: p.shape().to_vec(),
                rhs: q.shape().to_vec(),
            });
        }
        p.shape()[0]
    };
    let view = view.clone();
    let forward = {
        let view = view.clone();
        move |pos: &Tensor, quat: &Tensor, scale: &Tensor| -> Vec<f32> {
            let mut out = vec![0.0f32; pos.shape()[0] * 5];
            for r in 0..pos.shape()[0] {
                let p = Vector3::new(
                    pos.data()[r * 3],
                    pos.data()[r * 3 + 1],
                    pos.data()[r * 3 + 2],
                );
                let q = [
                    quat.data()[r * 4],
                    quat.data()[r * 4 + 1],
                    quat.data()[r * 4 + 2],
                    quat.data()[r * 4 + 3],
                ];
                let s = Vector3::new(
                    scale.data()[r * 3],
                    scale.data()[r * 3 + 1],
                    scale.data()[r * 3 + 2],
                );
                let rot = crate::scene::rotation_from_quaternion(&q);
                let core = project_core(&p, &rot, &s, &view);
                out[r * 5] = core.mean.0;
                out[r * 5 + 1] = core.mean.1;
                out[r * 5 + 2] = core.cov.0;
                out[r * 5 + 3] = core.cov.1;
                out[r * 5 + 4] = core.cov.2;
            }
            out
        }
    };
    let out = {
        let p = tape.value(positions).clone();
        let q = tape.value(quaternions).clone();
        let s = tape.value(scales).clone();
        Tensor::new(&[m_rows, 5], forward(&p, &q, &s))?
    };
    Ok(tape.custom_op(
        &[positions, quaternions, scales],
        out,
        move |ctx: &GradCtx| {
            let pos = ctx.inputs[0];
            let quat = ctx.inputs[1];
            let scale = ctx.inputs[2];
            let g = ctx.grad.data();
            let rows = pos.shape()[0];
            let mut g_pos = vec![0.0f32; rows * 3];
            let mut g_quat = vec![0.0f32; rows * 4];
            let mut g_scale = vec![0.0f32; rows * 3];
            let w_r = view.rotation();
            let (fx, fy) = (view.focal_x, view.focal_y);
            for r in 0..rows {
                let p = Vector3::new(
                    pos.data()[r * 3],
                    pos.data()[r * 3 + 1],
                    pos.data()[r * 3 + 2],
                );
                let q = [
                    quat.data()[r * 4],
                    quat.data()[r * 4 + 1],
                    quat.data()[r * 4 + 2],
                    quat.data()[r * 4 + 3],
                ];
                let s = Vector3::new(
                    scale.data()[r * 3],
                    scale.data()[r * 3 + 1],
                    scale.data()[r * 3 + 2],
                );
                let rot = crate::scene::rotation_from_quaternion(&q);
                let core = project_core(&p, &rot, &s, &view);
                let (gmx, gmy) = (g[r * 5], g[r * 5 + 1]);
                let gc = Matrix2::new(g[r * 5 + 2], g[r * 5 + 3], 0.0, g[r * 5 + 4]);

                // Through the quadratic form: dSigma = T^T Gc T,
                // dT = (Gc + Gc^T) T Sigma.
                let g_sigma = core.tmat.transpose() * gc * core.tmat;
                let g_m = (g_sigma + g_sigma.transpose()) * core.m;
                let g_tmat = (gc + gc.transpose()) * core.tmat * core.sigma;
                let g_j = g_tmat * w_r.transpose();

                // Rotation and scale through M = R S.
                let mut g_rot = Matrix3::zeros();
                for i in 0..3 {
                    for jj in 0..3 {
                        g_rot[(i, jj)] = g_m[(i, jj)] * s[jj];
                        g_scale[r * 3 + jj] += g_m[(i, jj)] * rot[(i, jj)];
                    }
                }
                let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
                let dr_dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
                let dr_dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
                let dr_dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
                let dr_dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
                g_quat[r * 4] += g_rot.component_mul(&dr_dw).sum();
                g_quat[r * 4 + 1] += g_rot.component_mul(&dr_dx).sum();
                g_quat[r * 4 + 2] += g_rot.component_mul(&dr_dy).sum();
                g_quat[r * 4 + 3] += g_rot.component_mul(&dr_dz).sum();

                // Camera-space position through the mean and the Jacobian.
                let t = core.t;
                let tz2 = t.z * t.z;
                let mut g_t = Vector3::new(
                    gmx * fx / t.z,
                    gmy * fy / t.z,
                    -gmx * fx * t.x / tz2 - gmy * fy * t.y / tz2,
                );
                g_t.z += g_j[(0, 0)] * (-fx / tz2) + g_j[(1, 1)] * (-fy / tz2);
                if core.clamped_u {
                    g_t.z += g_j[(0, 2)] * fx * core.u / tz2;
                } else {
                    g_t.x += g_j[(0, 2)] * (-fx / tz2);
                    g_t.z += g_j[(0, 2)] * 2.0 * fx * core.u / tz2;
                }
                if core.clamped_v {
                    g_t.z += g_j[(1, 2)] * fy * core.v / tz2;
                } else {
                    g_t.y += g_j[(1, 2)] * (-fy / tz2);
                    g_t.z += g_j[(1, 2)] * 2.0 * fy * core.v / tz2;
                }
                let g_p = w_r.transpose() * g_t;
                g_pos[r * 3] += g_p.x;
                g_pos[r * 3 + 1] += g_p.y;
                g_pos[r * 3 + 2] += g_p.z;
            }
            vec![
                Some(Tensor::new(&[rows, 3], g_pos).unwrap()),
                Some(Tensor::new(&[rows, 4], g_quat).unwrap()),
                Some(Tensor::new(&[rows, 3], g_scale).unwrap()),
            ]
        },
    ))
}
