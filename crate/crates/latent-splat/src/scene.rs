//! Scene primitives: latent Gaussians, the Gaussian cloud and cameras.

use std::path::PathBuf;

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3};

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("invalid primitive: {0}")]
    InvalidPrimitive(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
}

/// Latent feature widths per Gaussian. The default is 8 diffuse + 8
/// specular channels; 4+4 and 16+16 are the supported alternatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FeatureDims {
    pub diffuse: usize,
    pub specular: usize,
}

impl Default for FeatureDims {
    fn default() -> Self {
        Self {
            diffuse: 8,
            specular: 8,
        }
    }
}

impl FeatureDims {
    /// Total splatted feature channels including the view-mask channel.
    pub fn splat_channels(&self) -> usize {
        self.diffuse + self.specular + 1
    }

    /// Optimizable scalars per Gaussian: position (3), opacity logit (1),
    /// rotation (4), log scale (3) and the two latent vectors.
    pub fn params_per_gaussian(&self) -> usize {
        3 + 1 + 4 + 3 + self.diffuse + self.specular
    }
}

/// Parameter budget of a classic degree-3 spherical-harmonics Gaussian as
/// counted by upstream tooling; kept for the `inspect` comparison.
pub const SH3_BASELINE_PARAMS: usize = 62;

/// Activated opacity used when initializing new Gaussians.
pub const INIT_OPACITY: f32 = 0.1;

/// Half-width of the uniform distribution for initial latent features.
pub const INIT_FEATURE_AMPLITUDE: f32 = 0.1;

/// Floor for the nearest-neighbor distance used to seed scales, in world
/// units; prevents log(0) when points coincide.
pub const MIN_INIT_DISTANCE: f32 = 1e-4;

pub fn logit(p: f32) -> f32 {
    (p / (1.0 - p)).ln()
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// One optimizable primitive.
#[derive(Clone, Debug)]
pub struct LatentGaussian {
    /// World-space center.
    pub position: Vector3<f32>,
    /// Opacity before the sigmoid.
    pub opacity_logit: f32,
    /// Rotation quaternion `(w, x, y, z)`; renormalized before every use.
    pub rotation: [f32; 4],
    /// Log of the per-axis standard deviation.
    pub log_scale: Vector3<f32>,
    /// Diffuse latent descriptor.
    pub f_diffuse: Vec<f32>,
    /// Specular latent descriptor.
    pub f_specular: Vec<f32>,
}

impl LatentGaussian {
    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
            && self.rotation.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.f_diffuse.iter().all(|v| v.is_finite())
            && self.f_specular.iter().all(|v| v.is_finite())
    }
}

/// Activated per-Gaussian quantities.
#[derive(Clone, Debug)]
pub struct Activated {
    /// Opacity in (0, 1).
    pub opacity: f32,
    /// Per-axis standard deviation, strictly positive.
    pub scale: Vector3<f32>,
    /// Orthonormal rotation matrix from the renormalized quaternion.
    pub rotation: Matrix3<f32>,
}

/// Apply the activation conventions: sigmoid opacity, exp scale and a
/// renormalized quaternion turned into a rotation matrix.
pub fn activate(g: &LatentGaussian) -> Result<Activated, SceneError> {
    if !g.is_finite() {
        return Err(SceneError::InvalidPrimitive(
            "non-finite field values".into(),
        ));
    }
    let q = normalize_quaternion(&g.rotation)
        .ok_or_else(|| SceneError::InvalidPrimitive("zero-norm rotation quaternion".into()))?;
    Ok(Activated {
        opacity: sigmoid(g.opacity_logit),
        scale: g.log_scale.map(f32::exp),
        rotation: rotation_from_quaternion(&q),
    })
}

/// Unit quaternion, or `None` when the norm underflows.
pub fn normalize_quaternion(q: &[f32; 4]) -> Option<[f32; 4]> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if n < 1e-12 {
        return None;
    }
    Some([q[0] / n, q[1] / n, q[2] / n, q[3] / n])
}

/// Rotation matrix from a unit quaternion `(w, x, y, z)`.
pub fn rotation_from_quaternion(q: &[f32; 4]) -> Matrix3<f32> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Quaternion `(w, x, y, z)` from a rotation matrix (Shepperd's method).
pub fn quaternion_from_rotation(m: &Matrix3<f32>) -> [f32; 4] {
    let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    let q = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (m[(2, 1)] - m[(1, 2)]) / s,
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(1, 0)] - m[(0, 1)]) / s,
        ]
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        [
            (m[(2, 1)] - m[(1, 2)]) / s,
            0.25 * s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
        ]
    } else if m[(1, 1)] > m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        [
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            0.25 * s,
            (m[(1, 2)] + m[(2, 1)]) / s,
        ]
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        [
            (m[(1, 0)] - m[(0, 1)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
            (m[(1, 2)] + m[(2, 1)]) / s,
            0.25 * s,
        ]
    };
    normalize_quaternion(&q).unwrap_or([1.0, 0.0, 0.0, 0.0])
}

/// The scene: primitives plus densification bookkeeping. The bookkeeping
/// vectors always have one entry per Gaussian.
#[derive(Clone, Debug, Default)]
pub struct GaussianCloud {
    pub gaussians: Vec<LatentGaussian>,
    /// Accumulated view-space positional gradient magnitude (NDC units).
    pub grad_accum: Vec<f32>,
    /// Number of accumulation events per Gaussian since the last reset.
    pub grad_count: Vec<u32>,
    /// Maximum observed screen-space radius, pixels.
    pub max_radii: Vec<f32>,
    pub dims: FeatureDims,
}

impl GaussianCloud {
    pub fn new(dims: FeatureDims) -> Self {
        Self {
            dims,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn push(&mut self, g: LatentGaussian) {
        debug_assert_eq!(g.f_diffuse.len(), self.dims.diffuse);
        debug_assert_eq!(g.f_specular.len(), self.dims.specular);
        self.gaussians.push(g);
        self.grad_accum.push(0.0);
        self.grad_count.push(0);
        self.max_radii.push(0.0);
    }

    /// Drop accumulated densification statistics.
    pub fn reset_stats(&mut self) {
        self.grad_accum.iter_mut().for_each(|v| *v = 0.0);
        self.grad_count.iter_mut().for_each(|v| *v = 0);
        self.max_radii.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn check_lengths(&self) -> bool {
        let n = self.gaussians.len();
        self.grad_accum.len() == n && self.grad_count.len() == n && self.max_radii.len() == n
    }
}

/// Camera with pinhole intrinsics and a rigid world-to-camera transform.
#[derive(Clone, Debug)]
pub struct CameraView {
    pub width: usize,
    pub height: usize,
    /// Focal lengths in pixels.
    pub focal_x: f32,
    pub focal_y: f32,
    /// Principal point in pixels.
    pub principal_point: Vector2<f32>,
    /// Rigid transform taking world points to camera space.
    pub world_to_camera: Matrix4<f32>,
    /// Ground-truth image on disk, when the view comes from a dataset.
    pub image_path: Option<PathBuf>,
}

impl CameraView {
    /// Rotation block of the world-to-camera transform.
    pub fn rotation(&self) -> Matrix3<f32> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into()
    }

    /// Translation block of the world-to-camera transform.
    pub fn translation(&self) -> Vector3<f32> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into()
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn camera_center(&self) -> Result<Vector3<f32>, SceneError> {
        let r = self.rotation();
        if r.determinant().abs() < 1e-8 {
            return Err(SceneError::InvalidCamera(
                "singular world-to-camera transform".into(),
            ));
        }
        Ok(-(r.transpose() * self.translation()))
    }

    /// Enforce the camera invariants: orthonormal rotation with positive
    /// determinant and strictly positive focal lengths.
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.width == 0 || self.height == 0 {
            return Err(SceneError::InvalidCamera("zero image dimensions".into()));
        }
        if !(self.focal_x > 0.0 && self.focal_y > 0.0) {
            return Err(SceneError::InvalidCamera(format!(
                "non-positive focal lengths ({}, {})",
                self.focal_x, self.focal_y
            )));
        }
        let r = self.rotation();
        let gram = r.transpose() * r;
        let max_dev = (gram - Matrix3::identity())
            .iter()
            .fold(0.0f32, |acc, v| acc.max(v.abs()));
        if max_dev > 1e-5 {
            return Err(SceneError::InvalidCamera(format!(
                "rotation block not orthonormal (deviation {max_dev:.2e})"
            )));
        }
        if (r.determinant() - 1.0).abs() > 1e-5 {
            return Err(SceneError::InvalidCamera(format!(
                "rotation determinant {} != +1",
                r.determinant()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn unit_gaussian(dims: FeatureDims) -> LatentGaussian {
        LatentGaussian {
            position: Vector3::zeros(),
            opacity_logit: 0.0,
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: Vector3::zeros(),
            f_diffuse: vec![0.0; dims.diffuse],
            f_specular: vec![0.0; dims.specular],
        }
    }

    #[test]
    fn activate_identity_case() {
        let g = unit_gaussian(FeatureDims::default());
        let a = activate(&g).unwrap();
        assert_eq!(a.opacity, 0.5);
        assert_eq!(a.scale, Vector3::new(1.0, 1.0, 1.0));
        assert_relative_eq!(a.rotation, Matrix3::identity(), epsilon = 1e-6);
    }

    #[test]
    fn activate_opacity_logit_four() {
        let mut g = unit_gaussian(FeatureDims::default());
        g.opacity_logit = 4.0;
        let a = activate(&g).unwrap();
        // 1 / (1 + e^-4)
        assert!((a.opacity - 0.9820).abs() < 1e-4);
    }

    #[test]
    fn activate_rejects_non_finite() {
        let mut g = unit_gaussian(FeatureDims::default());
        g.log_scale.x = f32::NAN;
        assert!(matches!(
            activate(&g),
            Err(SceneError::InvalidPrimitive(_))
        ));
    }

    #[test]
    fn params_per_gaussian_stays_under_baseline() {
        let dims = FeatureDims::default();
        assert_eq!(dims.params_per_gaussian(), 27);
        assert!(dims.params_per_gaussian() < SH3_BASELINE_PARAMS);
    }

    #[test]
    fn camera_center_identity_and_translation() {
        let mut cam = CameraView {
            width: 4,
            height: 4,
            focal_x: 1.0,
            focal_y: 1.0,
            principal_point: Vector2::new(2.0, 2.0),
            world_to_camera: Matrix4::identity(),
            image_path: None,
        };
        assert_eq!(cam.camera_center().unwrap(), Vector3::zeros());
        cam.world_to_camera[(0, 3)] = 1.0;
        cam.world_to_camera[(1, 3)] = 2.0;
        cam.world_to_camera[(2, 3)] = 3.0;
        assert_eq!(
            cam.camera_center().unwrap(),
            Vector3::new(-1.0, -2.0, -3.0)
        );
    }

    #[test]
    fn ninety_degree_y_rotation_quaternion() {
        let s = std::f32::consts::FRAC_1_SQRT_2;
        let r = rotation_from_quaternion(&[s, 0.0, s, 0.0]);
        let expected = Matrix3::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, -1.0, 0.0, 0.0);
        assert_relative_eq!(r, expected, epsilon = 1e-6);
    }

    proptest! {
        #[test]
        fn quaternion_round_trip_up_to_sign(
            w in -1.0f32..1.0, x in -1.0f32..1.0, y in -1.0f32..1.0, z in -1.0f32..1.0,
        ) {
            prop_assume!((w*w + x*x + y*y + z*z).sqrt() > 0.1);
            let q = normalize_quaternion(&[w, x, y, z]).unwrap();
            let m = rotation_from_quaternion(&q);
            let back = quaternion_from_rotation(&m);
            let sign = if q[0] * back[0] + q[1] * back[1] + q[2] * back[2] + q[3] * back[3] < 0.0 {
                -1.0
            } else {
                1.0
            };
            for i in 0..4 {
                prop_assert!((q[i] - sign * back[i]).abs() < 1e-6);
            }
        }

        #[test]
        fn camera_center_maps_to_origin(
            w in -1.0f32..1.0, x in -1.0f32..1.0, y in -1.0f32..1.0, z in -1.0f32..1.0,
            tx in -5.0f32..5.0, ty in -5.0f32..5.0, tz in -5.0f32..5.0,
        ) {
            prop_assume!((w*w + x*x + y*y + z*z).sqrt() > 0.1);
            let q = normalize_quaternion(&[w, x, y, z]).unwrap();
            let r = rotation_from_quaternion(&q);
            let mut wtc = Matrix4::identity();
            wtc.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
            wtc[(0, 3)] = tx;
            wtc[(1, 3)] = ty;
            wtc[(2, 3)] = tz;
            let cam = CameraView {
                width: 8, height: 8,
                focal_x: 4.0, focal_y: 4.0,
                principal_point: Vector2::new(4.0, 4.0),
                world_to_camera: wtc,
                image_path: None,
            };
            let c = cam.camera_center().unwrap();
            let mapped = r * c + Vector3::new(tx, ty, tz);
            prop_assert!(mapped.norm() < 1e-4, "mapped {mapped:?}");
        }
    }
}
