//! Synthetic scenes rendered by the engine's own forward model.
//!
//! A "teacher" model with vivid decoder heads and a strongly
//! view-dependent mask renders the ground-truth images; a "student"
//! initialized like a real run (noisy sparse points, fresh networks) then
//! has to reproduce them. Used by the self-consistency tests and the
//! ablation harness.

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::colmap::{init_cloud, SfmPoint};
use crate::dataset::Dataset;
use crate::decoders::Conv;
use crate::pipeline::{render_image, Model, RenderMode};
use crate::scene::{CameraView, FeatureDims, GaussianCloud, LatentGaussian};

#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_views: usize,
    pub resolution: usize,
    pub n_gaussians: usize,
    pub dims: FeatureDims,
    /// Position noise applied to the fake SfM points.
    pub position_noise: f32,
    /// Surface samples per Gaussian standing in for SfM points.
    pub points_per_gaussian: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_views: 8,
            resolution: 32,
            n_gaussians: 3,
            dims: FeatureDims::default(),
            position_noise: 0.03,
            points_per_gaussian: 16,
        }
    }
}

/// Teacher model, rendered ground truth, and the noisy points a student
/// starts from.
pub struct SyntheticScene {
    pub config: SyntheticConfig,
    pub teacher: Model,
    pub dataset: Dataset,
    pub sfm_points: Vec<SfmPoint>,
}

/// Camera on the view circle looking at the origin.
fn look_at(position: Vector3<f32>, target: Vector3<f32>, resolution: usize) -> CameraView {
    let forward = (target - position).normalize();
    let world_up = Vector3::new(0.0, 1.0, 0.0);
    let right = world_up.cross(&forward).normalize();
    let down = forward.cross(&right);
    let mut r = Matrix3::zeros();
    r.set_row(0, &right.transpose());
    r.set_row(1, &down.transpose());
    r.set_row(2, &forward.transpose());
    let t = -r * position;
    let mut w2c = Matrix4::identity();
    w2c.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    w2c[(0, 3)] = t.x;
    w2c[(1, 3)] = t.y;
    w2c[(2, 3)] = t.z;
    let res = resolution as f32;
    CameraView {
        width: resolution,
        height: resolution,
        focal_x: res,
        focal_y: res,
        principal_point: Vector2::new(res / 2.0, res / 2.0),
        world_to_camera: w2c,
        image_path: None,
    }
}

fn scale_conv(conv: &mut Conv, factor: f32, bias: f32) {
    conv.weight = conv.weight.map(|v| v * factor);
    conv.bias = conv.bias.map(|_| bias);
}

impl SyntheticScene {
    pub fn generate(config: &SyntheticConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5EED));
        let dims = config.dims;

        let mut cloud = GaussianCloud::new(dims);
        for i in 0..config.n_gaussians {
            let angle = i as f32 / config.n_gaussians as f32 * std::f32::consts::TAU;
            let position = Vector3::new(
                0.45 * angle.cos() + rng.gen_range(-0.1..0.1),
                0.35 * angle.sin() + rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.15..0.15),
            );
            let q = crate::scene::normalize_quaternion(&[
                1.0,
                rng.gen_range(-0.4..0.4),
                rng.gen_range(-0.4..0.4),
                rng.gen_range(-0.4..0.4),
            ])
            .unwrap();
            cloud.push(LatentGaussian {
                position,
                opacity_logit: rng.gen_range(2.0..3.0),
                rotation: q,
                log_scale: Vector3::new(
                    rng.gen_range(-1.6f32..-1.1),
                    rng.gen_range(-1.6f32..-1.1),
                    rng.gen_range(-2.3f32..-1.8),
                ),
                f_diffuse: (0..dims.diffuse).map(|_| rng.gen_range(-0.8..0.8)).collect(),
                f_specular: (0..dims.specular).map(|_| rng.gen_range(-0.8..0.8)).collect(),
            });
        }

        let mut teacher = Model::new(cloud, RenderMode::Full, &mut rng);
        // Vivid heads: diffuse around mid-gray, specular with real
        // amplitude, and a mask that genuinely varies with view direction.
        teacher.unet.head = Conv::new(crate::decoders::UNET_WIDTHS[0], 3, &mut rng);
        scale_conv(&mut teacher.unet.head, 3.0, 0.45);
        teacher.cnn.head = Conv::new(crate::decoders::SPECULAR_WIDTH, 3, &mut rng);
        scale_conv(&mut teacher.cnn.head, 2.0, 0.0);
        for layer in teacher.shading.mask.iter_mut() {
            layer.weight = layer.weight.map(|v| v * 2.5);
        }

        // Cameras on a circle with alternating elevation.
        let mut views = Vec::new();
        let mut images = Vec::new();
        let radius = 3.0f32;
        for i in 0..config.n_views {
            let theta = i as f32 / config.n_views as f32 * std::f32::consts::TAU;
            let elevation = if i % 2 == 0 { 0.5 } else { -0.4 };
            let position = Vector3::new(radius * theta.sin(), elevation, radius * theta.cos());
            let view = look_at(position, Vector3::zeros(), config.resolution);
            view.validate().expect("synthetic camera is rigid");
            let rendered = render_image(&teacher, &view, RenderMode::Full)
                .expect("teacher render succeeds");
            views.push(view);
            images.push(rendered.rgb);
        }

        // Fake sparse points the way SfM would see the scene: several
        // noisy surface samples per Gaussian, not one point per primitive.
        let mut sfm_points = Vec::new();
        for g in &teacher.cloud.gaussians {
            let act = crate::scene::activate(g).expect("teacher is finite");
            for _ in 0..config.points_per_gaussian.max(1) {
                let local = Vector3::new(
                    rng.gen_range(-1.0f32..1.0),
                    rng.gen_range(-1.0f32..1.0),
                    rng.gen_range(-1.0f32..1.0),
                );
                let offset = act.rotation * local.component_mul(&act.scale);
                let noise = Vector3::new(
                    rng.gen_range(-config.position_noise..config.position_noise),
                    rng.gen_range(-config.position_noise..config.position_noise),
                    rng.gen_range(-config.position_noise..config.position_noise),
                );
                sfm_points.push(SfmPoint {
                    position: g.position + offset + noise,
                    color: [128, 128, 128],
                    reprojection_error: 0.3,
                });
            }
        }

        Self {
            config: config.clone(),
            teacher,
            dataset: Dataset::from_memory(views, images),
            sfm_points,
        }
    }

    /// Fresh student: cloud initialized from the noisy points, networks
    /// randomly initialized with zeroed decoder heads.
    pub fn student_model(&self, seed: u64) -> Model {
        self.student_model_with(seed, RenderMode::Full, self.config.dims)
    }

    pub fn student_model_with(&self, seed: u64, mode: RenderMode, dims: FeatureDims) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x57CD));
        let points: Vec<SfmPoint> = self.sfm_points.clone();
        let cloud = init_cloud(&points, dims, &mut rng).expect("synthetic points are non-empty");
        Model::new(cloud, mode, &mut rng)
    }

    /// Max spread of the teacher's splatted mask channel across all views;
    /// nonzero spread means the mask genuinely gates the specular branch.
    pub fn mask_spread(&self) -> f32 {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for view in &self.dataset.views {
            let img = render_image(&self.teacher, view, RenderMode::Full).unwrap();
            let mask = img.mask.expect("full mode renders a mask");
            for (&m, &a) in mask.data().iter().zip(img.alpha.data()) {
                if a > 0.2 {
                    lo = lo.min(m);
                    hi = hi.max(m);
                }
            }
        }
        if hi < lo {
            0.0
        } else {
            hi - lo
        }
    }
}

/// Write the scene to disk in the COLMAP directory layout:
/// `sparse/0/{cameras,images,points3D}.bin` plus `images/*.png`.
pub fn export_colmap(scene: &SyntheticScene, dir: &std::path::Path) -> std::io::Result<()> {
    use crate::colmap::{
        write_cameras_bin, write_images_bin, write_points3d_bin, CameraIntrinsics, CameraModel,
        ImagePose,
    };
    use std::collections::BTreeMap;

    let sparse = dir.join("sparse").join("0");
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&sparse)?;
    std::fs::create_dir_all(&images_dir)?;

    let mut cameras = BTreeMap::new();
    let first = &scene.dataset.views[0];
    cameras.insert(
        1u32,
        CameraIntrinsics {
            model: CameraModel::Pinhole,
            width: first.width as u64,
            height: first.height as u64,
            params: vec![
                first.focal_x as f64,
                first.focal_y as f64,
                first.principal_point.x as f64,
                first.principal_point.y as f64,
            ],
        },
    );

    let mut images = BTreeMap::new();
    for (i, (view, gt)) in scene
        .dataset
        .views
        .iter()
        .zip(&scene.dataset.images)
        .enumerate()
    {
        let name = format!("im_{i:03}.png");
        crate::dataset::save_image(&images_dir.join(&name), gt)
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        let q = crate::scene::quaternion_from_rotation(&view.rotation());
        let t = view.translation();
        images.insert(
            i as u32 + 1,
            ImagePose {
                quaternion: [q[0] as f64, q[1] as f64, q[2] as f64, q[3] as f64],
                translation: [t.x as f64, t.y as f64, t.z as f64],
                camera_id: 1,
                name: name.into_bytes(),
            },
        );
    }

    std::fs::write(sparse.join("cameras.bin"), write_cameras_bin(&cameras))?;
    std::fs::write(sparse.join("images.bin"), write_images_bin(&images))?;
    std::fs::write(
        sparse.join("points3D.bin"),
        write_points3d_bin(&scene.sfm_points),
    )?;
    Ok(())
}
