//! JSON run configuration shared by the command-line tools.
//!
//! One flat document mirrors the training schedule plus data paths,
//! latent channel widths and the ablation switches. Unknown keys are
//! rejected so typos fail loudly, and the effective merged config is
//! echoed into the output directory for reproducible reruns.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix4, Vector2};

use crate::losses::LossWeights;
use crate::pipeline::RenderMode;
use crate::projection::DEFAULT_NEAR;
use crate::scene::{CameraView, FeatureDims};
use crate::trainer::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {msg}")]
    Invalid { path: PathBuf, msg: String },
}

/// The full run configuration.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    // schedule
    pub iterations: u64,
    pub lr_position: f32,
    pub lr_position_final: f32,
    pub lr_opacity: f32,
    pub lr_rotation: f32,
    pub lr_scale: f32,
    pub lr_features: f32,
    pub lr_networks: f32,
    pub densify_interval: u64,
    pub densify_start: u64,
    pub densify_stop_fraction: f32,
    pub densify_grad_threshold: f32,
    pub prune_opacity: f32,
    pub split_scale_threshold: Option<f32>,
    pub max_screen_radius: Option<f32>,
    pub seed: u64,
    pub eval_interval: u64,
    pub checkpoint_interval: u64,
    pub near: f32,
    // loss
    pub lambda_dssim: f32,
    pub lambda_diffuse: f32,
    pub lambda_normal: f32,
    // data and model
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Integer box-downscale applied to ground-truth images.
    pub downscale: usize,
    pub diffuse_dims: usize,
    pub specular_dims: usize,
    // ablations
    pub no_mask: bool,
    pub no_specular: bool,
    pub sh_color_baseline: bool,
}

impl Default for CliConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let w = LossWeights::default();
        let dims = FeatureDims::default();
        Self {
            iterations: t.iterations,
            lr_position: t.lr_position,
            lr_position_final: t.lr_position_final,
            lr_opacity: t.lr_opacity,
            lr_rotation: t.lr_rotation,
            lr_scale: t.lr_scale,
            lr_features: t.lr_features,
            lr_networks: t.lr_networks,
            densify_interval: t.densify_interval,
            densify_start: t.densify_start,
            densify_stop_fraction: t.densify_stop_fraction,
            densify_grad_threshold: t.densify_grad_threshold,
            prune_opacity: t.prune_opacity,
            split_scale_threshold: t.split_scale_threshold,
            max_screen_radius: t.max_screen_radius,
            seed: t.seed,
            eval_interval: t.eval_interval,
            checkpoint_interval: t.checkpoint_interval,
            near: DEFAULT_NEAR,
            lambda_dssim: w.lambda_dssim,
            lambda_diffuse: w.lambda_diffuse,
            lambda_normal: w.lambda_normal,
            data: None,
            out: None,
            downscale: 1,
            diffuse_dims: dims.diffuse,
            specular_dims: dims.specular,
            no_mask: false,
            no_specular: false,
            sh_color_baseline: false,
        }
    }
}

impl CliConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| ConfigError::Invalid {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            lr_position: self.lr_position,
            lr_position_final: self.lr_position_final,
            lr_opacity: self.lr_opacity,
            lr_rotation: self.lr_rotation,
            lr_scale: self.lr_scale,
            lr_features: self.lr_features,
            lr_networks: self.lr_networks,
            densify_interval: self.densify_interval,
            densify_start: self.densify_start,
            densify_stop_fraction: self.densify_stop_fraction,
            densify_grad_threshold: self.densify_grad_threshold,
            prune_opacity: self.prune_opacity,
            split_scale_threshold: self.split_scale_threshold,
            max_screen_radius: self.max_screen_radius,
            seed: self.seed,
            eval_interval: self.eval_interval,
            checkpoint_interval: self.checkpoint_interval,
            loss: LossWeights {
                lambda_dssim: self.lambda_dssim,
                lambda_diffuse: self.lambda_diffuse,
                lambda_normal: self.lambda_normal,
            },
            near: self.near,
        }
    }

    pub fn dims(&self) -> FeatureDims {
        FeatureDims {
            diffuse: self.diffuse_dims,
            specular: self.specular_dims,
        }
    }

    /// Ablation flags resolved to a render mode. The SH baseline replaces
    /// the specular network entirely; otherwise dropping the specular
    /// branch also drops the mask.
    pub fn mode(&self) -> RenderMode {
        if self.sh_color_baseline {
            RenderMode::ShColorBaseline
        } else if self.no_specular {
            RenderMode::NoSpecular
        } else if self.no_mask {
            RenderMode::NoMask
        } else {
            RenderMode::Full
        }
    }
}

/// Explicit camera pose for `render --pose`.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseSpec {
    pub width: usize,
    pub height: usize,
    pub fx: f32,
    pub fy: f32,
    pub cx: f32,
    pub cy: f32,
    /// Rigid world-to-camera transform, 4 rows of 4.
    pub world_to_camera: [[f32; 4]; 4],
}

impl PoseSpec {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| ConfigError::Invalid {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn to_view(&self) -> CameraView {
        let mut m = Matrix4::identity();
        for r in 0..4 {
            for c in 0..4 {
                m[(r, c)] = self.world_to_camera[r][c];
            }
        }
        CameraView {
            width: self.width,
            height: self.height,
            focal_x: self.fx,
            focal_y: self.fy,
            principal_point: Vector2::new(self.cx, self.cy),
            world_to_camera: m,
            image_path: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"iterations": 10, "lr_positionn": 0.1}"#).unwrap();
        let err = CliConfig::from_file(&path).unwrap_err();
        assert!(err.to_string().contains("lr_positionn"), "{err}");
    }

    #[test]
    fn partial_config_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(
            &path,
            r#"{"iterations": 42, "diffuse_dims": 4, "specular_dims": 4, "no_mask": true}"#,
        )
        .unwrap();
        let cfg = CliConfig::from_file(&path).unwrap();
        assert_eq!(cfg.iterations, 42);
        assert_eq!(cfg.dims().diffuse, 4);
        assert_eq!(cfg.mode(), RenderMode::NoMask);
        // the echoed config parses back to the same value
        let echoed = cfg.to_json();
        let path2 = dir.path().join("echo.json");
        std::fs::write(&path2, echoed).unwrap();
        let back = CliConfig::from_file(&path2).unwrap();
        assert_eq!(back.iterations, cfg.iterations);
        assert_eq!(back.no_mask, cfg.no_mask);
    }

    #[test]
    fn mode_precedence() {
        let mut cfg = CliConfig::default();
        assert_eq!(cfg.mode(), RenderMode::Full);
        cfg.no_mask = true;
        assert_eq!(cfg.mode(), RenderMode::NoMask);
        cfg.no_specular = true;
        assert_eq!(cfg.mode(), RenderMode::NoSpecular);
        cfg.sh_color_baseline = true;
        assert_eq!(cfg.mode(), RenderMode::ShColorBaseline);
    }

    #[test]
    fn pose_spec_builds_a_view() {
        let spec = PoseSpec {
            width: 8,
            height: 6,
            fx: 5.0,
            fy: 5.0,
            cx: 4.0,
            cy: 3.0,
            world_to_camera: [
                [1.0, 0.0, 0.0, 0.5],
                [0.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, 2.0],
                [0.0, 0.0, 0.0, 1.0],
            ],
        };
        let view = spec.to_view();
        view.validate().unwrap();
        assert_eq!(view.width, 8);
        assert_eq!(view.translation(), nalgebra::Vector3::new(0.5, 0.0, 2.0));
    }
}
