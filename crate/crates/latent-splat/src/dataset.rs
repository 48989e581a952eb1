//! Dataset assembly: COLMAP directory layout, ground-truth image loading,
//! integer downscaling and the train/test split.

use std::path::{Path, PathBuf};

use nalgebra::Vector2;

use crate::colmap::{self, ColmapError, SparseReconstruction};
use crate::scene::{CameraView, SceneError};
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error(transparent)]
    Colmap(#[from] ColmapError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("missing {0}")]
    Missing(PathBuf),
    #[error("failed to decode image {path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("image {path} is {got_w}x{got_h}, camera expects {want_w}x{want_h}")]
    SizeMismatch {
        path: PathBuf,
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("dataset has no usable views")]
    NoViews,
}

/// Views with their ground-truth images and the held-out split.
#[derive(Clone, Debug)]
pub struct Dataset {
    /// Sorted by image name.
    pub views: Vec<CameraView>,
    /// `[3, H, W]` in [0, 1], aligned with `views`.
    pub images: Vec<Tensor>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

impl Dataset {
    /// In-memory dataset where every view trains (synthetic scenes).
    pub fn from_memory(views: Vec<CameraView>, images: Vec<Tensor>) -> Self {
        let train_indices = (0..views.len()).collect();
        Self {
            views,
            images,
            train_indices,
            test_indices: Vec::new(),
        }
    }

    /// Hold out every `n`-th view (by current order) for testing.
    pub fn holdout_every(&mut self, n: usize) {
        self.train_indices.clear();
        self.test_indices.clear();
        for i in 0..self.views.len() {
            if n > 0 && i % n == 0 {
                self.test_indices.push(i);
            } else {
                self.train_indices.push(i);
            }
        }
    }

    pub fn split(&self, test: bool) -> &[usize] {
        if test {
            &self.test_indices
        } else {
            &self.train_indices
        }
    }
}

fn read_pair(dir: &Path, stem: &str) -> Result<Vec<u8>, DatasetError> {
    let bin = dir.join(format!("{stem}.bin"));
    if bin.exists() {
        return Ok(std::fs::read(bin)?);
    }
    let txt = dir.join(format!("{stem}.txt"));
    if txt.exists() {
        return Ok(std::fs::read(txt)?);
    }
    Err(DatasetError::Missing(bin))
}

/// Load the sparse reconstruction from `<data>/sparse/0/`, preferring the
/// binary files.
pub fn load_reconstruction(data_dir: &Path) -> Result<SparseReconstruction, DatasetError> {
    let sparse = data_dir.join("sparse").join("0");
    if !sparse.is_dir() {
        return Err(DatasetError::Missing(sparse));
    }
    let read = |stem: &str, is_bin: &mut bool| -> Result<Vec<u8>, DatasetError> {
        let bin = sparse.join(format!("{stem}.bin"));
        *is_bin = bin.exists();
        read_pair(&sparse, stem)
    };
    let mut is_bin = false;
    let cameras_raw = read("cameras", &mut is_bin)?;
    let cameras = if is_bin {
        colmap::parse_cameras_bin(&cameras_raw)?
    } else {
        colmap::parse_cameras_txt(&String::from_utf8_lossy(&cameras_raw))?
    };
    let images_raw = read("images", &mut is_bin)?;
    let images = if is_bin {
        colmap::parse_images_bin(&images_raw)?
    } else {
        colmap::parse_images_txt(&String::from_utf8_lossy(&images_raw))?
    };
    let points_raw = read("points3D", &mut is_bin)?;
    let points = if is_bin {
        colmap::parse_points3d_bin(&points_raw)?
    } else {
        colmap::parse_points3d_txt(&String::from_utf8_lossy(&points_raw))?
    };
    let recon = SparseReconstruction {
        cameras,
        images,
        points,
    };
    recon.validate()?;
    Ok(recon)
}

/// Decode a ground-truth image to `[3, H, W]` floats in [0, 1], box-
/// downscaled by the integer factor.
pub fn load_image(path: &Path, downscale: usize) -> Result<Tensor, DatasetError> {
    let img = image::open(path)
        .map_err(|e| DatasetError::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[3, h, w]).to_vec();
    for (y, row) in img.rows().enumerate() {
        for (x, px) in row.enumerate() {
            for c in 0..3 {
                t[c * h * w + y * w + x] = px.0[c] as f32 / 255.0;
            }
        }
    }
    let full = Tensor::new(&[3, h, w], t).expect("image buffer");
    Ok(downscale_box(&full, downscale))
}

/// Average `k x k` blocks; trailing rows/columns that do not fill a block
/// are dropped. Factor 1 (or degenerate sizes) returns the input.
pub fn downscale_box(img: &Tensor, k: usize) -> Tensor {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if k <= 1 || h / k == 0 || w / k == 0 {
        return img.clone();
    }
    let (ho, wo) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f32;
    let src = img.data();
    let mut out = vec![0.0f32; c * ho * wo];
    for ci in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                let mut s = 0.0f32;
                for dy in 0..k {
                    for dx in 0..k {
                        s += src[ci * h * w + (y * k + dy) * w + (x * k + dx)];
                    }
                }
                out[ci * ho * wo + y * wo + x] = s * inv;
            }
        }
    }
    Tensor::new(&[c, ho, wo], out).expect("downscale shape")
}

/// Clamp to [0, 1] and write an 8-bit PNG.
pub fn save_image(path: &Path, img: &Tensor) -> Result<(), DatasetError> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    assert_eq!(c, 3, "save_image expects [3,H,W]");
    let mut buf = vec![0u8; w * h * 3];
    let hw = h * w;
    for pix in 0..hw {
        for ch in 0..3 {
            let v = img.data()[ch * hw + pix].clamp(0.0, 1.0);
            buf[pix * 3 + ch] = (v * 255.0).round() as u8;
        }
    }
    let rgb = image::RgbImage::from_raw(w as u32, h as u32, buf).expect("raw buffer size");
    rgb.save(path).map_err(|e| DatasetError::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Build the full dataset from a COLMAP directory: parse the sparse model,
/// load every referenced image from `<data>/images/`, and hold out every
/// 8th view by sorted name.
pub fn load_dataset(
    data_dir: &Path,
    downscale: usize,
) -> Result<(Dataset, SparseReconstruction), DatasetError> {
    let recon = load_reconstruction(data_dir)?;
    let images_dir = data_dir.join("images");
    // sort by name for a deterministic split
    let mut entries: Vec<&colmap::ImagePose> = recon.images.values().collect();
    entries.sort_by(|a, b| a.name.cmp(&b.name));

    let mut views = Vec::new();
    let mut images = Vec::new();
    for pose in entries {
        let cam = &recon.cameras[&pose.camera_id];
        let path = images_dir.join(pose.name_lossy());
        if !path.exists() {
            return Err(DatasetError::Missing(path));
        }
        let img = load_image(&path, downscale)?;
        let k = downscale.max(1) as f32;
        let (fx, fy, cx, cy) = cam.pinhole();
        let (h, w) = (img.shape()[1], img.shape()[2]);
        let (want_w, want_h) = (
            cam.width as usize / downscale.max(1),
            cam.height as usize / downscale.max(1),
        );
        if w != want_w || h != want_h {
            return Err(DatasetError::SizeMismatch {
                path,
                got_w: w,
                got_h: h,
                want_w,
                want_h,
            });
        }
        let view = CameraView {
            width: w,
            height: h,
            focal_x: fx / k,
            focal_y: fy / k,
            principal_point: Vector2::new(cx / k, cy / k),
            world_to_camera: pose.world_to_camera(),
            image_path: Some(path),
        };
        view.validate()?;
        views.push(view);
        images.push(img);
    }
    if views.is_empty() {
        return Err(DatasetError::NoViews);
    }
    let mut dataset = Dataset::from_memory(views, images);
    dataset.holdout_every(8);
    Ok((dataset, recon))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn holdout_every_eighth() {
        let mut ds = Dataset {
            views: Vec::new(),
            images: Vec::new(),
            train_indices: Vec::new(),
            test_indices: Vec::new(),
        };
        // fake 20 views
        for _ in 0..20 {
            ds.views.push(CameraView {
                width: 2,
                height: 2,
                focal_x: 1.0,
                focal_y: 1.0,
                principal_point: Vector2::new(1.0, 1.0),
                world_to_camera: nalgebra::Matrix4::identity(),
                image_path: None,
            });
            ds.images.push(Tensor::zeros(&[3, 2, 2]));
        }
        ds.holdout_every(8);
        assert_eq!(ds.test_indices, vec![0, 8, 16]);
        assert_eq!(ds.train_indices.len(), 17);
    }

    #[test]
    fn downscale_box_averages_blocks() {
        let img = Tensor::from_fn(&[1, 2, 4], |i| i as f32);
        let down = downscale_box(&img, 2);
        assert_eq!(down.shape(), &[1, 1, 2]);
        // blocks: [0,1,4,5] and [2,3,6,7]
        assert_eq!(down.data(), &[2.5, 4.5]);
    }

    #[test]
    fn save_and_load_round_trip_is_exact_for_u8_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        // values representable exactly as u8/255
        let img = Tensor::from_fn(&[3, 4, 4], |i| ((i * 5) % 256) as f32 / 255.0);
        save_image(&path, &img).unwrap();
        let back = load_image(&path, 1).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 0.5 / 255.0);
        }
    }

    #[test]
    fn missing_sparse_dir_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_reconstruction(dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("sparse"), "{msg}");
    }
}
