//! COLMAP sparse-reconstruction ingestion: cameras, image poses and 3D
//! points in both the binary and text formats, plus cloud initialization
//! from the parsed points.
//!
//! Binary layout (little-endian) and text layout follow the COLMAP
//! exporter. Only undistorted pinhole models are accepted; anything with
//! distortion parameters is rejected loudly.

use std::collections::BTreeMap;
use std::io::Cursor;

use byteorder::{LittleEndian, ReadBytesExt};
use nalgebra::{Matrix4, Vector3};
use rand::Rng;

use crate::scene::{
    logit, normalize_quaternion, rotation_from_quaternion, FeatureDims, GaussianCloud,
    LatentGaussian, INIT_FEATURE_AMPLITUDE, INIT_OPACITY, MIN_INIT_DISTANCE,
};

#[derive(Debug, thiserror::Error)]
pub enum ColmapError {
    #[error("malformed {what}: {msg}")]
    MalformedFile { what: &'static str, msg: String },
    #[error("unsupported camera model {model} (only PINHOLE and SIMPLE_PINHOLE are accepted)")]
    UnsupportedCameraModel { model: String },
    #[error("reconstruction contains no 3D points")]
    EmptyReconstruction,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn malformed(what: &'static str, msg: impl Into<String>) -> ColmapError {
    ColmapError::MalformedFile {
        what,
        msg: msg.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CameraModel {
    SimplePinhole,
    Pinhole,
}

impl CameraModel {
    pub fn name(&self) -> &'static str {
        match self {
            Self::SimplePinhole => "SIMPLE_PINHOLE",
            Self::Pinhole => "PINHOLE",
        }
    }

    pub fn id(&self) -> u32 {
        match self {
            Self::SimplePinhole => 0,
            Self::Pinhole => 1,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Self::SimplePinhole => 3,
            Self::Pinhole => 4,
        }
    }
}

/// Intrinsics of one camera entry.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub model: CameraModel,
    pub width: u64,
    pub height: u64,
    pub params: Vec<f64>,
}

impl CameraIntrinsics {
    /// `(fx, fy, cx, cy)` in pixels.
    pub fn pinhole(&self) -> (f32, f32, f32, f32) {
        match self.model {
            CameraModel::SimplePinhole => (
                self.params[0] as f32,
                self.params[0] as f32,
                self.params[1] as f32,
                self.params[2] as f32,
            ),
            CameraModel::Pinhole => (
                self.params[0] as f32,
                self.params[1] as f32,
                self.params[2] as f32,
                self.params[3] as f32,
            ),
        }
    }
}

/// One image's pose: `world_to_camera = [R(q) | t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePose {
    /// Unit quaternion `(w, x, y, z)` after normalization.
    pub quaternion: [f64; 4],
    pub translation: [f64; 3],
    pub camera_id: u32,
    /// Image file name, preserved verbatim (may be non-UTF-8).
    pub name: Vec<u8>,
}

impl ImagePose {
    pub fn name_lossy(&self) -> String {
        String::from_utf8_lossy(&self.name).into_owned()
    }

    pub fn world_to_camera(&self) -> Matrix4<f32> {
        let q = [
            self.quaternion[0] as f32,
            self.quaternion[1] as f32,
            self.quaternion[2] as f32,
            self.quaternion[3] as f32,
        ];
        let q = normalize_quaternion(&q).unwrap_or([1.0, 0.0, 0.0, 0.0]);
        let r = rotation_from_quaternion(&q);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m[(0, 3)] = self.translation[0] as f32;
        m[(1, 3)] = self.translation[1] as f32;
        m[(2, 3)] = self.translation[2] as f32;
        m
    }
}

/// One sparse point.
#[derive(Clone, Debug, PartialEq)]
pub struct SfmPoint {
    pub position: Vector3<f32>,
    pub color: [u8; 3],
    pub reprojection_error: f32,
}

/// A parsed sparse reconstruction.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseReconstruction {
    pub cameras: BTreeMap<u32, CameraIntrinsics>,
    pub images: BTreeMap<u32, ImagePose>,
    pub points: Vec<SfmPoint>,
}

impl SparseReconstruction {
    /// Every image must reference an existing camera.
    pub fn validate(&self) -> Result<(), ColmapError> {
        for (id, img) in &self.images {
            if !self.cameras.contains_key(&img.camera_id) {
                return Err(malformed(
                    "reconstruction",
                    format!("image {id} references missing camera {}", img.camera_id),
                ));
            }
        }
        Ok(())
    }
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self {
            cur: Cursor::new(bytes),
            what,
        }
    }

    fn eof(&mut self) -> ColmapError {
        malformed(self.what, "unexpected end of stream")
    }

    fn u8(&mut self) -> Result<u8, ColmapError> {
        self.cur.read_u8().map_err(|_| self.eof())
    }

    fn u32(&mut self) -> Result<u32, ColmapError> {
        self.cur.read_u32::<LittleEndian>().map_err(|_| self.eof())
    }

    fn u64(&mut self) -> Result<u64, ColmapError> {
        self.cur.read_u64::<LittleEndian>().map_err(|_| self.eof())
    }

    fn f64(&mut self) -> Result<f64, ColmapError> {
        self.cur.read_f64::<LittleEndian>().map_err(|_| self.eof())
    }

    fn cstring(&mut self) -> Result<Vec<u8>, ColmapError> {
        let mut out = Vec::new();
        loop {
            let b = self.u8()?;
            if b == 0 {
                return Ok(out);
            }
            out.push(b);
        }
    }
}

fn model_from_id(id: u32) -> Result<CameraModel, ColmapError> {
    match id {
        0 => Ok(CameraModel::SimplePinhole),
        1 => Ok(CameraModel::Pinhole),
        other => Err(ColmapError::UnsupportedCameraModel {
            model: format!("id {other}"),
        }),
    }
}

fn model_from_name(name: &str) -> Result<CameraModel, ColmapError> {
    match name {
        "SIMPLE_PINHOLE" => Ok(CameraModel::SimplePinhole),
        "PINHOLE" => Ok(CameraModel::Pinhole),
        other => Err(ColmapError::UnsupportedCameraModel {
            model: other.to_string(),
        }),
    }
}

/// Parse `cameras.bin`.
pub fn parse_cameras_bin(bytes: &[u8]) -> Result<BTreeMap<u32, CameraIntrinsics>, ColmapError> {
    let mut r = Reader::new(bytes, "cameras.bin");
    let count = r.u64()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let id = r.u32()?;
        let model = model_from_id(r.u32()?)?;
        let width = r.u64()?;
        let height = r.u64()?;
        let mut params = Vec::with_capacity(model.param_count());
        for _ in 0..model.param_count() {
            params.push(r.f64()?);
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(malformed("cameras.bin", format!("non-finite parameters for camera {id}")));
        }
        out.insert(id, CameraIntrinsics { model, width, height, params });
    }
    Ok(out)
}

/// Parse `images.bin`. 2D observations are read and discarded.
pub fn parse_images_bin(bytes: &[u8]) -> Result<BTreeMap<u32, ImagePose>, ColmapError> {
    let mut r = Reader::new(bytes, "images.bin");
    let count = r.u64()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let id = r.u32()?;
        let q = [r.f64()?, r.f64()?, r.f64()?, r.f64()?];
        let t = [r.f64()?, r.f64()?, r.f64()?];
        let camera_id = r.u32()?;
        let name = r.cstring()?;
        let n2d = r.u64()?;
        for _ in 0..n2d {
            r.f64()?;
            r.f64()?;
            r.u64()?;
        }
        out.insert(id, normalized_pose(id, q, t, camera_id, name, "images.bin")?);
    }
    Ok(out)
}

fn normalized_pose(
    id: u32,
    q: [f64; 4],
    t: [f64; 3],
    camera_id: u32,
    name: Vec<u8>,
    what: &'static str,
) -> Result<ImagePose, ColmapError> {
    if q.iter().any(|v| !v.is_finite()) || t.iter().any(|v| !v.is_finite()) {
        return Err(malformed(what, format!("non-finite pose for image {id}")));
    }
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(malformed(what, format!("zero quaternion for image {id}")));
    }
    Ok(ImagePose {
        quaternion: [q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm],
        translation: t,
        camera_id,
        name,
    })
}

/// Parse `points3D.bin`. Track elements are read and discarded.
pub fn parse_points3d_bin(bytes: &[u8]) -> Result<Vec<SfmPoint>, ColmapError> {
    let mut r = Reader::new(bytes, "points3D.bin");
    let count = r.u64()?;
    let mut out = Vec::with_capacity(count.min(1 << 24) as usize);
    for _ in 0..count {
        let id = r.u64()?;
        let xyz = [r.f64()?, r.f64()?, r.f64()?];
        let color = [r.u8()?, r.u8()?, r.u8()?];
        let error = r.f64()?;
        let track = r.u64()?;
        for _ in 0..track {
            r.u32()?;
            r.u32()?;
        }
        out.push(point_from_parts(id, xyz, color, error, "points3D.bin")?);
    }
    Ok(out)
}

fn point_from_parts(
    id: u64,
    xyz: [f64; 3],
    color: [u8; 3],
    error: f64,
    what: &'static str,
) -> Result<SfmPoint, ColmapError> {
    if xyz.iter().any(|v| !v.is_finite()) {
        return Err(malformed(what, format!("non-finite position for point {id}")));
    }
    Ok(SfmPoint {
        position: Vector3::new(xyz[0] as f32, xyz[1] as f32, xyz[2] as f32),
        color,
        reprojection_error: error as f32,
    })
}

fn content_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
}

fn parse_num<T: std::str::FromStr>(
    tok: Option<&str>,
    what: &'static str,
    field: &str,
) -> Result<T, ColmapError> {
    tok.ok_or_else(|| malformed(what, format!("missing {field}")))?
        .parse::<T>()
        .map_err(|_| malformed(what, format!("invalid {field}")))
}

/// Parse `cameras.txt`.
pub fn parse_cameras_txt(text: &str) -> Result<BTreeMap<u32, CameraIntrinsics>, ColmapError> {
    let mut out = BTreeMap::new();
    for line in content_lines(text) {
        let mut tok = line.split_whitespace();
        let id: u32 = parse_num(tok.next(), "cameras.txt", "camera id")?;
        let model = model_from_name(tok.next().ok_or_else(|| malformed("cameras.txt", "missing model"))?)?;
        let width: u64 = parse_num(tok.next(), "cameras.txt", "width")?;
        let height: u64 = parse_num(tok.next(), "cameras.txt", "height")?;
        let params: Vec<f64> = tok
            .map(|t| t.parse::<f64>().map_err(|_| malformed("cameras.txt", "invalid parameter")))
            .collect::<Result<_, _>>()?;
        if params.len() != model.param_count() {
            return Err(malformed(
                "cameras.txt",
                format!(
                    "camera {id}: expected {} parameters for {}, got {}",
                    model.param_count(),
                    model.name(),
                    params.len()
                ),
            ));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(malformed("cameras.txt", format!("non-finite parameters for camera {id}")));
        }
        out.insert(id, CameraIntrinsics { model, width, height, params });
    }
    Ok(out)
}

/// Parse `images.txt`: a pose line followed by a (possibly empty)
/// observation line per image.
pub fn parse_images_txt(text: &str) -> Result<BTreeMap<u32, ImagePose>, ColmapError> {
    let mut out = BTreeMap::new();
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.starts_with('#'));
    while let Some(line) = lines.next() {
        if line.is_empty() {
            continue;
        }
        let mut tok = line.split_whitespace();
        let id: u32 = parse_num(tok.next(), "images.txt", "image id")?;
        let mut f = |field: &str| -> Result<f64, ColmapError> {
            parse_num(tok.next(), "images.txt", field)
        };
        let q = [f("qw")?, f("qx")?, f("qy")?, f("qz")?];
        let t = [f("tx")?, f("ty")?, f("tz")?];
        let camera_id: u32 = parse_num(tok.next(), "images.txt", "camera id")?;
        let name = tok
            .next()
            .ok_or_else(|| malformed("images.txt", format!("image {id}: missing name")))?
            .as_bytes()
            .to_vec();
        // the observations line belongs to this image even when empty
        lines.next();
        out.insert(id, normalized_pose(id, q, t, camera_id, name, "images.txt")?);
    }
    Ok(out)
}

/// Parse `points3D.txt`.
pub fn parse_points3d_txt(text: &str) -> Result<Vec<SfmPoint>, ColmapError> {
    let mut out = Vec::new();
    for line in content_lines(text) {
        let mut tok = line.split_whitespace();
        let id: u64 = parse_num(tok.next(), "points3D.txt", "point id")?;
        let mut f = |field: &str| -> Result<f64, ColmapError> {
            parse_num(tok.next(), "points3D.txt", field)
        };
        let xyz = [f("x")?, f("y")?, f("z")?];
        let mut c = |field: &str| -> Result<u8, ColmapError> {
            let v: i64 = parse_num(tok.next(), "points3D.txt", field)?;
            u8::try_from(v).map_err(|_| {
                malformed("points3D.txt", format!("color {field} out of range: {v}"))
            })
        };
        let color = [c("r")?, c("g")?, c("b")?];
        let error: f64 = parse_num(tok.next(), "points3D.txt", "error")?;
        out.push(point_from_parts(id, xyz, color, error, "points3D.txt")?);
    }
    Ok(out)
}

// Writers, used to build fixtures and round-trip tests.

pub fn write_cameras_bin(cameras: &BTreeMap<u32, CameraIntrinsics>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend((cameras.len() as u64).to_le_bytes());
    for (id, cam) in cameras {
        out.extend(id.to_le_bytes());
        out.extend(cam.model.id().to_le_bytes());
        out.extend(cam.width.to_le_bytes());
        out.extend(cam.height.to_le_bytes());
        for p in &cam.params {
            out.extend(p.to_le_bytes());
        }
    }
    out
}

pub fn write_images_bin(images: &BTreeMap<u32, ImagePose>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend((images.len() as u64).to_le_bytes());
    for (id, img) in images {
        out.extend(id.to_le_bytes());
        for v in img.quaternion.iter().chain(&img.translation) {
            out.extend(v.to_le_bytes());
        }
        out.extend(img.camera_id.to_le_bytes());
        out.extend(&img.name);
        out.push(0);
        out.extend(0u64.to_le_bytes());
    }
    out
}

pub fn write_points3d_bin(points: &[SfmPoint]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend((points.len() as u64).to_le_bytes());
    for (i, p) in points.iter().enumerate() {
        out.extend((i as u64).to_le_bytes());
        for v in [p.position.x, p.position.y, p.position.z] {
            out.extend((v as f64).to_le_bytes());
        }
        out.extend(p.color);
        out.extend((p.reprojection_error as f64).to_le_bytes());
        out.extend(0u64.to_le_bytes());
    }
    out
}

pub fn write_cameras_txt(cameras: &BTreeMap<u32, CameraIntrinsics>) -> String {
    let mut out = String::from("# Camera list: CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]\n");
    for (id, cam) in cameras {
        out.push_str(&format!("{id} {} {} {}", cam.model.name(), cam.width, cam.height));
        for p in &cam.params {
            out.push_str(&format!(" {p}"));
        }
        out.push('\n');
    }
    out
}

pub fn write_images_txt(images: &BTreeMap<u32, ImagePose>) -> String {
    let mut out =
        String::from("# Image list: IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME\n#   POINTS2D[]\n");
    for (id, img) in images {
        let q = img.quaternion;
        let t = img.translation;
        out.push_str(&format!(
            "{id} {} {} {} {} {} {} {} {} {}\n\n",
            q[0],
            q[1],
            q[2],
            q[3],
            t[0],
            t[1],
            t[2],
            img.camera_id,
            img.name_lossy(),
        ));
    }
    out
}

pub fn write_points3d_txt(points: &[SfmPoint]) -> String {
    let mut out = String::from("# 3D point list: POINT3D_ID X Y Z R G B ERROR TRACK[]\n");
    for (i, p) in points.iter().enumerate() {
        out.push_str(&format!(
            "{i} {} {} {} {} {} {} {}\n",
            p.position.x,
            p.position.y,
            p.position.z,
            p.color[0],
            p.color[1],
            p.color[2],
            p.reprojection_error
        ));
    }
    out
}

/// Mean distance from each point to its 3 nearest neighbors, floored at
/// [`MIN_INIT_DISTANCE`].
fn mean_knn_distances(points: &[Vector3<f32>]) -> Vec<f32> {
    let tree = KdTree::build(points);
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut best = [f32::INFINITY; 3];
            tree.knn3(*p, i, &mut best);
            let found: Vec<f32> = best
                .iter()
                .copied()
                .filter(|d| d.is_finite())
                .collect();
            if found.is_empty() {
                MIN_INIT_DISTANCE
            } else {
                let mean = found.iter().map(|d| d.sqrt()).sum::<f32>() / found.len() as f32;
                mean.max(MIN_INIT_DISTANCE)
            }
        })
        .collect()
}

/// Minimal kd-tree over points, used only for 3-nearest-neighbor queries
/// during initialization.
struct KdTree {
    // (point, original index), reordered in place; nodes are midpoints.
    items: Vec<(Vector3<f32>, usize)>,
}

impl KdTree {
    fn build(points: &[Vector3<f32>]) -> Self {
        let mut items: Vec<(Vector3<f32>, usize)> =
            points.iter().copied().zip(0..).collect();
        if !items.is_empty() {
            Self::sort(&mut items, 0);
        }
        Self { items }
    }

    fn sort(items: &mut [(Vector3<f32>, usize)], axis: usize) {
        if items.len() <= 1 {
            return;
        }
        let mid = items.len() / 2;
        items.select_nth_unstable_by(mid, |a, b| {
            a.0[axis].partial_cmp(&b.0[axis]).unwrap_or(std::cmp::Ordering::Equal)
        });
        let (lo, hi) = items.split_at_mut(mid);
        Self::sort(lo, (axis + 1) % 3);
        Self::sort(&mut hi[1..], (axis + 1) % 3);
    }

    /// Squared distances of the 3 nearest neighbors of `p`, excluding the
    /// point with original index `skip`.
    fn knn3(&self, p: Vector3<f32>, skip: usize, best: &mut [f32; 3]) {
        self.search(&self.items, 0, p, skip, best);
    }

    fn search(
        &self,
        items: &[(Vector3<f32>, usize)],
        axis: usize,
        p: Vector3<f32>,
        skip: usize,
        best: &mut [f32; 3],
    ) {
        if items.is_empty() {
            return;
        }
        let mid = items.len() / 2;
        let (node, idx) = items[mid];
        if idx != skip {
            let d2 = (node - p).norm_squared();
            if d2 < best[2] {
                best[2] = d2;
                best.sort_by(|a, b| a.partial_cmp(b).unwrap());
            }
        }
        let delta = p[axis] - node[axis];
        let (near, far) = if delta < 0.0 {
            (&items[..mid], &items[mid + 1..])
        } else {
            (&items[mid + 1..], &items[..mid])
        };
        self.search(near, (axis + 1) % 3, p, skip, best);
        if delta * delta < best[2] {
            self.search(far, (axis + 1) % 3, p, skip, best);
        }
    }
}

/// Build the initial Gaussian cloud from the sparse points: one Gaussian
/// per point, isotropic scale from the mean 3-nearest-neighbor distance,
/// low starting opacity, identity rotation and small random latents.
pub fn init_cloud(
    points: &[SfmPoint],
    dims: FeatureDims,
    rng: &mut impl Rng,
) -> Result<GaussianCloud, ColmapError> {
    if points.is_empty() {
        return Err(ColmapError::EmptyReconstruction);
    }
    let positions: Vec<Vector3<f32>> = points.iter().map(|p| p.position).collect();
    let distances = mean_knn_distances(&positions);
    let mut cloud = GaussianCloud::new(dims);
    let amp = INIT_FEATURE_AMPLITUDE;
    for (p, d) in points.iter().zip(distances) {
        let log_scale = d.ln();
        cloud.push(LatentGaussian {
            position: p.position,
            opacity_logit: logit(INIT_OPACITY),
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: Vector3::from_element(log_scale),
            f_diffuse: (0..dims.diffuse).map(|_| rng.gen_range(-amp..amp)).collect(),
            f_specular: (0..dims.specular).map(|_| rng.gen_range(-amp..amp)).collect(),
        });
    }
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand::Rng as RandRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cameras_bin_single_pinhole_fixture() {
        // built byte-by-byte from the format definition
        let mut bytes = Vec::new();
        bytes.extend(1u64.to_le_bytes()); // count
        bytes.extend(7u32.to_le_bytes()); // camera id
        bytes.extend(1u32.to_le_bytes()); // PINHOLE
        bytes.extend(100u64.to_le_bytes()); // width
        bytes.extend(80u64.to_le_bytes()); // height
        for p in [90.0f64, 90.0, 50.0, 40.0] {
            bytes.extend(p.to_le_bytes());
        }
        let cams = parse_cameras_bin(&bytes).unwrap();
        let cam = &cams[&7];
        assert_eq!(cam.model, CameraModel::Pinhole);
        assert_eq!((cam.width, cam.height), (100, 80));
        assert_eq!(cam.pinhole(), (90.0, 90.0, 50.0, 40.0));
    }

    #[test]
    fn cameras_bin_empty_and_truncated() {
        let empty = 0u64.to_le_bytes().to_vec();
        assert!(parse_cameras_bin(&empty).unwrap().is_empty());
        let mut bytes = Vec::new();
        bytes.extend(1u64.to_le_bytes());
        bytes.extend(7u32.to_le_bytes());
        bytes.extend(1u32.to_le_bytes());
        bytes.extend(100u64.to_le_bytes());
        // height and params missing
        assert!(matches!(
            parse_cameras_bin(&bytes),
            Err(ColmapError::MalformedFile { .. })
        ));
    }

    #[test]
    fn cameras_unknown_model_rejected() {
        let mut bytes = Vec::new();
        bytes.extend(1u64.to_le_bytes());
        bytes.extend(1u32.to_le_bytes());
        bytes.extend(3u32.to_le_bytes()); // RADIAL
        bytes.extend(10u64.to_le_bytes());
        bytes.extend(10u64.to_le_bytes());
        assert!(matches!(
            parse_cameras_bin(&bytes),
            Err(ColmapError::UnsupportedCameraModel { .. })
        ));
        assert!(matches!(
            parse_cameras_txt("1 OPENCV 10 10 1 1 5 5 0 0 0 0"),
            Err(ColmapError::UnsupportedCameraModel { .. })
        ));
    }

    #[test]
    fn images_bin_identity_and_rotation_fixtures() {
        let mut images = BTreeMap::new();
        images.insert(
            1,
            ImagePose {
                quaternion: [1.0, 0.0, 0.0, 0.0],
                translation: [0.0, 0.0, 0.0],
                camera_id: 1,
                name: b"a.png".to_vec(),
            },
        );
        let s = std::f64::consts::FRAC_1_SQRT_2;
        images.insert(
            2,
            ImagePose {
                quaternion: [s, 0.0, s, 0.0],
                translation: [0.0, 0.0, 0.0],
                camera_id: 1,
                name: b"b.png".to_vec(),
            },
        );
        let parsed = parse_images_bin(&write_images_bin(&images)).unwrap();
        let w2c = parsed[&1].world_to_camera();
        assert!((w2c - Matrix4::identity()).abs().max() < 1e-6);
        // ninety-degree rotation about y
        let w2c = parsed[&2].world_to_camera();
        let expected = Matrix4::new(
            0.0, 0.0, 1.0, 0.0, //
            0.0, 1.0, 0.0, 0.0, //
            -1.0, 0.0, 0.0, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        );
        assert!((w2c - expected).abs().max() < 1e-6);
    }

    #[test]
    fn images_bin_preserves_non_ascii_names() {
        let mut images = BTreeMap::new();
        let name = vec![0xF0u8, 0x9F, 0x8C, 0x9F, 0xFF, 0x2E, 0x70, 0x6E, 0x67];
        images.insert(
            3,
            ImagePose {
                quaternion: [1.0, 0.0, 0.0, 0.0],
                translation: [1.0, 2.0, 3.0],
                camera_id: 1,
                name: name.clone(),
            },
        );
        let parsed = parse_images_bin(&write_images_bin(&images)).unwrap();
        assert_eq!(parsed[&3].name, name);
    }

    #[test]
    fn points_bin_fixture_and_empty() {
        let points = vec![SfmPoint {
            position: Vector3::new(1.0, 2.0, 3.0),
            color: [255, 0, 0],
            reprojection_error: 0.5,
        }];
        let parsed = parse_points3d_bin(&write_points3d_bin(&points)).unwrap();
        assert_eq!(parsed, points);
        let parsed = parse_points3d_bin(&write_points3d_bin(&[])).unwrap();
        assert!(parsed.is_empty());
    }

    #[test]
    fn points_txt_nan_position_rejected() {
        let text = "1 nan 2.0 3.0 255 0 0 0.5";
        assert!(matches!(
            parse_points3d_txt(text),
            Err(ColmapError::MalformedFile { .. })
        ));
    }

    #[test]
    fn init_cloud_positions_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let points: Vec<SfmPoint> = [(0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (0.0, 2.0, 0.0)]
            .iter()
            .map(|&(x, y, z)| SfmPoint {
                position: Vector3::new(x, y, z),
                color: [10, 20, 30],
                reprojection_error: 0.1,
            })
            .collect();
        let cloud = init_cloud(&points, FeatureDims::default(), &mut rng).unwrap();
        assert_eq!(cloud.len(), 3);
        for (g, p) in cloud.gaussians.iter().zip(&points) {
            assert_eq!(g.position, p.position);
            assert_eq!(g.f_diffuse.len(), 8);
        }
        assert!(matches!(
            init_cloud(&[], FeatureDims::default(), &mut rng),
            Err(ColmapError::EmptyReconstruction)
        ));
    }

    #[test]
    fn init_cloud_coincident_points_use_distance_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = SfmPoint {
            position: Vector3::new(1.0, 1.0, 1.0),
            color: [0, 0, 0],
            reprojection_error: 0.0,
        };
        let cloud = init_cloud(&[p.clone(), p.clone(), p], FeatureDims::default(), &mut rng).unwrap();
        for g in &cloud.gaussians {
            assert!((g.log_scale.x - MIN_INIT_DISTANCE.ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn init_cloud_thousand_points_scales_finite_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let points: Vec<SfmPoint> = (0..1000)
            .map(|_| SfmPoint {
                position: Vector3::new(
                    RandRng::gen_range(&mut rng, -5.0..5.0),
                    RandRng::gen_range(&mut rng, -5.0..5.0),
                    RandRng::gen_range(&mut rng, -5.0..5.0),
                ),
                color: [0, 0, 0],
                reprojection_error: 0.0,
            })
            .collect();
        let cloud = init_cloud(&points, FeatureDims::default(), &mut rng).unwrap();
        for g in &cloud.gaussians {
            let s = g.log_scale.map(f32::exp);
            assert!(s.iter().all(|v| v.is_finite() && *v > 0.0));
        }
    }

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let points: Vec<Vector3<f32>> = (0..200)
            .map(|_| {
                Vector3::new(
                    RandRng::gen_range(&mut rng, -1.0..1.0),
                    RandRng::gen_range(&mut rng, -1.0..1.0),
                    RandRng::gen_range(&mut rng, -1.0..1.0),
                )
            })
            .collect();
        let got = mean_knn_distances(&points);
        for (i, p) in points.iter().enumerate() {
            let mut dists: Vec<f32> = points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| (p - q).norm())
                .collect();
            dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let expect = (dists[0] + dists[1] + dists[2]) / 3.0;
            assert!(
                (got[i] - expect.max(MIN_INIT_DISTANCE)).abs() < 1e-5,
                "point {i}: {} vs {expect}",
                got[i]
            );
        }
    }

    fn arb_reconstruction() -> impl Strategy<Value = SparseReconstruction> {
        let cam = (1u64..200, 1u64..200, 10.0f64..100.0, -20.0f64..80.0, -20.0f64..80.0).prop_map(
            |(w, h, f, cx, cy)| CameraIntrinsics {
                model: CameraModel::SimplePinhole,
                width: w,
                height: h,
                params: vec![f, cx, cy],
            },
        );
        let img = (
            proptest::array::uniform4(-1.0f64..1.0),
            proptest::array::uniform3(-5.0f64..5.0),
            "[a-z]{1,8}\\.png",
        )
            .prop_filter_map("nonzero quaternion", |(q, t, name)| {
                let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm < 0.1 {
                    return None;
                }
                Some(ImagePose {
                    quaternion: [q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm],
                    translation: t,
                    camera_id: 1,
                    name: name.into_bytes(),
                })
            });
        let point = (
            proptest::array::uniform3(-10.0f32..10.0),
            proptest::array::uniform3(0u8..=255),
            0.0f32..2.0,
        )
            .prop_map(|(p, c, e)| SfmPoint {
                position: Vector3::new(p[0], p[1], p[2]),
                color: c,
                reprojection_error: e,
            });
        (
            proptest::collection::btree_map(1u32..20, cam, 1..4),
            proptest::collection::vec(img, 1..6),
            proptest::collection::vec(point, 0..20),
        )
            .prop_map(|(cameras, imgs, points)| {
                let images = imgs
                    .into_iter()
                    .enumerate()
                    .map(|(i, mut img)| {
                        img.camera_id = *cameras.keys().next().unwrap();
                        (i as u32 + 1, img)
                    })
                    .collect();
                SparseReconstruction { cameras, images, points }
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn binary_and_text_parsers_agree(recon in arb_reconstruction()) {
            let from_bin = SparseReconstruction {
                cameras: parse_cameras_bin(&write_cameras_bin(&recon.cameras)).unwrap(),
                images: parse_images_bin(&write_images_bin(&recon.images)).unwrap(),
                points: parse_points3d_bin(&write_points3d_bin(&recon.points)).unwrap(),
            };
            let from_txt = SparseReconstruction {
                cameras: parse_cameras_txt(&write_cameras_txt(&recon.cameras)).unwrap(),
                images: parse_images_txt(&write_images_txt(&recon.images)).unwrap(),
                points: parse_points3d_txt(&write_points3d_txt(&recon.points)).unwrap(),
            };
            from_bin.validate().unwrap();
            // binary is exact except for the renormalization applied to
            // parsed quaternions, which can shift the last ulp
            prop_assert_eq!(&from_bin.cameras, &recon.cameras);
            prop_assert_eq!(&from_bin.points, &recon.points);
            prop_assert_eq!(from_bin.images.len(), recon.images.len());
            for (id, img) in &from_bin.images {
                let orig = &recon.images[id];
                for i in 0..4 {
                    prop_assert!((img.quaternion[i] - orig.quaternion[i]).abs() < 1e-12);
                }
                prop_assert_eq!(&img.translation, &orig.translation);
                prop_assert_eq!(&img.name, &orig.name);
            }
            // text goes through decimal printing; compare with tolerance
            prop_assert_eq!(from_txt.cameras.len(), recon.cameras.len());
            prop_assert_eq!(from_txt.images.len(), recon.images.len());
            prop_assert_eq!(from_txt.points.len(), recon.points.len());
            for (a, b) in from_txt.points.iter().zip(&recon.points) {
                prop_assert!((a.position - b.position).norm() < 1e-4);
                prop_assert_eq!(a.color, b.color);
            }
            for (id, img) in &from_txt.images {
                let orig = &recon.images[id];
                for i in 0..4 {
                    prop_assert!((img.quaternion[i] - orig.quaternion[i]).abs() < 1e-9);
                }
                prop_assert_eq!(&img.name, &orig.name);
            }
        }

        #[test]
        fn parsing_arbitrary_bytes_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..400)) {
            let _ = parse_cameras_bin(&bytes);
            let _ = parse_images_bin(&bytes);
            let _ = parse_points3d_bin(&bytes);
            if let Ok(text) = std::str::from_utf8(&bytes) {
                let _ = parse_cameras_txt(text);
                let _ = parse_images_txt(text);
                let _ = parse_points3d_txt(text);
            }
        }
    }
}
