//! The end-to-end differentiable render: project, shade, splat, decode,
//! compose. One graph per view per step; the trainer reads gradients off
//! the returned handles.

use nalgebra::Vector3;
use rand::Rng;

use crate::autodiff::{Tape, TensorError, Value};
use crate::decoders::{
    compose, pixel_ray_encoding, DiffuseUNet, DiffuseUNetValues, SpecularCNN, SpecularCNNValues,
};
use crate::projection::{project_cloud, project_op, sort_by_depth, DEFAULT_NEAR};
use crate::rasterizer::{splat_op, RasterError};
use crate::scene::{activate, CameraView, FeatureDims, GaussianCloud, SceneError};
use crate::shading::{pseudo_normal, sh_encode, ShadingNets, ShadingValues, SH_COEFFS};
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// Which branches of the render participate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderMode {
    /// Diffuse + mask-gated specular.
    Full,
    /// Diffuse + ungated specular.
    NoMask,
    /// Diffuse only.
    NoSpecular,
    /// Diffuse plus a per-Gaussian spherical-harmonic color splat in place
    /// of the specular network.
    ShColorBaseline,
}

impl RenderMode {
    pub fn uses_specular_net(&self) -> bool {
        matches!(self, Self::Full | Self::NoMask)
    }

    pub fn uses_mask(&self) -> bool {
        matches!(self, Self::Full)
    }

    /// Channels splatted per Gaussian in this mode.
    pub fn splat_channels(&self, dims: FeatureDims) -> usize {
        match self {
            Self::Full => dims.diffuse + dims.specular + 1,
            Self::NoMask => dims.diffuse + dims.specular,
            Self::NoSpecular => dims.diffuse,
            Self::ShColorBaseline => dims.diffuse + 3,
        }
    }
}

/// All trainable state of one scene.
#[derive(Clone, Debug)]
pub struct Model {
    pub cloud: GaussianCloud,
    pub shading: ShadingNets,
    pub unet: DiffuseUNet,
    pub cnn: SpecularCNN,
    /// `[N, 48]` degree-3 SH color coefficients, present only in the
    /// SH-baseline mode.
    pub sh_coeffs: Option<Tensor>,
}

impl Model {
    pub fn new(cloud: GaussianCloud, mode: RenderMode, rng: &mut impl Rng) -> Self {
        let dims = cloud.dims;
        let sh_coeffs = matches!(mode, RenderMode::ShColorBaseline).then(|| {
            Tensor::rand_uniform(&[cloud.len().max(1), 3 * SH_COEFFS], -0.01, 0.01, rng)
        });
        Self {
            shading: ShadingNets::new(dims.diffuse + dims.specular, rng),
            unet: DiffuseUNet::new(dims.diffuse, rng),
            cnn: SpecularCNN::new(dims.specular, rng),
            cloud,
            sh_coeffs,
        }
    }

    pub fn dims(&self) -> FeatureDims {
        self.cloud.dims
    }

    /// Packed per-Gaussian parameter tensors, row `i` = Gaussian `i`.
    pub fn packed_gaussians(&self) -> PackedGaussians {
        let n = self.cloud.len();
        let d = self.dims().diffuse;
        let s = self.dims().specular;
        let mut positions = Vec::with_capacity(n * 3);
        let mut opacity = Vec::with_capacity(n);
        let mut rotations = Vec::with_capacity(n * 4);
        let mut log_scales = Vec::with_capacity(n * 3);
        let mut f_diffuse = Vec::with_capacity(n * d);
        let mut f_specular = Vec::with_capacity(n * s);
        for g in &self.cloud.gaussians {
            positions.extend([g.position.x, g.position.y, g.position.z]);
            opacity.push(g.opacity_logit);
            rotations.extend(g.rotation);
            log_scales.extend([g.log_scale.x, g.log_scale.y, g.log_scale.z]);
            f_diffuse.extend(&g.f_diffuse);
            f_specular.extend(&g.f_specular);
        }
        PackedGaussians {
            positions: Tensor::new(&[n, 3], positions).unwrap(),
            opacity_logits: Tensor::new(&[n], opacity).unwrap(),
            rotations: Tensor::new(&[n, 4], rotations).unwrap(),
            log_scales: Tensor::new(&[n, 3], log_scales).unwrap(),
            f_diffuse: Tensor::new(&[n, d], f_diffuse).unwrap(),
            f_specular: Tensor::new(&[n, s], f_specular).unwrap(),
        }
    }

    /// Write packed tensors back into the cloud (after an optimizer step).
    pub fn unpack_gaussians(&mut self, packed: &PackedGaussians) {
        let d = self.dims().diffuse;
        let s = self.dims().specular;
        for (i, g) in self.cloud.gaussians.iter_mut().enumerate() {
            let p = &packed.positions.data()[i * 3..i * 3 + 3];
            g.position = Vector3::new(p[0], p[1], p[2]);
            g.opacity_logit = packed.opacity_logits.data()[i];
            g.rotation
                .copy_from_slice(&packed.rotations.data()[i * 4..i * 4 + 4]);
            let ls = &packed.log_scales.data()[i * 3..i * 3 + 3];
            g.log_scale = Vector3::new(ls[0], ls[1], ls[2]);
            g.f_diffuse
                .copy_from_slice(&packed.f_diffuse.data()[i * d..(i + 1) * d]);
            g.f_specular
                .copy_from_slice(&packed.f_specular.data()[i * s..(i + 1) * s]);
        }
    }
}

/// Per-Gaussian parameters as dense tensors.
#[derive(Clone, Debug)]
pub struct PackedGaussians {
    pub positions: Tensor,
    pub opacity_logits: Tensor,
    pub rotations: Tensor,
    pub log_scales: Tensor,
    pub f_diffuse: Tensor,
    pub f_specular: Tensor,
}

/// Leaf handles for every trainable tensor registered on a tape.
pub struct ModelLeaves {
    pub positions: Value,
    pub opacity_logits: Value,
    pub rotations: Value,
    pub log_scales: Value,
    pub f_diffuse: Value,
    pub f_specular: Value,
    pub sh_coeffs: Option<Value>,
    /// Shading + decoder parameters, ordered to match the nets'
    /// `visit_params_mut` traversal.
    pub net_values: Vec<Value>,
}

#[derive(Clone, Copy, Debug)]
pub struct RenderOptions {
    pub mode: RenderMode,
    pub near: f32,
    /// Register leaves with gradients.
    pub trainable: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            mode: RenderMode::Full,
            near: DEFAULT_NEAR,
            trainable: false,
        }
    }
}

/// The handles a render leaves behind.
pub struct RenderGraph {
    pub rgb: Value,
    pub diffuse_rgb: Value,
    pub specular_rgb: Option<Value>,
    pub mask_map: Option<Value>,
    /// Predicted unit normals for the visible set.
    pub normals: Option<Value>,
    /// Pseudo-normal supervision targets, constant.
    pub pseudo_normals: Option<Tensor>,
    /// `[H, W]` accumulated opacity.
    pub alpha: Tensor,
    pub contributors: Vec<u32>,
    /// Cloud indices of the visible Gaussians, front-to-back.
    pub visible: Vec<usize>,
    /// Screen radii of the visible Gaussians, same order.
    pub radii: Vec<f32>,
    /// `[M, 5]` packed (mean, cov) rows; its gradient drives
    /// densification.
    pub meancov: Option<Value>,
    pub leaves: ModelLeaves,
}

fn register_nets(
    tape: &mut Tape,
    model: &Model,
    trainable: bool,
) -> (ShadingValues, DiffuseUNetValues, SpecularCNNValues, Vec<Value>) {
    let shading = ShadingValues::register(tape, &model.shading, trainable);
    let unet = DiffuseUNetValues::register(tape, &model.unet, trainable);
    let cnn = SpecularCNNValues::register(tape, &model.cnn, trainable);
    let mut values = Vec::new();
    for layer in shading.normal.iter().chain(shading.mask.iter()) {
        values.push(layer.weight);
        values.push(layer.bias);
    }
    let mut push_conv = |c: &crate::decoders::ConvValues, values: &mut Vec<Value>| {
        values.push(c.weight);
        values.push(c.bias);
    };
    let mut push_block = |b: &crate::decoders::ResBlockValues, values: &mut Vec<Value>| {
        values.push(b.norm1.gain);
        values.push(b.norm1.bias);
        values.push(b.conv1.weight);
        values.push(b.conv1.bias);
        values.push(b.norm2.gain);
        values.push(b.norm2.bias);
        values.push(b.conv2.weight);
        values.push(b.conv2.bias);
    };
    push_conv(&unet.stem, &mut values);
    for b in &unet.enc {
        push_block(b, &mut values);
    }
    for c in &unet.down {
        push_conv(c, &mut values);
    }
    push_block(&unet.bottleneck, &mut values);
    for c in &unet.up {
        push_conv(c, &mut values);
    }
    for b in &unet.dec {
        push_block(b, &mut values);
    }
    push_conv(&unet.head, &mut values);
    push_conv(&cnn.base, &mut values);
    for c in &cnn.mix {
        push_conv(c, &mut values);
    }
    push_conv(&cnn.head, &mut values);
    (shading, unet, cnn, values)
}

/// Names matching [`register_nets`]'s value order, via the nets' visitors.
pub fn net_param_names(model: &Model) -> Vec<String> {
    let mut names = Vec::new();
    let mut m = model.clone();
    m.shading
        .visit_params_mut(&mut |name, _| names.push(name));
    m.unet.visit_params_mut(&mut |name, _| names.push(name));
    m.cnn.visit_params_mut(&mut |name, _| names.push(name));
    names
}

/// Build the render graph for one view.
pub fn render_view(
    tape: &mut Tape,
    model: &Model,
    view: &CameraView,
    opts: &RenderOptions,
) -> Result<RenderGraph, PipelineError> {
    let dims = model.dims();
    let (w, h) = (view.width, view.height);
    let packed = model.packed_gaussians();
    let trainable = opts.trainable;

    let leaves_positions = tape.leaf(packed.positions.clone(), trainable);
    let leaves_opacity = tape.leaf(packed.opacity_logits.clone(), trainable);
    let leaves_rotations = tape.leaf(packed.rotations.clone(), trainable);
    let leaves_log_scales = tape.leaf(packed.log_scales.clone(), trainable);
    let leaves_f_diffuse = tape.leaf(packed.f_diffuse.clone(), trainable);
    let leaves_f_specular = tape.leaf(packed.f_specular.clone(), trainable);
    let leaves_sh = match (&model.sh_coeffs, opts.mode) {
        (Some(coeffs), RenderMode::ShColorBaseline) => {
            Some(tape.leaf(coeffs.clone(), trainable))
        }
        _ => None,
    };
    let (shading_vals, unet_vals, cnn_vals, net_values) = register_nets(tape, model, trainable);

    // Pass 1: plain projection for culling, depth order and radii.
    let mut projected = project_cloud(&model.cloud, view, opts.near)?;
    sort_by_depth(&mut projected);
    let visible: Vec<usize> = projected.iter().map(|p| p.source_index).collect();
    let radii: Vec<f32> = projected.iter().map(|p| p.radius).collect();

    let leaves = ModelLeaves {
        positions: leaves_positions,
        opacity_logits: leaves_opacity,
        rotations: leaves_rotations,
        log_scales: leaves_log_scales,
        f_diffuse: leaves_f_diffuse,
        f_specular: leaves_f_specular,
        sh_coeffs: leaves_sh,
        net_values,
    };

    if visible.is_empty() {
        // Nothing splats: the decoders still see zero feature maps so the
        // image is well-defined (and trainable through the decoder biases).
        let zero_diffuse = tape.constant(Tensor::zeros(&[dims.diffuse, h, w]));
        let diffuse_rgb = unet_vals.decode(tape, zero_diffuse)?;
        let rgb = diffuse_rgb;
        return Ok(RenderGraph {
            rgb,
            diffuse_rgb,
            specular_rgb: None,
            mask_map: None,
            normals: None,
            pseudo_normals: None,
            alpha: Tensor::zeros(&[h, w]),
            contributors: vec![0; w * h],
            visible,
            radii,
            meancov: None,
            leaves,
        });
    }

    // Pass 2: the differentiable chain over the visible rows.
    let pos_vis = tape.index_select(leaves.positions, &visible)?;
    let opac_logit_vis = tape.index_select(leaves.opacity_logits, &visible)?;
    let rot_vis = tape.index_select(leaves.rotations, &visible)?;
    let scale_log_vis = tape.index_select(leaves.log_scales, &visible)?;
    let fd_vis = tape.index_select(leaves.f_diffuse, &visible)?;
    let fs_vis = tape.index_select(leaves.f_specular, &visible)?;

    let opacity_vis = tape.sigmoid(opac_logit_vis);
    let quat_vis = tape.normalize_rows(rot_vis, &[1.0, 0.0, 0.0, 0.0])?;
    let scale_vis = tape.exp(scale_log_vis);
    let meancov = project_op(tape, pos_vis, quat_vis, scale_vis, view)?;

    // View directions from the camera center toward each Gaussian.
    let center = view.camera_center()?;
    let center_c = tape.constant(Tensor::new(&[3], vec![center.x, center.y, center.z]).unwrap());
    let offsets = tape.sub(pos_vis, center_c)?;
    let dirs = tape.normalize_rows(offsets, &[0.0, 0.0, 1.0])?;

    let mut normals = None;
    let mut pseudo_normals = None;
    let splat_features = match opts.mode {
        RenderMode::Full => {
            let f_cat = tape.concat(&[fd_vis, fs_vis], 1)?;
            let n = shading_vals.predict_normal(tape, f_cat)?;
            let sh = sh_encode(tape, dirs)?;
            let f_m = shading_vals.predict_view_mask(tape, sh, n)?;
            normals = Some(n);
            pseudo_normals = Some(pseudo_normal_targets(model, view, &visible)?);
            tape.concat(&[fd_vis, fs_vis, f_m], 1)?
        }
        RenderMode::NoMask => tape.concat(&[fd_vis, fs_vis], 1)?,
        RenderMode::NoSpecular => fd_vis,
        RenderMode::ShColorBaseline => {
            let coeffs = leaves
                .sh_coeffs
                .expect("SH baseline mode carries coefficients");
            let coeffs_vis = tape.index_select(coeffs, &visible)?;
            let sh = sh_encode(tape, dirs)?;
            let mut channels = Vec::with_capacity(3);
            for c in 0..3 {
                let block = tape.slice(coeffs_vis, 1, c * SH_COEFFS, SH_COEFFS)?;
                let prod = tape.mul(block, sh)?;
                channels.push(tape.sum_axis(prod, 1, true)?);
            }
            let rgb_per_gaussian = tape.concat(&channels, 1)?;
            tape.concat(&[fd_vis, rgb_per_gaussian], 1)?
        }
    };

    let (fmap, alpha, contributors) =
        splat_op(tape, splat_features, opacity_vis, meancov, w, h)?;

    let diffuse_map = tape.slice(fmap, 0, 0, dims.diffuse)?;
    let diffuse_rgb = unet_vals.decode(tape, diffuse_map)?;

    let (rgb, specular_rgb, mask_map) = match opts.mode {
        RenderMode::Full => {
            let spec_map = tape.slice(fmap, 0, dims.diffuse, dims.specular)?;
            let ray = tape.constant(pixel_ray_encoding(view));
            let spec_rgb = cnn_vals.decode(tape, spec_map, ray)?;
            let mask = tape.slice(fmap, 0, dims.diffuse + dims.specular, 1)?;
            let rgb = compose(tape, diffuse_rgb, spec_rgb, mask)?;
            (rgb, Some(spec_rgb), Some(mask))
        }
        RenderMode::NoMask => {
            let spec_map = tape.slice(fmap, 0, dims.diffuse, dims.specular)?;
            let ray = tape.constant(pixel_ray_encoding(view));
            let spec_rgb = cnn_vals.decode(tape, spec_map, ray)?;
            let rgb = tape.add(diffuse_rgb, spec_rgb)?;
            (rgb, Some(spec_rgb), None)
        }
        RenderMode::NoSpecular => (diffuse_rgb, None, None),
        RenderMode::ShColorBaseline => {
            let spec_rgb = tape.slice(fmap, 0, dims.diffuse, 3)?;
            let rgb = tape.add(diffuse_rgb, spec_rgb)?;
            (rgb, Some(spec_rgb), None)
        }
    };

    Ok(RenderGraph {
        rgb,
        diffuse_rgb,
        specular_rgb,
        mask_map,
        normals,
        pseudo_normals,
        alpha,
        contributors,
        visible,
        radii,
        meancov: Some(meancov),
        leaves,
    })
}

/// Constant pseudo-normal rows for the visible set: shortest activated
/// axis flipped toward the viewing direction. These are supervision
/// targets, not part of the graph.
fn pseudo_normal_targets(
    model: &Model,
    view: &CameraView,
    visible: &[usize],
) -> Result<Tensor, PipelineError> {
    let center = view.camera_center()?;
    let mut rows = Vec::with_capacity(visible.len() * 3);
    for &i in visible {
        let g = &model.cloud.gaussians[i];
        let act = activate(g)?;
        let to_gaussian = g.position - center;
        let dir = if to_gaussian.norm() < 1e-12 {
            Vector3::new(0.0, 0.0, 1.0)
        } else {
            to_gaussian.normalize()
        };
        let n = pseudo_normal(&act.rotation, &act.scale, &dir);
        rows.extend([n.x, n.y, n.z]);
    }
    Ok(Tensor::new(&[visible.len(), 3], rows).unwrap())
}

/// Render without gradients and clamp to [0, 1].
pub fn render_image(
    model: &Model,
    view: &CameraView,
    mode: RenderMode,
) -> Result<RenderedImage, PipelineError> {
    let mut tape = Tape::new();
    let opts = RenderOptions {
        mode,
        trainable: false,
        ..Default::default()
    };
    let graph = render_view(&mut tape, model, view, &opts)?;
    let clamp = |v: Value| tape.value(v).map(|x| x.clamp(0.0, 1.0));
    Ok(RenderedImage {
        rgb: clamp(graph.rgb),
        diffuse: clamp(graph.diffuse_rgb),
        specular: graph.specular_rgb.map(|v| tape.value(v).clone()),
        mask: graph.mask_map.map(|v| tape.value(v).clone()),
        alpha: graph.alpha,
    })
}

/// Clamped render plus its components.
pub struct RenderedImage {
    pub rgb: Tensor,
    pub diffuse: Tensor,
    /// Raw (unclamped, ungated) specular branch output.
    pub specular: Option<Tensor>,
    pub mask: Option<Tensor>,
    pub alpha: Tensor,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::LatentGaussian;
    use nalgebra::{Matrix4, Vector2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(rng: &mut ChaCha8Rng, mode: RenderMode) -> Model {
        let mut cloud = GaussianCloud::new(FeatureDims::default());
        for i in 0..3 {
            // anisotropic scales and a tilted rotation so every parameter
            // influences the projected covariance
            cloud.push(LatentGaussian {
                position: Vector3::new(i as f32 * 0.3 - 0.3, 0.0, 2.0 + i as f32 * 0.2),
                opacity_logit: 1.0,
                rotation: [0.9, 0.1, 0.2, 0.05],
                log_scale: Vector3::new(-1.2, -1.8, -1.5),
                f_diffuse: (0..8).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                f_specular: (0..8).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            });
        }
        Model::new(cloud, mode, rng)
    }

    fn test_view() -> CameraView {
        CameraView {
            width: 16,
            height: 16,
            focal_x: 16.0,
            focal_y: 16.0,
            principal_point: Vector2::new(8.0, 8.0),
            world_to_camera: Matrix4::identity(),
            image_path: None,
        }
    }

    #[test]
    fn render_shapes_per_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for mode in [
            RenderMode::Full,
            RenderMode::NoMask,
            RenderMode::NoSpecular,
            RenderMode::ShColorBaseline,
        ] {
            let model = tiny_model(&mut rng, mode);
            let mut tape = Tape::new();
            let opts = RenderOptions {
                mode,
                trainable: false,
                ..Default::default()
            };
            let graph = render_view(&mut tape, &model, &test_view(), &opts).unwrap();
            assert_eq!(tape.shape(graph.rgb), &[3, 16, 16], "{mode:?}");
            assert_eq!(graph.visible.len(), 3);
            assert_eq!(graph.mask_map.is_some(), mode.uses_mask());
            assert_eq!(graph.normals.is_some(), mode == RenderMode::Full);
        }
    }

    #[test]
    fn every_leaf_receives_gradient_in_full_mode() {
        // gradient flows from the composed image back to every Gaussian
        // field and every network parameter
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = tiny_model(&mut rng, RenderMode::Full);
        // nonzero decoder heads so specular/mask paths carry gradient
        model.unet.head = crate::decoders::Conv::new(16, 3, &mut rng);
        model.cnn.head = crate::decoders::Conv::new(32, 3, &mut rng);
        let mut tape = Tape::new();
        let opts = RenderOptions {
            mode: RenderMode::Full,
            trainable: true,
            ..Default::default()
        };
        let graph = render_view(&mut tape, &model, &test_view(), &opts).unwrap();
        // photometric-style loss plus the normal term so every head is used
        let gt = tape.constant(Tensor::zeros(&[3, 16, 16]));
        let photo = crate::losses::l1(&mut tape, graph.rgb, gt).unwrap();
        let pseudo = tape.constant(graph.pseudo_normals.clone().unwrap());
        let nl = crate::losses::normal_loss(&mut tape, graph.normals.unwrap(), pseudo).unwrap();
        let nl = tape.scale(nl, 0.001);
        let loss = tape.add(photo, nl).unwrap();
        let grads = tape.backward(loss).unwrap();
        let nonzero = |v: Value, what: &str| {
            let g = grads.get(v).unwrap_or_else(|| panic!("{what}: no grad"));
            assert!(
                g.data().iter().any(|&x| x != 0.0),
                "{what}: gradient identically zero"
            );
        };
        nonzero(graph.leaves.positions, "positions");
        nonzero(graph.leaves.opacity_logits, "opacity");
        nonzero(graph.leaves.rotations, "rotations");
        nonzero(graph.leaves.log_scales, "log_scales");
        nonzero(graph.leaves.f_diffuse, "f_diffuse");
        nonzero(graph.leaves.f_specular, "f_specular");
        let names = net_param_names(&model);
        assert_eq!(names.len(), graph.leaves.net_values.len());
        for (name, &v) in names.iter().zip(&graph.leaves.net_values) {
            // Zero-initialized biases of dead branches still receive
            // gradient through ELU/conv chains; demand presence, and
            // non-zero for weights.
            let g = grads.get(v).unwrap_or_else(|| panic!("{name}: no grad"));
            if name.ends_with(".weight") || name.ends_with(".gain") {
                assert!(
                    g.data().iter().any(|&x| x != 0.0),
                    "{name}: gradient identically zero"
                );
            }
        }
    }

    #[test]
    fn render_empty_view_is_black_and_well_formed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = tiny_model(&mut rng, RenderMode::Full);
        // camera looking away: put scene behind the near plane
        let mut view = test_view();
        view.world_to_camera[(2, 3)] = -50.0;
        let img = render_image(&model, &view, RenderMode::Full).unwrap();
        assert_eq!(img.rgb.shape(), &[3, 16, 16]);
        assert!(img.alpha.data().iter().all(|&a| a == 0.0));
    }

    #[test]
    fn render_image_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = tiny_model(&mut rng, RenderMode::Full);
        let a = render_image(&model, &test_view(), RenderMode::Full).unwrap();
        let b = render_image(&model, &test_view(), RenderMode::Full).unwrap();
        assert_eq!(a.rgb.data(), b.rgb.data());
    }

    #[test]
    fn no_mask_mode_adds_specular_without_gating() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = tiny_model(&mut rng, RenderMode::Full);
        model.cnn.head = crate::decoders::Conv::new(32, 3, &mut rng);
        let nomask = render_image(&model, &test_view(), RenderMode::NoMask).unwrap();
        let spec = nomask.specular.as_ref().unwrap();
        // composed equals diffuse + specular exactly (before clamping)
        for i in 0..spec.numel() {
            let lhs = nomask.rgb.data()[i];
            let rhs = (nomask.diffuse.data()[i] + spec.data()[i]).clamp(0.0, 1.0);
            assert!((lhs - rhs).abs() < 1e-6);
        }
    }
}
