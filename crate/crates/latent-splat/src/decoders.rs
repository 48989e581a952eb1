//! Image-space decoders: the diffuse UNet, the specular CNN with pixel-ray
//! positional encoding, and the mask composition that joins them.

use nalgebra::Vector3;
use rand::Rng;

use crate::autodiff::{Tape, TensorError, Value};
use crate::scene::CameraView;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f32 = 1e-5;

/// Positional-encoding octaves for pixel ray directions.
pub const PE_OCTAVES: usize = 4;

/// Channels produced by [`pixel_ray_encoding`]: raw direction plus sin/cos
/// pairs per octave.
pub const RAY_CHANNELS: usize = 3 + 3 * 2 * PE_OCTAVES;

/// 3x3 convolution parameters.
#[derive(Clone, Debug)]
pub struct Conv {
    /// `[Cout, Cin, 3, 3]`.
    pub weight: Tensor,
    /// `[Cout]`.
    pub bias: Tensor,
}

impl Conv {
    pub fn new(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (cin * 9) as f32).sqrt();
        Self {
            weight: Tensor::rand_uniform(&[cout, cin, 3, 3], -bound, bound, rng),
            bias: Tensor::zeros(&[cout]),
        }
    }

    pub fn zeros(cin: usize, cout: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[cout, cin, 3, 3]),
            bias: Tensor::zeros(&[cout]),
        }
    }
}

/// Learnable per-channel gain and shift applied after layer norm.
#[derive(Clone, Debug)]
pub struct NormAffine {
    /// `[C]`, initialized to one.
    pub gain: Tensor,
    /// `[C]`, initialized to zero.
    pub bias: Tensor,
}

impl NormAffine {
    pub fn new(channels: usize) -> Self {
        Self {
            gain: Tensor::ones(&[channels]),
            bias: Tensor::zeros(&[channels]),
        }
    }
}

#[derive(Clone, Copy)]
pub struct ConvValues {
    pub weight: Value,
    pub bias: Value,
}

impl ConvValues {
    pub fn register(tape: &mut Tape, conv: &Conv, trainable: bool) -> Self {
        Self {
            weight: tape.leaf(conv.weight.clone(), trainable),
            bias: tape.leaf(conv.bias.clone(), trainable),
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: Value, stride: usize) -> Result<Value, TensorError> {
        let y = tape.conv2d(x, self.weight, stride, 1)?;
        let cout = tape.shape(self.bias)[0];
        let b = tape.reshape(self.bias, &[cout, 1, 1])?;
        tape.add(y, b)
    }
}

#[derive(Clone, Copy)]
pub struct NormValues {
    pub gain: Value,
    pub bias: Value,
}

impl NormValues {
    pub fn register(tape: &mut Tape, norm: &NormAffine, trainable: bool) -> Self {
        Self {
            gain: tape.leaf(norm.gain.clone(), trainable),
            bias: tape.leaf(norm.bias.clone(), trainable),
        }
    }

    /// LayerNorm across the channel axis of a `[C,H,W]` map, then the
    /// learned affine.
    pub fn apply(&self, tape: &mut Tape, x: Value) -> Result<Value, TensorError> {
        let y = tape.layer_norm(x, 0, LAYER_NORM_EPS)?;
        let c = tape.shape(self.gain)[0];
        let g = tape.reshape(self.gain, &[c, 1, 1])?;
        let b = tape.reshape(self.bias, &[c, 1, 1])?;
        let y = tape.mul(y, g)?;
        tape.add(y, b)
    }
}

/// Pre-activation residual block: two (norm, ELU, conv) stages plus the
/// skip.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub norm1: NormAffine,
    pub conv1: Conv,
    pub norm2: NormAffine,
    pub conv2: Conv,
}

impl ResBlock {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            norm1: NormAffine::new(channels),
            conv1: Conv::new(channels, channels, rng),
            norm2: NormAffine::new(channels),
            conv2: Conv::new(channels, channels, rng),
        }
    }
}

pub struct ResBlockValues {
    pub norm1: NormValues,
    pub conv1: ConvValues,
    pub norm2: NormValues,
    pub conv2: ConvValues,
}

impl ResBlockValues {
    pub fn register(tape: &mut Tape, block: &ResBlock, trainable: bool) -> Self {
        Self {
            norm1: NormValues::register(tape, &block.norm1, trainable),
            conv1: ConvValues::register(tape, &block.conv1, trainable),
            norm2: NormValues::register(tape, &block.norm2, trainable),
            conv2: ConvValues::register(tape, &block.conv2, trainable),
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: Value) -> Result<Value, TensorError> {
        let h = self.norm1.apply(tape, x)?;
        let h = tape.elu(h);
        let h = self.conv1.apply(tape, h, 1)?;
        let h = self.norm2.apply(tape, h)?;
        let h = tape.elu(h);
        let h = self.conv2.apply(tape, h, 1)?;
        tape.add(x, h)
    }
}

/// Encoder widths per stage; the decoder mirrors them.
pub const UNET_WIDTHS: [usize; 3] = [16, 32, 64];
const BOTTLENECK: usize = 64;

/// UNet decoding the splatted diffuse feature map to RGB. Three stride-2
/// stages take the map to one eighth of its resolution; the decoder
/// mirrors them with skip concatenations. One residual block per stage,
/// 3x3 convolutions with ELU, LayerNorm inside the residual blocks. The
/// head convolution starts at zero so training begins from a black diffuse
/// image.
#[derive(Clone, Debug)]
pub struct DiffuseUNet {
    pub in_channels: usize,
    pub stem: Conv,
    pub enc: [ResBlock; 3],
    pub down: [Conv; 3],
    pub bottleneck: ResBlock,
    pub up: [Conv; 3],
    pub dec: [ResBlock; 3],
    pub head: Conv,
}

impl DiffuseUNet {
    pub fn new(in_channels: usize, rng: &mut impl Rng) -> Self {
        let [w0, w1, w2] = UNET_WIDTHS;
        Self {
            in_channels,
            stem: Conv::new(in_channels, w0, rng),
            enc: [
                ResBlock::new(w0, rng),
                ResBlock::new(w1, rng),
                ResBlock::new(w2, rng),
            ],
            down: [
                Conv::new(w0, w1, rng),
                Conv::new(w1, w2, rng),
                Conv::new(w2, BOTTLENECK, rng),
            ],
            bottleneck: ResBlock::new(BOTTLENECK, rng),
            up: [
                Conv::new(BOTTLENECK + w2, w2, rng),
                Conv::new(w2 + w1, w1, rng),
                Conv::new(w1 + w0, w0, rng),
            ],
            dec: [
                ResBlock::new(w2, rng),
                ResBlock::new(w1, rng),
                ResBlock::new(w0, rng),
            ],
            head: Conv::zeros(w0, 3),
        }
    }

    /// Visit every parameter tensor with a stable name, mutably.
    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        visit_conv_mut("unet.stem", &mut self.stem, f);
        for (i, b) in self.enc.iter_mut().enumerate() {
            visit_block_mut(&format!("unet.enc{i}"), b, f);
        }
        for (i, c) in self.down.iter_mut().enumerate() {
            visit_conv_mut(&format!("unet.down{i}"), c, f);
        }
        visit_block_mut("unet.bottleneck", &mut self.bottleneck, f);
        for (i, c) in self.up.iter_mut().enumerate() {
            visit_conv_mut(&format!("unet.up{i}"), c, f);
        }
        for (i, b) in self.dec.iter_mut().enumerate() {
            visit_block_mut(&format!("unet.dec{i}"), b, f);
        }
        visit_conv_mut("unet.head", &mut self.head, f);
    }
}

fn visit_conv_mut(name: &str, c: &mut Conv, f: &mut impl FnMut(String, &mut Tensor)) {
    f(format!("{name}.weight"), &mut c.weight);
    f(format!("{name}.bias"), &mut c.bias);
}

fn visit_norm_mut(name: &str, n: &mut NormAffine, f: &mut impl FnMut(String, &mut Tensor)) {
    f(format!("{name}.gain"), &mut n.gain);
    f(format!("{name}.bias"), &mut n.bias);
}

fn visit_block_mut(name: &str, b: &mut ResBlock, f: &mut impl FnMut(String, &mut Tensor)) {
    visit_norm_mut(&format!("{name}.norm1"), &mut b.norm1, f);
    visit_conv_mut(&format!("{name}.conv1"), &mut b.conv1, f);
    visit_norm_mut(&format!("{name}.norm2"), &mut b.norm2, f);
    visit_conv_mut(&format!("{name}.conv2"), &mut b.conv2, f);
}

/// Specular CNN: a base convolution widens the splatted specular features,
/// the pixel-ray encoding is concatenated, and three further convolutions
/// decode RGB. Purely convolutional, no resolution change; zero-initialized
/// head.
#[derive(Clone, Debug)]
pub struct SpecularCNN {
    pub in_channels: usize,
    pub base: Conv,
    pub mix: [Conv; 2],
    pub head: Conv,
}

pub const SPECULAR_WIDTH: usize = 32;

impl SpecularCNN {
    pub fn new(in_channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            in_channels,
            base: Conv::new(in_channels, SPECULAR_WIDTH, rng),
            mix: [
                Conv::new(SPECULAR_WIDTH + RAY_CHANNELS, SPECULAR_WIDTH, rng),
                Conv::new(SPECULAR_WIDTH, SPECULAR_WIDTH, rng),
            ],
            head: Conv::zeros(SPECULAR_WIDTH, 3),
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        visit_conv_mut("cnn.base", &mut self.base, f);
        for (i, c) in self.mix.iter_mut().enumerate() {
            visit_conv_mut(&format!("cnn.mix{i}"), c, f);
        }
        visit_conv_mut("cnn.head", &mut self.head, f);
    }
}

pub struct DiffuseUNetValues {
    pub stem: ConvValues,
    pub enc: [ResBlockValues; 3],
    pub down: [ConvValues; 3],
    pub bottleneck: ResBlockValues,
    pub up: [ConvValues; 3],
    pub dec: [ResBlockValues; 3],
    pub head: ConvValues,
}

impl DiffuseUNetValues {
    pub fn register(tape: &mut Tape, net: &DiffuseUNet, trainable: bool) -> Self {
        Self {
            stem: ConvValues::register(tape, &net.stem, trainable),
            enc: [
                ResBlockValues::register(tape, &net.enc[0], trainable),
                ResBlockValues::register(tape, &net.enc[1], trainable),
                ResBlockValues::register(tape, &net.enc[2], trainable),
            ],
            down: [
                ConvValues::register(tape, &net.down[0], trainable),
                ConvValues::register(tape, &net.down[1], trainable),
                ConvValues::register(tape, &net.down[2], trainable),
            ],
            bottleneck: ResBlockValues::register(tape, &net.bottleneck, trainable),
            up: [
                ConvValues::register(tape, &net.up[0], trainable),
                ConvValues::register(tape, &net.up[1], trainable),
                ConvValues::register(tape, &net.up[2], trainable),
            ],
            dec: [
                ResBlockValues::register(tape, &net.dec[0], trainable),
                ResBlockValues::register(tape, &net.dec[1], trainable),
                ResBlockValues::register(tape, &net.dec[2], trainable),
            ],
            head: ConvValues::register(tape, &net.head, trainable),
        }
    }

    /// Decode a `[C, H, W]` diffuse map to `[3, H, W]`. Non-multiple-of-8
    /// sizes are reflect-padded and cropped back after decoding.
    pub fn decode(&self, tape: &mut Tape, diffuse_map: Value) -> Result<Value, TensorError> {
        let shape = tape.shape(diffuse_map).to_vec();
        if shape.len() != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "decode_diffuse",
                lhs: shape,
                rhs: vec![0, 0, 0],
            });
        }
        let (h, w) = (shape[1], shape[2]);
        let pad_h = (8 - h % 8) % 8;
        let pad_w = (8 - w % 8) % 8;
        let x = if pad_h > 0 || pad_w > 0 {
            tape.pad_reflect2d(diffuse_map, (0, pad_h), (0, pad_w))?
        } else {
            diffuse_map
        };

        let x = self.stem.apply(tape, x, 1)?;
        let s0 = self.enc[0].apply(tape, x)?;
        let x = self.down[0].apply(tape, s0, 2)?;
        let s1 = self.enc[1].apply(tape, x)?;
        let x = self.down[1].apply(tape, s1, 2)?;
        let s2 = self.enc[2].apply(tape, x)?;
        let x = self.down[2].apply(tape, s2, 2)?;
        let x = self.bottleneck.apply(tape, x)?;

        let x = tape.upsample_nearest2d(x, 2)?;
        let x = tape.concat(&[x, s2], 0)?;
        let x = self.up[0].apply(tape, x, 1)?;
        let x = self.dec[0].apply(tape, x)?;

        let x = tape.upsample_nearest2d(x, 2)?;
        let x = tape.concat(&[x, s1], 0)?;
        let x = self.up[1].apply(tape, x, 1)?;
        let x = self.dec[1].apply(tape, x)?;

        let x = tape.upsample_nearest2d(x, 2)?;
        let x = tape.concat(&[x, s0], 0)?;
        let x = self.up[2].apply(tape, x, 1)?;
        let x = self.dec[2].apply(tape, x)?;

        let x = self.head.apply(tape, x, 1)?;
        if pad_h > 0 || pad_w > 0 {
            let x = tape.slice(x, 1, 0, h)?;
            tape.slice(x, 2, 0, w)
        } else {
            Ok(x)
        }
    }
}

pub struct SpecularCNNValues {
    pub base: ConvValues,
    pub mix: [ConvValues; 2],
    pub head: ConvValues,
}

impl SpecularCNNValues {
    pub fn register(tape: &mut Tape, net: &SpecularCNN, trainable: bool) -> Self {
        Self {
            base: ConvValues::register(tape, &net.base, trainable),
            mix: [
                ConvValues::register(tape, &net.mix[0], trainable),
                ConvValues::register(tape, &net.mix[1], trainable),
            ],
            head: ConvValues::register(tape, &net.head, trainable),
        }
    }

    /// Decode a `[C, H, W]` specular map with its `[27, H, W]` ray
    /// encoding to `[3, H, W]`.
    pub fn decode(
        &self,
        tape: &mut Tape,
        specular_map: Value,
        ray_encoding: Value,
    ) -> Result<Value, TensorError> {
        let (s_shape, r_shape) = (
            tape.shape(specular_map).to_vec(),
            tape.shape(ray_encoding).to_vec(),
        );
        if s_shape.len() != 3
            || r_shape.len() != 3
            || s_shape[1..] != r_shape[1..]
            || r_shape[0] != RAY_CHANNELS
        {
            return Err(TensorError::ShapeMismatch {
                op: "decode_specular",
                lhs: s_shape,
                rhs: r_shape,
            });
        }
        let x = self.base.apply(tape, specular_map, 1)?;
        let x = tape.elu(x);
        let x = tape.concat(&[x, ray_encoding], 0)?;
        let x = self.mix[0].apply(tape, x, 1)?;
        let x = tape.elu(x);
        let x = self.mix[1].apply(tape, x, 1)?;
        let x = tape.elu(x);
        self.head.apply(tape, x, 1)
    }
}

/// Sin/cos positional encoding of a 3-vector over `PE_OCTAVES` octaves,
/// frequencies `2^k`.
pub fn positional_encode(d: &Vector3<f32>) -> [f32; RAY_CHANNELS] {
    let mut out = [0.0f32; RAY_CHANNELS];
    out[0] = d.x;
    out[1] = d.y;
    out[2] = d.z;
    for k in 0..PE_OCTAVES {
        let freq = (1u32 << k) as f32;
        for (j, v) in [d.x, d.y, d.z].into_iter().enumerate() {
            out[3 + k * 6 + j] = (freq * v).sin();
            out[3 + k * 6 + 3 + j] = (freq * v).cos();
        }
    }
    out
}

/// Per-pixel world-space unit ray directions with positional encoding,
/// `[RAY_CHANNELS, H, W]`. Deterministic per view, not learned.
pub fn pixel_ray_encoding(view: &CameraView) -> Tensor {
    let (w, h) = (view.width, view.height);
    let r_t = view.rotation().transpose();
    let hw = w * h;
    let mut data = vec![0.0f32; RAY_CHANNELS * hw];
    for y in 0..h {
        for x in 0..w {
            let dir_cam = Vector3::new(
                (x as f32 + 0.5 - view.principal_point.x) / view.focal_x,
                (y as f32 + 0.5 - view.principal_point.y) / view.focal_y,
                1.0,
            );
            let dir_world = (r_t * dir_cam).normalize();
            let enc = positional_encode(&dir_world);
            let pix = y * w + x;
            for (c, v) in enc.into_iter().enumerate() {
                data[c * hw + pix] = v;
            }
        }
    }
    Tensor::new(&[RAY_CHANNELS, h, w], data).expect("encoding buffer shape")
}

/// Final composition: `diffuse + specular * mask`, the mask broadcast over
/// the color channels.
pub fn compose(
    tape: &mut Tape,
    diffuse_rgb: Value,
    specular_rgb: Value,
    mask_map: Value,
) -> Result<Value, TensorError> {
    let gated = tape.mul(specular_rgb, mask_map)?;
    tape.add(diffuse_rgb, gated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::GradCheck;
    use nalgebra::{Matrix4, Vector2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_view(w: usize, h: usize) -> CameraView {
        CameraView {
            width: w,
            height: h,
            focal_x: w as f32,
            focal_y: w as f32,
            principal_point: Vector2::new(w as f32 / 2.0, h as f32 / 2.0),
            world_to_camera: Matrix4::identity(),
            image_path: None,
        }
    }

    #[test]
    fn unet_zero_input_zero_head_gives_zero_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = DiffuseUNet::new(8, &mut rng);
        let mut tape = Tape::new();
        let vals = DiffuseUNetValues::register(&mut tape, &net, false);
        let x = tape.constant(Tensor::zeros(&[8, 16, 16]));
        let y = vals.decode(&mut tape, x).unwrap();
        // LayerNorm of a constant map is zero, ELU(0) = 0, and the head is
        // zero-initialized, so the output must be exactly zero.
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unet_shape_contract_with_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = DiffuseUNet::new(8, &mut rng);
        for (h, w) in [(32, 32), (40, 40), (64, 64), (24, 40), (13, 21)] {
            let mut tape = Tape::new();
            let vals = DiffuseUNetValues::register(&mut tape, &net, false);
            let x = tape.constant(Tensor::rand_uniform(&[8, h, w], -1.0, 1.0, &mut rng));
            let y = vals.decode(&mut tape, x).unwrap();
            assert_eq!(tape.shape(y), &[3, h, w], "{h}x{w}");
        }
    }

    #[test]
    fn specular_zero_features_zero_head_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = SpecularCNN::new(8, &mut rng);
        let mut tape = Tape::new();
        let vals = SpecularCNNValues::register(&mut tape, &net, false);
        let x = tape.constant(Tensor::zeros(&[8, 12, 12]));
        let ray = tape.constant(pixel_ray_encoding(&test_view(12, 12)));
        let y = vals.decode(&mut tape, x, ray).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.shape(y), &[3, 12, 12]);
    }

    #[test]
    fn specular_translation_equivariance_in_interior() {
        // Shift the feature map and the ray encoding together by one pixel;
        // the purely convolutional stack must shift its output.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut net = SpecularCNN::new(4, &mut rng);
        net.head = Conv::new(SPECULAR_WIDTH, 3, &mut rng);
        let n = 16usize;
        let feat = Tensor::rand_uniform(&[4, n, n], -1.0, 1.0, &mut rng);
        let ray = Tensor::rand_uniform(&[RAY_CHANNELS, n, n], -1.0, 1.0, &mut rng);
        let shift = |t: &Tensor| {
            let c = t.shape()[0];
            Tensor::from_fn(&[c, n, n], |i| {
                let (ci, rest) = (i / (n * n), i % (n * n));
                let (y, x) = (rest / n, rest % n);
                if y == 0 || x == 0 {
                    0.0
                } else {
                    t.data()[ci * n * n + (y - 1) * n + (x - 1)]
                }
            })
        };
        let mut tape = Tape::new();
        let vals = SpecularCNNValues::register(&mut tape, &net, false);
        let x0 = tape.constant(feat.clone());
        let r0 = tape.constant(ray.clone());
        let y0 = vals.decode(&mut tape, x0, r0).unwrap();
        let x1 = tape.constant(shift(&feat));
        let r1 = tape.constant(shift(&ray));
        let y1 = vals.decode(&mut tape, x1, r1).unwrap();
        let (a, b) = (tape.value(y0).clone(), tape.value(y1).clone());
        // interior: receptive field of four 3x3 convs is 9, stay 5 px in
        for c in 0..3 {
            for y in 5..n - 5 {
                for x in 5..n - 5 {
                    let va = a.at(&[c, y, x]);
                    let vb = b.at(&[c, y + 1, x + 1]);
                    assert!((va - vb).abs() < 1e-5, "({c},{y},{x}): {va} vs {vb}");
                }
            }
        }
    }

    #[test]
    fn compose_mask_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = Tensor::rand_uniform(&[3, 4, 4], 0.0, 1.0, &mut rng);
        let s = Tensor::rand_uniform(&[3, 4, 4], 0.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let dv = tape.constant(d.clone());
        let sv = tape.constant(s.clone());
        let zero = tape.constant(Tensor::zeros(&[1, 4, 4]));
        let one = tape.constant(Tensor::ones(&[1, 4, 4]));
        let c0 = compose(&mut tape, dv, sv, zero).unwrap();
        assert_eq!(tape.value(c0).data(), d.data());
        let c1 = compose(&mut tape, dv, sv, one).unwrap();
        for (i, v) in tape.value(c1).data().iter().enumerate() {
            assert!((v - (d.data()[i] + s.data()[i])).abs() < 1e-6);
        }
    }

    #[test]
    fn compose_linear_in_specular() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let d = Tensor::rand_uniform(&[3, 4, 4], 0.0, 1.0, &mut rng);
        let s = Tensor::rand_uniform(&[3, 4, 4], -1.0, 1.0, &mut rng);
        let m = Tensor::rand_uniform(&[1, 4, 4], 0.0, 1.0, &mut rng);
        let eval = |scale: f32| {
            let mut tape = Tape::new();
            let dv = tape.constant(d.clone());
            let sv = tape.constant(s.map(|v| v * scale));
            let mv = tape.constant(m.clone());
            let c = compose(&mut tape, dv, sv, mv).unwrap();
            tape.value(c).to_vec()
        };
        let (c0, c1, c2) = (eval(0.0), eval(1.0), eval(2.0));
        for i in 0..c0.len() {
            let lhs = c2[i] - c1[i];
            let rhs = c1[i] - c0[i];
            assert!((lhs - rhs).abs() < 1e-5);
        }
    }

    #[test]
    fn ray_encoding_principal_pixel_is_camera_forward() {
        // Principal point placed on the center of pixel (3, 3).
        let mut view = test_view(8, 8);
        view.principal_point = Vector2::new(3.5, 3.5);
        let enc = pixel_ray_encoding(&view);
        let hw = 64;
        let pix = 3 * 8 + 3;
        assert!(enc.data()[pix].abs() < 1e-6);
        assert!(enc.data()[hw + pix].abs() < 1e-6);
        assert!((enc.data()[2 * hw + pix] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ray_directions_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let mut view = test_view(9, 7);
            view.focal_x = rng.gen_range(3.0..20.0);
            view.focal_y = rng.gen_range(3.0..20.0);
            view.principal_point = Vector2::new(rng.gen_range(2.0..7.0), rng.gen_range(2.0..5.0));
            let enc = pixel_ray_encoding(&view);
            let hw = 9 * 7;
            for pix in 0..hw {
                let n = (enc.data()[pix].powi(2)
                    + enc.data()[hw + pix].powi(2)
                    + enc.data()[2 * hw + pix].powi(2))
                .sqrt();
                assert!((n - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn positional_encoding_periodicity_per_octave() {
        let d = Vector3::new(0.3, -0.4, 0.86);
        let base = positional_encode(&d);
        for k in 0..PE_OCTAVES {
            let period = std::f32::consts::TAU / (1u32 << k) as f32;
            let shifted = positional_encode(&Vector3::new(d.x + period, d.y, d.z));
            for j in 0..6 {
                let idx = 3 + k * 6 + j;
                assert!(
                    (base[idx] - shifted[idx]).abs() < 1e-4,
                    "octave {k} channel {j}"
                );
            }
        }
    }

    #[test]
    fn unet_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let net = DiffuseUNet::new(4, &mut rng);
        let input = Tensor::rand_uniform(&[4, 16, 16], -0.3, 0.3, &mut rng);
        // A small head keeps output magnitudes tiny, which keeps the f32
        // finite-difference noise floor below the absolute tolerance while
        // head-weight gradients stay large enough for the relative branch.
        let inputs = vec![
            input,
            net.stem.weight.clone(),
            net.up[2].weight.clone(),
            Tensor::rand_uniform(&[3, 16, 3, 3], -0.001, 0.001, &mut rng), // head
        ];
        let net2 = net.clone();
        let build = move |tape: &mut Tape, ins: &[Value]| -> Result<Value, TensorError> {
            let mut vals = DiffuseUNetValues::register(tape, &net2, false);
            vals.stem.weight = ins[1];
            vals.up[2].weight = ins[2];
            vals.head.weight = ins[3];
            vals.decode(tape, ins[0])
        };
        GradCheck {
            probes_per_input: 5,
            ..Default::default()
        }
        .check(&inputs, &build, &mut rng)
        .unwrap();
    }

    #[test]
    fn specular_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let net = SpecularCNN::new(4, &mut rng);
        let input = Tensor::rand_uniform(&[4, 8, 8], -0.3, 0.3, &mut rng);
        let ray = Tensor::rand_uniform(&[RAY_CHANNELS, 8, 8], -1.0, 1.0, &mut rng);
        let inputs = vec![
            input,
            net.base.weight.clone(),
            Tensor::rand_uniform(&[3, SPECULAR_WIDTH, 3, 3], -0.002, 0.002, &mut rng),
        ];
        let net2 = net.clone();
        let build = move |tape: &mut Tape, ins: &[Value]| -> Result<Value, TensorError> {
            let mut vals = SpecularCNNValues::register(tape, &net2, false);
            vals.base.weight = ins[1];
            vals.head.weight = ins[2];
            let ray_v = tape.constant(ray.clone());
            vals.decode(tape, ins[0], ray_v)
        };
        GradCheck {
            probes_per_input: 5,
            ..Default::default()
        }
        .check(&inputs, &build, &mut rng)
        .unwrap();
    }
}
