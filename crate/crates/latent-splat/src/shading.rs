//! Per-Gaussian view-dependent preprocessing: pseudo-normal extraction,
//! the normal-prediction MLP, spherical-harmonic directional encoding, the
//! view-mask MLP, and the reflection utility.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;

use crate::autodiff::{GradCtx, Tape, TensorError, Value};
use crate::tensor::Tensor;

/// Shortest principal axis of the Gaussian, sign-flipped so it points
/// along the view direction (`n . v >= 0`).
///
/// `view_dir` points from the camera center toward the Gaussian. Ties on
/// the minimal scale pick the lowest axis index, which also makes the
/// result invariant to swapping the two non-minimal axes.
pub fn pseudo_normal(
    rotation: &Matrix3<f32>,
    scale: &Vector3<f32>,
    view_dir: &Vector3<f32>,
) -> Vector3<f32> {
    let mut axis = 0;
    for i in 1..3 {
        if scale[i] < scale[axis] {
            axis = i;
        }
    }
    let n = rotation.column(axis).into_owned();
    if n.dot(view_dir) < 0.0 {
        -n
    } else {
        n
    }
}

/// Mirror of `w_i` about the normal: `2 (w_i . n) n - w_i`.
pub fn reflect(w_i: &Vector3<f32>, n: &Vector3<f32>) -> Vector3<f32> {
    2.0 * w_i.dot(n) * n - w_i
}

/// Number of real spherical-harmonic basis values for degrees 0..=3.
pub const SH_COEFFS: usize = 16;

// Real SH constants for degrees 0..3, the ordering shared by the usual
// splatting implementations: per degree, m = -l..l.
const C0: f32 = 0.282_094_79;
const C1: f32 = 0.488_602_51;
const C2: [f32; 5] = [1.092_548_4, -1.092_548_4, 0.315_391_57, -1.092_548_4, 0.546_274_24];
const C3: [f32; 7] = [
    -0.590_043_6,
    2.890_611_4,
    -0.457_045_8,
    0.373_176_33,
    -0.457_045_8,
    1.445_305_7,
    -0.590_043_6,
];

/// Real spherical-harmonic basis for degrees 0..=3 at a unit direction.
pub fn sh_basis(d: &Vector3<f32>) -> [f32; SH_COEFFS] {
    let (x, y, z) = (d.x, d.y, d.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    [
        C0,
        -C1 * y,
        C1 * z,
        -C1 * x,
        C2[0] * xy,
        C2[1] * yz,
        C2[2] * (2.0 * zz - xx - yy),
        C2[3] * xz,
        C2[4] * (xx - yy),
        C3[0] * y * (3.0 * xx - yy),
        C3[1] * xy * z,
        C3[2] * y * (4.0 * zz - xx - yy),
        C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
        C3[4] * x * (4.0 * zz - xx - yy),
        C3[5] * z * (xx - yy),
        C3[6] * x * (xx - 3.0 * yy),
    ]
}

/// Jacobian of [`sh_basis`] w.r.t. the direction, rows matching the basis.
fn sh_basis_jacobian(d: &Vector3<f32>) -> [[f32; 3]; SH_COEFFS] {
    let (x, y, z) = (d.x, d.y, d.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    [
        [0.0, 0.0, 0.0],
        [0.0, -C1, 0.0],
        [0.0, 0.0, C1],
        [-C1, 0.0, 0.0],
        [C2[0] * y, C2[0] * x, 0.0],
        [0.0, C2[1] * z, C2[1] * y],
        [-2.0 * C2[2] * x, -2.0 * C2[2] * y, 4.0 * C2[2] * z],
        [C2[3] * z, 0.0, C2[3] * x],
        [2.0 * C2[4] * x, -2.0 * C2[4] * y, 0.0],
        [C3[0] * 6.0 * xy, C3[0] * (3.0 * xx - 3.0 * yy), 0.0],
        [C3[1] * yz, C3[1] * xz, C3[1] * xy],
        [-2.0 * C3[2] * xy, C3[2] * (4.0 * zz - xx - 3.0 * yy), C3[2] * 8.0 * yz],
        [-6.0 * C3[3] * xz, -6.0 * C3[3] * yz, C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)],
        [C3[4] * (4.0 * zz - 3.0 * xx - yy), -2.0 * C3[4] * xy, C3[4] * 8.0 * xz],
        [2.0 * C3[5] * xz, -2.0 * C3[5] * yz, C3[5] * (xx - yy)],
        [C3[6] * (3.0 * xx - 3.0 * yy), -6.0 * C3[6] * xy, 0.0],
    ]
}

/// Differentiable SH encoding of unit directions: `[N, 3] -> [N, 16]`.
pub fn sh_encode(tape: &mut Tape, dirs: Value) -> Result<Value, TensorError> {
    let t = tape.value(dirs);
    if t.rank() != 2 || t.shape()[1] != 3 {
        return Err(TensorError::ShapeMismatch {
            op: "sh_encode",
            lhs: t.shape().to_vec(),
            rhs: vec![t.shape()[0], 3],
        });
    }
    let n = t.shape()[0];
    let mut data = Vec::with_capacity(n * SH_COEFFS);
    for r in 0..n {
        let d = Vector3::new(t.data()[r * 3], t.data()[r * 3 + 1], t.data()[r * 3 + 2]);
        data.extend(sh_basis(&d));
    }
    let out = Tensor::new(&[n, SH_COEFFS], data)?;
    Ok(tape.custom_op(&[dirs], out, move |ctx: &GradCtx| {
        let x = ctx.inputs[0].data();
        let g = ctx.grad.data();
        let mut gi = vec![0.0f32; n * 3];
        for r in 0..n {
            let d = Vector3::new(x[r * 3], x[r * 3 + 1], x[r * 3 + 2]);
            let jac = sh_basis_jacobian(&d);
            for (k, row) in jac.iter().enumerate() {
                let gk = g[r * SH_COEFFS + k];
                gi[r * 3] += gk * row[0];
                gi[r * 3 + 1] += gk * row[1];
                gi[r * 3 + 2] += gk * row[2];
            }
        }
        vec![Some(Tensor::new(&[n, 3], gi).unwrap())]
    }))
}

/// One dense layer's parameters.
#[derive(Clone, Debug)]
pub struct Dense {
    /// `[in, out]`.
    pub weight: Tensor,
    /// `[out]`.
    pub bias: Tensor,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (inputs + outputs) as f32).sqrt();
        Self {
            weight: Tensor::rand_uniform(&[inputs, outputs], -bound, bound, rng),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[inputs, outputs]),
            bias: Tensor::zeros(&[outputs]),
        }
    }
}

/// A dense layer registered on a tape for one step.
#[derive(Clone, Copy)]
pub struct DenseValues {
    pub weight: Value,
    pub bias: Value,
}

impl DenseValues {
    pub fn register(tape: &mut Tape, layer: &Dense, trainable: bool) -> Self {
        Self {
            weight: tape.leaf(layer.weight.clone(), trainable),
            bias: tape.leaf(layer.bias.clone(), trainable),
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: Value) -> Result<Value, TensorError> {
        let y = tape.matmul(x, self.weight)?;
        tape.add(y, self.bias)
    }
}

/// Hidden width of both shading MLPs.
pub const MLP_WIDTH: usize = 32;

/// The two per-Gaussian shading networks: a normal predictor over the
/// concatenated latents and a view-mask predictor over (SH(d), n).
#[derive(Clone, Debug)]
pub struct ShadingNets {
    pub normal: [Dense; 3],
    pub mask: [Dense; 3],
}

impl ShadingNets {
    /// `feature_dim` is the total latent width (diffuse + specular).
    pub fn new(feature_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            normal: [
                Dense::new(feature_dim, MLP_WIDTH, rng),
                Dense::new(MLP_WIDTH, MLP_WIDTH, rng),
                Dense::new(MLP_WIDTH, 3, rng),
            ],
            mask: [
                Dense::new(SH_COEFFS + 3, MLP_WIDTH, rng),
                Dense::new(MLP_WIDTH, MLP_WIDTH, rng),
                Dense::new(MLP_WIDTH, 1, rng),
            ],
        }
    }

    /// Visit every parameter tensor with a stable name, mutably.
    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        for (i, d) in self.normal.iter_mut().enumerate() {
            f(format!("shading.normal{i}.weight"), &mut d.weight);
            f(format!("shading.normal{i}.bias"), &mut d.bias);
        }
        for (i, d) in self.mask.iter_mut().enumerate() {
            f(format!("shading.mask{i}.weight"), &mut d.weight);
            f(format!("shading.mask{i}.bias"), &mut d.bias);
        }
    }
}

/// Shading nets registered on a tape.
pub struct ShadingValues {
    pub normal: [DenseValues; 3],
    pub mask: [DenseValues; 3],
}

impl ShadingValues {
    pub fn register(tape: &mut Tape, nets: &ShadingNets, trainable: bool) -> Self {
        Self {
            normal: [
                DenseValues::register(tape, &nets.normal[0], trainable),
                DenseValues::register(tape, &nets.normal[1], trainable),
                DenseValues::register(tape, &nets.normal[2], trainable),
            ],
            mask: [
                DenseValues::register(tape, &nets.mask[0], trainable),
                DenseValues::register(tape, &nets.mask[1], trainable),
                DenseValues::register(tape, &nets.mask[2], trainable),
            ],
        }
    }

    /// Unit normals from the concatenated latent features `[N, d+s]`.
    /// Degenerate all-zero activations fall back to `(0, 0, 1)`.
    pub fn predict_normal(&self, tape: &mut Tape, features: Value) -> Result<Value, TensorError> {
        let h = self.normal[0].apply(tape, features)?;
        let h = tape.elu(h);
        let h = self.normal[1].apply(tape, h)?;
        let h = tape.elu(h);
        let out = self.normal[2].apply(tape, h)?;
        tape.normalize_rows(out, &[0.0, 0.0, 1.0])
    }

    /// Per-Gaussian view-mask scalar in (0, 1) from SH-encoded view
    /// directions `[N, 16]` and unit normals `[N, 3]`.
    pub fn predict_view_mask(
        &self,
        tape: &mut Tape,
        sh_dirs: Value,
        normals: Value,
    ) -> Result<Value, TensorError> {
        let x = tape.concat(&[sh_dirs, normals], 1)?;
        let h = self.mask[0].apply(tape, x)?;
        let h = tape.elu(h);
        let h = self.mask[1].apply(tape, h)?;
        let h = tape.elu(h);
        let out = self.mask[2].apply(tape, h)?;
        Ok(tape.sigmoid(out))
    }
}
