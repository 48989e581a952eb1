//! Finite-difference checks for every op on the tape, one by one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::check::GradCheck;
use super::{Tape, TensorError, Value};
use crate::tensor::Tensor;

fn check_n(
    trials: usize,
    seed: u64,
    make_inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    build: impl Fn(&mut Tape, &[Value]) -> Result<Value, TensorError>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let check = GradCheck::default();
    for trial in 0..trials {
        let inputs = make_inputs(&mut rng);
        check
            .check(&inputs, &build, &mut rng)
            .unwrap_or_else(|e| panic!("trial {trial}: {e}"));
    }
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::rand_uniform(shape, 0.3, 1.5, rng)
}

fn signed(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::rand_uniform(shape, -1.0, 1.0, rng)
}

/// Signed values kept away from zero, for ops with a kink there.
fn signed_off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let mag = rng.gen_range(0.1f32..1.0);
        if rng.gen_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

#[test]
fn fd_elementwise_binary_with_broadcast() {
    check_n(
        20,
        101,
        |rng| vec![signed(&[3, 4], rng), signed(&[4], rng)],
        |t, i| t.add(i[0], i[1]),
    );
    check_n(
        20,
        102,
        |rng| vec![signed(&[2, 3, 4], rng), signed(&[3, 4], rng)],
        |t, i| t.sub(i[0], i[1]),
    );
    check_n(
        20,
        103,
        |rng| vec![signed(&[3, 4], rng), signed(&[3, 1], rng)],
        |t, i| t.mul(i[0], i[1]),
    );
    check_n(
        20,
        104,
        |rng| vec![signed(&[3, 4], rng), positive(&[1, 4], rng)],
        |t, i| t.div(i[0], i[1]),
    );
}

#[test]
fn fd_elementwise_unary() {
    check_n(20, 111, |rng| vec![signed(&[12], rng)], |t, i| Ok(t.neg(i[0])));
    check_n(
        20,
        112,
        |rng| vec![signed_off_zero(&[12], rng)],
        |t, i| Ok(t.abs(i[0])),
    );
    check_n(20, 113, |rng| vec![signed(&[12], rng)], |t, i| Ok(t.exp(i[0])));
    check_n(20, 114, |rng| vec![positive(&[12], rng)], |t, i| Ok(t.log(i[0])));
    check_n(20, 115, |rng| vec![positive(&[12], rng)], |t, i| Ok(t.sqrt(i[0])));
    check_n(20, 116, |rng| vec![signed(&[12], rng)], |t, i| {
        Ok(t.sigmoid(i[0]))
    });
    check_n(
        20,
        117,
        |rng| vec![signed_off_zero(&[12], rng)],
        |t, i| Ok(t.elu(i[0])),
    );
    check_n(20, 118, |rng| vec![signed(&[12], rng)], |t, i| {
        Ok(t.scale(i[0], -1.7))
    });
    check_n(20, 119, |rng| vec![signed(&[12], rng)], |t, i| {
        Ok(t.add_scalar(i[0], 0.4))
    });
}

#[test]
fn fd_matmul_and_reductions() {
    check_n(
        20,
        121,
        |rng| vec![signed(&[3, 5], rng), signed(&[5, 2], rng)],
        |t, i| t.matmul(i[0], i[1]),
    );
    check_n(20, 122, |rng| vec![signed(&[3, 4], rng)], |t, i| t.sum(i[0]));
    check_n(20, 123, |rng| vec![signed(&[3, 4], rng)], |t, i| t.mean(i[0]));
    check_n(
        20,
        124,
        |rng| vec![signed(&[3, 4, 2], rng)],
        |t, i| t.sum_axis(i[0], 1, false),
    );
    check_n(
        20,
        125,
        |rng| vec![signed(&[3, 4], rng)],
        |t, i| t.sum_axis(i[0], 1, true),
    );
}

#[test]
fn fd_shape_ops() {
    check_n(
        20,
        131,
        |rng| vec![signed(&[3, 6], rng)],
        |t, i| t.slice(i[0], 1, 2, 3),
    );
    check_n(
        20,
        132,
        |rng| vec![signed(&[2, 3], rng), signed(&[2, 2], rng)],
        |t, i| t.concat(&[i[0], i[1]], 1),
    );
    check_n(
        20,
        133,
        |rng| vec![signed(&[4, 3], rng)],
        |t, i| t.index_select(i[0], &[2, 0, 2, 3]),
    );
    check_n(
        20,
        134,
        |rng| vec![signed(&[3, 4], rng)],
        |t, i| t.reshape(i[0], &[2, 6]),
    );
}

#[test]
fn fd_normalize_rows() {
    check_n(
        20,
        141,
        |rng| {
            // keep rows away from the degenerate-norm fallback
            vec![Tensor::from_fn(&[4, 3], |_| {
                let v = rng.gen_range(0.3f32..1.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })]
        },
        |t, i| t.normalize_rows(i[0], &[0.0, 0.0, 1.0]),
    );
}

#[test]
fn fd_layer_norm() {
    check_n(
        20,
        151,
        |rng| vec![signed(&[6, 2, 2], rng)],
        |t, i| t.layer_norm(i[0], 0, 1e-5),
    );
    check_n(
        20,
        152,
        |rng| vec![signed(&[2, 5, 3], rng)],
        |t, i| t.layer_norm(i[0], 1, 1e-5),
    );
}

#[test]
fn fd_conv2d() {
    check_n(
        10,
        161,
        |rng| vec![signed(&[2, 5, 5], rng), signed(&[3, 2, 3, 3], rng)],
        |t, i| t.conv2d(i[0], i[1], 1, 1),
    );
    check_n(
        10,
        162,
        |rng| vec![signed(&[2, 6, 6], rng), signed(&[3, 2, 3, 3], rng)],
        |t, i| t.conv2d(i[0], i[1], 2, 1),
    );
    check_n(
        10,
        163,
        |rng| vec![signed(&[2, 5, 5], rng), signed(&[1, 2, 3, 3], rng)],
        |t, i| t.conv2d(i[0], i[1], 1, 0),
    );
}

#[test]
fn fd_conv_transpose2d() {
    check_n(
        10,
        171,
        |rng| vec![signed(&[2, 4, 4], rng), signed(&[2, 3, 3, 3], rng)],
        |t, i| t.conv_transpose2d(i[0], i[1], 2, 1),
    );
    check_n(
        10,
        172,
        |rng| vec![signed(&[2, 3, 3], rng), signed(&[2, 2, 4, 4], rng)],
        |t, i| t.conv_transpose2d(i[0], i[1], 1, 0),
    );
}

#[test]
fn fd_pool_upsample_pad() {
    check_n(
        10,
        181,
        |rng| vec![signed(&[2, 6, 6], rng)],
        |t, i| t.avg_pool2d(i[0], 2, 2),
    );
    check_n(
        10,
        182,
        |rng| vec![signed(&[2, 4, 4], rng)],
        |t, i| t.upsample_nearest2d(i[0], 2),
    );
    check_n(
        10,
        183,
        |rng| vec![signed(&[2, 5, 5], rng)],
        |t, i| t.pad_reflect2d(i[0], (1, 2), (2, 1)),
    );
}

#[test]
fn fd_composed_deep_graph() {
    // depth >= 5 composition across op families
    check_n(
        10,
        191,
        |rng| {
            vec![
                signed(&[4, 4, 4], rng),
                Tensor::rand_uniform(&[4, 4, 3, 3], -0.5, 0.5, rng),
            ]
        },
        |t, i| {
            let c = t.conv2d(i[0], i[1], 1, 1)?;
            let n = t.layer_norm(c, 0, 1e-5)?;
            let e = t.elu(n);
            let s = t.sigmoid(e);
            let u = t.upsample_nearest2d(s, 2)?;
            let p = t.avg_pool2d(u, 2, 2)?;
            let m = t.mul(p, i[0])?;
            let m = t.scale(m, 0.25);
            t.sum_axis(m, 0, false)
        },
    );
}
