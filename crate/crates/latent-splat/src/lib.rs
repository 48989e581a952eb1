//! Differentiable 3D Gaussian splatting with per-Gaussian latent features.
//!
//! Scenes are sets of anisotropic 3D Gaussians that carry learned latent
//! descriptors instead of spherical-harmonic colors. Rendering splats those
//! descriptors into screen-space feature maps and decodes them with two
//! small convolutional networks — one for diffuse color, one for
//! view-dependent color gated by a splatted view-mask. Everything is built
//! on a small reverse-mode autodiff tape so the whole pipeline trains
//! end-to-end on the CPU.

pub mod autodiff;
pub mod losses;
pub mod pipeline;
pub mod projection;
pub mod rasterizer;
pub mod checkpoint;
pub mod colmap;
pub mod config;
pub mod dataset;
pub mod decoders;
pub mod shading;
pub mod synthetic;
pub mod trainer;
pub mod scene;
pub mod tensor;

pub use autodiff::{Gradients, Tape, TensorError, Value};
pub use tensor::Tensor;

/// Honor the `SLGS_THREADS` environment variable as a cap on internal
/// parallelism. Call once at process start; later calls are no-ops.
pub fn configure_threads_from_env() {
    if let Ok(v) = std::env::var("SLGS_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
}
