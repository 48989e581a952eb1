//! Checkpointing: everything a training run needs to resume bit-exactly,
//! in a little-endian chunked container.
//!
//! Layout: magic `SLGS`, u32 format version, then chunks of
//! `(u32 name length, name bytes, u64 payload length, payload)`. Tensor
//! payloads are `u32 rank`, `u64` dims, then raw f32 data. A `meta` chunk
//! carries the scalars as JSON.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt};

use crate::pipeline::{net_param_names, Model, RenderMode};
use crate::scene::{FeatureDims, GaussianCloud, LatentGaussian};
use crate::tensor::Tensor;
use crate::trainer::{AdamState, Optimizer, TrainConfig, Trainer};

pub const MAGIC: &[u8; 4] = b"SLGS";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Meta {
    iteration: u64,
    diffuse_dims: usize,
    specular_dims: usize,
    n_gaussians: usize,
    mode: RenderMode,
    has_sh: bool,
    /// Adam step counters keyed by group name.
    adam_t: BTreeMap<String, u64>,
}

/// A resumable training state.
pub struct Checkpoint {
    pub iteration: u64,
    pub mode: RenderMode,
    pub model: Model,
    pub optimizer: Optimizer,
}

impl Checkpoint {
    pub fn capture(trainer: &Trainer) -> Self {
        Self {
            iteration: trainer.iteration,
            mode: trainer.mode,
            model: trainer.model.clone(),
            optimizer: trainer.optimizer.clone(),
        }
    }

    pub fn into_trainer(self, config: TrainConfig) -> Trainer {
        Trainer::resume(self.model, self.optimizer, self.mode, self.iteration, config)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut out: Vec<u8> = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());

        let mut chunk = |name: &str, payload: &[u8], out: &mut Vec<u8>| {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.extend((payload.len() as u64).to_le_bytes());
            out.extend(payload);
        };
        let tensor_chunk = |name: &str, t: &Tensor, out: &mut Vec<u8>| {
            let mut payload = Vec::with_capacity(16 + t.numel() * 4);
            payload.extend((t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                payload.extend((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                payload.extend(v.to_le_bytes());
            }
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.extend((payload.len() as u64).to_le_bytes());
            out.extend(payload);
        };

        let mut adam_t = BTreeMap::new();
        let groups = self.adam_groups();
        for (name, state) in &groups {
            adam_t.insert(name.clone(), state.t);
        }
        let meta = Meta {
            iteration: self.iteration,
            diffuse_dims: self.model.dims().diffuse,
            specular_dims: self.model.dims().specular,
            n_gaussians: self.model.cloud.len(),
            mode: self.mode,
            has_sh: self.model.sh_coeffs.is_some(),
            adam_t,
        };
        chunk(
            "meta",
            serde_json::to_vec(&meta).expect("meta serializes").as_slice(),
            &mut out,
        );

        let packed = self.model.packed_gaussians();
        tensor_chunk("g/positions", &packed.positions, &mut out);
        tensor_chunk("g/opacity", &packed.opacity_logits, &mut out);
        tensor_chunk("g/rotations", &packed.rotations, &mut out);
        tensor_chunk("g/log_scales", &packed.log_scales, &mut out);
        tensor_chunk("g/f_diffuse", &packed.f_diffuse, &mut out);
        tensor_chunk("g/f_specular", &packed.f_specular, &mut out);
        let stats = &self.model.cloud;
        tensor_chunk(
            "stat/grad_accum",
            &Tensor::new(&[stats.grad_accum.len().max(1)], pad_one(&stats.grad_accum)).unwrap(),
            &mut out,
        );
        tensor_chunk(
            "stat/grad_count",
            &Tensor::new(
                &[stats.grad_count.len().max(1)],
                pad_one(&stats.grad_count.iter().map(|&c| c as f32).collect::<Vec<_>>()),
            )
            .unwrap(),
            &mut out,
        );
        tensor_chunk(
            "stat/max_radii",
            &Tensor::new(&[stats.max_radii.len().max(1)], pad_one(&stats.max_radii)).unwrap(),
            &mut out,
        );
        if let Some(coeffs) = &self.model.sh_coeffs {
            tensor_chunk("sh/coeffs", coeffs, &mut out);
        }

        let mut model = self.model.clone();
        let mut net_dump = |name: String, t: &mut Tensor| {
            tensor_chunk(&format!("net/{name}"), t, &mut out);
        };
        model.shading.visit_params_mut(&mut net_dump);
        model.unet.visit_params_mut(&mut net_dump);
        model.cnn.visit_params_mut(&mut net_dump);

        for (name, state) in &groups {
            tensor_chunk(&format!("adam/{name}.m"), &state.m, &mut out);
            tensor_chunk(&format!("adam/{name}.v"), &state.v, &mut out);
        }

        std::fs::write(path, out)?;
        Ok(())
    }

    fn adam_groups(&self) -> Vec<(String, AdamState)> {
        let opt = &self.optimizer;
        let mut groups = vec![
            ("positions".to_string(), opt.positions.clone()),
            ("opacity".to_string(), opt.opacity.clone()),
            ("rotations".to_string(), opt.rotations.clone()),
            ("log_scales".to_string(), opt.log_scales.clone()),
            ("f_diffuse".to_string(), opt.f_diffuse.clone()),
            ("f_specular".to_string(), opt.f_specular.clone()),
        ];
        if let Some(sh) = &opt.sh_coeffs {
            groups.push(("sh_coeffs".to_string(), sh.clone()));
        }
        for (name, state) in net_param_names(&self.model).iter().zip(&opt.nets) {
            groups.push((format!("net/{name}"), state.clone()));
        }
        groups
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path)?;
        let mut cur = std::io::Cursor::new(bytes.as_slice());
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = cur
            .read_u32::<LittleEndian>()
            .map_err(|_| CheckpointError::Malformed("missing version".into()))?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }

        let mut chunks: BTreeMap<String, Vec<u8>> = BTreeMap::new();
        loop {
            let name_len = match cur.read_u32::<LittleEndian>() {
                Ok(v) => v as usize,
                Err(_) => break,
            };
            let mut name = vec![0u8; name_len];
            cur.read_exact(&mut name)
                .map_err(|_| CheckpointError::Malformed("truncated chunk name".into()))?;
            let payload_len = cur
                .read_u64::<LittleEndian>()
                .map_err(|_| CheckpointError::Malformed("truncated chunk header".into()))?
                as usize;
            let mut payload = vec![0u8; payload_len];
            cur.read_exact(&mut payload)
                .map_err(|_| CheckpointError::Malformed("truncated chunk payload".into()))?;
            chunks.insert(
                String::from_utf8(name)
                    .map_err(|_| CheckpointError::Malformed("non-UTF-8 chunk name".into()))?,
                payload,
            );
        }

        let meta: Meta = serde_json::from_slice(
            chunks
                .get("meta")
                .ok_or_else(|| CheckpointError::Malformed("missing meta chunk".into()))?,
        )
        .map_err(|e| CheckpointError::Malformed(format!("meta: {e}")))?;

        let tensor = |name: &str| -> Result<Tensor, CheckpointError> {
            read_tensor(
                chunks
                    .get(name)
                    .ok_or_else(|| CheckpointError::Malformed(format!("missing chunk {name}")))?,
                name,
            )
        };

        let dims = FeatureDims {
            diffuse: meta.diffuse_dims,
            specular: meta.specular_dims,
        };
        let n = meta.n_gaussians;
        let positions = tensor("g/positions")?;
        let opacity = tensor("g/opacity")?;
        let rotations = tensor("g/rotations")?;
        let log_scales = tensor("g/log_scales")?;
        let f_diffuse = tensor("g/f_diffuse")?;
        let f_specular = tensor("g/f_specular")?;
        if positions.shape() != [n, 3] || opacity.shape() != [n] {
            return Err(CheckpointError::Malformed(
                "gaussian tensor shapes disagree with meta".into(),
            ));
        }
        let mut cloud = GaussianCloud::new(dims);
        for i in 0..n {
            cloud.push(LatentGaussian {
                position: nalgebra::Vector3::new(
                    positions.data()[i * 3],
                    positions.data()[i * 3 + 1],
                    positions.data()[i * 3 + 2],
                ),
                opacity_logit: opacity.data()[i],
                rotation: [
                    rotations.data()[i * 4],
                    rotations.data()[i * 4 + 1],
                    rotations.data()[i * 4 + 2],
                    rotations.data()[i * 4 + 3],
                ],
                log_scale: nalgebra::Vector3::new(
                    log_scales.data()[i * 3],
                    log_scales.data()[i * 3 + 1],
                    log_scales.data()[i * 3 + 2],
                ),
                f_diffuse: f_diffuse.data()[i * dims.diffuse..(i + 1) * dims.diffuse].to_vec(),
                f_specular: f_specular.data()[i * dims.specular..(i + 1) * dims.specular].to_vec(),
            });
        }
        let accum = tensor("stat/grad_accum")?;
        let count = tensor("stat/grad_count")?;
        let radii = tensor("stat/max_radii")?;
        cloud.grad_accum = accum.data()[..n.min(accum.numel())].to_vec();
        cloud.grad_count = count.data()[..n.min(count.numel())]
            .iter()
            .map(|&v| v as u32)
            .collect();
        cloud.max_radii = radii.data()[..n.min(radii.numel())].to_vec();
        if n == 0 {
            cloud.grad_accum.clear();
            cloud.grad_count.clear();
            cloud.max_radii.clear();
        }

        // Rebuild the networks by shape, then fill every parameter.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        use rand::SeedableRng;
        let mut model = Model::new(cloud, meta.mode, &mut rng);
        if meta.has_sh {
            model.sh_coeffs = Some(tensor("sh/coeffs")?);
        } else {
            model.sh_coeffs = None;
        }
        let mut missing: Vec<String> = Vec::new();
        {
            let mut fill = |name: String, t: &mut Tensor| {
                match read_named_tensor(&chunks, &format!("net/{name}")) {
                    Ok(loaded) if loaded.shape() == t.shape() => *t = loaded,
                    Ok(loaded) => missing.push(format!(
                        "net/{name}: shape {:?} vs expected {:?}",
                        loaded.shape(),
                        t.shape()
                    )),
                    Err(_) => missing.push(format!("net/{name}: missing")),
                }
            };
            model.shading.visit_params_mut(&mut fill);
            model.unet.visit_params_mut(&mut fill);
            model.cnn.visit_params_mut(&mut fill);
        }
        if !missing.is_empty() {
            return Err(CheckpointError::Malformed(missing.join("; ")));
        }

        let mut optimizer = Optimizer::new(&model);
        let mut load_state =
            |name: &str, state: &mut AdamState| -> Result<(), CheckpointError> {
                state.m = read_named_tensor(&chunks, &format!("adam/{name}.m"))?;
                state.v = read_named_tensor(&chunks, &format!("adam/{name}.v"))?;
                state.t = *meta
                    .adam_t
                    .get(name)
                    .ok_or_else(|| CheckpointError::Malformed(format!("missing adam_t for {name}")))?;
                Ok(())
            };
        load_state("positions", &mut optimizer.positions)?;
        load_state("opacity", &mut optimizer.opacity)?;
        load_state("rotations", &mut optimizer.rotations)?;
        load_state("log_scales", &mut optimizer.log_scales)?;
        load_state("f_diffuse", &mut optimizer.f_diffuse)?;
        load_state("f_specular", &mut optimizer.f_specular)?;
        if let Some(sh) = optimizer.sh_coeffs.as_mut() {
            load_state("sh_coeffs", sh)?;
        }
        let names = net_param_names(&model);
        for (name, state) in names.iter().zip(optimizer.nets.iter_mut()) {
            load_state(&format!("net/{name}"), state)?;
        }

        Ok(Self {
            iteration: meta.iteration,
            mode: meta.mode,
            model,
            optimizer,
        })
    }
}

fn pad_one(v: &[f32]) -> Vec<f32> {
    if v.is_empty() {
        vec![0.0]
    } else {
        v.to_vec()
    }
}

fn read_named_tensor(
    chunks: &BTreeMap<String, Vec<u8>>,
    name: &str,
) -> Result<Tensor, CheckpointError> {
    read_tensor(
        chunks
            .get(name)
            .ok_or_else(|| CheckpointError::Malformed(format!("missing chunk {name}")))?,
        name,
    )
}

fn read_tensor(payload: &[u8], name: &str) -> Result<Tensor, CheckpointError> {
    let mut cur = std::io::Cursor::new(payload);
    let err = |msg: &str| CheckpointError::Malformed(format!("{name}: {msg}"));
    let rank = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| err("truncated rank"))? as usize;
    if rank > 8 {
        return Err(err("implausible rank"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(
            cur.read_u64::<LittleEndian>()
                .map_err(|_| err("truncated dims"))? as usize,
        );
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(
            cur.read_f32::<LittleEndian>()
                .map_err(|_| err("truncated data"))?,
        );
    }
    Tensor::new(&shape, data).map_err(|e| err(&e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{SyntheticConfig, SyntheticScene};
    use crate::trainer::TrainConfig;

    fn model_bits(model: &Model) -> Vec<u32> {
        let mut bits = Vec::new();
        let packed = model.packed_gaussians();
        for t in [
            &packed.positions,
            &packed.opacity_logits,
            &packed.rotations,
            &packed.log_scales,
            &packed.f_diffuse,
            &packed.f_specular,
        ] {
            bits.extend(t.data().iter().map(|v| v.to_bits()));
        }
        let mut m = model.clone();
        let mut dump = |_n: String, t: &mut Tensor| {
            bits.extend(t.data().iter().map(|v| v.to_bits()));
        };
        m.shading.visit_params_mut(&mut dump);
        m.unet.visit_params_mut(&mut dump);
        m.cnn.visit_params_mut(&mut dump);
        bits
    }

    #[test]
    fn save_load_resume_is_bit_exact() {
        let scene = SyntheticScene::generate(&SyntheticConfig {
            seed: 11,
            ..Default::default()
        });
        let config = TrainConfig {
            iterations: 8,
            seed: 2,
            densify_interval: 2,
            densify_start: 2,
            densify_stop_fraction: 1.0,
            ..Default::default()
        };
        let mut trainer = Trainer::new(scene.student_model(2), RenderMode::Full, config.clone());
        for _ in 0..4 {
            trainer.step(&scene.dataset).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.slgs");
        Checkpoint::capture(&trainer).save(&path).unwrap();

        // interrupted run: load and take one step
        let mut resumed = Checkpoint::load(&path).unwrap().into_trainer(config);
        assert_eq!(resumed.iteration, 4);
        assert_eq!(model_bits(&resumed.model), model_bits(&trainer.model));
        let a = resumed.step(&scene.dataset).unwrap();
        // uninterrupted run: keep stepping the original
        let b = trainer.step(&scene.dataset).unwrap();
        assert_eq!(a.view, b.view);
        assert_eq!(a.loss.to_bits(), b.loss.to_bits(), "losses diverge");
        assert_eq!(
            model_bits(&resumed.model),
            model_bits(&trainer.model),
            "parameters diverge after one resumed step"
        );
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.slgs");
        std::fs::write(&path, b"NOPE0000").unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(CheckpointError::BadMagic)
        ));
    }
}
