// Manual convergence experiments. Run with --ignored --nocapture.
use latent_splat::pipeline::RenderMode;
use latent_splat::synthetic::{SyntheticConfig, SyntheticScene};
use latent_splat::trainer::{TrainConfig, Trainer};

fn run(name: &str, scene: &SyntheticScene, config: TrainConfig, iters: u64) {
    let mut trainer = Trainer::new(scene.student_model(7), RenderMode::Full, config);
    let t0 = std::time::Instant::now();
    for i in 0..iters {
        match trainer.step(&scene.dataset) {
            Ok(r) => {
                if (i + 1) % 200 == 0 {
                    let (psnr, _) = trainer
                        .evaluate(&scene.dataset, &scene.dataset.train_indices)
                        .unwrap();
                    println!(
                        "[{name}] iter {:4} loss {:.5} psnr {:.2} n={} t={:.0}s",
                        i + 1, r.loss, psnr, r.n_gaussians, t0.elapsed().as_secs_f64()
                    );
                }
            }
            Err(e) => {
                println!("[{name}] FAILED at iter {i}: {e}");
                return;
            }
        }
    }
}

#[test]
#[ignore]
fn sweep() {
    let scene = SyntheticScene::generate(&SyntheticConfig::default());
    println!("student gaussians: {}", scene.student_model(7).cloud.len());

    // B: dense init, no densify, aggressive rates
    let cfg_b = TrainConfig {
        iterations: 800,
        seed: 7,
        densify_interval: 0,
        lr_position: 1e-3,
        lr_position_final: 1e-4,
        lr_networks: 5e-3,
        lr_features: 1e-2,
        lr_scale: 1e-2,
        lr_rotation: 3e-3,
        ..Default::default()
    };
    run("B dense+fast", &scene, cfg_b, 800);

    // C: dense init, default rates
    let cfg_c = TrainConfig {
        iterations: 800,
        seed: 7,
        densify_interval: 0,
        ..Default::default()
    };
    run("C dense+default", &scene, cfg_c, 800);

    // D: dense init, very aggressive nets
    let cfg_d = TrainConfig {
        iterations: 800,
        seed: 7,
        densify_interval: 0,
        lr_position: 2e-3,
        lr_position_final: 2e-4,
        lr_networks: 1e-2,
        lr_features: 2e-2,
        lr_scale: 1e-2,
        lr_rotation: 3e-3,
        lr_opacity: 0.08,
        ..Default::default()
    };
    run("D dense+faster", &scene, cfg_d, 800);
}
