//! Calibration experiment: memorization speed vs peak learning rate on the
//! 8-scene desk set. Temporary tooling, not part of the shipped surface.

use std::time::Instant;

use pixl_core::metrics::evaluate;
use pixl_core::model::ModelConfig;
use pixl_core::scenegen::{generate_dataset, DatasetParams};
use pixl_core::train::{TrainConfig, Trainer};

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let dataset = generate_dataset(
        &DatasetParams { scenes: 8, conditions: 2, seed: 42, resolution: 64 },
        &data,
        false,
    )
    .unwrap();

    let args: Vec<String> = std::env::args().collect();
    let peak: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(3e-4);
    let steps: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(600);
    let aug: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.7);
    let batch: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(2);
    let lambda: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(0.2);

    let model_config = ModelConfig::default();
    let mut train_config = TrainConfig {
        dataset: data.clone(),
        iterations: steps.max(2000),
        peak_lr: peak,
        final_lr: peak / 10.0,
        warmup_steps: 100,
        batch_size: batch,
        perceptual_weight: lambda,
        ..TrainConfig::default()
    };
    train_config.augment.p_apply = aug;

    let mut trainer = Trainer::new(&model_config, &train_config, dataset.clone()).unwrap();
    println!("peak_lr {peak:.1e}  steps {steps}  p_apply {aug}  batch {batch}  lambda {lambda}");
    let started = Instant::now();
    for i in 0..steps {
        let m = trainer.train_step().unwrap();
        if (i + 1) % 100 == 0 {
            println!(
                "  step {:>4}  loss {:.4}  l1 {:.4}  |g| {:>7.2}  lr {:.2e}  [{:.1} min]",
                m.step + 1,
                m.loss,
                m.l1,
                m.grad_norm,
                m.lr,
                started.elapsed().as_secs_f64() / 60.0
            );
        }
        if (i + 1) % 200 == 0 {
            let r = evaluate(&mut trainer.graph, &trainer.model, &dataset).unwrap();
            println!(
                "  === step {:>4}: train psnr {:.2} dB  ssim {:.4}  (baseline {:.2})",
                m.step + 1,
                r.mean_psnr,
                r.mean_ssim,
                r.baseline_mean_psnr
            );
        }
    }
    println!("total {:.1} min", started.elapsed().as_secs_f64() / 60.0);
}
