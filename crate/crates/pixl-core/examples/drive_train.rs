//! Runtime drive for the training loop on real data at the default desk
//! configuration: generate a dataset, train briefly, checkpoint, resume,
//! and evaluate — printing wall-clock per step to track the runtime budget.

use std::time::Instant;

use pixl_core::metrics::evaluate;
use pixl_core::model::ModelConfig;
use pixl_core::scenegen::{generate_dataset, DatasetParams};
use pixl_core::train::{TrainConfig, Trainer};

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let gen_started = Instant::now();
    let dataset = generate_dataset(
        &DatasetParams { scenes: 8, conditions: 2, seed: 42, resolution: 64 },
        &data,
        false,
    )
    .unwrap();
    println!(
        "dataset: 8 scenes x 2 conditions at 64x64 in {:.1} s",
        gen_started.elapsed().as_secs_f64()
    );

    let model_config = ModelConfig::default();
    let train_config = TrainConfig {
        dataset: data.clone(),
        iterations: 2000,
        peak_lr: 3e-4,
        final_lr: 3e-5,
        warmup_steps: 50,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(&model_config, &train_config, dataset.clone()).unwrap();

    let before = evaluate(&mut trainer.graph, &trainer.model, &dataset).unwrap();
    println!(
        "before training: psnr {:.2} dB (baseline {:.2})",
        before.mean_psnr, before.baseline_mean_psnr
    );

    let started = Instant::now();
    let steps = 30usize;
    let mut first_loss = f32::NAN;
    let mut last = None;
    for i in 0..steps {
        let m = trainer.train_step().unwrap();
        if i == 0 {
            first_loss = m.loss;
        }
        if i % 10 == 9 {
            println!(
                "step {:>3}  loss {:.4}  l1 {:.4}  perc {:.4}  |g| {:.3}  lr {:.2e}",
                m.step, m.loss, m.l1, m.perceptual, m.grad_norm, m.lr
            );
        }
        last = Some(m);
    }
    let per_step = started.elapsed().as_secs_f64() / steps as f64;
    println!(
        "train step: {:.0} ms at batch {} (2000 steps = {:.1} min)",
        per_step * 1000.0,
        train_config.batch_size,
        per_step * 2000.0 / 60.0
    );
    let last = last.unwrap();
    assert!(last.loss.is_finite() && first_loss.is_finite());

    // Checkpoint round trip mid-run, then keep training from the restore.
    let ckpt = dir.path().join("ckpt.bin");
    trainer.save(&ckpt).unwrap();
    let mut resumed = Trainer::resume(&ckpt, dataset.clone(), Some(&model_config)).unwrap();
    assert_eq!(resumed.step, steps);
    let a = trainer.train_step().unwrap();
    let b = resumed.train_step().unwrap();
    assert_eq!(a.loss.to_bits(), b.loss.to_bits(), "resume diverged from the live trainer");
    println!("resume at step {}: next loss {:.6} matches bitwise", steps, b.loss);

    let after = evaluate(&mut trainer.graph, &trainer.model, &dataset).unwrap();
    println!(
        "after {} more steps: psnr {:.2} dB (started {:.2})",
        steps + 1,
        after.mean_psnr,
        before.mean_psnr
    );
    println!("drive OK");
}
