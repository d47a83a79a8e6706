//! Wall-clock sizing for the relighting model: training-step time at the
//! training resolution and forward-only time at 128×128, across embed dims.

use ndarray::{ArrayD, IxDyn};
use pixl_core::autodiff::{AdamW, AdamWState, Graph};
use pixl_core::model::{ModelConfig, PixlModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn rand_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> ArrayD<f32> {
    ArrayD::from_shape_fn(IxDyn(&[c, h, w]), |_| rng.gen_range(0.0..1.0f32))
}

fn bench(d: usize, patch: usize) {
    let config = ModelConfig { d, patch_size: patch, ..ModelConfig::default() };
    let mut g = Graph::new();
    let model = PixlModel::new(&mut g, &config, 1);
    g.freeze();
    let params = model.param_tensors();
    let n_params: usize = params.iter().map(|t| g.value(*t).len()).sum();
    let opt = AdamW::default();
    let mut state = AdamWState::new(&g, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(2);

    // Training step at 64x64: forward, loss, backward, clip, update.
    let src = rand_image(&mut rng, 3, 64, 64);
    let cond = rand_image(&mut rng, 9, 64, 64);
    let tgt = rand_image(&mut rng, 3, 64, 64);
    let mut step = || {
        g.reset();
        let s = g.input(src.clone());
        let c = g.input(cond.clone());
        let t = g.input(tgt.clone());
        let out = model.forward(&mut g, s, c);
        let diff = g.sub(out, t);
        let a = g.abs(diff);
        let loss = g.mean_all(a);
        g.backward(loss);
        pixl_core::autodiff::clip_grad_norm(&mut g, &params, 1.0);
        opt.step(&mut g, &params, &mut state, 1e-4);
        g.zero_grads();
    };
    step(); // warm-up
    let t0 = Instant::now();
    let reps = 5;
    for _ in 0..reps {
        step();
    }
    let step_ms = t0.elapsed().as_secs_f64() * 1000.0 / reps as f64;

    // Forward only at 128x128, averaged over 5 runs after 2 warm-ups.
    let src = rand_image(&mut rng, 3, 128, 128);
    let cond = rand_image(&mut rng, 9, 128, 128);
    let mut fwd = || {
        g.reset();
        let s = g.input(src.clone());
        let c = g.input(cond.clone());
        let out = model.forward(&mut g, s, c);
        g.value(out)[[0, 0, 0]]
    };
    fwd();
    fwd();
    let t0 = Instant::now();
    for _ in 0..5 {
        fwd();
    }
    let fwd_ms = t0.elapsed().as_secs_f64() * 1000.0 / 5.0;

    println!(
        "d={d:>3} p={patch:>2}  params={n_params:>8}  train-step@64: {step_ms:7.1} ms  \
         forward@128: {fwd_ms:7.1} ms  (2000 steps = {:.1} min)",
        step_ms * 2000.0 / 60_000.0
    );
}

fn main() {
    for (d, p) in [(64, 8), (96, 8), (128, 8), (64, 16)] {
        bench(d, p);
    }
}
