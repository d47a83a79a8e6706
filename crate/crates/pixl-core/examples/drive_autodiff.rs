//! Runtime drive for the tape engine: fit a tiny conv + MLP regressor with
//! AdamW, checkpoint it, reload into a fresh graph, and confirm the restored
//! model reproduces the trained predictions bit-for-bit.

use ndarray::{ArrayD, IxDyn};
use pixl_core::autodiff::{AdamW, AdamWState, Graph, PadMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f32> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-0.3..0.3f32))
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut g = Graph::new();
    let w_conv = g.param(rand_array(&mut rng, &[4, 1, 3, 3]));
    let w1 = g.param(rand_array(&mut rng, &[64, 16]));
    let w2 = g.param(rand_array(&mut rng, &[16, 1]));
    g.freeze();
    let named_params = [("w_conv", w_conv), ("w1", w1), ("w2", w2)];
    let params: Vec<_> = named_params.iter().map(|(_, t)| *t).collect();

    let x_val = rand_array(&mut rng, &[2, 4, 4]);
    let target = 0.37f32;

    let opt = AdamW { weight_decay: 0.0, ..AdamW::default() };
    let mut state = AdamWState::new(&g, &params);
    let forward = |g: &mut Graph| {
        let x = g.input(x_val.clone());
        let h = g.conv2d(x, w_conv, 1, 1, 2, PadMode::Replicate);
        let h = g.gelu(h);
        let flat = g.reshape(h, &[1, 64]);
        let h1 = g.matmul(flat, w1);
        let h1 = g.gelu(h1);
        g.matmul(h1, w2)
    };

    let mut first_loss = 0.0f32;
    let mut last_loss = 0.0f32;
    for step in 0..200 {
        g.reset();
        let pred = forward(&mut g);
        let t = g.input(ArrayD::from_elem(IxDyn(&[1, 1]), target));
        let diff = g.sub(pred, t);
        let sq = g.mul(diff, diff);
        let loss = g.mean_all(sq);
        g.backward(loss);
        let l = g.scalar_value(loss);
        if step == 0 {
            first_loss = l;
        }
        last_loss = l;
        opt.step(&mut g, &params, &mut state, 1e-2);
        g.zero_grads();
    }
    println!("loss step 0 = {first_loss:.6}, step 199 = {last_loss:.6}");
    assert!(last_loss < first_loss * 1e-3, "training did not converge");

    g.reset();
    let pred = forward(&mut g);
    let trained = g.scalar_value(pred);
    println!("trained prediction = {trained:.6} (target {target})");
    assert!((trained - target).abs() < 1e-2);

    let path = std::env::temp_dir().join("drive_autodiff.ckpt");
    let named: Vec<(&str, &ArrayD<f32>)> =
        named_params.iter().map(|(n, t)| (*n, g.value(*t))).collect();
    pixl_core::autodiff::save_checkpoint(&path, "drive", &named).unwrap();

    let mut g2 = Graph::new();
    let (meta, tensors) = pixl_core::autodiff::load_checkpoint(&path).unwrap();
    assert_eq!(meta, "drive");
    let mut rng2 = ChaCha8Rng::seed_from_u64(7);
    let w_conv2 = g2.param(rand_array(&mut rng2, &[4, 1, 3, 3]));
    let w12 = g2.param(rand_array(&mut rng2, &[64, 16]));
    let w22 = g2.param(rand_array(&mut rng2, &[16, 1]));
    g2.freeze();
    for (name, tensor) in [("w_conv", w_conv2), ("w1", w12), ("w2", w22)] {
        let arr = tensors.iter().find(|(n, _)| n == name).unwrap();
        g2.set_value(tensor, arr.1.clone());
    }
    let x = g2.input(x_val.clone());
    let h = g2.conv2d(x, w_conv2, 1, 1, 2, PadMode::Replicate);
    let h = g2.gelu(h);
    let flat = g2.reshape(h, &[1, 64]);
    let h1 = g2.matmul(flat, w12);
    let h1 = g2.gelu(h1);
    let pred2 = g2.matmul(h1, w22);
    let restored = g2.scalar_value(pred2);
    println!("restored prediction = {restored:.6}");
    assert_eq!(trained.to_bits(), restored.to_bits(), "reload is not bit-exact");

    std::fs::remove_file(&path).ok();
    println!("drive OK");
}
