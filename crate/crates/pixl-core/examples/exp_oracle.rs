//! Throwaway: measure the reconstruction ceiling of the stored conditioning.
//!
//! The dataset stores shading/residual clamped at the joint 98th percentile,
//! so the top 2% of highlight energy is gone. This recomposes the target
//! image from the stored stack (with the true tau recovered by re-rendering)
//! and reports PSNR against the stored PNG — an upper bound on what any
//! model can recover from C_T alone.

use pixl_core::augment::{lane, RngStream};
use pixl_core::imgcore::{linear_component_to_srgb, FloatBuffer};
use pixl_core::intrinsics::percentile;
use pixl_core::metrics::{psnr, scale_correct};
use pixl_core::scenegen::{
    generate_dataset, generate_scene, render_passes, sample_lighting, DatasetParams,
};
use rand::Rng;

fn main() {
    let dir = std::env::temp_dir().join("pixl_exp_oracle");
    let _ = std::fs::remove_dir_all(&dir);
    let params = DatasetParams { scenes: 8, conditions: 2, seed: 42, resolution: 64 };
    let dataset = generate_dataset(&params, &dir, true).unwrap();
    let stream = RngStream::new(params.seed);

    let (mut sum_true_tau, mut sum_fit_tau, mut n) = (0.0, 0.0, 0);
    for s in 0..params.scenes {
        let scene_seed: u64 = stream.substream(s as u64, lane::SCENE).gen();
        let scene = generate_scene(scene_seed, params.resolution);
        for k in 0..params.conditions {
            let light_seed: u64 = stream.substream(s as u64, lane::LIGHTS_BASE + k as u64).gen();
            let passes = render_passes(&scene, &sample_lighting(light_seed)).unwrap();
            let raw = pixl_core::intrinsics::passes_to_intrinsics(&passes).unwrap();
            let tau = percentile(raw.shading.data(), 0.98)
                .unwrap()
                .max(percentile(raw.residual.data(), 0.98).unwrap())
                .max(1e-4);

            let stack = dataset.conditioning(s, k).unwrap();
            let target = dataset.load_image(s, k).unwrap().into_buffer().to_array();

            // recompose from the stored stack at a given tau
            let recompose = |t: f32| -> FloatBuffer {
                let b = stack.buffer();
                let (h, w) = (b.height(), b.width());
                let mut out = FloatBuffer::zeros(3, h, w);
                for c in 0..3 {
                    for y in 0..h {
                        for x in 0..w {
                            let a = b.get(c, y, x);
                            let sh = b.get(3 + c, y, x) * t;
                            let r = b.get(6 + c, y, x) * t;
                            let lin = (a * sh + r).clamp(0.0, 1.0);
                            out.set(c, y, x, linear_component_to_srgb(lin));
                        }
                    }
                }
                out
            };

            let with_tau = recompose(tau).to_array();
            let no_tau = recompose(1.0).to_array();
            let (fit, _) = scale_correct(&no_tau, &target);
            let p_true = psnr(&with_tau, &target);
            let p_fit = psnr(&fit, &target);
            println!("scene {s} cond {k}: tau {tau:.4}  psnr(true tau) {p_true:.2}  psnr(tau=1, scale-corrected) {p_fit:.2}");
            sum_true_tau += p_true;
            sum_fit_tau += p_fit;
            n += 1;
        }
    }
    println!("mean psnr: true tau {:.2} dB, scale-corrected {:.2} dB", sum_true_tau / n as f64, sum_fit_tau / n as f64);
}
