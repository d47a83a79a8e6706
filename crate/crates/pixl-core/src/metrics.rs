//! Scale-corrected image quality metrics and the evaluation harness.
//!
//! Predictions are compared to ground truth only after a per-channel
//! least-squares brightness alignment: the model is free to land on any
//! global per-channel gain, because the conditioning stack itself is only
//! defined up to the percentile normalizer. The correction factor for
//! channel `c` is the closed-form minimizer of `||alpha * pred - target||^2`,
//!
//! ```text
//! alpha_c = <pred_c, target_c> / <pred_c, pred_c>
//! ```
//!
//! with `alpha_c = 1` when the prediction channel carries no energy. The
//! corrected prediction is clipped back to `[0,1]` before PSNR/SSIM.
//!
//! The same correction is applied to every method in a comparison, including
//! the copy-source baseline, so reported gaps measure relighting quality
//! rather than exposure bookkeeping.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use ndarray::ArrayD;
use thiserror::Error;

use crate::autodiff::Graph;
use crate::model::PixlModel;
use crate::scenegen::{Dataset, SceneError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("evaluation split is empty")]
    EmptySplit,
    #[error("pairing requires >= 2 conditions, dataset has {0}")]
    TooFewConditions(usize),
    #[error("scene data error: {0}")]
    Scene(#[from] SceneError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-channel least-squares gains aligning `pred` to `target`.
///
/// Both tensors must be `[C, H, W]` with identical shapes. Channels where
/// `pred` is identically zero get a factor of 1 (no correction is possible,
/// and scaling zero does nothing anyway).
pub fn scale_factors(pred: &ArrayD<f32>, target: &ArrayD<f32>) -> Vec<f32> {
    assert_eq!(pred.shape(), target.shape(), "scale_factors: shape mismatch");
    assert_eq!(pred.ndim(), 3, "scale_factors expects [C,H,W] tensors");
    let channels = pred.shape()[0];
    let plane = pred.len() / channels;
    let p = pred.as_slice().expect("standard layout");
    let t = target.as_slice().expect("standard layout");
    let mut factors = Vec::with_capacity(channels);
    for c in 0..channels {
        let (mut pt, mut pp) = (0.0f64, 0.0f64);
        for i in c * plane..(c + 1) * plane {
            pt += p[i] as f64 * t[i] as f64;
            pp += p[i] as f64 * p[i] as f64;
        }
        factors.push(if pp == 0.0 { 1.0 } else { (pt / pp) as f32 });
    }
    factors
}

/// Apply the per-channel least-squares correction and clip to `[0,1]`.
/// Returns the corrected tensor together with the factors used.
pub fn scale_correct(pred: &ArrayD<f32>, target: &ArrayD<f32>) -> (ArrayD<f32>, Vec<f32>) {
    let factors = scale_factors(pred, target);
    let channels = pred.shape()[0];
    let plane = pred.len() / channels;
    let mut out = pred.clone();
    let data = out.as_slice_mut().expect("standard layout");
    for c in 0..channels {
        for v in &mut data[c * plane..(c + 1) * plane] {
            *v = (*v * factors[c]).clamp(0.0, 1.0);
        }
    }
    (out, factors)
}

/// Peak signal-to-noise ratio in decibels, with peak 1.
///
/// Identical inputs return `f64::INFINITY`; downstream consumers treat the
/// sentinel as "exact". The mean square error is accumulated in f64 so the
/// result is stable across element orderings of the same multiset.
pub fn psnr(a: &ArrayD<f32>, b: &ArrayD<f32>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "psnr: shape mismatch");
    let mut se = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = *x as f64 - *y as f64;
        se += d * d;
    }
    let mse = se / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let center = (SSIM_WINDOW - 1) as f64 / 2.0;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - center;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Gaussian-weighted window means over all fully-interior positions,
/// computed with the separable horizontal-then-vertical decomposition.
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                acc += wk * plane[y * w + x + k];
            }
            rows[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                acc += wk * rows[(y + k) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// stabilizers `K1 = 0.01`, `K2 = 0.03`, and data range 1. Only windows
/// fully inside the image contribute; the result is the mean over every
/// channel and window position. Inputs must be at least 11x11.
pub fn ssim(a: &ArrayD<f32>, b: &ArrayD<f32>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "ssim: shape mismatch");
    assert_eq!(a.ndim(), 3, "ssim expects [C,H,W] tensors");
    let (channels, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    assert!(
        h >= SSIM_WINDOW && w >= SSIM_WINDOW,
        "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
    );
    let win = gaussian_window();
    let c1 = (SSIM_K1 * SSIM_K1) as f64;
    let c2 = (SSIM_K2 * SSIM_K2) as f64;
    let plane = h * w;
    let av = a.as_slice().expect("standard layout");
    let bv = b.as_slice().expect("standard layout");

    let mut total = 0.0f64;
    let mut count = 0usize;
    for c in 0..channels {
        let pa: Vec<f64> = av[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).collect();
        let pb: Vec<f64> = bv[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).collect();
        let paa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let pbb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let pab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();

        let mu_a = filter_valid(&pa, h, w, &win);
        let mu_b = filter_valid(&pb, h, w, &win);
        let e_aa = filter_valid(&paa, h, w, &win);
        let e_bb = filter_valid(&pbb, h, w, &win);
        let e_ab = filter_valid(&pab, h, w, &win);

        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            total += num / den;
        }
        count += mu_a.len();
    }
    total / count as f64
}

/// Metrics for one ordered (source condition, target condition) pair.
#[derive(Debug, Clone)]
pub struct PairEval {
    pub scene: String,
    pub source_condition: usize,
    pub target_condition: usize,
    /// Scale-corrected prediction quality.
    pub psnr: f64,
    pub ssim: f64,
    /// Copy-source baseline under the identical correction protocol.
    pub baseline_psnr: f64,
    pub baseline_ssim: f64,
    /// Per-channel least-squares gains applied to the prediction.
    pub scale: Vec<f32>,
}

/// Aggregate evaluation over every ordered pair of a dataset split.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub pairs: Vec<PairEval>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub baseline_mean_psnr: f64,
    pub baseline_mean_ssim: f64,
    /// Single-image forward wall time: mean of 5 runs after 2 warm-ups.
    pub forward_seconds: f64,
}

impl EvalReport {
    /// One CSV row per evaluated pair. The `lpips` column is part of the
    /// schema for downstream tooling but no backbone ships here, so it is
    /// emitted empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "scene,source,target,psnr,ssim,baseline_psnr,baseline_ssim,scale_r,scale_g,scale_b,lpips\n",
        );
        for p in &self.pairs {
            writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},",
                p.scene,
                p.source_condition,
                p.target_condition,
                p.psnr,
                p.ssim,
                p.baseline_psnr,
                p.baseline_ssim,
                p.scale[0],
                p.scale[1],
                p.scale[2],
            )
            .expect("string write");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), MetricsError> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Human-readable comparison of the model against the copy-source
    /// baseline.
    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{:<14} {:>10} {:>8} {:>12}", "method", "psnr (dB)", "ssim", "forward (s)")
            .expect("string write");
        writeln!(
            out,
            "{:<14} {:>10.3} {:>8.4} {:>12}",
            "copy-source", self.baseline_mean_psnr, self.baseline_mean_ssim, "-"
        )
        .expect("string write");
        writeln!(
            out,
            "{:<14} {:>10.3} {:>8.4} {:>12.4}",
            "model", self.mean_psnr, self.mean_ssim, self.forward_seconds
        )
        .expect("string write");
        out
    }
}

/// Evaluate a model over every ordered condition pair of every scene in a
/// dataset split.
///
/// For each pair the source image and the clean target conditioning stack
/// (no corruption) are pushed through the model, the prediction is
/// scale-corrected against the real target image, and PSNR/SSIM are
/// recorded next to the copy-source baseline under the same correction.
/// Forward wall time is measured on the first pair: two warm-up runs, then
/// the mean of five timed runs.
pub fn evaluate(
    graph: &mut Graph,
    model: &PixlModel,
    dataset: &Dataset,
) -> Result<EvalReport, MetricsError> {
    if dataset.scene_ids.is_empty() {
        return Err(MetricsError::EmptySplit);
    }
    if dataset.conditions < 2 {
        return Err(MetricsError::TooFewConditions(dataset.conditions));
    }

    let run_forward = |graph: &mut Graph, src: &ArrayD<f32>, cond: &ArrayD<f32>| {
        graph.reset();
        let s = graph.input(src.clone());
        let c = graph.input(cond.clone());
        let out = model.forward(graph, s, c);
        graph.value(out).clone()
    };

    // Timing probe on the first pair, before the metric loop.
    let first_src = dataset.load_image(0, 0)?.into_buffer().to_array();
    let first_cond = dataset.conditioning(0, 1)?.buffer().to_array();
    for _ in 0..2 {
        run_forward(graph, &first_src, &first_cond);
    }
    let started = Instant::now();
    for _ in 0..5 {
        run_forward(graph, &first_src, &first_cond);
    }
    let forward_seconds = started.elapsed().as_secs_f64() / 5.0;

    let mut pairs = Vec::new();
    for s in 0..dataset.scene_ids.len() {
        let images: Vec<ArrayD<f32>> = (0..dataset.conditions)
            .map(|k| Ok(dataset.load_image(s, k)?.into_buffer().to_array()))
            .collect::<Result<_, MetricsError>>()?;
        let stacks: Vec<ArrayD<f32>> = (0..dataset.conditions)
            .map(|k| Ok(dataset.conditioning(s, k)?.buffer().to_array()))
            .collect::<Result<_, MetricsError>>()?;
        for i in 0..dataset.conditions {
            for j in 0..dataset.conditions {
                if i == j {
                    continue;
                }
                let pred = run_forward(graph, &images[i], &stacks[j]);
                let (corrected, scale) = scale_correct(&pred, &images[j]);
                let (baseline, _) = scale_correct(&images[i], &images[j]);
                pairs.push(PairEval {
                    scene: dataset.scene_ids[s].clone(),
                    source_condition: i,
                    target_condition: j,
                    psnr: psnr(&corrected, &images[j]),
                    ssim: ssim(&corrected, &images[j]),
                    baseline_psnr: psnr(&baseline, &images[j]),
                    baseline_ssim: ssim(&baseline, &images[j]),
                    scale,
                });
            }
        }
    }

    let n = pairs.len() as f64;
    Ok(EvalReport {
        mean_psnr: pairs.iter().map(|p| p.psnr).sum::<f64>() / n,
        mean_ssim: pairs.iter().map(|p| p.ssim).sum::<f64>() / n,
        baseline_mean_psnr: pairs.iter().map(|p| p.baseline_psnr).sum::<f64>() / n,
        baseline_mean_ssim: pairs.iter().map(|p| p.baseline_ssim).sum::<f64>() / n,
        forward_seconds,
        pairs,
    })
}
