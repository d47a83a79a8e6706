//! The training loop: pair sampling, loss, learning-rate schedule, and
//! checkpointing for direct supervision on paired multi-illumination data.
//!
//! Every random decision is keyed by `(seed, sample_index, lane)` through
//! [`RngStream`], so the full trajectory is deterministic under a fixed seed
//! and stays reproducible no matter how batch assembly is scheduled. The
//! conditioning stack is the only thing the corruption pipeline may touch;
//! source and target images pass through batch assembly photometrically
//! intact (asserted by hashing), and the horizontal flip — the one geometric
//! augmentation — is applied to source, target, and conditioning jointly
//! from a single coin.
//!
//! The perceptual term uses a fixed, seed-initialized three-stage
//! convolutional feature extractor. Its weights are registered on the graph
//! so gradients flow through them to the prediction, but they are excluded
//! from the optimizer and never move; the constant seed makes loss values
//! comparable across runs and resumes.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{augment_conditioning, lane, AugmentConfig, AugmentTrace, RngStream};
use crate::autodiff::{
    clip_grad_norm, load_checkpoint, save_checkpoint, AdamW, AdamWState, CheckpointError, Graph,
    PadMode, Tensor,
};
use crate::imgcore::{flip_horizontal, resize_bilinear};
use crate::model::{ModelConfig, ModelError, PixlModel};
use crate::scenegen::{Dataset, SceneError};

/// Seed for the frozen perceptual feature extractor. A constant, not a
/// config field: the extractor is part of the loss definition.
const PERCEPTUAL_SEED: u64 = 0x7065_7263;

/// RNG lane for the random-aspect-ratio resize draw, above the dataset
/// generator's per-condition lighting lanes.
const RESIZE_LANE: u64 = 32;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("non-finite loss at step {step}; batch ids: {}", format_ids(.batch))]
    NonFiniteLoss { step: usize, batch: Vec<SampleId> },
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint meta is not a valid run config: {0}")]
    BadMeta(String),
    #[error("checkpoint was trained with a different model config: {0}")]
    ConfigMismatch(String),
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("scene data error: {0}")]
    Scene(#[from] SceneError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

fn format_ids(ids: &[SampleId]) -> String {
    ids.iter().map(|id| id.to_string()).collect::<Vec<_>>().join(", ")
}

/// Which (scene, source condition, target condition) triple a sample drew.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleId {
    pub scene: usize,
    pub source_condition: usize,
    pub target_condition: usize,
}

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "scene {} cond {}->{}", self.scene, self.source_condition, self.target_condition)
    }
}

/// Training hyper-parameters. Defaults are the desk-scale configuration:
/// the reference recipe's optimizer settings with the warmup rescaled to
/// 250 steps and the batch sized so the acceptance experiments fit their
/// wall-clock budgets on one CPU core.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub warmup_steps: usize,
    pub betas: (f32, f32),
    pub weight_decay: f32,
    /// Perceptual loss weight; 0 selects the pure-L1 regime.
    pub perceptual_weight: f64,
    pub clip_norm: f32,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub dataset: PathBuf,
    pub eval_interval: usize,
    /// Random-aspect-ratio resizing of each sample. Off by default at desk
    /// scale, where scenes are fixed squares.
    pub random_resize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch_size: 2,
            peak_lr: 5e-5,
            final_lr: 1e-5,
            warmup_steps: 250,
            betas: (0.9, 0.95),
            weight_decay: 0.05,
            perceptual_weight: 0.2,
            clip_norm: 1.0,
            seed: 0,
            augment: AugmentConfig::default(),
            dataset: PathBuf::from("data"),
            eval_interval: 500,
            random_resize: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.warmup_steps >= self.iterations {
            return Err(TrainError::BadConfig(format!(
                "warmup_steps ({}) must be < iterations ({})",
                self.warmup_steps, self.iterations
            )));
        }
        if self.perceptual_weight < 0.0 || !self.perceptual_weight.is_finite() {
            return Err(TrainError::BadConfig(format!(
                "perceptual_weight must be finite and >= 0, got {}",
                self.perceptual_weight
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be >= 1".into()));
        }
        if !(self.peak_lr > 0.0 && self.final_lr > 0.0) {
            return Err(TrainError::BadConfig("learning rates must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(TrainError::BadConfig("clip_norm must be positive".into()));
        }
        for (i, b) in [self.betas.0, self.betas.1].into_iter().enumerate() {
            if !(0.0..1.0).contains(&b) {
                return Err(TrainError::BadConfig(format!("beta{} must be in [0,1), got {b}", i + 1)));
            }
        }
        self.augment
            .validate()
            .map_err(|e| TrainError::BadConfig(format!("augment: {e}")))?;
        Ok(())
    }
}

/// Warmup-then-cosine learning rate.
///
/// Linear from 0 to `peak_lr` over `warmup_steps`, then a half-cosine from
/// `peak_lr` down to `final_lr` at `iterations`. Continuous at the warmup
/// boundary. Computed in f64 so the closed form holds at machine precision.
pub fn lr_schedule(step: usize, config: &TrainConfig) -> f64 {
    let peak = config.peak_lr;
    let fin = config.final_lr;
    let w = config.warmup_steps as f64;
    let n = config.iterations as f64;
    let s = step as f64;
    if step < config.warmup_steps {
        peak * s / w
    } else {
        fin + 0.5 * (peak - fin) * (1.0 + (std::f64::consts::PI * (s - w) / (n - w)).cos())
    }
}

/// Draw one training pair: uniform scene, two distinct conditions, roles
/// assigned by a fair coin.
pub fn sample_pair(dataset: &Dataset, rng: &mut ChaCha8Rng) -> Result<SampleId, TrainError> {
    if dataset.conditions < 2 {
        return Err(TrainError::BadConfig(format!(
            "pairing requires >= 2 conditions, dataset has {}",
            dataset.conditions
        )));
    }
    let scene = rng.gen_range(0..dataset.scene_ids.len());
    let a = rng.gen_range(0..dataset.conditions);
    let mut b = rng.gen_range(0..dataset.conditions - 1);
    if b >= a {
        b += 1;
    }
    let (source_condition, target_condition) = if rng.gen_bool(0.5) { (a, b) } else { (b, a) };
    Ok(SampleId { scene, source_condition, target_condition })
}

/// One assembled training sample: tensors ready for the model, plus the
/// bookkeeping of which random decisions produced them.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub id: SampleId,
    pub source: ArrayD<f32>,
    pub conditioning: ArrayD<f32>,
    pub target: ArrayD<f32>,
    pub flipped: bool,
    pub trace: AugmentTrace,
}

fn bit_hash(data: &[f32]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for v in data {
        for byte in v.to_bits().to_le_bytes() {
            h = (h ^ byte as u64).wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Assemble the sample with global index `sample_index`: draw the pair,
/// load images and the stored target triplet, corrupt the conditioning,
/// and apply the joint horizontal flip.
///
/// Photometric corruption is scoped to the conditioning stack alone; the
/// source and target images are hash-checked across the augmentation step.
pub fn assemble_sample(
    dataset: &Dataset,
    config: &TrainConfig,
    stream: &RngStream,
    sample_index: u64,
    patch_size: usize,
) -> Result<TrainSample, TrainError> {
    let mut rng = stream.substream(sample_index, lane::PAIR);
    let id = sample_pair(dataset, &mut rng)?;

    let mut source = dataset.load_image(id.scene, id.source_condition)?.into_buffer();
    let mut target = dataset.load_image(id.scene, id.target_condition)?.into_buffer();
    let stack = dataset.conditioning(id.scene, id.target_condition)?;

    let source_hash = bit_hash(source.data());
    let target_hash = bit_hash(target.data());
    let (stack, trace) = augment_conditioning(&stack, &config.augment, stream, sample_index);
    assert_eq!(bit_hash(source.data()), source_hash, "corruption must not touch the source image");
    assert_eq!(bit_hash(target.data()), target_hash, "corruption must not touch the target image");
    let mut conditioning = stack.into_buffer();

    let flipped = stream.substream(sample_index, lane::FLIP).gen_bool(0.5);
    if flipped {
        source = flip_horizontal(&source);
        target = flip_horizontal(&target);
        conditioning = flip_horizontal(&conditioning);
    }

    if config.random_resize {
        let aspect = stream.substream(sample_index, RESIZE_LANE).gen_range(0.33..=1.0);
        let w = source.width() as f64 * aspect;
        let w = ((w / patch_size as f64).round() as usize).max(1) * patch_size;
        if w != source.width() {
            let h = source.height();
            source = resize_bilinear(&source, h, w);
            target = resize_bilinear(&target, h, w);
            conditioning = resize_bilinear(&conditioning, h, w);
            for v in conditioning.data_mut() {
                *v = v.clamp(0.0, 1.0);
            }
        }
    }

    Ok(TrainSample {
        id,
        source: source.to_array(),
        conditioning: conditioning.to_array(),
        target: target.to_array(),
        flipped,
        trace,
    })
}

/// Fixed random three-stage conv pyramid standing in for pretrained
/// perceptual features: 3x3 stride-2 convolutions widening 3 -> 8 -> 16 ->
/// 32, GELU after each. Weights come from a constant seed and never train.
pub struct PerceptualPyramid {
    stages: Vec<(Tensor, Tensor)>,
}

impl PerceptualPyramid {
    const WIDTHS: [usize; 4] = [3, 8, 16, 32];

    pub fn new(graph: &mut Graph) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(PERCEPTUAL_SEED);
        let mut stages = Vec::new();
        for s in 0..Self::WIDTHS.len() - 1 {
            let (cin, cout) = (Self::WIDTHS[s], Self::WIDTHS[s + 1]);
            let limit = (6.0 / ((cin + cout) * 9) as f32).sqrt();
            let w = ArrayD::from_shape_fn(IxDyn(&[cout, cin, 3, 3]), |_| {
                rng.gen_range(-limit..limit)
            });
            let b = ArrayD::zeros(IxDyn(&[cout, 1, 1]));
            stages.push((graph.param(w), graph.param(b)));
        }
        Self { stages }
    }

    /// Feature maps of the three stages for one `[3,H,W]` image.
    pub fn features(&self, graph: &mut Graph, image: Tensor) -> Vec<Tensor> {
        let mut x = image;
        let mut out = Vec::with_capacity(self.stages.len());
        for (w, b) in &self.stages {
            let conv = graph.conv2d(x, *w, 2, 1, 1, PadMode::Zero);
            let biased = graph.add(conv, *b);
            x = graph.gelu(biased);
            out.push(x);
        }
        out
    }
}

/// The differentiable loss terms of one sample.
pub struct LossTerms {
    pub total: Tensor,
    pub l1: Tensor,
    pub perceptual: Option<Tensor>,
}

/// Mean absolute error plus `lambda` times the feature-space L1 under the
/// frozen pyramid (mean over its three stages). `lambda = 0` skips the
/// perceptual graph entirely.
pub fn loss(
    graph: &mut Graph,
    pyramid: Option<&PerceptualPyramid>,
    pred: Tensor,
    target: Tensor,
    lambda: f64,
) -> LossTerms {
    let diff = graph.sub(pred, target);
    let abs = graph.abs(diff);
    let l1 = graph.mean_all(abs);
    if lambda == 0.0 {
        return LossTerms { total: l1, l1, perceptual: None };
    }
    let pyramid = pyramid.expect("perceptual weight > 0 requires a pyramid");
    let fp = pyramid.features(graph, pred);
    let ft = pyramid.features(graph, target);
    let mut acc: Option<Tensor> = None;
    for (a, b) in fp.into_iter().zip(ft) {
        let d = graph.sub(a, b);
        let ad = graph.abs(d);
        let m = graph.mean_all(ad);
        acc = Some(match acc {
            None => m,
            Some(prev) => graph.add(prev, m),
        });
    }
    let sum = acc.expect("pyramid has stages");
    let perceptual = graph.mul_scalar(sum, 1.0 / 3.0);
    let weighted = graph.mul_scalar(perceptual, lambda as f32);
    let total = graph.add(l1, weighted);
    LossTerms { total, l1, perceptual: Some(perceptual) }
}

/// Scalars reported for one optimizer step.
#[derive(Debug, Clone)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f32,
    pub l1: f32,
    pub perceptual: f32,
    /// Pre-clip global gradient norm.
    pub grad_norm: f32,
    pub lr: f64,
    pub batch: Vec<SampleId>,
}

pub const METRICS_CSV_HEADER: &str = "step,loss,l1,perceptual,grad_norm,lr";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.8},{:.8},{:.8},{:.8},{:.10}",
            self.step, self.loss, self.l1, self.perceptual, self.grad_norm, self.lr
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    step: usize,
    model: ModelConfig,
    train: TrainConfig,
}

/// Owns the graph, model, optimizer, and sampling state of one run.
pub struct Trainer {
    pub graph: Graph,
    pub model: PixlModel,
    pub model_config: ModelConfig,
    pub config: TrainConfig,
    pub dataset: Dataset,
    pub step: usize,
    params: Vec<Tensor>,
    opt: AdamW,
    state: AdamWState,
    pyramid: Option<PerceptualPyramid>,
    stream: RngStream,
}

impl Trainer {
    pub fn new(
        model_config: &ModelConfig,
        config: &TrainConfig,
        dataset: Dataset,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        model_config.validate()?;
        if dataset.resolution % model_config.patch_size != 0 {
            return Err(TrainError::BadConfig(format!(
                "dataset resolution {} is not divisible by patch size {}",
                dataset.resolution, model_config.patch_size
            )));
        }
        let mut graph = Graph::new();
        let model = PixlModel::new(&mut graph, model_config, config.seed);
        let pyramid =
            (config.perceptual_weight > 0.0).then(|| PerceptualPyramid::new(&mut graph));
        graph.freeze();
        let params = model.param_tensors();
        let state = AdamWState::new(&graph, &params);
        let opt = AdamW {
            beta1: config.betas.0,
            beta2: config.betas.1,
            eps: 1e-8,
            weight_decay: config.weight_decay,
        };
        let stream = RngStream::new(config.seed);
        Ok(Self {
            graph,
            model,
            model_config: model_config.clone(),
            config: config.clone(),
            dataset,
            step: 0,
            params,
            opt,
            state,
            pyramid,
            stream,
        })
    }

    /// One optimizer step: assemble `batch_size` samples, accumulate their
    /// gradients (each scaled by `1/batch_size`), clip, and update at the
    /// scheduled learning rate. A non-finite loss aborts with the batch ids.
    pub fn train_step(&mut self) -> Result<StepMetrics, TrainError> {
        let step = self.step;
        let batch = self.config.batch_size;
        let lr = lr_schedule(step, &self.config);
        let scale = 1.0 / batch as f32;
        let mut ids = Vec::with_capacity(batch);
        let (mut loss_sum, mut l1_sum, mut perc_sum) = (0.0f64, 0.0f64, 0.0f64);

        for k in 0..batch {
            let sample_index = (step * batch + k) as u64;
            let sample = assemble_sample(
                &self.dataset,
                &self.config,
                &self.stream,
                sample_index,
                self.model_config.patch_size,
            )?;
            ids.push(sample.id);

            self.graph.reset();
            let s = self.graph.input(sample.source);
            let c = self.graph.input(sample.conditioning);
            let t = self.graph.input(sample.target);
            let pred = self.model.forward(&mut self.graph, s, c);
            let terms =
                loss(&mut self.graph, self.pyramid.as_ref(), pred, t, self.config.perceptual_weight);

            let total = self.graph.scalar_value(terms.total);
            if !total.is_finite() {
                return Err(TrainError::NonFiniteLoss { step, batch: ids });
            }
            loss_sum += total as f64;
            l1_sum += self.graph.scalar_value(terms.l1) as f64;
            if let Some(p) = terms.perceptual {
                perc_sum += self.graph.scalar_value(p) as f64;
            }

            let scaled = self.graph.mul_scalar(terms.total, scale);
            self.graph.backward(scaled);
        }

        let grad_norm = clip_grad_norm(&mut self.graph, &self.params, self.config.clip_norm);
        self.opt.step(&mut self.graph, &self.params, &mut self.state, lr as f32);
        self.graph.zero_grads();
        self.step += 1;

        Ok(StepMetrics {
            step,
            loss: (loss_sum / batch as f64) as f32,
            l1: (l1_sum / batch as f64) as f32,
            perceptual: (perc_sum / batch as f64) as f32,
            grad_norm,
            lr,
            batch: ids,
        })
    }

    /// Run `steps` more optimizer steps, reporting each to the callback.
    pub fn run(
        &mut self,
        steps: usize,
        mut on_step: impl FnMut(&StepMetrics),
    ) -> Result<(), TrainError> {
        for _ in 0..steps {
            let metrics = self.train_step()?;
            on_step(&metrics);
        }
        Ok(())
    }

    /// Write model parameters, optimizer moments, and the run configs.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let meta = toml::to_string(&CheckpointMeta {
            step: self.step,
            model: self.model_config.clone(),
            train: self.config.clone(),
        })
        .map_err(|e| TrainError::BadMeta(e.to_string()))?;

        let named = self.model.named_params();
        let mut moment_names = Vec::with_capacity(named.len() * 2);
        for (name, _) in named {
            moment_names.push((format!("adam.m.{name}"), format!("adam.v.{name}")));
        }
        let mut records: Vec<(&str, &ArrayD<f32>)> = Vec::with_capacity(named.len() * 3);
        for (i, (name, tensor)) in named.iter().enumerate() {
            records.push((name.as_str(), self.graph.value(*tensor)));
            records.push((moment_names[i].0.as_str(), &self.state.m[i]));
            records.push((moment_names[i].1.as_str(), &self.state.v[i]));
        }
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        save_checkpoint(path, &meta, &records)?;
        Ok(())
    }

    /// Rebuild a trainer from a checkpoint and continue bit-exactly where
    /// the saved run stopped. When `expected_model` is given, a checkpoint
    /// trained under a different model config is rejected.
    pub fn resume(
        path: &Path,
        dataset: Dataset,
        expected_model: Option<&ModelConfig>,
    ) -> Result<Self, TrainError> {
        let (meta, records) = load_checkpoint(path)?;
        let meta: CheckpointMeta =
            toml::from_str(&meta).map_err(|e| TrainError::BadMeta(e.to_string()))?;
        if let Some(expected) = expected_model {
            if *expected != meta.model {
                return Err(TrainError::ConfigMismatch(format!(
                    "expected {expected:?}, checkpoint has {:?}",
                    meta.model
                )));
            }
        }
        let mut trainer = Trainer::new(&meta.model, &meta.train, dataset)?;
        trainer.model.load_named(&mut trainer.graph, &records)?;
        for (i, (name, _)) in trainer.model.named_params().iter().enumerate() {
            for (key, slot) in [
                (format!("adam.m.{name}"), &mut trainer.state.m[i]),
                (format!("adam.v.{name}"), &mut trainer.state.v[i]),
            ] {
                let record = records
                    .iter()
                    .find(|(n, _)| *n == key)
                    .ok_or_else(|| TrainError::BadMeta(format!("missing record {key}")))?;
                *slot = record.1.clone();
            }
        }
        trainer.state.step = meta.step as u64;
        trainer.step = meta.step;
        Ok(trainer)
    }
}

/// Load just the model from a checkpoint (for evaluation and inference).
pub fn load_model(path: &Path) -> Result<(Graph, PixlModel, ModelConfig, TrainConfig), TrainError> {
    let (meta, records) = load_checkpoint(path)?;
    let meta: CheckpointMeta =
        toml::from_str(&meta).map_err(|e| TrainError::BadMeta(e.to_string()))?;
    let mut graph = Graph::new();
    let model = PixlModel::new(&mut graph, &meta.model, 0);
    graph.freeze();
    model.load_named(&mut graph, &records)?;
    Ok((graph, model, meta.model, meta.train))
}
