//! The relighting network: asymmetric encoders over the source image and the
//! conditioning stack, per-location token fusion, a self-attention trunk with
//! 2D rotary position embeddings and register tokens, a DPT-style multi-depth
//! readout, and a per-pixel affine modulation head.
//!
//! The head predicts a gain `g` and bias `b` per pixel and forms
//! `clip((1 + g) ⊙ I_S + b, 0, 1)`. Its output convolution is zero-initialized
//! so a fresh model reproduces the source image exactly — training starts from
//! an identity mapping and learns only the change in illumination.

use crate::autodiff::{attention, Graph, PadMode, Tensor};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// How the network turns dense features into the output image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Per-pixel affine modulation of the source: `clip((1+g)⊙I_S + b, 0, 1)`.
    Modulation,
    /// Plain sigmoid-activated RGB regression (ablation).
    DirectRegression,
}

/// Which token streams feed the trunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrunkMode {
    /// Source and conditioning tokens fused per grid location.
    Fused,
    /// Conditioning tokens only; the source branch is removed (ablation).
    IntrinsicsOnly,
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("d, heads, and trunk_depth must all be nonzero")]
    ZeroDimension,
    #[error("embed dim {d} is not divisible by head count {heads}")]
    HeadSplit { d: usize, heads: usize },
    #[error("head dim {dh} is not divisible by 4 (two rotary pairs per grid axis)")]
    RotaryPairs { dh: usize },
    #[error("patch size must be a power of two, got {0}")]
    PatchSize(usize),
    #[error("readout_indices must be non-empty")]
    NoReadouts,
    #[error("readout_indices must be strictly increasing, got {0:?}")]
    ReadoutOrder(Vec<usize>),
    #[error("readout index {index} out of range for trunk depth {depth}")]
    ReadoutRange { index: usize, depth: usize },
    #[error("rope_base must be finite and positive, got {0}")]
    RopeBase(f32),
    #[error("checkpoint does not match the model: {0}")]
    BadCheckpoint(String),
}

/// Architecture hyper-parameters. The defaults are the desk-scale
/// configuration used throughout training and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Token embedding dimension.
    pub d: usize,
    /// Number of trunk attention blocks.
    pub trunk_depth: usize,
    /// Attention heads (head dim `d / heads` must be divisible by 4).
    pub heads: usize,
    /// Patch edge length; input dimensions must be divisible by it.
    pub patch_size: usize,
    /// Learnable non-spatial register tokens prepended to the trunk sequence.
    pub n_registers: usize,
    /// Trunk blocks whose outputs feed the dense readout, strictly increasing.
    pub readout_indices: Vec<usize>,
    /// Base frequency of the rotary position embedding.
    pub rope_base: f32,
    /// Attention blocks in the source-image encoder.
    pub source_encoder_depth: usize,
    /// Conv blocks in the conditioning-stack encoder.
    pub intrinsics_encoder_depth: usize,
    pub head_mode: HeadMode,
    pub trunk_mode: TrunkMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            trunk_depth: 4,
            heads: 4,
            patch_size: 8,
            n_registers: 4,
            readout_indices: vec![0, 1, 2, 3],
            rope_base: 100.0,
            source_encoder_depth: 2,
            intrinsics_encoder_depth: 2,
            head_mode: HeadMode::Modulation,
            trunk_mode: TrunkMode::Fused,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d == 0 || self.heads == 0 || self.trunk_depth == 0 {
            return Err(ModelError::ZeroDimension);
        }
        if self.d % self.heads != 0 {
            return Err(ModelError::HeadSplit { d: self.d, heads: self.heads });
        }
        let dh = self.d / self.heads;
        if dh % 4 != 0 {
            return Err(ModelError::RotaryPairs { dh });
        }
        if self.patch_size == 0 || !self.patch_size.is_power_of_two() {
            return Err(ModelError::PatchSize(self.patch_size));
        }
        if self.readout_indices.is_empty() {
            return Err(ModelError::NoReadouts);
        }
        if self.readout_indices.windows(2).any(|w| w[1] <= w[0]) {
            return Err(ModelError::ReadoutOrder(self.readout_indices.clone()));
        }
        if let Some(&bad) = self.readout_indices.iter().find(|&&i| i >= self.trunk_depth) {
            return Err(ModelError::ReadoutRange { index: bad, depth: self.trunk_depth });
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return Err(ModelError::RopeBase(self.rope_base));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Channel width of the conditioning-stack encoder.
    fn intrinsics_width(&self) -> usize {
        (self.d / 8).max(8)
    }

    /// Common width the readout streams are projected to before fusion.
    fn fusion_width(&self) -> usize {
        (self.d / 2).max(8)
    }

    /// Feature widths along the upsampling path, starting at the fused
    /// stride-`p` map and halving (floor 8) through `log2(p)` stages.
    fn upsample_widths(&self) -> Vec<usize> {
        let mut widths = vec![self.fusion_width()];
        for _ in 0..self.patch_size.trailing_zeros() {
            widths.push((widths.last().unwrap() / 2).max(8));
        }
        widths
    }

    fn head_channels(&self) -> usize {
        match self.head_mode {
            HeadMode::Modulation => 6,
            HeadMode::DirectRegression => 3,
        }
    }
}

/// Cos/sin tables for the axial rotary embedding over a `gh × gw` token grid,
/// preceded by `n_registers` rows left at the identity rotation (angle zero).
///
/// Each head splits its lane pairs evenly between the two axes: the first
/// `dh/4` pairs rotate by the row index, the next `dh/4` by the column index,
/// with per-pair frequency `base^(-j / (dh/4))`. Angles are computed in f64 so
/// the relative-position property survives rounding at large offsets.
pub fn rope_tables(
    gh: usize,
    gw: usize,
    dh: usize,
    base: f32,
    n_registers: usize,
    row_offset: usize,
    col_offset: usize,
) -> (ArrayD<f32>, ArrayD<f32>) {
    assert!(dh % 4 == 0, "head dim {dh} is not divisible by 4");
    let axis_pairs = dh / 4;
    let rows = n_registers + gh * gw;
    let mut cos = Array2::<f32>::ones((rows, dh / 2));
    let mut sin = Array2::<f32>::zeros((rows, dh / 2));
    for t in 0..gh * gw {
        let row = (t / gw + row_offset) as f64;
        let col = (t % gw + col_offset) as f64;
        for j in 0..axis_pairs {
            let omega = (base as f64).powf(-(j as f64) / axis_pairs as f64);
            let (sr, cr) = (row * omega).sin_cos();
            let (sc, cc) = (col * omega).sin_cos();
            cos[[n_registers + t, j]] = cr as f32;
            sin[[n_registers + t, j]] = sr as f32;
            cos[[n_registers + t, axis_pairs + j]] = cc as f32;
            sin[[n_registers + t, axis_pairs + j]] = sc as f32;
        }
    }
    (cos.into_dyn(), sin.into_dyn())
}

/// The per-pixel affine head: `clip((1 + gain) ⊙ source + bias, 0, 1)`.
/// Gradients flow to `gain` and `bias` wherever the pre-clip value lies
/// strictly inside (0, 1) and are zero where the output saturates.
pub fn apply_modulation(g: &mut Graph, source: Tensor, gain: Tensor, bias: Tensor) -> Tensor {
    let scale = g.add_scalar(gain, 1.0);
    let scaled = g.mul(scale, source);
    let pre = g.add(scaled, bias);
    g.clip01(pre)
}

struct LnParams {
    gamma: Tensor,
    beta: Tensor,
}

struct AttnBlock {
    ln1: LnParams,
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    ln2: LnParams,
    mlp_w1: Tensor,
    mlp_b1: Tensor,
    mlp_w2: Tensor,
    mlp_b2: Tensor,
}

struct ConvBlock {
    dw_w: Tensor,
    dw_b: Tensor,
    ln: LnParams,
    mlp_w1: Tensor,
    mlp_b1: Tensor,
    mlp_w2: Tensor,
    mlp_b2: Tensor,
}

struct RcuParams {
    c1_w: Tensor,
    c1_b: Tensor,
    c2_w: Tensor,
    c2_b: Tensor,
}

/// Registers parameters into a graph with deterministic init, collecting
/// `(name, tensor)` pairs for the optimizer and checkpoints.
struct ParamBag {
    list: Vec<(String, Tensor)>,
    rng: ChaCha8Rng,
}

impl ParamBag {
    fn new(seed: u64) -> Self {
        Self { list: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn add(&mut self, g: &mut Graph, name: String, value: ArrayD<f32>) -> Tensor {
        let t = g.param(value);
        self.list.push((name, t));
        t
    }

    fn glorot(
        &mut self,
        g: &mut Graph,
        name: String,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
    ) -> Tensor {
        let limit = (6.0 / (fan_in + fan_out) as f32).sqrt();
        let value = ArrayD::from_shape_fn(IxDyn(shape), |_| self.rng.gen_range(-limit..limit));
        self.add(g, name, value)
    }

    fn zeros(&mut self, g: &mut Graph, name: String, shape: &[usize]) -> Tensor {
        self.add(g, name, ArrayD::zeros(IxDyn(shape)))
    }

    fn ones(&mut self, g: &mut Graph, name: String, shape: &[usize]) -> Tensor {
        self.add(g, name, ArrayD::ones(IxDyn(shape)))
    }

    /// Weight `[d_in, d_out]` plus zero bias `[d_out]` for token matmuls.
    fn linear(&mut self, g: &mut Graph, prefix: &str, d_in: usize, d_out: usize) -> (Tensor, Tensor) {
        let w = self.glorot(g, format!("{prefix}.w"), &[d_in, d_out], d_in, d_out);
        let b = self.zeros(g, format!("{prefix}.b"), &[d_out]);
        (w, b)
    }

    /// Conv weight `[c_out, c_in_per_group, k, k]` plus zero bias `[c_out,1,1]`.
    fn conv(
        &mut self,
        g: &mut Graph,
        prefix: &str,
        c_out: usize,
        c_in_g: usize,
        k: usize,
    ) -> (Tensor, Tensor) {
        let w = self.glorot(
            g,
            format!("{prefix}.w"),
            &[c_out, c_in_g, k, k],
            c_in_g * k * k,
            c_out * k * k,
        );
        let b = self.zeros(g, format!("{prefix}.b"), &[c_out, 1, 1]);
        (w, b)
    }

    fn layer_norm(&mut self, g: &mut Graph, prefix: &str, d: usize) -> LnParams {
        LnParams {
            gamma: self.ones(g, format!("{prefix}.g"), &[d]),
            beta: self.zeros(g, format!("{prefix}.b"), &[d]),
        }
    }

    fn attn_block(&mut self, g: &mut Graph, prefix: &str, d: usize) -> AttnBlock {
        let ln1 = self.layer_norm(g, &format!("{prefix}.ln1"), d);
        let (wq, bq) = self.linear(g, &format!("{prefix}.attn.q"), d, d);
        let (wk, bk) = self.linear(g, &format!("{prefix}.attn.k"), d, d);
        let (wv, bv) = self.linear(g, &format!("{prefix}.attn.v"), d, d);
        let (wo, bo) = self.linear(g, &format!("{prefix}.attn.o"), d, d);
        let ln2 = self.layer_norm(g, &format!("{prefix}.ln2"), d);
        let (mlp_w1, mlp_b1) = self.linear(g, &format!("{prefix}.mlp.fc1"), d, 4 * d);
        let (mlp_w2, mlp_b2) = self.linear(g, &format!("{prefix}.mlp.fc2"), 4 * d, d);
        AttnBlock { ln1, wq, bq, wk, bk, wv, bv, wo, bo, ln2, mlp_w1, mlp_b1, mlp_w2, mlp_b2 }
    }

    fn conv_block(&mut self, g: &mut Graph, prefix: &str, c: usize) -> ConvBlock {
        let (dw_w, dw_b) = self.conv(g, &format!("{prefix}.dw"), c, 1, 7);
        let ln = self.layer_norm(g, &format!("{prefix}.ln"), c);
        let (mlp_w1, mlp_b1) = self.linear(g, &format!("{prefix}.mlp.fc1"), c, 4 * c);
        let (mlp_w2, mlp_b2) = self.linear(g, &format!("{prefix}.mlp.fc2"), 4 * c, c);
        ConvBlock { dw_w, dw_b, ln, mlp_w1, mlp_b1, mlp_w2, mlp_b2 }
    }

    fn rcu(&mut self, g: &mut Graph, prefix: &str, c: usize) -> RcuParams {
        let (c1_w, c1_b) = self.conv(g, &format!("{prefix}.c1"), c, c, 3);
        let (c2_w, c2_b) = self.conv(g, &format!("{prefix}.c2"), c, c, 3);
        RcuParams { c1_w, c1_b, c2_w, c2_b }
    }
}

/// The relighting network. Parameters live in a [`Graph`] as persistent
/// leaves; build the model, register any additional persistent tensors, then
/// call [`Graph::freeze`] before running forward passes.
pub struct PixlModel {
    pub config: ModelConfig,
    params: Vec<(String, Tensor)>,
    /// Patch embedding + encoder blocks; absent in intrinsics-only mode.
    src_embed: Option<(Tensor, Tensor)>,
    src_blocks: Vec<AttnBlock>,
    intr_stem_w: Tensor,
    intr_stem_b: Tensor,
    intr_blocks: Vec<ConvBlock>,
    intr_proj_w: Tensor,
    intr_proj_b: Tensor,
    fuse_w1: Tensor,
    fuse_b1: Tensor,
    fuse_w2: Tensor,
    fuse_b2: Tensor,
    registers: Tensor,
    trunk_blocks: Vec<AttnBlock>,
    dpt_proj: Vec<(Tensor, Tensor)>,
    dpt_rcu: Vec<RcuParams>,
    dpt_up: Vec<(Tensor, Tensor)>,
    head_stem: Vec<(Tensor, Tensor)>,
    head_w: Tensor,
    head_b: Tensor,
}

impl PixlModel {
    /// Register all parameters into `graph` with seeded deterministic init.
    /// Panics on an invalid config; the caller freezes the graph afterwards.
    pub fn new(graph: &mut Graph, config: &ModelConfig, seed: u64) -> Self {
        config.validate().unwrap_or_else(|e| panic!("invalid model config: {e}"));
        let mut bag = ParamBag::new(seed);
        let (d, p) = (config.d, config.patch_size);

        let (src_embed, src_blocks) = match config.trunk_mode {
            TrunkMode::Fused => {
                let embed = bag.linear(graph, "src.embed", 3 * p * p, d);
                let blocks = (0..config.source_encoder_depth)
                    .map(|i| bag.attn_block(graph, &format!("src.block.{i}"), d))
                    .collect();
                (Some(embed), blocks)
            }
            TrunkMode::IntrinsicsOnly => (None, Vec::new()),
        };

        let c = config.intrinsics_width();
        let (intr_stem_w, intr_stem_b) = bag.conv(graph, "intr.stem", c, 9, 3);
        let intr_blocks = (0..config.intrinsics_encoder_depth)
            .map(|i| bag.conv_block(graph, &format!("intr.block.{i}"), c))
            .collect();
        let intr_proj_w =
            bag.glorot(graph, "intr.proj.w".into(), &[d, c, p, p], c * p * p, d * p * p);
        let intr_proj_b = bag.zeros(graph, "intr.proj.b".into(), &[d, 1, 1]);

        let fuse_in = match config.trunk_mode {
            TrunkMode::Fused => 2 * d,
            TrunkMode::IntrinsicsOnly => d,
        };
        let (fuse_w1, fuse_b1) = bag.linear(graph, "fuse.fc1", fuse_in, d);
        let (fuse_w2, fuse_b2) = bag.linear(graph, "fuse.fc2", d, d);

        let regs = ArrayD::from_shape_fn(IxDyn(&[config.n_registers, d]), |_| {
            bag.rng.gen_range(-0.02..0.02f32)
        });
        let registers = bag.add(graph, "registers".into(), regs);

        let trunk_blocks = (0..config.trunk_depth)
            .map(|i| bag.attn_block(graph, &format!("trunk.block.{i}"), d))
            .collect();

        let f = config.fusion_width();
        let n_streams = config.readout_indices.len();
        let dpt_proj = (0..n_streams)
            .map(|s| {
                let w = bag.glorot(graph, format!("dpt.proj.{s}.w"), &[f, d, 1, 1], d, f);
                let b = bag.zeros(graph, format!("dpt.proj.{s}.b"), &[f, 1, 1]);
                (w, b)
            })
            .collect();
        let dpt_rcu =
            (0..n_streams).map(|s| bag.rcu(graph, &format!("dpt.rcu.{s}"), f)).collect();
        let widths = config.upsample_widths();
        let dpt_up = widths
            .windows(2)
            .enumerate()
            .map(|(j, w)| {
                let weight = bag.glorot(
                    graph,
                    format!("dpt.up.{j}.w"),
                    &[w[1], w[0], 3, 3],
                    w[0] * 9,
                    w[1] * 9,
                );
                let b = bag.zeros(graph, format!("dpt.up.{j}.b"), &[w[1], 1, 1]);
                (weight, b)
            })
            .collect();

        // The upsampled readout features are thin and spatially smooth, so
        // the head re-reads the source, the conditioning stack, and the
        // composite albedo ⊙ shading + residual at pixel resolution:
        // target-side detail (shadow boundaries, highlights) enters the
        // gain/bias fields directly instead of surviving the patch grid,
        // and the pointwise layers are spared from synthesizing products.
        let stem_in = *widths.last().unwrap() + 3 + 9 + 3;
        let stem_width = 2 * config.fusion_width();
        let head_stem = vec![
            bag.conv(graph, "head.stem1", stem_width, stem_in, 1),
            bag.conv(graph, "head.stem2", stem_width, stem_width, 1),
        ];

        // Zero weights and bias make the head emit exactly zero gain and
        // bias, so the modulation output starts as the identity mapping.
        let head_w =
            bag.zeros(graph, "head.w".into(), &[config.head_channels(), stem_width, 1, 1]);
        let head_b = bag.zeros(graph, "head.b".into(), &[config.head_channels(), 1, 1]);

        Self {
            config: config.clone(),
            params: bag.list,
            src_embed,
            src_blocks,
            intr_stem_w,
            intr_stem_b,
            intr_blocks,
            intr_proj_w,
            intr_proj_b,
            fuse_w1,
            fuse_b1,
            fuse_w2,
            fuse_b2,
            registers,
            trunk_blocks,
            dpt_proj,
            dpt_rcu,
            dpt_up,
            head_stem,
            head_w,
            head_b,
        }
    }

    /// Parameters in registration order with their checkpoint names.
    pub fn named_params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    /// Parameter handles in registration order, for the optimizer.
    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.params.iter().map(|(_, t)| *t).collect()
    }

    /// Overwrite parameter values from checkpoint records, matched by name.
    /// Records the model does not own (e.g. optimizer state) are ignored.
    pub fn load_named(
        &self,
        graph: &mut Graph,
        records: &[(String, ArrayD<f32>)],
    ) -> Result<(), ModelError> {
        for (name, tensor) in &self.params {
            let record = records
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| ModelError::BadCheckpoint(format!("missing tensor {name}")))?;
            if record.1.shape() != graph.value(*tensor).shape() {
                return Err(ModelError::BadCheckpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    record.1.shape(),
                    graph.value(*tensor).shape()
                )));
            }
            graph.set_value(*tensor, record.1.clone());
        }
        Ok(())
    }

    /// Pre-norm attention block: LN → rotary multi-head attention → residual,
    /// LN → MLP → residual. Rotation tables cover every row of `x`.
    fn attn_block_forward(
        &self,
        g: &mut Graph,
        x: Tensor,
        blk: &AttnBlock,
        cos: &ArrayD<f32>,
        sin: &ArrayD<f32>,
    ) -> Tensor {
        let (heads, dh) = (self.config.heads, self.config.head_dim());
        let n = g.layer_norm(x, blk.ln1.gamma, blk.ln1.beta);
        let q = g.matmul(n, blk.wq);
        let q = g.add(q, blk.bq);
        let k = g.matmul(n, blk.wk);
        let k = g.add(k, blk.bk);
        let v = g.matmul(n, blk.wv);
        let v = g.add(v, blk.bv);
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice(q, 1, h * dh, dh);
            let kh = g.slice(k, 1, h * dh, dh);
            let vh = g.slice(v, 1, h * dh, dh);
            let qr = g.rotate_pairs(qh, cos.clone(), sin.clone());
            let kr = g.rotate_pairs(kh, cos.clone(), sin.clone());
            outs.push(attention(g, qr, kr, vh));
        }
        let cat = g.concat(&outs, 1);
        let proj = g.matmul(cat, blk.wo);
        let proj = g.add(proj, blk.bo);
        let x = g.add(x, proj);

        let n2 = g.layer_norm(x, blk.ln2.gamma, blk.ln2.beta);
        let h1 = g.matmul(n2, blk.mlp_w1);
        let h1 = g.add(h1, blk.mlp_b1);
        let h1 = g.gelu(h1);
        let h2 = g.matmul(h1, blk.mlp_w2);
        let h2 = g.add(h2, blk.mlp_b2);
        g.add(x, h2)
    }

    /// Depthwise 7×7 conv (replicate borders), token-space layer norm and
    /// pointwise MLP, wrapped in a residual connection.
    fn conv_block_forward(&self, g: &mut Graph, x: Tensor, blk: &ConvBlock) -> Tensor {
        let shape = g.value(x).shape().to_vec();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let y = g.conv2d(x, blk.dw_w, 1, 3, c, PadMode::Replicate);
        let y = g.add(y, blk.dw_b);
        let t = g.tokens_from_grid(y);
        let t = g.layer_norm(t, blk.ln.gamma, blk.ln.beta);
        let m = g.matmul(t, blk.mlp_w1);
        let m = g.add(m, blk.mlp_b1);
        let m = g.gelu(m);
        let m = g.matmul(m, blk.mlp_w2);
        let m = g.add(m, blk.mlp_b2);
        let x_tokens = g.tokens_from_grid(x);
        let out = g.add(x_tokens, m);
        g.grid_from_tokens(out, h, w)
    }

    /// Residual conv unit at fixed resolution: `x + c2(gelu(c1(gelu(x))))`.
    fn rcu_forward(&self, g: &mut Graph, x: Tensor, rcu: &RcuParams) -> Tensor {
        let a = g.gelu(x);
        let a = g.conv2d(a, rcu.c1_w, 1, 1, 1, PadMode::Replicate);
        let a = g.add(a, rcu.c1_b);
        let a = g.gelu(a);
        let a = g.conv2d(a, rcu.c2_w, 1, 1, 1, PadMode::Replicate);
        let a = g.add(a, rcu.c2_b);
        g.add(x, a)
    }

    fn grid_dims(&self, g: &Graph, image: Tensor, what: &str) -> (usize, usize) {
        let shape = g.value(image).shape().to_vec();
        let p = self.config.patch_size;
        assert!(
            shape.len() == 3 && shape[1] % p == 0 && shape[2] % p == 0,
            "{what}: shape {shape:?} is not [C,H,W] with H and W divisible by patch size {p}"
        );
        (shape[1] / p, shape[2] / p)
    }

    /// Source image `[3,H,W]` → tokens `[(H/p)(W/p), d]`: linear patch
    /// embedding followed by the shallow rotary attention encoder.
    pub fn encode_source(&self, g: &mut Graph, source: Tensor) -> Tensor {
        let (embed_w, embed_b) = self
            .src_embed
            .as_ref()
            .expect("encode_source: source branch absent in intrinsics_only mode");
        let shape = g.value(source).shape().to_vec();
        assert!(shape.len() == 3 && shape[0] == 3, "encode_source expects [3,H,W], got {shape:?}");
        let (gh, gw) = self.grid_dims(g, source, "encode_source");
        let patches = g.patchify(source, self.config.patch_size);
        let x = g.matmul(patches, *embed_w);
        let mut x = g.add(x, *embed_b);
        let (cos, sin) =
            rope_tables(gh, gw, self.config.head_dim(), self.config.rope_base, 0, 0, 0);
        for blk in &self.src_blocks {
            x = self.attn_block_forward(g, x, blk, &cos, &sin);
        }
        x
    }

    /// Conditioning stack `[9,H,W]` → tokens on the same grid as the source:
    /// 3×3 stem, depthwise conv blocks, then a stride-`p` patch projection.
    pub fn encode_intrinsics(&self, g: &mut Graph, conditioning: Tensor) -> Tensor {
        let shape = g.value(conditioning).shape().to_vec();
        assert!(
            shape.len() == 3 && shape[0] == 9,
            "encode_intrinsics expects 9 channels in [9,H,W], got {shape:?}"
        );
        self.grid_dims(g, conditioning, "encode_intrinsics");
        let x = g.conv2d(conditioning, self.intr_stem_w, 1, 1, 1, PadMode::Replicate);
        let mut x = g.add(x, self.intr_stem_b);
        for blk in &self.intr_blocks {
            x = self.conv_block_forward(g, x, blk);
        }
        let p = self.config.patch_size;
        let proj = g.conv2d(x, self.intr_proj_w, p, 0, 1, PadMode::Zero);
        let proj = g.add(proj, self.intr_proj_b);
        g.tokens_from_grid(proj)
    }

    /// Per-location fusion: concat `[source; conditioning]` along features and
    /// project back to `d`; sequence length is unchanged. In intrinsics-only
    /// mode the source stream is absent and the MLP consumes conditioning
    /// tokens alone.
    pub fn fuse_tokens(&self, g: &mut Graph, source: Option<Tensor>, conditioning: Tensor) -> Tensor {
        let x = match (self.config.trunk_mode, source) {
            (TrunkMode::Fused, Some(src)) => {
                let (ss, cs) = (g.value(src).shape().to_vec(), g.value(conditioning).shape().to_vec());
                assert_eq!(ss, cs, "fuse_tokens: token grid mismatch {ss:?} vs {cs:?}");
                g.concat(&[src, conditioning], 1)
            }
            (TrunkMode::IntrinsicsOnly, None) => conditioning,
            (TrunkMode::Fused, None) => panic!("fuse_tokens: fused trunk needs source tokens"),
            (TrunkMode::IntrinsicsOnly, Some(_)) => {
                panic!("fuse_tokens: intrinsics_only trunk takes no source tokens")
            }
        };
        let h = g.matmul(x, self.fuse_w1);
        let h = g.add(h, self.fuse_b1);
        let h = g.gelu(h);
        let out = g.matmul(h, self.fuse_w2);
        g.add(out, self.fuse_b2)
    }

    /// Run the trunk over `[registers; tokens]` and return the outputs of the
    /// readout blocks with register rows stripped, shallow to deep. Register
    /// rows use the identity rotation; patch tokens rotate by grid position.
    pub fn trunk_forward(&self, g: &mut Graph, tokens: Tensor, gh: usize, gw: usize) -> Vec<Tensor> {
        let shape = g.value(tokens).shape().to_vec();
        assert!(
            shape.len() == 2 && shape[0] == gh * gw && shape[1] == self.config.d,
            "trunk_forward: tokens {shape:?} do not match a {gh}x{gw} grid at width {}",
            self.config.d
        );
        let n_reg = self.config.n_registers;
        let mut x = g.concat(&[self.registers, tokens], 0);
        let (cos, sin) =
            rope_tables(gh, gw, self.config.head_dim(), self.config.rope_base, n_reg, 0, 0);
        let mut streams = Vec::with_capacity(self.config.readout_indices.len());
        for (i, blk) in self.trunk_blocks.iter().enumerate() {
            x = self.attn_block_forward(g, x, blk, &cos, &sin);
            if self.config.readout_indices.contains(&i) {
                streams.push(g.slice(x, 0, n_reg, gh * gw));
            }
        }
        streams
    }

    /// Fuse the readout streams into a dense full-resolution feature map:
    /// project each to a common width, combine deepest-first through residual
    /// conv units, then upsample ×2 per stage back to pixel resolution.
    pub fn dpt_readout(&self, g: &mut Graph, streams: &[Tensor], gh: usize, gw: usize) -> Tensor {
        assert_eq!(
            streams.len(),
            self.dpt_proj.len(),
            "dpt_readout: {} streams for {} readout taps",
            streams.len(),
            self.dpt_proj.len()
        );
        let projected: Vec<Tensor> = streams
            .iter()
            .zip(&self.dpt_proj)
            .map(|(s, (w, b))| {
                let grid = g.grid_from_tokens(*s, gh, gw);
                let y = g.conv2d(grid, *w, 1, 0, 1, PadMode::Zero);
                g.add(y, *b)
            })
            .collect();
        let deepest = streams.len() - 1;
        let mut x = self.rcu_forward(g, projected[deepest], &self.dpt_rcu[deepest]);
        for s in (0..deepest).rev() {
            x = g.add(x, projected[s]);
            x = self.rcu_forward(g, x, &self.dpt_rcu[s]);
        }
        let (mut h, mut w) = (gh, gw);
        for (weight, bias) in &self.dpt_up {
            (h, w) = (h * 2, w * 2);
            x = g.upsample_bilinear(x, h, w);
            x = g.conv2d(x, *weight, 1, 1, 1, PadMode::Replicate);
            x = g.add(x, *bias);
            x = g.gelu(x);
        }
        x
    }

    /// Full forward pass: `[3,H,W]` source plus `[9,H,W]` conditioning →
    /// `[3,H,W]` prediction in [0,1].
    pub fn forward(&self, g: &mut Graph, source: Tensor, conditioning: Tensor) -> Tensor {
        let ss = g.value(source).shape().to_vec();
        let cs = g.value(conditioning).shape().to_vec();
        assert!(
            ss.len() == 3 && cs.len() == 3 && ss[1..] == cs[1..],
            "forward: source {ss:?} and conditioning {cs:?} disagree on spatial dimensions"
        );
        let (gh, gw) = self.grid_dims(g, source, "forward");
        let cond_tokens = self.encode_intrinsics(g, conditioning);
        let fused = match self.config.trunk_mode {
            TrunkMode::Fused => {
                let src_tokens = self.encode_source(g, source);
                self.fuse_tokens(g, Some(src_tokens), cond_tokens)
            }
            TrunkMode::IntrinsicsOnly => self.fuse_tokens(g, None, cond_tokens),
        };
        let streams = self.trunk_forward(g, fused, gh, gw);
        let features = self.dpt_readout(g, &streams, gh, gw);
        let albedo = g.slice(conditioning, 0, 0, 3);
        let shading = g.slice(conditioning, 0, 3, 3);
        let residual = g.slice(conditioning, 0, 6, 3);
        let lit = g.mul(albedo, shading);
        let composite = g.add(lit, residual);
        let mut stem = g.concat(&[features, source, conditioning, composite], 0);
        for &(w, b) in &self.head_stem {
            let x = g.conv2d(stem, w, 1, 0, 1, PadMode::Zero);
            let x = g.add(x, b);
            stem = g.gelu(x);
        }
        let out = g.conv2d(stem, self.head_w, 1, 0, 1, PadMode::Zero);
        let out = g.add(out, self.head_b);
        match self.config.head_mode {
            HeadMode::Modulation => {
                let gain = g.slice(out, 0, 0, 3);
                let bias = g.slice(out, 0, 3, 3);
                apply_modulation(g, source, gain, bias)
            }
            HeadMode::DirectRegression => g.sigmoid(out),
        }
    }
}
