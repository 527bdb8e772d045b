//! The embedding network: a residual texture branch, time and frequency
//! position branches (pre-MNL, positional encoding, encoder layers, post-MNL)
//! and an MNL fusion, topped by a projection head and a classification head.

mod checkpoint;
mod layers;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    config_hash, decode_store, encode_store, load_checkpoint, save_checkpoint, TrainingState, CHECKPOINT_VERSION,
};
pub use layers::{batch_norm, AttentionHead, Conv, Dense, Mnl, PositionalEncoding, ResidualBlock, TransformerLayer};

use crate::autograd::{BatchNormParams, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::preprocess::RealMatrix;
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// `(time_frames, frequency_bins)` of the input.
    pub grid: (usize, usize),
    pub stem_channels: usize,
    pub stem_stride: usize,
    /// Max-pool size after the stem; 1 disables it.
    pub stem_pool: usize,
    /// Output channels of each stage; every stage after the first halves the resolution.
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Drop both position branches (texture-only embedding).
    pub texture_only: bool,
    /// Token feature size after the pre-MNL.
    pub model_dim: usize,
    pub pre_hidden: Vec<usize>,
    /// Encoder layers per position branch.
    pub layers: usize,
    pub heads: usize,
    /// Attention mapping dimension.
    pub gamma: usize,
    pub ffn_dim: usize,
    /// Output map, residuals, layer norms and feed-forward around attention.
    pub sublayers: bool,
    pub post_hidden: Vec<usize>,
    pub branch_dim: usize,
    pub fusion_hidden: Vec<usize>,
    pub fused_dim: usize,
    pub projection_hidden: Vec<usize>,
    pub projection_dim: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            grid: (64, 64),
            stem_channels: 16,
            stem_stride: 2,
            stem_pool: 2,
            stage_channels: vec![16, 32, 64, 128],
            blocks_per_stage: 2,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            texture_only: false,
            model_dim: 64,
            pre_hidden: vec![64],
            layers: 2,
            heads: 1,
            gamma: 64,
            ffn_dim: 128,
            sublayers: true,
            post_hidden: vec![64],
            branch_dim: 64,
            fusion_hidden: vec![128],
            fused_dim: 128,
            projection_hidden: vec![128],
            projection_dim: 32,
            num_classes: 2,
        }
    }
}

impl ModelConfig {
    /// Full-width residual backbone on the 775×775 grid.
    pub fn paper() -> Self {
        ModelConfig {
            grid: (775, 775),
            stem_channels: 64,
            stage_channels: vec![64, 128, 256, 512],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.grid.0 == 0 || self.grid.1 == 0 {
            return bad("grid dimensions must be positive".into());
        }
        if self.stage_channels.is_empty() || self.blocks_per_stage == 0 {
            return bad("texture branch needs at least one stage and one block".into());
        }
        if self.stem_channels == 0 || self.stem_stride == 0 || self.stem_pool == 0 {
            return bad("stem channels, stride and pool must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes {} < 2", self.num_classes));
        }
        if !self.texture_only {
            if self.heads == 0 || self.gamma == 0 || self.model_dim == 0 {
                return bad("heads, gamma and model_dim must be positive".into());
            }
            if !self.sublayers && self.layers > 0 && self.heads * self.gamma != self.model_dim {
                return bad(format!(
                    "bare attention layers need heads * gamma ({}) == model_dim ({})",
                    self.heads * self.gamma,
                    self.model_dim
                ));
            }
        }
        let mut side = (self.grid.0, self.grid.1);
        let shrink = |s: (usize, usize), f: usize| (s.0.div_ceil(f), s.1.div_ceil(f));
        side = shrink(side, self.stem_stride);
        side = (side.0 / self.stem_pool, side.1 / self.stem_pool);
        for _ in 1..self.stage_channels.len() {
            side = shrink(side, 2);
        }
        if side.0 == 0 || side.1 == 0 {
            return bad(format!("grid {:?} collapses to zero in the texture branch", self.grid));
        }
        Ok(())
    }

    pub fn texture_dim(&self) -> usize {
        *self.stage_channels.last().unwrap()
    }

    pub fn concat_dim(&self) -> usize {
        self.texture_dim() + if self.texture_only { 0 } else { 2 * self.branch_dim }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    Time,
    Frequency,
}

#[derive(Clone, Debug)]
pub struct TextureBranch {
    pub stem: Conv,
    pub stem_bn: BatchNormParams,
    pub stem_pool: usize,
    pub blocks: Vec<ResidualBlock>,
}

impl TextureBranch {
    fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let stem = Conv::new(
            store,
            "texture.stem",
            1,
            cfg.stem_channels,
            3,
            cfg.stem_stride,
            1,
            false,
            rng,
        );
        let stem_bn = batch_norm(store, "texture.stem_bn", cfg.stem_channels, cfg.bn_momentum, cfg.bn_eps);
        let mut blocks = Vec::new();
        let mut cin = cfg.stem_channels;
        for (s, &c) in cfg.stage_channels.iter().enumerate() {
            for b in 0..cfg.blocks_per_stage {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let name = format!("texture.s{s}.b{b}");
                blocks.push(ResidualBlock::new(
                    store,
                    &name,
                    cin,
                    c,
                    stride,
                    cfg.bn_momentum,
                    cfg.bn_eps,
                    rng,
                ));
                cin = c;
            }
        }
        TextureBranch {
            stem,
            stem_bn,
            stem_pool: cfg.stem_pool,
            blocks,
        }
    }

    /// Last residual output `H_last`, `(B, C, h, w)`, for input `(B, 1, H, W)`.
    pub fn feature_map(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.stem.forward(g, x);
        let h = g.batch_norm2d(h, &self.stem_bn);
        let mut h = g.relu(h);
        if self.stem_pool > 1 {
            h = g.max_pool2d(h, self.stem_pool);
        }
        for b in &self.blocks {
            h = b.forward(g, h);
        }
        h
    }

    /// `z_a = Flatten(GAP(H_last))`, `(B, C)`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.feature_map(g, x);
        g.global_avg_pool(h)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.stem.ids();
        v.extend(layers::bn_ids(&self.stem_bn));
        for b in &self.blocks {
            v.extend(b.ids());
        }
        v
    }
}

#[derive(Clone, Debug)]
pub struct PositionBranch {
    pub axis: Axis,
    pub pre: Mnl,
    pub encoding: PositionalEncoding,
    pub layers: Vec<TransformerLayer>,
    pub post: Mnl,
}

impl PositionBranch {
    fn new(store: &mut ParamStore, cfg: &ModelConfig, axis: Axis, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let (tokens, feat) = match axis {
            Axis::Time => cfg.grid,
            Axis::Frequency => (cfg.grid.1, cfg.grid.0),
        };
        let name = match axis {
            Axis::Time => "time",
            Axis::Frequency => "freq",
        };
        let pre_dims: Vec<usize> = [feat]
            .into_iter()
            .chain(cfg.pre_hidden.iter().copied())
            .chain([cfg.model_dim])
            .collect();
        let pre = Mnl::new(store, &format!("{name}.pre"), &pre_dims, rng);
        let layers = (0..cfg.layers)
            .map(|l| {
                TransformerLayer::new(
                    store,
                    &format!("{name}.enc{l}"),
                    cfg.model_dim,
                    cfg.gamma,
                    cfg.heads,
                    cfg.ffn_dim,
                    cfg.sublayers,
                    rng,
                )
            })
            .collect();
        let post_dims: Vec<usize> = [tokens * cfg.model_dim]
            .into_iter()
            .chain(cfg.post_hidden.iter().copied())
            .chain([cfg.branch_dim])
            .collect();
        let post = Mnl::new(store, &format!("{name}.post"), &post_dims, rng);
        PositionBranch {
            axis,
            pre,
            encoding: PositionalEncoding::new(tokens, cfg.model_dim),
            layers,
            post,
        }
    }

    /// Branch output for `(B, n, f)` token rows, without any transpose.
    pub fn forward_tokens(&self, g: &mut Graph, tokens: Var) -> Var {
        let h = self.pre.forward(g, tokens);
        let mut y = self.encoding.encode(g, h);
        for l in &self.layers {
            y = l.forward(g, y);
        }
        let s = g.shape(y).to_vec();
        let flat = g.reshape(y, &[s[0], s[1] * s[2]]);
        self.post.forward(g, flat)
    }

    /// `x` is `(B, time, freq)`; the frequency branch reads its transpose.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let tokens = match self.axis {
            Axis::Time => x,
            Axis::Frequency => g.transpose12(x),
        };
        self.forward_tokens(g, tokens)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.pre.ids();
        for l in &self.layers {
            v.extend(l.ids());
        }
        v.extend(self.post.ids());
        v
    }
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub fused: Var,
    pub projection: Var,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct EmbeddingModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub texture: TextureBranch,
    pub time: Option<PositionBranch>,
    pub freq: Option<PositionBranch>,
    pub fusion: Mnl,
    pub projection: Mnl,
    pub head: Dense,
}

fn mnl_dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    [input]
        .into_iter()
        .chain(hidden.iter().copied())
        .chain([output])
        .collect()
}

/// Stack `(H, W)` matrices into a `(B, H, W)` tensor.
pub fn batch_tensor(items: &[&RealMatrix]) -> Tensor {
    let (h, w) = (items[0].rows, items[0].cols);
    let mut data = Vec::with_capacity(items.len() * h * w);
    for m in items {
        assert_eq!((m.rows, m.cols), (h, w), "batch items must share a shape");
        data.extend_from_slice(&m.data);
    }
    Tensor::new(&[items.len(), h, w], data)
}

impl EmbeddingModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed, 0x4d4f_4445);
        let mut store = ParamStore::new();
        let texture = TextureBranch::new(&mut store, &config, &mut rng);
        let (time, freq) = if config.texture_only {
            (None, None)
        } else {
            (
                Some(PositionBranch::new(&mut store, &config, Axis::Time, &mut rng)),
                Some(PositionBranch::new(&mut store, &config, Axis::Frequency, &mut rng)),
            )
        };
        let fusion = Mnl::new(
            &mut store,
            "fusion",
            &mnl_dims(config.concat_dim(), &config.fusion_hidden, config.fused_dim),
            &mut rng,
        );
        let projection = Mnl::new(
            &mut store,
            "projection",
            &mnl_dims(config.fused_dim, &config.projection_hidden, config.projection_dim),
            &mut rng,
        );
        let head = Dense::new(&mut store, "head", config.fused_dim, config.num_classes, true, &mut rng);
        Ok(EmbeddingModel {
            config,
            store,
            texture,
            time,
            freq,
            fusion,
            projection,
            head,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 3 || (s[1], s[2]) != self.config.grid {
            return Err(Error::Shape(format!(
                "model expects (B, {}, {}) input, got {:?}",
                self.config.grid.0, self.config.grid.1, s
            )));
        }
        Ok(())
    }

    /// `z_a ⊕ z_b ⊕ z_c` for input `(B, time, freq)`.
    pub fn branches(&self, g: &mut Graph, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let img = g.reshape(x, &[s[0], 1, s[1], s[2]]);
        let za = self.texture.forward(g, img);
        match (&self.time, &self.freq) {
            (Some(t), Some(f)) => {
                let zb = t.forward(g, x);
                let zc = f.forward(g, x);
                g.concat(&[za, zb, zc], 1)
            }
            _ => za,
        }
    }

    pub fn fuse(&self, g: &mut Graph, concat: Var) -> Var {
        self.fusion.forward(g, concat)
    }

    pub fn features(&self, g: &mut Graph, x: Var) -> Var {
        let c = self.branches(g, x);
        self.fuse(g, c)
    }

    pub fn project(&self, g: &mut Graph, fused: Var) -> Var {
        let p = self.projection.forward(g, fused);
        g.l2_normalize(p)
    }

    pub fn classify(&self, g: &mut Graph, fused: Var) -> Var {
        self.head.forward(g, fused)
    }

    pub fn forward(&self, g: &mut Graph, x: &Tensor) -> Result<Forward> {
        self.check_input(x)?;
        let xv = g.input(x.clone());
        let fused = self.features(g, xv);
        let projection = self.project(g, fused);
        let logits = self.classify(g, fused);
        Ok(Forward {
            fused,
            projection,
            logits,
        })
    }

    /// Feature-extractor parameters and buffers (everything below the heads).
    pub fn feature_ids(&self) -> Vec<ParamId> {
        let mut v = self.texture.ids();
        for b in self.time.iter().chain(&self.freq) {
            v.extend(b.ids());
        }
        v.extend(self.fusion.ids());
        v
    }

    pub fn projection_ids(&self) -> Vec<ParamId> {
        self.projection.ids()
    }

    pub fn head_ids(&self) -> Vec<ParamId> {
        self.head.ids()
    }

    pub fn feature_hash(&self) -> String {
        self.store.hash_of(&self.feature_ids())
    }

    pub fn set_features_frozen(&mut self, frozen: bool) {
        for id in self.feature_ids().into_iter().chain(self.projection_ids()) {
            self.store.set_frozen(id, frozen);
        }
    }

    /// Re-initialize the classification head with `n` outputs.
    pub fn reset_head(&mut self, n: usize, seed: u64) {
        let mut rng = seed::rng(seed, 0x4845_4144);
        let fan_in = self.config.fused_dim;
        let mut tmp = ParamStore::new();
        let fresh = Dense::new(&mut tmp, "head", fan_in, n, true, &mut rng);
        self.store.set(self.head.w, tmp.get(fresh.w).clone());
        if let (Some(b), Some(fb)) = (self.head.b, fresh.b) {
            self.store.set(b, tmp.get(fb).clone());
        }
        self.config.num_classes = n;
    }

    /// Fused features in inference mode, `(B, fused_dim)`, computed in chunks.
    pub fn embed(&self, items: &[&RealMatrix], chunk: usize) -> Result<Tensor> {
        let mut data = Vec::with_capacity(items.len() * self.config.fused_dim);
        for part in items.chunks(chunk.max(1)) {
            let x = batch_tensor(part);
            self.check_input(&x)?;
            let mut g = Graph::inference(&self.store);
            let xv = g.input(x);
            let z = self.features(&mut g, xv);
            data.extend_from_slice(g.value(z).data());
        }
        Ok(Tensor::new(&[items.len(), self.config.fused_dim], data))
    }

    /// Classification logits for precomputed fused features.
    pub fn head_logits(&self, features: &Tensor) -> Tensor {
        let mut g = Graph::inference(&self.store);
        let z = g.input(features.clone());
        let l = self.classify(&mut g, z);
        g.value(l).clone()
    }

    /// Inference-mode logits, `(B, num_classes)`.
    pub fn logits(&self, items: &[&RealMatrix], chunk: usize) -> Result<Tensor> {
        Ok(self.head_logits(&self.embed(items, chunk)?))
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_trainable()
    }
}

#[cfg(test)]
mod tests;
