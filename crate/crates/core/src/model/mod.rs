//! Model assembly: patch embedding, four (or fewer) stages of mixing blocks
//! with downsampling between, final norm, global average pool, classifier.

pub mod blocks;
pub mod config;

pub use blocks::{
    Block, Downsample, ImageBlock, PatchEmbedImage, PatchEmbedVideo, VideoBlock, VideoBlockCfg,
    PATCH, TUBELET_FRAMES,
};
pub use config::{
    InputKind, ModelConfig, ResidualStyle, StageConfig, Variant, VideoOrder, PUBLISHED_CHUNK_LENS,
};

use crate::error::{Error, Result};
use crate::forward::Forward;
use crate::layers::{derive_group_width, LayerNorm, Linear, MorphFcCfg};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Weight initialization strategy.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// All transforms zero. Cheap; for counting and identity tests.
    Zeros,
    /// Gaussian(0, 0.02) transforms from the given seed.
    Seeded(u64),
}

#[derive(Debug, Clone)]
enum Embed<T: Scalar> {
    Image(PatchEmbedImage<T>),
    Video(PatchEmbedVideo<T>),
}

#[derive(Debug, Clone)]
pub struct Stage<T: Scalar> {
    pub blocks: Vec<Block<T>>,
    pub downsample: Option<Downsample<T>>,
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    embed: Embed<T>,
    pub stages: Vec<Stage<T>>,
    pub final_norm: LayerNorm<T>,
    pub head: Linear<T>,
}

/// Build a model from its configuration. Divisibility problems are reported
/// with the stage index that caused them.
pub fn build_model<T: Scalar>(cfg: &ModelConfig, init: Init) -> Result<Model<T>> {
    cfg.validate()?;
    let mut rng = match init {
        Init::Zeros => ChaCha8Rng::seed_from_u64(0),
        Init::Seeded(seed) => ChaCha8Rng::seed_from_u64(seed),
    };
    let random = matches!(init, Init::Seeded(_));
    let c1 = cfg.stages[0].channels;

    let embed = match cfg.input {
        InputKind::Image { .. } => Embed::Image(if random {
            PatchEmbedImage::init("patch_embed", c1, &mut rng)
        } else {
            PatchEmbedImage::zeros("patch_embed", c1)
        }),
        InputKind::Video { .. } => Embed::Video(if random {
            PatchEmbedVideo::init("patch_embed", c1, &mut rng)
        } else {
            PatchEmbedVideo::zeros("patch_embed", c1)
        }),
    };

    let rates = cfg.drop_path_rates();
    let mut rate_iter = rates.iter().copied();
    let frames = cfg.embedded_frames();
    let mut stages = Vec::with_capacity(cfg.stages.len());
    for (si, stage_cfg) in cfg.stages.iter().enumerate() {
        let fc_cfg = MorphFcCfg {
            channels: stage_cfg.channels,
            chunk_len: stage_cfg.chunk_len,
            group_width: stage_cfg.effective_group_width(),
            gated: cfg.gate_enabled,
            channel_path: cfg.channel_path,
        };
        fc_cfg
            .validate()
            .map_err(|e| Error::Config(format!("stage {si}: {e}")))?;
        let mut blocks = Vec::with_capacity(stage_cfg.depth);
        for bi in 0..stage_cfg.depth {
            let name = format!("stages.{si}.blocks.{bi}");
            let rate = rate_iter.next().expect("ramp covers every block");
            let block = match frames {
                None => Block::Image(if random {
                    ImageBlock::init(&name, fc_cfg.clone(), cfg.mlp_ratio, rate, &mut rng)?
                } else {
                    ImageBlock::zeros(&name, fc_cfg.clone(), cfg.mlp_ratio, rate)?
                }),
                Some(t) => {
                    let dt = cfg
                        .temporal_group_width
                        .unwrap_or_else(|| derive_group_width(stage_cfg.channels, t));
                    let vcfg = VideoBlockCfg {
                        fc_cfg: fc_cfg.clone(),
                        frames: t,
                        temporal_group_width: dt,
                        mlp_ratio: cfg.mlp_ratio,
                        drop_path: rate,
                        order: cfg.video_order,
                        residual: cfg.video_residual,
                        ablate_temporal: cfg.temporal_identity,
                    };
                    Block::Video(if random {
                        VideoBlock::init(&name, vcfg, &mut rng)?
                    } else {
                        VideoBlock::zeros(&name, vcfg)?
                    })
                }
            };
            blocks.push(block);
        }
        let downsample = if stage_cfg.downsample_after {
            let next = cfg.stages.get(si + 1).ok_or_else(|| {
                Error::Config(format!("stage {si} wants a downsample but is last"))
            })?;
            let name = format!("stages.{si}.downsample");
            Some(if random {
                Downsample::init(&name, stage_cfg.channels, next.channels, &mut rng)
            } else {
                Downsample::zeros(&name, stage_cfg.channels, next.channels)
            })
        } else {
            None
        };
        stages.push(Stage { blocks, downsample });
    }

    let last_c = cfg.stages.last().expect("at least one stage").channels;
    let head = if random {
        Linear::init("head", last_c, cfg.num_classes, true, &mut rng)
    } else {
        Linear::zeros("head", last_c, cfg.num_classes, true)
    };
    Ok(Model {
        cfg: cfg.clone(),
        embed,
        stages,
        final_norm: LayerNorm::new("final_norm", last_c),
        head,
    })
}

impl<T: Scalar> Model<T> {
    /// Logits for one sample (`[H, W, 3]` or `[H, W, T, 3]`), shape `[K]`.
    pub fn forward(&self, fw: &mut Forward<T>, x: Var) -> Result<Var> {
        let mut t = match &self.embed {
            Embed::Image(e) => e.forward(fw, x)?,
            Embed::Video(e) => e.forward(fw, x)?,
        };
        for stage in &self.stages {
            for block in &stage.blocks {
                t = block.forward(fw, t)?;
            }
            if let Some(ds) = &stage.downsample {
                t = ds.forward(fw, t)?;
            }
        }
        let t = self.final_norm.forward(fw, t)?;
        let rank = fw.tape.value(t).shape().len();
        let token_axes: Vec<usize> = (0..rank - 1).collect();
        let pooled = fw.tape.mean_axes(t, &token_axes)?;
        let c = fw.tape.value(pooled).shape()[0];
        let row = fw.tape.reshape(pooled, &[1, c])?;
        let logits = self.head.forward(fw, row)?;
        fw.tape.reshape(logits, &[self.cfg.num_classes])
    }

    /// Eval-mode forward on a plain tensor; builds a throwaway tape.
    pub fn forward_tensor(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let mut fw = Forward::eval(&mut tape);
        let xv = fw.tape.constant(x.clone());
        let logits = self.forward(&mut fw, xv)?;
        Ok(tape.value(logits).clone())
    }

    /// Named parameters in deterministic traversal order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        match &self.embed {
            Embed::Image(e) => e.proj.collect(&mut out),
            Embed::Video(e) => e.proj.collect(&mut out),
        }
        for stage in &self.stages {
            for block in &stage.blocks {
                block.collect(&mut out);
            }
            if let Some(ds) = &stage.downsample {
                ds.proj.collect(&mut out);
            }
        }
        self.final_norm.collect(&mut out);
        self.head.collect(&mut out);
        out
    }

    /// Mutable visit over named parameters, same order as [`named_params`].
    pub fn for_each_param_mut(
        &mut self,
        f: &mut dyn FnMut(&str, &mut Tensor<T>) -> Result<()>,
    ) -> Result<()> {
        match &mut self.embed {
            Embed::Image(e) => e.proj.for_each_mut(f)?,
            Embed::Video(e) => e.proj.for_each_mut(f)?,
        }
        for stage in &mut self.stages {
            for block in &mut stage.blocks {
                block.for_each_mut(f)?;
            }
            if let Some(ds) = &mut stage.downsample {
                ds.proj.for_each_mut(f)?;
            }
        }
        self.final_norm.for_each_mut(f)?;
        self.head.for_each_mut(f)
    }
}

/// Exact learnable-scalar count.
pub fn count_params<T: Scalar>(model: &Model<T>) -> u64 {
    model
        .named_params()
        .iter()
        .map(|(_, t)| t.numel() as u64)
        .sum()
}

/// Matrix-product multiply-accumulates for one forward pass at the given
/// input size. Convention: 1 MAC = 1 FLOP; elementwise work (norms,
/// activations, gates, pooling) and bias adds are not counted.
pub fn count_flops<T: Scalar>(model: &Model<T>, input: InputKind) -> Result<u64> {
    fn ceil_div(a: usize, b: usize) -> usize {
        (a + b - 1) / b
    }
    let (mut h, mut w, frames, embed_in): (usize, usize, Option<usize>, u64) = match input {
        InputKind::Image { height, width } => (
            ceil_div(height, PATCH),
            ceil_div(width, PATCH),
            None,
            (PATCH * PATCH * 3) as u64,
        ),
        InputKind::Video {
            height,
            width,
            frames,
        } => (
            ceil_div(height, PATCH),
            ceil_div(width, PATCH),
            Some(ceil_div(frames, TUBELET_FRAMES)),
            (PATCH * PATCH * TUBELET_FRAMES * 3) as u64,
        ),
    };
    if input.is_video() != model.cfg.input.is_video() {
        return Err(Error::Config(
            "input kind does not match the model (image vs video)".into(),
        ));
    }
    let c1 = model.cfg.stages[0].channels as u64;
    let embed_tokens = (h * w * frames.unwrap_or(1)) as u64;
    let mut total = embed_tokens * embed_in * c1;
    for stage in &model.stages {
        for block in &stage.blocks {
            total += match block {
                Block::Image(b) => b.macs(h, w),
                Block::Video(b) => b.macs(h, w, frames.unwrap_or(1)),
            };
        }
        if let Some(ds) = &stage.downsample {
            let (hn, wn) = (ceil_div(h, 2), ceil_div(w, 2));
            let out_tokens = (hn * wn * frames.unwrap_or(1)) as u64;
            total += ds.proj.macs(out_tokens);
            h = hn;
            w = wn;
        }
    }
    // pooling is free under the MAC convention; the head sees one pooled row
    total += model.head.macs(1);
    Ok(total)
}
