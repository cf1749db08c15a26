//! Backbone building blocks: patch embeddings, stage downsampling, and the
//! image/video mixing blocks.

use crate::error::{Error, Result};
use crate::forward::{residual_branch, Forward};
use crate::layers::{LayerNorm, Linear, Mlp, MorphFc, MorphFcCfg, TemporalFc};
use crate::model::config::{ResidualStyle, VideoOrder};
use crate::tensor::{Scalar, Tensor, Var};
use rand_chacha::ChaCha8Rng;

pub const PATCH: usize = 4;
pub const TUBELET_FRAMES: usize = 2;

/// Zero-pad axis `axis` of `x` up to `target` (no-op when already there).
fn pad_axis_to<T: Scalar>(
    fw: &mut Forward<T>,
    x: Var,
    axis: usize,
    target: usize,
) -> Result<Var> {
    let shape = fw.tape.value(x).shape().to_vec();
    if shape[axis] >= target {
        return Ok(x);
    }
    let mut pad_shape = shape;
    pad_shape[axis] = target - pad_shape[axis];
    let zeros = fw.tape.constant(Tensor::zeros(&pad_shape));
    fw.tape.concat(axis, &[x, zeros])
}

fn round_up(n: usize, to: usize) -> usize {
    (n + to - 1) / to * to
}

/// Linear projection of non-overlapping 4x4 patches into tokens.
#[derive(Debug, Clone)]
pub struct PatchEmbedImage<T: Scalar> {
    pub proj: Linear<T>,
}

impl<T: Scalar> PatchEmbedImage<T> {
    pub fn init(name: &str, out_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            proj: Linear::init(name, PATCH * PATCH * 3, out_channels, true, rng),
        }
    }

    pub fn zeros(name: &str, out_channels: usize) -> Self {
        Self {
            proj: Linear::zeros(name, PATCH * PATCH * 3, out_channels, true),
        }
    }

    /// `[H, W, 3] -> [ceil(H/4), ceil(W/4), C]`, zero-padding ragged edges.
    pub fn forward(&self, fw: &mut Forward<T>, x: Var) -> Result<Var> {
        let shape = fw.tape.value(x).shape().to_vec();
        let (h, w) = match shape.as_slice() {
            [h, w, 3] => (*h, *w),
            other => {
                return Err(Error::shape(
                    "patch_embed",
                    format!("expected [H, W, 3], got {other:?}"),
                ))
            }
        };
        let (hp, wp) = (round_up(h, PATCH), round_up(w, PATCH));
        let x = pad_axis_to(fw, x, 0, hp)?;
        let x = pad_axis_to(fw, x, 1, wp)?;
        let (gh, gw) = (hp / PATCH, wp / PATCH);
        let t = fw.tape.reshape(x, &[gh, PATCH, gw, PATCH, 3])?;
        let t = fw.tape.permute(t, &[0, 2, 1, 3, 4])?;
        let t = fw.tape.reshape(t, &[gh * gw, PATCH * PATCH * 3])?;
        let y = self.proj.forward(fw, t)?;
        fw.tape.reshape(y, &[gh, gw, self.proj.out_dim()])
    }
}

/// Linear projection of non-overlapping 4x4x2 tubelets; halves the frame
/// count. An odd trailing frame is repeated to fill the last tubelet.
#[derive(Debug, Clone)]
pub struct PatchEmbedVideo<T: Scalar> {
    pub proj: Linear<T>,
}

impl<T: Scalar> PatchEmbedVideo<T> {
    pub fn init(name: &str, out_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            proj: Linear::init(
                name,
                PATCH * PATCH * TUBELET_FRAMES * 3,
                out_channels,
                true,
                rng,
            ),
        }
    }

    pub fn zeros(name: &str, out_channels: usize) -> Self {
        Self {
            proj: Linear::zeros(name, PATCH * PATCH * TUBELET_FRAMES * 3, out_channels, true),
        }
    }

    /// `[H, W, T, 3] -> [ceil(H/4), ceil(W/4), ceil(T/2), C]`
    pub fn forward(&self, fw: &mut Forward<T>, x: Var) -> Result<Var> {
        let shape = fw.tape.value(x).shape().to_vec();
        let (h, w, t) = match shape.as_slice() {
            [h, w, t, 3] => (*h, *w, *t),
            other => {
                return Err(Error::shape(
                    "patch_embed_video",
                    format!("expected [H, W, T, 3], got {other:?}"),
                ))
            }
        };
        let (hp, wp) = (round_up(h, PATCH), round_up(w, PATCH));
        let mut x = pad_axis_to(fw, x, 0, hp)?;
        x = pad_axis_to(fw, x, 1, wp)?;
        if t % TUBELET_FRAMES != 0 {
            // Repeat the last frame rather than zero-filling: a still tail
            // behaves like a held frame instead of a black flash.
            let last = fw.tape.slice(x, &[(0, hp), (0, wp), (t - 1, t), (0, 3)])?;
            x = fw.tape.concat(2, &[x, last])?;
        }
        let tp = round_up(t, TUBELET_FRAMES);
        let (gh, gw, gt) = (hp / PATCH, wp / PATCH, tp / TUBELET_FRAMES);
        let v = fw
            .tape
            .reshape(x, &[gh, PATCH, gw, PATCH, gt, TUBELET_FRAMES, 3])?;
        let v = fw.tape.permute(v, &[0, 2, 4, 1, 3, 5, 6])?;
        let v = fw
            .tape
            .reshape(v, &[gh * gw * gt, PATCH * PATCH * TUBELET_FRAMES * 3])?;
        let y = self.proj.forward(fw, v)?;
        fw.tape.reshape(y, &[gh, gw, gt, self.proj.out_dim()])
    }
}

/// 2x2 non-overlapping patch merge: concatenate the four neighbors and
/// project `4*C -> C_next`. Halves each spatial extent.
#[derive(Debug, Clone)]
pub struct Downsample<T: Scalar> {
    pub proj: Linear<T>,
}

impl<T: Scalar> Downsample<T> {
    pub fn init(name: &str, in_channels: usize, out_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            proj: Linear::init(name, 4 * in_channels, out_channels, true, rng),
        }
    }

    pub fn zeros(name: &str, in_channels: usize, out_channels: usize) -> Self {
        Self {
            proj: Linear::zeros(name, 4 * in_channels, out_channels, true),
        }
    }

    pub fn forward(&self, fw: &mut Forward<T>, x: Var) -> Result<Var> {
        let shape = fw.tape.value(x).shape().to_vec();
        match shape.as_slice() {
            [_, _, _] => self.forward_grid(fw, x),
            [h, w, t, c] => {
                let (h, w, t, c) = (*h, *w, *t, *c);
                let mut frames = Vec::with_capacity(t);
                for f in 0..t {
                    let frame = fw.tape.slice(x, &[(0, h), (0, w), (f, f + 1), (0, c)])?;
                    let frame = fw.tape.reshape(frame, &[h, w, c])?;
                    let y = self.forward_grid(fw, frame)?;
                    let ys = fw.tape.value(y).shape().to_vec();
                    frames.push(fw.tape.reshape(y, &[ys[0], ys[1], 1, ys[2]])?);
                }
                fw.tape.concat(2, &frames)
            }
            other => Err(Error::shape(
                "downsample",
                format!("expected rank 3 or 4, got {other:?}"),
            )),
        }
    }

    fn forward_grid(&self, fw: &mut Forward<T>, x: Var) -> Result<Var> {
        let shape = fw.tape.value(x).shape().to_vec();
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        if 4 * c != self.proj.in_dim() {
            return Err(Error::shape(
                "downsample",
                format!("input channels {c} do not match projection {}", self.proj.in_dim()),
            ));
        }
        let (hp, wp) = (round_up(h, 2), round_up(w, 2));
        let x = pad_axis_to(fw, x, 0, hp)?;
        let x = pad_axis_to(fw, x, 1, wp)?;
        let t = fw.tape.reshape(x, &[hp / 2, 2, wp / 2, 2, c])?;
        let t = fw.tape.permute(t, &[0, 2, 1, 3, 4])?;
        let t = fw.tape.reshape(t, &[(hp / 2) * (wp / 2), 4 * c])?;
        let y = self.proj.forward(fw, t)?;
        fw.tape.reshape(y, &[hp / 2, wp / 2, self.proj.out_dim()])
    }
}

/// Pre-norm residual block for images: token mixing then a channel MLP.
/// The mixer output passes through GELU before its residual add.
#[derive(Debug, Clone)]
pub struct ImageBlock<T: Scalar> {
    pub norm_s: LayerNorm<T>,
    pub morphfc: MorphFc<T>,
    pub norm_m: LayerNorm<T>,
    pub mlp: Mlp<T>,
    pub drop_path: f64,
}

impl<T: Scalar> ImageBlock<T> {
    pub fn init(
        name: &str,
        fc_cfg: MorphFcCfg,
        mlp_ratio: usize,
        drop_path: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let c = fc_cfg.channels;
        Ok(Self {
            norm_s: LayerNorm::new(format!("{name}.norm_s"), c),
            morphfc: MorphFc::init(format!("{name}.morphfc"), fc_cfg, rng)?,
            norm_m: LayerNorm::new(format!("{name}.norm_m"), c),
            mlp: Mlp::init(&format!("{name}.mlp"), c, c * mlp_ratio, rng),
            drop_path,
        })
    }

    pub fn zeros(name: &str, fc_cfg: MorphFcCfg, mlp_ratio: usize, drop_path: f64) -> Result<Self> {
        let c = fc_cfg.channels;
        Ok(Self {
            norm_s: LayerNorm::new(format!("{name}.norm_s"), c),
            morphfc: MorphFc::zeros(format!("{name}.morphfc"), fc_cfg)?,
            norm_m: LayerNorm::new(format!("{name}.norm_m"), c),
            mlp: Mlp::zeros(&format!("{name}.mlp"), c, c * mlp_ratio),
            drop_path,
        })
    }

    pub fn forward(&self, fw: &mut Forward<T>, x: Var) -> Result<Var> {
        let u = residual_branch(fw, x, self.drop_path, |fw| {
            let n = self.norm_s.forward(fw, x)?;
            let m = self.morphfc.forward(fw, n)?;
            fw.tape.gelu(m)
        })?;
        residual_branch(fw, u, self.drop_path, |fw| {
            let n = self.norm_m.forward(fw, u)?;
            self.mlp.forward(fw, n)
        })
    }

    pub fn param_count(&self) -> u64 {
        self.norm_s.param_count()
            + self.morphfc.param_count()
            + self.norm_m.param_count()
            + self.mlp.param_count()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.morphfc.macs(h, w) + self.mlp.macs((h * w) as u64)
    }

    pub(crate) fn collect<'a>(&'a self, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.norm_s.collect(out);
        self.morphfc.collect(out);
        self.norm_m.collect(out);
        self.mlp.collect(out);
    }

    pub(crate) fn for_each_mut(
        &mut self,
        f: &mut dyn FnMut(&str, &mut Tensor<T>) -> Result<()>,
    ) -> Result<()> {
        self.norm_s.for_each_mut(f)?;
        self.morphfc.for_each_mut(f)?;
        self.norm_m.for_each_mut(f)?;
        self.mlp.for_each_mut(f)
    }
}

/// Factorized space-time block: temporal mixing, spatial mixing, MLP, each
/// pre-normed. With `ResidualStyle::Skip` the second mixing sub-layer adds
/// onto the block input rather than its own input.
#[derive(Debug, Clone)]
pub struct VideoBlock<T: Scalar> {
    pub norm_t: Option<LayerNorm<T>>,
    pub temporal: Option<TemporalFc<T>>,
    pub norm_s: LayerNorm<T>,
    pub morphfc: MorphFc<T>,
    pub norm_m: LayerNorm<T>,
    pub mlp: Mlp<T>,
    pub drop_path: f64,
    pub order: VideoOrder,
    pub residual: ResidualStyle,
}

pub struct VideoBlockCfg {
    pub fc_cfg: MorphFcCfg,
    pub frames: usize,
    pub temporal_group_width: usize,
    pub mlp_ratio: usize,
    pub drop_path: f64,
    pub order: VideoOrder,
    pub residual: ResidualStyle,
    /// Drop the temporal sub-layer entirely (identity ablation).
    pub ablate_temporal: bool,
}

impl<T: Scalar> VideoBlock<T> {
    pub fn init(name: &str, cfg: VideoBlockCfg, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c = cfg.fc_cfg.channels;
        let (norm_t, temporal) = if cfg.ablate_temporal {
            (None, None)
        } else {
            (
                Some(LayerNorm::new(format!("{name}.norm_t"), c)),
                Some(TemporalFc::init(
                    format!("{name}.temporal"),
                    c,
                    cfg.frames,
                    cfg.temporal_group_width,
                    rng,
                )?),
            )
        };
        Ok(Self {
            norm_t,
            temporal,
            norm_s: LayerNorm::new(format!("{name}.norm_s"), c),
            morphfc: MorphFc::init(format!("{name}.morphfc"), cfg.fc_cfg, rng)?,
            norm_m: LayerNorm::new(format!("{name}.norm_m"), c),
            mlp: Mlp::init(&format!("{name}.mlp"), c, c * cfg.mlp_ratio, rng),
            drop_path: cfg.drop_path,
            order: cfg.order,
            residual: cfg.residual,
        })
    }

    pub fn zeros(name: &str, cfg: VideoBlockCfg) -> Result<Self> {
        let c = cfg.fc_cfg.channels;
        let td = cfg.frames * cfg.temporal_group_width;
        let (norm_t, temporal) = if cfg.ablate_temporal {
            (None, None)
        } else {
            (
                Some(LayerNorm::new(format!("{name}.norm_t"), c)),
                Some(TemporalFc::with_weights(
                    format!("{name}.temporal"),
                    c,
                    cfg.frames,
                    cfg.temporal_group_width,
                    Tensor::zeros(&[td, td]),
                )?),
            )
        };
        Ok(Self {
            norm_t,
            temporal,
            norm_s: LayerNorm::new(format!("{name}.norm_s"), c),
            morphfc: MorphFc::zeros(format!("{name}.morphfc"), cfg.fc_cfg)?,
            norm_m: LayerNorm::new(format!("{name}.norm_m"), c),
            mlp: Mlp::zeros(&format!("{name}.mlp"), c, c * cfg.mlp_ratio),
            drop_path: cfg.drop_path,
            order: cfg.order,
            residual: cfg.residual,
        })
    }

    fn temporal_branch(&self, fw: &mut Forward<T>, root: Var, input: Var) -> Result<Var> {
        match (&self.norm_t, &self.temporal) {
            (Some(norm), Some(fc)) => residual_branch(fw, root, self.drop_path, |fw| {
                let n = norm.forward(fw, input)?;
                fc.forward(fw, n)
            }),
            _ => Ok(root),
        }
    }

    fn spatial_branch(&self, fw: &mut Forward<T>, root: Var, input: Var) -> Result<Var> {
        residual_branch(fw, root, self.drop_path, |fw| {
            let n = self.norm_s.forward(fw, input)?;
            self.morphfc.forward(fw, n)
        })
    }

    pub fn forward(&self, fw: &mut Forward<T>, x: Var) -> Result<Var> {
        let v = match self.order {
            VideoOrder::TemporalFirst => {
                let u = self.temporal_branch(fw, x, x)?;
                let root = match self.residual {
                    ResidualStyle::Skip => x,
                    ResidualStyle::Standard => u,
                };
                self.spatial_branch(fw, root, u)?
            }
            VideoOrder::SpatialFirst => {
                let u = self.spatial_branch(fw, x, x)?;
                let root = match self.residual {
                    ResidualStyle::Skip => x,
                    ResidualStyle::Standard => u,
                };
                self.temporal_branch(fw, root, u)?
            }
            VideoOrder::Parallel => {
                let u = self.temporal_branch(fw, x, x)?;
                self.spatial_branch(fw, u, x)?
            }
        };
        residual_branch(fw, v, self.drop_path, |fw| {
            let n = self.norm_m.forward(fw, v)?;
            self.mlp.forward(fw, n)
        })
    }

    pub fn param_count(&self) -> u64 {
        self.norm_t.as_ref().map_or(0, LayerNorm::param_count)
            + self.temporal.as_ref().map_or(0, TemporalFc::param_count)
            + self.norm_s.param_count()
            + self.morphfc.param_count()
            + self.norm_m.param_count()
            + self.mlp.param_count()
    }

    pub fn macs(&self, h: usize, w: usize, t: usize) -> u64 {
        let temporal = self.temporal.as_ref().map_or(0, |fc| fc.macs(h, w));
        temporal + t as u64 * self.morphfc.macs(h, w) + self.mlp.macs((h * w * t) as u64)
    }

    pub(crate) fn collect<'a>(&'a self, out: &mut Vec<(String, &'a Tensor<T>)>) {
        if let Some(n) = &self.norm_t {
            n.collect(out);
        }
        if let Some(t) = &self.temporal {
            t.collect(out);
        }
        self.norm_s.collect(out);
        self.morphfc.collect(out);
        self.norm_m.collect(out);
        self.mlp.collect(out);
    }

    pub(crate) fn for_each_mut(
        &mut self,
        f: &mut dyn FnMut(&str, &mut Tensor<T>) -> Result<()>,
    ) -> Result<()> {
        if let Some(n) = &mut self.norm_t {
            n.for_each_mut(f)?;
        }
        if let Some(t) = &mut self.temporal {
            t.for_each_mut(f)?;
        }
        self.norm_s.for_each_mut(f)?;
        self.morphfc.for_each_mut(f)?;
        self.norm_m.for_each_mut(f)?;
        self.mlp.for_each_mut(f)
    }
}

#[derive(Debug, Clone)]
pub enum Block<T: Scalar> {
    Image(ImageBlock<T>),
    Video(VideoBlock<T>),
}

impl<T: Scalar> Block<T> {
    pub fn forward(&self, fw: &mut Forward<T>, x: Var) -> Result<Var> {
        match self {
            Block::Image(b) => b.forward(fw, x),
            Block::Video(b) => b.forward(fw, x),
        }
    }

    pub fn param_count(&self) -> u64 {
        match self {
            Block::Image(b) => b.param_count(),
            Block::Video(b) => b.param_count(),
        }
    }

    pub(crate) fn collect<'a>(&'a self, out: &mut Vec<(String, &'a Tensor<T>)>) {
        match self {
            Block::Image(b) => b.collect(out),
            Block::Video(b) => b.collect(out),
        }
    }

    pub(crate) fn for_each_mut(
        &mut self,
        f: &mut dyn FnMut(&str, &mut Tensor<T>) -> Result<()>,
    ) -> Result<()> {
        match self {
            Block::Image(b) => b.for_each_mut(f),
            Block::Video(b) => b.for_each_mut(f),
        }
    }
}
