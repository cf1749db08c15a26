//! Model configuration: per-stage settings and the four published variants.

use crate::error::{Error, Result};
use crate::layers::derive_group_width;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    T,
    S,
    B,
    L,
    Custom,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "T" | "t" | "tiny" => Ok(Variant::T),
            "S" | "s" | "small" => Ok(Variant::S),
            "B" | "b" | "base" => Ok(Variant::B),
            "L" | "l" | "large" => Ok(Variant::L),
            "custom" => Ok(Variant::Custom),
            other => Err(Error::Config(format!(
                "unknown variant '{other}' (expected T, S, B, L, or custom)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::T => "T",
            Variant::S => "S",
            Variant::B => "B",
            Variant::L => "L",
            Variant::Custom => "custom",
        }
    }
}

#[derive(Debug, Clone)]
pub struct StageConfig {
    pub depth: usize,
    pub channels: usize,
    pub chunk_len: usize,
    /// Channels per chunk group; `None` applies the C/L rule.
    pub group_width: Option<usize>,
    pub downsample_after: bool,
}

impl StageConfig {
    pub fn effective_group_width(&self) -> usize {
        self.group_width
            .unwrap_or_else(|| derive_group_width(self.channels, self.chunk_len))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputKind {
    Image { height: usize, width: usize },
    Video { height: usize, width: usize, frames: usize },
}

impl InputKind {
    pub fn is_video(self) -> bool {
        matches!(self, InputKind::Video { .. })
    }
}

/// Order of the mixing sub-layers inside a video block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VideoOrder {
    /// Temporal mixing first, then spatial (the default).
    TemporalFirst,
    SpatialFirst,
    /// Both branches read the block input and their outputs add.
    Parallel,
}

/// Residual wiring of the second mixing sub-layer in a video block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualStyle {
    /// Each sub-layer adds onto its own input.
    Standard,
    /// The second mixing sub-layer adds onto the block input instead.
    Skip,
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub variant: Variant,
    pub stages: Vec<StageConfig>,
    /// Peak stochastic-depth rate; per-block rates ramp linearly to this.
    pub stoch_depth_max: f64,
    pub num_classes: usize,
    pub input: InputKind,
    pub mlp_ratio: usize,
    pub gate_enabled: bool,
    pub channel_path: bool,
    pub video_order: VideoOrder,
    pub video_residual: ResidualStyle,
    /// Replace every temporal mixer with the identity (ablation control).
    pub temporal_identity: bool,
    /// Override for the temporal group width; `None` applies C/T.
    pub temporal_group_width: Option<usize>,
}

pub const PUBLISHED_CHUNK_LENS: [usize; 4] = [14, 28, 28, 49];

fn published(variant: Variant) -> (f64, [usize; 4], [usize; 4]) {
    match variant {
        Variant::T => (0.1, [3, 4, 7, 3], [84, 168, 336, 588]),
        Variant::S => (0.1, [3, 4, 9, 3], [112, 224, 392, 784]),
        Variant::B => (0.3, [4, 6, 15, 4], [112, 224, 392, 784]),
        Variant::L => (0.4, [4, 8, 18, 6], [112, 224, 392, 784]),
        Variant::Custom => panic!("custom variant has no published settings"),
    }
}

impl ModelConfig {
    /// One of the four published image classifiers at 224x224, 1000 classes.
    pub fn image_variant(variant: Variant) -> Self {
        let (stoch, depths, channels) = published(variant);
        Self {
            variant,
            stages: (0..4)
                .map(|i| StageConfig {
                    depth: depths[i],
                    channels: channels[i],
                    chunk_len: PUBLISHED_CHUNK_LENS[i],
                    group_width: None,
                    downsample_after: i < 3,
                })
                .collect(),
            stoch_depth_max: stoch,
            num_classes: 1000,
            input: InputKind::Image {
                height: 224,
                width: 224,
            },
            mlp_ratio: 4,
            gate_enabled: true,
            channel_path: true,
            video_order: VideoOrder::TemporalFirst,
            video_residual: ResidualStyle::Skip,
            temporal_identity: false,
            temporal_group_width: None,
        }
    }

    /// Published variant with video blocks. The spatial layer settings match
    /// the image model; every block gains a temporal mixer.
    pub fn video_variant(variant: Variant, frames: usize) -> Self {
        let mut cfg = Self::image_variant(variant);
        cfg.input = InputKind::Video {
            height: 224,
            width: 224,
            frames,
        };
        cfg
    }

    /// Minimal single-stage image model for tests and experiments.
    pub fn toy_image(height: usize, width: usize, num_classes: usize) -> Self {
        Self {
            variant: Variant::Custom,
            stages: vec![StageConfig {
                depth: 2,
                channels: 16,
                chunk_len: 4,
                group_width: None,
                downsample_after: false,
            }],
            stoch_depth_max: 0.0,
            num_classes,
            input: InputKind::Image { height, width },
            mlp_ratio: 4,
            gate_enabled: true,
            channel_path: true,
            video_order: VideoOrder::TemporalFirst,
            video_residual: ResidualStyle::Skip,
            temporal_identity: false,
            temporal_group_width: None,
        }
    }

    pub fn toy_video(height: usize, width: usize, frames: usize, num_classes: usize) -> Self {
        let mut cfg = Self::toy_image(height, width, num_classes);
        cfg.input = InputKind::Video {
            height,
            width,
            frames,
        };
        cfg
    }

    /// Frames after patch embedding (the embed halves the frame count,
    /// rounding up for odd inputs by frame repetition).
    pub fn embedded_frames(&self) -> Option<usize> {
        match self.input {
            InputKind::Video { frames, .. } => Some((frames + 1) / 2),
            InputKind::Image { .. } => None,
        }
    }

    pub fn total_depth(&self) -> usize {
        self.stages.iter().map(|s| s.depth).sum()
    }

    /// Linear stochastic-depth ramp: block 0 gets rate 0, the last block
    /// gets the configured maximum.
    pub fn drop_path_rates(&self) -> Vec<f64> {
        let total = self.total_depth();
        (0..total)
            .map(|i| {
                if total <= 1 {
                    self.stoch_depth_max
                } else {
                    self.stoch_depth_max * i as f64 / (total - 1) as f64
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("a model needs at least one stage".into()));
        }
        if self.variant != Variant::Custom && self.stages.len() != 4 {
            return Err(Error::Config(format!(
                "published variants use exactly 4 stages, got {}",
                self.stages.len()
            )));
        }
        if !(0.0..1.0).contains(&self.stoch_depth_max) {
            return Err(Error::Config(format!(
                "stochastic depth rate {} must lie in [0, 1)",
                self.stoch_depth_max
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.depth == 0 || s.channels == 0 || s.chunk_len == 0 {
                return Err(Error::Config(format!(
                    "stage {i}: depth, channels, and chunk length must be positive"
                )));
            }
            let d = s.effective_group_width();
            if s.channels % d != 0 {
                return Err(Error::Divisibility(format!(
                    "stage {i}: group width {d} does not divide {} channels",
                    s.channels
                )));
            }
            if let Some(t) = self.embedded_frames() {
                let dt = self
                    .temporal_group_width
                    .unwrap_or_else(|| derive_group_width(s.channels, t));
                if dt == 0 || s.channels % dt != 0 {
                    return Err(Error::Divisibility(format!(
                        "stage {i}: temporal group width {dt} does not divide {} channels",
                        s.channels
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_tables() {
        let t = ModelConfig::image_variant(Variant::T);
        assert_eq!(
            t.stages.iter().map(|s| s.depth).collect::<Vec<_>>(),
            vec![3, 4, 7, 3]
        );
        assert_eq!(
            t.stages.iter().map(|s| s.channels).collect::<Vec<_>>(),
            vec![84, 168, 336, 588]
        );
        assert_eq!(t.stoch_depth_max, 0.1);

        let b = ModelConfig::image_variant(Variant::B);
        assert_eq!(
            b.stages.iter().map(|s| s.depth).collect::<Vec<_>>(),
            vec![4, 6, 15, 4]
        );
        assert_eq!(
            b.stages.iter().map(|s| s.channels).collect::<Vec<_>>(),
            vec![112, 224, 392, 784]
        );
        assert_eq!(b.stoch_depth_max, 0.3);

        for v in [Variant::T, Variant::S, Variant::B, Variant::L] {
            let cfg = ModelConfig::image_variant(v);
            assert_eq!(
                cfg.stages.iter().map(|s| s.chunk_len).collect::<Vec<_>>(),
                PUBLISHED_CHUNK_LENS.to_vec()
            );
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn group_widths_are_integral_for_published_variants() {
        let t = ModelConfig::image_variant(Variant::T);
        let widths: Vec<usize> = t.stages.iter().map(|s| s.effective_group_width()).collect();
        assert_eq!(widths, vec![6, 6, 12, 12]);
        for v in [Variant::S, Variant::B, Variant::L] {
            let cfg = ModelConfig::image_variant(v);
            let widths: Vec<usize> =
                cfg.stages.iter().map(|s| s.effective_group_width()).collect();
            assert_eq!(widths, vec![8, 8, 14, 16]);
            for s in &cfg.stages {
                assert_eq!(s.channels % s.effective_group_width(), 0);
            }
        }
    }

    #[test]
    fn drop_path_ramp_is_monotone_and_hits_max() {
        let cfg = ModelConfig::image_variant(Variant::L);
        let rates = cfg.drop_path_rates();
        assert_eq!(rates.len(), 36);
        assert_eq!(rates[0], 0.0);
        assert!((rates.last().unwrap() - 0.4).abs() < 1e-12);
        for w in rates.windows(2) {
            assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn single_block_ramp_uses_max() {
        let mut cfg = ModelConfig::toy_image(8, 8, 2);
        cfg.stages[0].depth = 1;
        cfg.stoch_depth_max = 0.3;
        assert_eq!(cfg.drop_path_rates(), vec![0.3]);
    }
}
