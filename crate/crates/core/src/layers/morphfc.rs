//! The chunked fully-connected token mixers.
//!
//! `MorphFc` mixes spatial tokens along three pathways: tokens are scanned
//! horizontally and vertically into length-L chunks of D-channel groups and
//! each flattened chunk goes through a dense square matrix (one matrix per
//! direction, weights shared across chunks of that direction but not across
//! positions inside a chunk). A per-token channel FC mixes information across
//! groups. The pathways combine by plain elementwise sum, or by a learned
//! convex per-channel weighting when the gate is enabled.
//!
//! `TemporalFc` is the video extension: for every spatial position the
//! frames of one channel group concatenate into a single chunk that a dense
//! square matrix transforms, so time mixes while space stays put.
//!
//! Parameter shapes depend only on (L, D, C), never on the input grid, which
//! is what lets one layer serve multiple image scales.

use super::{chunk_merge, chunk_split, check_grouping, Direction};
use crate::error::{Error, Result};
use crate::forward::Forward;
use crate::tensor::{Scalar, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use super::common::INIT_STD;

#[derive(Debug, Clone)]
pub struct MorphFcCfg {
    pub channels: usize,
    pub chunk_len: usize,
    /// Channels per group inside a chunk (D).
    pub group_width: usize,
    /// Learned convex pathway weighting instead of a plain sum.
    pub gated: bool,
    /// Include the per-token channel FC pathway.
    pub channel_path: bool,
}

impl MorphFcCfg {
    pub fn flat_len(&self) -> usize {
        self.chunk_len * self.group_width
    }

    pub fn num_paths(&self) -> usize {
        if self.channel_path {
            3
        } else {
            2
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_grouping(self.channels, self.group_width, self.chunk_len)
    }
}

#[derive(Debug, Clone)]
pub struct MorphFc<T: Scalar> {
    name: String,
    pub cfg: MorphFcCfg,
    /// Horizontal chunk transform, `[LD, LD]`.
    pub w_h: Tensor<T>,
    /// Vertical chunk transform, `[LD, LD]`. Never shared with `w_h`.
    pub w_v: Tensor<T>,
    /// Per-token channel FC `[C, C]` with bias `[C]`.
    pub channel: Option<(Tensor<T>, Tensor<T>)>,
    /// Pathway gate logits `[num_paths, C]`, softmaxed per channel.
    pub gate: Option<Tensor<T>>,
}

impl<T: Scalar> MorphFc<T> {
    pub fn init(name: impl Into<String>, cfg: MorphFcCfg, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let ld = cfg.flat_len();
        let c = cfg.channels;
        Ok(Self {
            name: name.into(),
            w_h: Tensor::randn(&[ld, ld], INIT_STD, rng),
            w_v: Tensor::randn(&[ld, ld], INIT_STD, rng),
            channel: cfg
                .channel_path
                .then(|| (Tensor::randn(&[c, c], INIT_STD, rng), Tensor::zeros(&[c]))),
            gate: cfg.gated.then(|| Tensor::zeros(&[cfg.num_paths(), c])),
            cfg,
        })
    }

    /// All transforms set to identity, bias zero. With the gate absent the
    /// layer then computes `num_paths * x`.
    pub fn identity(name: impl Into<String>, cfg: MorphFcCfg) -> Result<Self> {
        cfg.validate()?;
        let ld = cfg.flat_len();
        let c = cfg.channels;
        Ok(Self {
            name: name.into(),
            w_h: eye(ld),
            w_v: eye(ld),
            channel: cfg.channel_path.then(|| (eye(c), Tensor::zeros(&[c]))),
            gate: cfg.gated.then(|| Tensor::zeros(&[cfg.num_paths(), c])),
            cfg,
        })
    }

    pub fn zeros(name: impl Into<String>, cfg: MorphFcCfg) -> Result<Self> {
        cfg.validate()?;
        let ld = cfg.flat_len();
        let c = cfg.channels;
        Ok(Self {
            name: name.into(),
            w_h: Tensor::zeros(&[ld, ld]),
            w_v: Tensor::zeros(&[ld, ld]),
            channel: cfg.channel_path.then(|| (Tensor::zeros(&[c, c]), Tensor::zeros(&[c]))),
            gate: cfg.gated.then(|| Tensor::zeros(&[cfg.num_paths(), c])),
            cfg,
        })
    }

    pub fn with_weights(
        name: impl Into<String>,
        cfg: MorphFcCfg,
        w_h: Tensor<T>,
        w_v: Tensor<T>,
        channel: Option<(Tensor<T>, Tensor<T>)>,
        gate: Option<Tensor<T>>,
    ) -> Result<Self> {
        cfg.validate()?;
        let ld = cfg.flat_len();
        let c = cfg.channels;
        if w_h.shape() != [ld, ld] || w_v.shape() != [ld, ld] {
            return Err(Error::Shape(format!(
                "chunk transforms must be [{ld}, {ld}], got {:?} and {:?}",
                w_h.shape(),
                w_v.shape()
            )));
        }
        if cfg.channel_path != channel.is_some() {
            return Err(Error::Config(
                "channel pathway flag disagrees with provided weights".into(),
            ));
        }
        if let Some((w_c, b_c)) = &channel {
            if w_c.shape() != [c, c] || b_c.shape() != [c] {
                return Err(Error::Shape(format!(
                    "channel FC must be [{c}, {c}] with bias [{c}], got {:?} and {:?}",
                    w_c.shape(),
                    b_c.shape()
                )));
            }
        }
        if cfg.gated != gate.is_some() {
            return Err(Error::Config("gate flag disagrees with provided logits".into()));
        }
        if let Some(g) = &gate {
            if g.shape() != [cfg.num_paths(), c] {
                return Err(Error::Shape(format!(
                    "gate logits must be [{}, {c}], got {:?}",
                    cfg.num_paths(),
                    g.shape()
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            cfg,
            w_h,
            w_v,
            channel,
            gate,
        })
    }

    /// Apply to an image grid `[H, W, C]` or per frame of a clip
    /// `[H, W, T, C]` (spatial mixing never crosses frames).
    pub fn forward(&self, fw: &mut Forward<T>, x: Var) -> Result<Var> {
        match fw.tape.value(x).shape().len() {
            3 => self.forward_grid(fw, x),
            4 => {
                let shape = fw.tape.value(x).shape().to_vec();
                let (h, w, t, c) = (shape[0], shape[1], shape[2], shape[3]);
                let mut frames = Vec::with_capacity(t);
                for f in 0..t {
                    let frame = fw.tape.slice(x, &[(0, h), (0, w), (f, f + 1), (0, c)])?;
                    let frame = fw.tape.reshape(frame, &[h, w, c])?;
                    let y = self.forward_grid(fw, frame)?;
                    frames.push(fw.tape.reshape(y, &[h, w, 1, c])?);
                }
                fw.tape.concat(2, &frames)
            }
            r => Err(Error::shape(
                "morphfc",
                format!("expected rank 3 or 4 input, got rank {r}"),
            )),
        }
    }

    fn forward_grid(&self, fw: &mut Forward<T>, x: Var) -> Result<Var> {
        let shape = fw.tape.value(x).shape();
        let c = *shape.last().unwrap_or(&0);
        if shape.len() != 3 || c != self.cfg.channels {
            return Err(Error::shape(
                "morphfc",
                format!(
                    "input {shape:?} does not match configured channel count {}",
                    self.cfg.channels
                ),
            ));
        }
        let (l, d) = (self.cfg.chunk_len, self.cfg.group_width);
        let groups = c / d;

        let mut paths = Vec::with_capacity(3);
        for (dir, weight) in [
            (Direction::Horizontal, &self.w_h),
            (Direction::Vertical, &self.w_v),
        ] {
            let suffix = if dir == Direction::Horizontal { "w_h" } else { "w_v" };
            let w = fw.bind(&format!("{}.{suffix}", self.name), weight)?;
            let (chunks, plan) = chunk_split(fw.tape, x, dir, l, d)?;
            let rows = plan.num_chunks * groups;
            let flat = fw.tape.reshape(chunks, &[rows, plan.flat_len()])?;
            let y = fw.tape.matmul(flat, w)?;
            let y = fw.tape.reshape(y, &[plan.num_chunks, groups, plan.flat_len()])?;
            paths.push(chunk_merge(fw.tape, y, &plan)?);
        }
        if let Some((w_c, b_c)) = &self.channel {
            let w = fw.bind(&format!("{}.w_c", self.name), w_c)?;
            let b = fw.bind(&format!("{}.b_c", self.name), b_c)?;
            let (h, wd) = (shape[0], shape[1]);
            let flat = fw.tape.reshape(x, &[h * wd, c])?;
            let y = fw.tape.matmul(flat, w)?;
            let y = fw.tape.add_vec(y, b)?;
            paths.push(fw.tape.reshape(y, &[h, wd, c])?);
        }

        match &self.gate {
            None => {
                let mut acc = paths[0];
                for p in &paths[1..] {
                    acc = fw.tape.add(acc, *p)?;
                }
                Ok(acc)
            }
            Some(logits) => {
                let g = fw.bind(&format!("{}.gate", self.name), logits)?;
                let weights = fw.tape.softmax_axis(g, 0)?;
                let mut acc = None;
                for (p, path) in paths.iter().enumerate() {
                    let row = fw.tape.slice(weights, &[(p, p + 1), (0, c)])?;
                    let row = fw.tape.reshape(row, &[c])?;
                    let term = fw.tape.mul_vec(*path, row)?;
                    acc = Some(match acc {
                        None => term,
                        Some(a) => fw.tape.add(a, term)?,
                    });
                }
                Ok(acc.expect("at least two pathways"))
            }
        }
    }

    pub fn param_count(&self) -> u64 {
        let mut n = self.w_h.numel() + self.w_v.numel();
        if let Some((w_c, b_c)) = &self.channel {
            n += w_c.numel() + b_c.numel();
        }
        if let Some(g) = &self.gate {
            n += g.numel();
        }
        n as u64
    }

    /// Matrix-product MACs for one `[h, w]` grid, including scan padding.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (l, d, c) = (self.cfg.chunk_len, self.cfg.group_width, self.cfg.channels);
        let ld = (l * d) as u64;
        let n_tok = h * w;
        let nc = (n_tok + l - 1) / l;
        let rows = (nc * (c / d)) as u64;
        let mut total = 2 * rows * ld * ld;
        if self.channel.is_some() {
            total += (n_tok as u64) * (c as u64) * (c as u64);
        }
        total
    }

    pub(crate) fn collect<'a>(&'a self, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{}.w_h", self.name), &self.w_h));
        out.push((format!("{}.w_v", self.name), &self.w_v));
        if let Some((w_c, b_c)) = &self.channel {
            out.push((format!("{}.w_c", self.name), w_c));
            out.push((format!("{}.b_c", self.name), b_c));
        }
        if let Some(g) = &self.gate {
            out.push((format!("{}.gate", self.name), g));
        }
    }

    pub(crate) fn for_each_mut(
        &mut self,
        f: &mut dyn FnMut(&str, &mut Tensor<T>) -> Result<()>,
    ) -> Result<()> {
        f(&format!("{}.w_h", self.name), &mut self.w_h)?;
        f(&format!("{}.w_v", self.name), &mut self.w_v)?;
        if let Some((w_c, b_c)) = &mut self.channel {
            f(&format!("{}.w_c", self.name), w_c)?;
            f(&format!("{}.b_c", self.name), b_c)?;
        }
        if let Some(g) = &mut self.gate {
            f(&format!("{}.gate", self.name), g)?;
        }
        Ok(())
    }
}

/// Temporal chunk mixer: per spatial position, the `T * D_t` vector of one
/// channel group across all frames goes through one square matrix.
#[derive(Debug, Clone)]
pub struct TemporalFc<T: Scalar> {
    name: String,
    pub frames: usize,
    pub group_width: usize,
    pub channels: usize,
    /// `[T*D_t, T*D_t]`
    pub w_t: Tensor<T>,
}

impl<T: Scalar> TemporalFc<T> {
    pub fn init(
        name: impl Into<String>,
        channels: usize,
        frames: usize,
        group_width: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        check_grouping(channels, group_width, frames)?;
        let td = frames * group_width;
        Ok(Self {
            name: name.into(),
            frames,
            group_width,
            channels,
            w_t: Tensor::randn(&[td, td], INIT_STD, rng),
        })
    }

    pub fn identity(
        name: impl Into<String>,
        channels: usize,
        frames: usize,
        group_width: usize,
    ) -> Result<Self> {
        check_grouping(channels, group_width, frames)?;
        Ok(Self {
            name: name.into(),
            frames,
            group_width,
            channels,
            w_t: eye(frames * group_width),
        })
    }

    pub fn with_weights(
        name: impl Into<String>,
        channels: usize,
        frames: usize,
        group_width: usize,
        w_t: Tensor<T>,
    ) -> Result<Self> {
        check_grouping(channels, group_width, frames)?;
        let td = frames * group_width;
        if w_t.shape() != [td, td] {
            return Err(Error::Shape(format!(
                "temporal transform must be [{td}, {td}], got {:?}",
                w_t.shape()
            )));
        }
        Ok(Self {
            name: name.into(),
            frames,
            group_width,
            channels,
            w_t,
        })
    }

    pub fn forward(&self, fw: &mut Forward<T>, x: Var) -> Result<Var> {
        let shape = fw.tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[2] != self.frames || shape[3] != self.channels {
            return Err(Error::shape(
                "morphfc_t",
                format!(
                    "input {shape:?} does not match frames {} / channels {}",
                    self.frames, self.channels
                ),
            ));
        }
        let w = fw.bind(&format!("{}.w_t", self.name), &self.w_t)?;
        let (chunks, plan) = chunk_split(
            fw.tape,
            x,
            Direction::Temporal,
            self.frames,
            self.group_width,
        )?;
        let groups = self.channels / self.group_width;
        let rows = plan.num_chunks * groups;
        let flat = fw.tape.reshape(chunks, &[rows, plan.flat_len()])?;
        let y = fw.tape.matmul(flat, w)?;
        let y = fw.tape.reshape(y, &[plan.num_chunks, groups, plan.flat_len()])?;
        chunk_merge(fw.tape, y, &plan)
    }

    pub fn param_count(&self) -> u64 {
        self.w_t.numel() as u64
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let td = (self.frames * self.group_width) as u64;
        let rows = (h * w * (self.channels / self.group_width)) as u64;
        rows * td * td
    }

    pub(crate) fn collect<'a>(&'a self, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{}.w_t", self.name), &self.w_t));
    }

    pub(crate) fn for_each_mut(
        &mut self,
        f: &mut dyn FnMut(&str, &mut Tensor<T>) -> Result<()>,
    ) -> Result<()> {
        f(&format!("{}.w_t", self.name), &mut self.w_t)
    }
}

fn eye<T: Scalar>(n: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        t.data_mut()[i * n + i] = T::one();
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;

    fn cfg(c: usize, l: usize, d: usize) -> MorphFcCfg {
        MorphFcCfg {
            channels: c,
            chunk_len: l,
            group_width: d,
            gated: false,
            channel_path: true,
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape, 1.0, &mut rng)
    }

    #[test]
    fn identity_weights_triple_the_input() {
        let layer = MorphFc::identity("m", cfg(8, 4, 2)).unwrap();
        let x = random(&[4, 4, 8], 1);
        let mut tape = Tape::new();
        let mut fw = Forward::eval(&mut tape);
        let xv = fw.tape.constant(x.clone());
        let y = layer.forward(&mut fw, xv).unwrap();
        let out = tape.value(y);
        for (o, i) in out.data().iter().zip(x.data()) {
            assert!((o - 3.0 * i).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_gate_with_identity_weights_is_identity() {
        let mut c = cfg(8, 4, 2);
        c.gated = true;
        let layer = MorphFc::identity("m", c).unwrap();
        let x = random(&[4, 4, 8], 2);
        let mut tape = Tape::new();
        let mut fw = Forward::eval(&mut tape);
        let xv = fw.tape.constant(x.clone());
        let y = layer.forward(&mut fw, xv).unwrap();
        let out = tape.value(y);
        for (o, i) in out.data().iter().zip(x.data()) {
            assert!((o - i).abs() < 1e-12, "gate should average three identical paths");
        }
    }

    #[test]
    fn temporal_identity_is_identity() {
        let layer = TemporalFc::<f64>::identity("t", 6, 4, 3).unwrap();
        let x = random(&[3, 3, 4, 6], 3);
        let mut tape = Tape::new();
        let mut fw = Forward::eval(&mut tape);
        let xv = fw.tape.constant(x.clone());
        let y = layer.forward(&mut fw, xv).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn temporal_mixing_is_spatially_local() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = TemporalFc::<f64>::init("t", 6, 4, 3, &mut rng).unwrap();
        let x = random(&[3, 4, 4, 6], 5);
        let mut bumped = x.clone();
        // Perturb every channel and frame at spatial position (1, 2) only.
        for f in 0..4 {
            for c in 0..6 {
                let strides = [4 * 4 * 6, 4 * 6, 6, 1];
                let off = 1 * strides[0] + 2 * strides[1] + f * strides[2] + c;
                bumped.data_mut()[off] += 1.0;
            }
        }
        let run = |input: &Tensor<f64>| {
            let mut tape = Tape::new();
            let mut fw = Forward::eval(&mut tape);
            let xv = fw.tape.constant(input.clone());
            let y = layer.forward(&mut fw, xv).unwrap();
            tape.value(y).clone()
        };
        let ya = run(&x);
        let yb = run(&bumped);
        for i in 0..3 {
            for j in 0..4 {
                for f in 0..4 {
                    for c in 0..6 {
                        let a = ya.at(&[i, j, f, c]);
                        let b = yb.at(&[i, j, f, c]);
                        if (i, j) == (1, 2) {
                            continue;
                        }
                        assert_eq!(a, b, "spatial position ({i},{j}) must be untouched");
                    }
                }
            }
        }
    }

    #[test]
    fn param_count_closed_form() {
        // L=4, D=2, C=8, no gate: 2*(LD)^2 + C^2 + C = 128 + 64 + 8 = 200.
        let layer = MorphFc::<f64>::zeros("m", cfg(8, 4, 2)).unwrap();
        assert_eq!(layer.param_count(), 200);
    }

    #[test]
    fn param_count_ignores_grid_size() {
        // Same (L, D, C) serves 56x56 and 112x112 inputs with equal state.
        let a = MorphFc::<f64>::zeros("m", cfg(16, 4, 4)).unwrap();
        let mut tape = Tape::new();
        let mut fw = Forward::eval(&mut tape);
        for grid in [[56usize, 56], [112, 112]] {
            let x = fw.tape.constant(Tensor::zeros(&[grid[0], grid[1], 16]));
            a.forward(&mut fw, x).unwrap();
        }
        assert_eq!(a.param_count(), 2 * 256 + 256 + 16);
    }

    #[test]
    fn rejects_non_dividing_group_width() {
        let err = MorphFc::<f64>::zeros("m", cfg(8, 4, 3));
        assert!(matches!(err, Err(Error::Divisibility(_))));
    }
}
