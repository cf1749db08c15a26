//! Token-mixing layers: chunk partitioning, the chunked fully-connected
//! mixers for space and time, and the small dense building blocks around
//! them.

mod common;
mod morphfc;

pub use common::{LayerNorm, Linear, Mlp};
pub use morphfc::{MorphFc, MorphFcCfg, TemporalFc};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Hard cap on the flattened chunk extent (chunk length times group width).
/// Guards against configs whose single FC matrix would dwarf the model.
pub const MAX_CHUNK_FLAT: usize = 1 << 14;

/// Which way tokens are scanned into chunks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Row-major scan: the width axis varies fastest.
    Horizontal,
    /// Column-major scan: the height axis varies fastest.
    Vertical,
    /// One chunk per spatial position covering every frame.
    Temporal,
}

/// Bookkeeping produced by [`chunk_split`], consumed by [`chunk_merge`].
#[derive(Debug, Clone)]
pub struct ChunkPlan {
    pub direction: Direction,
    /// Chunks per channel group: ceil(HW / L) spatially, HW temporally.
    pub num_chunks: usize,
    /// Zero tokens appended so the scan length divides evenly.
    pub pad_len: usize,
    pub chunk_len: usize,
    pub group_width: usize,
    /// Input shape, [H, W, C] or [H, W, T, C].
    pub grid: Vec<usize>,
}

impl ChunkPlan {
    pub fn flat_len(&self) -> usize {
        self.chunk_len * self.group_width
    }
}

/// Channel group width from the `D = C / L` rule. When the division is not
/// integral, falls back to the largest divisor of `C` no greater than
/// `C / L` (and 1 when even that does not exist), so the result is total.
pub fn derive_group_width(channels: usize, chunk_len: usize) -> usize {
    assert!(channels > 0 && chunk_len > 0);
    if channels % chunk_len == 0 {
        return channels / chunk_len;
    }
    let cap = channels / chunk_len; // floor
    (1..=cap.max(1))
        .rev()
        .find(|d| channels % d == 0)
        .unwrap_or(1)
}

fn dims3(shape: &[usize], op: &str) -> Result<(usize, usize, usize)> {
    match shape {
        [h, w, c] => Ok((*h, *w, *c)),
        other => Err(Error::shape(op, format!("expected [H, W, C], got {other:?}"))),
    }
}

fn dims4(shape: &[usize], op: &str) -> Result<(usize, usize, usize, usize)> {
    match shape {
        [h, w, t, c] => Ok((*h, *w, *t, *c)),
        other => Err(Error::shape(
            op,
            format!("expected [H, W, T, C], got {other:?}"),
        )),
    }
}

fn check_grouping(channels: usize, group_width: usize, chunk_len: usize) -> Result<()> {
    if group_width == 0 || channels % group_width != 0 {
        return Err(Error::Divisibility(format!(
            "group width {group_width} must divide channel count {channels}"
        )));
    }
    let flat = chunk_len * group_width;
    if flat > MAX_CHUNK_FLAT {
        return Err(Error::Divisibility(format!(
            "flattened chunk extent {flat} exceeds the maximum {MAX_CHUNK_FLAT}"
        )));
    }
    Ok(())
}

/// Partition tokens into fixed-length chunks of `group_width` channels.
///
/// Output shape is `[num_chunks, C/D, L*D]`; inside a chunk the flat vector
/// holds its L tokens in scan order, each contributing D consecutive group
/// channels (token-major flattening). When the chunk length does not divide
/// the token count, the scan is zero-padded to the next multiple and the
/// padding is recorded in the plan.
pub fn chunk_split<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    direction: Direction,
    chunk_len: usize,
    group_width: usize,
) -> Result<(Var, ChunkPlan)> {
    let grid = tape.value(x).shape().to_vec();
    let (d, l) = (group_width, chunk_len);
    match direction {
        Direction::Horizontal | Direction::Vertical => {
            let (h, w, c) = dims3(&grid, "chunk_split")?;
            check_grouping(c, d, l)?;
            let scan = if direction == Direction::Vertical {
                tape.permute(x, &[1, 0, 2])?
            } else {
                x
            };
            let n_tok = h * w;
            let pad = (l - n_tok % l) % l;
            let nc = (n_tok + pad) / l;
            let mut t = tape.reshape(scan, &[n_tok, c])?;
            if pad > 0 {
                let zeros = tape.constant(Tensor::zeros(&[pad, c]));
                t = tape.concat(0, &[t, zeros])?;
            }
            let t = tape.reshape(t, &[nc, l, c / d, d])?;
            let t = tape.permute(t, &[0, 2, 1, 3])?;
            let out = tape.reshape(t, &[nc, c / d, l * d])?;
            Ok((
                out,
                ChunkPlan {
                    direction,
                    num_chunks: nc,
                    pad_len: pad,
                    chunk_len: l,
                    group_width: d,
                    grid,
                },
            ))
        }
        Direction::Temporal => {
            let (h, w, tf, c) = dims4(&grid, "chunk_split")?;
            if l != tf {
                return Err(Error::shape(
                    "chunk_split",
                    format!("temporal chunk length {l} must equal frame count {tf}"),
                ));
            }
            check_grouping(c, d, l)?;
            let n_pos = h * w;
            let t = tape.reshape(x, &[n_pos, tf, c / d, d])?;
            let t = tape.permute(t, &[0, 2, 1, 3])?;
            let out = tape.reshape(t, &[n_pos, c / d, tf * d])?;
            Ok((
                out,
                ChunkPlan {
                    direction,
                    num_chunks: n_pos,
                    pad_len: 0,
                    chunk_len: l,
                    group_width: d,
                    grid,
                },
            ))
        }
    }
}

/// Exact inverse of [`chunk_split`], including removal of scan padding.
pub fn chunk_merge<T: Scalar>(tape: &mut Tape<T>, y: Var, plan: &ChunkPlan) -> Result<Var> {
    let (nc, l, d) = (plan.num_chunks, plan.chunk_len, plan.group_width);
    let got = tape.value(y).shape().to_vec();
    match plan.direction {
        Direction::Horizontal | Direction::Vertical => {
            let (h, w, c) = dims3(&plan.grid, "chunk_merge")?;
            if got != [nc, c / d, l * d] {
                return Err(Error::shape(
                    "chunk_merge",
                    format!("chunked tensor {got:?} does not match plan {plan:?}"),
                ));
            }
            let t = tape.reshape(y, &[nc, c / d, l, d])?;
            let t = tape.permute(t, &[0, 2, 1, 3])?;
            let mut t = tape.reshape(t, &[nc * l, c])?;
            if plan.pad_len > 0 {
                t = tape.slice(t, &[(0, h * w), (0, c)])?;
            }
            if plan.direction == Direction::Vertical {
                let t = tape.reshape(t, &[w, h, c])?;
                tape.permute(t, &[1, 0, 2])
            } else {
                tape.reshape(t, &[h, w, c])
            }
        }
        Direction::Temporal => {
            let (h, w, tf, c) = dims4(&plan.grid, "chunk_merge")?;
            if got != [h * w, c / d, tf * d] {
                return Err(Error::shape(
                    "chunk_merge",
                    format!("chunked tensor {got:?} does not match plan {plan:?}"),
                ));
            }
            let t = tape.reshape(y, &[h * w, c / d, tf, d])?;
            let t = tape.permute(t, &[0, 2, 1, 3])?;
            tape.reshape(t, &[h, w, tf, c])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape, 1.0, &mut rng)
    }

    #[test]
    fn group_width_rule() {
        assert_eq!(derive_group_width(112, 14), 8);
        assert_eq!(derive_group_width(588, 49), 12);
        assert_eq!(derive_group_width(84, 14), 6);
        // 100/7 is not integral; the largest divisor of 100 below 14.28 is 10.
        assert_eq!(derive_group_width(100, 7), 10);
        // No divisor fits below 4/49; fall back to 1.
        assert_eq!(derive_group_width(4, 49), 1);
    }

    #[test]
    fn published_chunk_counts() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[56, 56, 8]));
        let (_, plan) = chunk_split(&mut tape, x, Direction::Horizontal, 14, 4).unwrap();
        assert_eq!(plan.num_chunks, 224);
        assert_eq!(plan.pad_len, 0);

        let x = tape.constant(Tensor::zeros(&[7, 7, 12]));
        let (_, plan) = chunk_split(&mut tape, x, Direction::Horizontal, 49, 12).unwrap();
        assert_eq!(plan.num_chunks, 1);
        assert_eq!(plan.pad_len, 0);
    }

    #[test]
    fn padded_plan_and_roundtrip() {
        // 5x5 tokens with chunks of 4: 25 tokens pad to 28, giving 7 chunks.
        let mut tape = Tape::<f64>::new();
        let t = random(&[5, 5, 2], 1);
        let x = tape.constant(t.clone());
        let (y, plan) = chunk_split(&mut tape, x, Direction::Horizontal, 4, 2).unwrap();
        assert_eq!(plan.num_chunks, 7);
        assert_eq!(plan.pad_len, 3);
        assert!(plan.pad_len < plan.chunk_len);
        assert_eq!(plan.num_chunks * plan.chunk_len, 25 + plan.pad_len);
        let back = chunk_merge(&mut tape, y, &plan).unwrap();
        assert_eq!(tape.value(back), &t);
    }

    #[test]
    fn horizontal_roundtrip_is_bitwise() {
        let mut tape = Tape::<f64>::new();
        let t = random(&[14, 14, 8], 2);
        let x = tape.constant(t.clone());
        let (y, plan) = chunk_split(&mut tape, x, Direction::Horizontal, 28, 4).unwrap();
        let back = chunk_merge(&mut tape, y, &plan).unwrap();
        assert_eq!(tape.value(back), &t);
    }

    #[test]
    fn vertical_roundtrip_non_square() {
        let mut tape = Tape::<f64>::new();
        let t = random(&[8, 4, 2], 3);
        let x = tape.constant(t.clone());
        let (y, plan) = chunk_split(&mut tape, x, Direction::Vertical, 4, 2).unwrap();
        let back = chunk_merge(&mut tape, y, &plan).unwrap();
        assert_eq!(tape.value(back), &t);
    }

    #[test]
    fn temporal_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let t = random(&[3, 4, 5, 6], 4);
        let x = tape.constant(t.clone());
        let (y, plan) = chunk_split(&mut tape, x, Direction::Temporal, 5, 3).unwrap();
        assert_eq!(plan.num_chunks, 12);
        let back = chunk_merge(&mut tape, y, &plan).unwrap();
        assert_eq!(tape.value(back), &t);
    }

    /// Independent index-map oracle: entry (chunk i, group k, slot l*D+d) of
    /// the horizontal split must equal token i*L+l (row-major) channel k*D+d.
    #[test]
    fn horizontal_layout_matches_index_oracle() {
        let (h, w, c, l, d) = (3, 5, 4, 4, 2);
        let mut tape = Tape::<f64>::new();
        let t = random(&[h, w, c], 5);
        let x = tape.constant(t.clone());
        let (y, plan) = chunk_split(&mut tape, x, Direction::Horizontal, l, d).unwrap();
        let yd = tape.value(y);
        for i in 0..plan.num_chunks {
            for k in 0..c / d {
                for pos in 0..l {
                    for dd in 0..d {
                        let tok = i * l + pos;
                        let expect = if tok < h * w {
                            t.at(&[tok / w, tok % w, k * d + dd])
                        } else {
                            0.0
                        };
                        assert_eq!(yd.at(&[i, k, pos * d + dd]), expect);
                    }
                }
            }
        }
    }

    /// Same oracle for the vertical scan: token index runs down columns.
    #[test]
    fn vertical_layout_matches_index_oracle() {
        let (h, w, c, l, d) = (4, 3, 2, 3, 1);
        let mut tape = Tape::<f64>::new();
        let t = random(&[h, w, c], 6);
        let x = tape.constant(t.clone());
        let (y, plan) = chunk_split(&mut tape, x, Direction::Vertical, l, d).unwrap();
        let yd = tape.value(y);
        for i in 0..plan.num_chunks {
            for k in 0..c / d {
                for pos in 0..l {
                    for dd in 0..d {
                        let tok = i * l + pos;
                        let expect = if tok < h * w {
                            t.at(&[tok % h, tok / h, k * d + dd])
                        } else {
                            0.0
                        };
                        assert_eq!(yd.at(&[i, k, pos * d + dd]), expect);
                    }
                }
            }
        }
    }

    #[test]
    fn split_rejects_bad_group_width() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[4, 4, 6]));
        let err = chunk_split(&mut tape, x, Direction::Horizontal, 4, 4);
        assert!(matches!(err, Err(Error::Divisibility(_))));
    }

    #[test]
    fn split_rejects_oversized_chunk() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[200, 200, 512]));
        let err = chunk_split(&mut tape, x, Direction::Horizontal, 40000, 512);
        assert!(matches!(err, Err(Error::Divisibility(_))));
    }
}
