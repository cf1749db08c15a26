//! Brute-force reference implementations used as ground truth.
//!
//! Everything here works on raw f64 slices with hand-written index
//! arithmetic: no tape, no reshape/permute machinery, no shared helpers
//! with the fast paths it validates. Runtime is O(n^4)-ish by design; keep
//! extents small (these run on grids of at most ~16 per axis in tests).

/// Gate logit layout: one row of `channels` logits per pathway, pathways
/// ordered horizontal, vertical, channel.
pub struct NaiveMorphFcArgs<'a> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub chunk_len: usize,
    pub group_width: usize,
    pub w_h: &'a [f64],
    pub w_v: &'a [f64],
    /// (weight `[C*C]`, bias `[C]`)
    pub channel: Option<(&'a [f64], &'a [f64])>,
    pub gate: Option<&'a [f64]>,
}

/// Literal per-chunk transcription of the spatial mixer: gather each chunk
/// with explicit index math, multiply by the dense matrix with a scalar
/// triple loop, scatter back, then combine pathways.
pub fn naive_morphfc(x: &[f64], args: &NaiveMorphFcArgs) -> Vec<f64> {
    let (h, w, c) = (args.height, args.width, args.channels);
    let (l, d) = (args.chunk_len, args.group_width);
    assert_eq!(x.len(), h * w * c);
    assert!(d > 0 && c % d == 0, "group width must divide channels");
    let ld = l * d;
    let n_tok = h * w;
    let num_chunks = (n_tok + l - 1) / l;

    // token index -> flat offset of its channel 0, per scan direction
    let horizontal = |g: usize| (g / w) * w * c + (g % w) * c;
    let vertical = |g: usize| (g % h) * w * c + (g / h) * c;

    let mut paths: Vec<Vec<f64>> = Vec::new();
    for (scan, weight) in [
        (&horizontal as &dyn Fn(usize) -> usize, args.w_h),
        (&vertical as &dyn Fn(usize) -> usize, args.w_v),
    ] {
        let mut out = vec![0.0; h * w * c];
        let mut chunk = vec![0.0; ld];
        let mut mixed = vec![0.0; ld];
        for i in 0..num_chunks {
            for k in 0..c / d {
                for pos in 0..l {
                    let g = i * l + pos;
                    for dd in 0..d {
                        chunk[pos * d + dd] = if g < n_tok {
                            x[scan(g) + k * d + dd]
                        } else {
                            0.0 // zero padding beyond the last token
                        };
                    }
                }
                for o in 0..ld {
                    let mut s = 0.0;
                    for inp in 0..ld {
                        s += chunk[inp] * weight[inp * ld + o];
                    }
                    mixed[o] = s;
                }
                for pos in 0..l {
                    let g = i * l + pos;
                    if g >= n_tok {
                        continue; // padded slots are cropped
                    }
                    for dd in 0..d {
                        out[scan(g) + k * d + dd] = mixed[pos * d + dd];
                    }
                }
            }
        }
        paths.push(out);
    }

    if let Some((w_c, b_c)) = args.channel {
        let mut out = vec![0.0; h * w * c];
        for tok in 0..n_tok {
            for o in 0..c {
                let mut s = b_c[o];
                for inp in 0..c {
                    s += x[tok * c + inp] * w_c[inp * c + o];
                }
                out[tok * c + o] = s;
            }
        }
        paths.push(out);
    }

    combine(&paths, c, args.gate)
}

/// Literal per-position transcription of the temporal mixer.
pub fn naive_morphfc_t(
    x: &[f64],
    height: usize,
    width: usize,
    frames: usize,
    channels: usize,
    group_width: usize,
    w_t: &[f64],
) -> Vec<f64> {
    let (h, w, t, c, d) = (height, width, frames, channels, group_width);
    assert_eq!(x.len(), h * w * t * c);
    assert!(d > 0 && c % d == 0);
    let td = t * d;
    let mut out = vec![0.0; x.len()];
    let mut chunk = vec![0.0; td];
    for pos in 0..h * w {
        for k in 0..c / d {
            for f in 0..t {
                for dd in 0..d {
                    chunk[f * d + dd] = x[(pos * t + f) * c + k * d + dd];
                }
            }
            for o in 0..td {
                let mut s = 0.0;
                for inp in 0..td {
                    s += chunk[inp] * w_t[inp * td + o];
                }
                out[(pos * t + o / d) * c + k * d + o % d] = s;
            }
        }
    }
    out
}

fn combine(paths: &[Vec<f64>], channels: usize, gate: Option<&[f64]>) -> Vec<f64> {
    let n = paths[0].len();
    let mut out = vec![0.0; n];
    match gate {
        None => {
            for path in paths {
                for (o, v) in out.iter_mut().zip(path) {
                    *o += v;
                }
            }
        }
        Some(logits) => {
            let p = paths.len();
            assert_eq!(logits.len(), p * channels);
            for ch in 0..channels {
                let mut weights = vec![0.0; p];
                let mut mx = f64::NEG_INFINITY;
                for (i, wslot) in weights.iter_mut().enumerate() {
                    *wslot = logits[i * channels + ch];
                    mx = mx.max(*wslot);
                }
                let mut denom = 0.0;
                for wslot in weights.iter_mut() {
                    *wslot = (*wslot - mx).exp();
                    denom += *wslot;
                }
                for wslot in weights.iter_mut() {
                    *wslot /= denom;
                }
                for e in (ch..n).step_by(channels) {
                    let mut s = 0.0;
                    for (i, path) in paths.iter().enumerate() {
                        s += weights[i] * path[e];
                    }
                    out[e] = s;
                }
            }
        }
    }
    out
}

/// Plain single-channel 1-D convolution with zero padding on both sides:
/// `out[t] = sum_j kernel[j] * x_pad[t*stride + j]`.
pub fn conv1d(x: &[f64], kernel: &[f64], stride: usize, zero_pad: usize) -> Vec<f64> {
    assert!(stride > 0);
    let padded = x.len() + 2 * zero_pad;
    assert!(padded >= kernel.len());
    let out_len = (padded - kernel.len()) / stride + 1;
    let fetch = |i: usize| -> f64 {
        if i < zero_pad || i >= zero_pad + x.len() {
            0.0
        } else {
            x[i - zero_pad]
        }
    };
    (0..out_len)
        .map(|t| {
            kernel
                .iter()
                .enumerate()
                .map(|(j, k)| k * fetch(t * stride + j))
                .sum()
        })
        .collect()
}

/// Standard grouped 1-D convolution over a token sequence `[N, C]` with
/// position-shared weights, sliding overlap, and zero padding.
///
/// `weights` holds one kernel per group, group-major, each laid out as
/// `[kernel_len, group_ch, group_ch]` with index `(j, ci, co)`:
/// `out[t, g*Cg+co] = sum_{j, ci} w[g][j][ci][co] * x_pad[t*stride+j, g*Cg+ci]`.
pub fn grouped_conv1d_reference(
    x: &[f64],
    n_tokens: usize,
    channels: usize,
    kernel_len: usize,
    groups: usize,
    stride: usize,
    zero_pad: usize,
    weights: &[f64],
) -> Vec<f64> {
    assert_eq!(x.len(), n_tokens * channels);
    assert!(groups > 0 && channels % groups == 0);
    assert!(stride > 0);
    let cg = channels / groups;
    assert_eq!(weights.len(), groups * kernel_len * cg * cg);
    let padded = n_tokens + 2 * zero_pad;
    assert!(padded >= kernel_len);
    let out_tokens = (padded - kernel_len) / stride + 1;
    let fetch = |tok: usize, ch: usize| -> f64 {
        if tok < zero_pad || tok >= zero_pad + n_tokens {
            0.0
        } else {
            x[(tok - zero_pad) * channels + ch]
        }
    };
    let mut out = vec![0.0; out_tokens * channels];
    for t in 0..out_tokens {
        for g in 0..groups {
            let w_g = &weights[g * kernel_len * cg * cg..(g + 1) * kernel_len * cg * cg];
            for co in 0..cg {
                let mut s = 0.0;
                for j in 0..kernel_len {
                    for ci in 0..cg {
                        s += w_g[(j * cg + ci) * cg + co] * fetch(t * stride + j, g * cg + ci);
                    }
                }
                out[t * channels + g * cg + co] = s;
            }
        }
    }
    out
}

/// Apply a block-diagonal matrix (every diagonal block equal to `block`,
/// `[ld, ld]`) to a flat sequence whose length is a multiple of `ld`. This
/// is the dense-matrix reading of a stride-L, no-padding, position-distinct
/// "convolution": each chunk of the sequence gets its own full linear map.
pub fn block_diag_apply(seq: &[f64], block: &[f64], ld: usize) -> Vec<f64> {
    assert!(ld > 0 && seq.len() % ld == 0);
    assert_eq!(block.len(), ld * ld);
    let mut out = vec![0.0; seq.len()];
    for chunk in 0..seq.len() / ld {
        for o in 0..ld {
            let mut s = 0.0;
            for inp in 0..ld {
                s += seq[chunk * ld + inp] * block[inp * ld + o];
            }
            out[chunk * ld + o] = s;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv1d_definition_case() {
        // 1x3 input, kernel 1x3, stride 1, zero-pad 1.
        let x = [1.0, 2.0, 3.0];
        let w = [0.5, 1.0, -1.0];
        let out = conv1d(&x, &w, 1, 1);
        assert_eq!(out.len(), 3);
        // out[t] = 0.5*x[t-1] + 1.0*x[t] - 1.0*x[t+1], zero outside
        assert_eq!(out[0], 0.5 * 0.0 + 1.0 * 1.0 - 1.0 * 2.0);
        assert_eq!(out[1], 0.5 * 1.0 + 1.0 * 2.0 - 1.0 * 3.0);
        assert_eq!(out[2], 0.5 * 2.0 + 1.0 * 3.0 - 1.0 * 0.0);
    }

    #[test]
    fn identity_weights_triple_input() {
        let (h, w, c, l, d) = (2, 3, 2, 3, 1);
        let x: Vec<f64> = (0..h * w * c).map(|v| v as f64 * 0.25 - 1.0).collect();
        let ld = l * d;
        let mut eye_ld = vec![0.0; ld * ld];
        for i in 0..ld {
            eye_ld[i * ld + i] = 1.0;
        }
        let mut eye_c = vec![0.0; c * c];
        for i in 0..c {
            eye_c[i * c + i] = 1.0;
        }
        let bias = vec![0.0; c];
        let out = naive_morphfc(
            &x,
            &NaiveMorphFcArgs {
                height: h,
                width: w,
                channels: c,
                chunk_len: l,
                group_width: d,
                w_h: &eye_ld,
                w_v: &eye_ld,
                channel: Some((&eye_c, &bias)),
                gate: None,
            },
        );
        for (o, i) in out.iter().zip(&x) {
            assert!((o - 3.0 * i).abs() < 1e-15);
        }
    }

    #[test]
    fn temporal_identity() {
        let (h, w, t, c, d) = (2, 2, 3, 4, 2);
        let x: Vec<f64> = (0..h * w * t * c).map(|v| (v as f64).sin()).collect();
        let td = t * d;
        let mut eye = vec![0.0; td * td];
        for i in 0..td {
            eye[i * td + i] = 1.0;
        }
        let out = naive_morphfc_t(&x, h, w, t, c, d, &eye);
        assert_eq!(out, x);
    }

    #[test]
    fn single_frame_temporal_equals_group_mixing() {
        // With one frame the chunk is just a channel group, so the mixer
        // reduces to a per-position, per-group dense map.
        let (h, w, c, d) = (2, 2, 4, 2);
        let x: Vec<f64> = (0..h * w * c).map(|v| (v as f64 * 0.37).cos()).collect();
        let w_t = [1.0, 2.0, 3.0, 4.0]; // d*d matrix
        let out = naive_morphfc_t(&x, h, w, 1, c, d, &w_t);
        for pos in 0..h * w {
            for k in 0..c / d {
                for o in 0..d {
                    let mut s = 0.0;
                    for inp in 0..d {
                        s += x[pos * c + k * d + inp] * w_t[inp * d + o];
                    }
                    assert!((out[pos * c + k * d + o] - s).abs() < 1e-15);
                }
            }
        }
    }
}
