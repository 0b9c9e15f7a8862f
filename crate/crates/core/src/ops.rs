//! Forward and backward kernels for the primitive layers.
//!
//! Every kernel is a pure function of its inputs. Convolution work is split
//! across threads by output plane (forward), by filter (weight gradient) and
//! by sample (input gradient); each output element is always accumulated in
//! the same order, so results do not depend on the thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Probability floor applied before taking the log in [`cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-12;

/// Output extent of a convolution or pooling window under the floor convention.
pub fn conv_out_extent(extent: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let geometry = || Error::Geometry {
        extent,
        kernel,
        stride,
        pad,
    };
    if kernel == 0 || stride == 0 || extent + 2 * pad < kernel {
        return Err(geometry());
    }
    Ok((extent + 2 * pad - kernel) / stride + 1)
}

/// Range of output positions `o` whose input index `o * stride + k - pad`
/// lands inside `0..extent`.
#[inline]
fn valid_range(k: usize, stride: usize, pad: usize, extent: usize, out: usize) -> (usize, usize) {
    // o * stride + k >= pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // o * stride + k - pad <= extent - 1
    let hi = if extent + pad > k {
        ((extent + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn check_conv(x: Shape, weight: Shape, bias_len: usize, stride: usize, pad: usize) -> Result<Shape> {
    if x.c != weight.c {
        return Err(Error::dim(format!(
            "conv input has {} channels but weights expect {}",
            x.c, weight.c
        )));
    }
    if bias_len != weight.n {
        return Err(Error::dim(format!(
            "conv bias has {bias_len} entries for {} filters",
            weight.n
        )));
    }
    let oh = conv_out_extent(x.h, weight.h, stride, pad)?;
    let ow = conv_out_extent(x.w, weight.w, stride, pad)?;
    Ok(Shape::new(x.n, weight.n, oh, ow))
}

/// 2-D cross-correlation. `weight` is `(out_ch, in_ch, kh, kw)`.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &[T],
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = weight.shape();
    let ys = check_conv(xs, ws, bias.len(), stride, pad)?;
    let (oh, ow) = (ys.h, ys.w);
    let xd = x.data();
    let wd = weight.data();
    let mut out = vec![T::zero(); ys.len()];

    out.par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(plane, dst)| {
            let n = plane / ys.c;
            let oc = plane % ys.c;
            dst.iter_mut().for_each(|v| *v = bias[oc]);
            for ic in 0..xs.c {
                let src = &xd[xs.index(n, ic, 0, 0)..][..xs.plane()];
                for ky in 0..ws.h {
                    let (y0, y1) = valid_range(ky, stride, pad, xs.h, oh);
                    for kx in 0..ws.w {
                        let wv = wd[ws.index(oc, ic, ky, kx)];
                        let (x0, x1) = valid_range(kx, stride, pad, xs.w, ow);
                        for oy in y0..y1 {
                            let iy = oy * stride + ky - pad;
                            let row = &src[iy * xs.w..][..xs.w];
                            let drow = &mut dst[oy * ow..][..ow];
                            for ox in x0..x1 {
                                drow[ox] = drow[ox] + wv * row[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        });
    Tensor::from_vec(ys, out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    upstream: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads<T>> {
    let xs = x.shape();
    let ws = weight.shape();
    let ys = check_conv(xs, ws, ws.n, stride, pad)?;
    if upstream.shape() != ys {
        return Err(Error::dim(format!(
            "conv upstream gradient {} does not match output {ys}",
            upstream.shape()
        )));
    }
    let (oh, ow) = (ys.h, ys.w);
    let xd = x.data();
    let wd = weight.data();
    let dy = upstream.data();

    let bias: Vec<T> = (0..ys.c)
        .map(|oc| {
            (0..ys.n).fold(T::zero(), |acc, n| {
                acc + dy[ys.index(n, oc, 0, 0)..][..oh * ow]
                    .iter()
                    .fold(T::zero(), |a, &v| a + v)
            })
        })
        .collect();

    let per_filter = ws.c * ws.h * ws.w;
    let mut dw = vec![T::zero(); ws.len()];
    dw.par_chunks_mut(per_filter)
        .enumerate()
        .for_each(|(oc, dst)| {
            for n in 0..xs.n {
                let g = &dy[ys.index(n, oc, 0, 0)..][..oh * ow];
                for ic in 0..xs.c {
                    let src = &xd[xs.index(n, ic, 0, 0)..][..xs.plane()];
                    for ky in 0..ws.h {
                        let (y0, y1) = valid_range(ky, stride, pad, xs.h, oh);
                        for kx in 0..ws.w {
                            let (x0, x1) = valid_range(kx, stride, pad, xs.w, ow);
                            let mut acc = T::zero();
                            for oy in y0..y1 {
                                let iy = oy * stride + ky - pad;
                                let row = &src[iy * xs.w..][..xs.w];
                                let grow = &g[oy * ow..][..ow];
                                for ox in x0..x1 {
                                    acc = acc + grow[ox] * row[ox * stride + kx - pad];
                                }
                            }
                            let slot = &mut dst[(ic * ws.h + ky) * ws.w + kx];
                            *slot = *slot + acc;
                        }
                    }
                }
            }
        });

    let mut dx = vec![T::zero(); xs.len()];
    dx.par_chunks_mut(xs.sample_len())
        .enumerate()
        .for_each(|(n, dst)| {
            for oc in 0..ys.c {
                let g = &dy[ys.index(n, oc, 0, 0)..][..oh * ow];
                for ic in 0..xs.c {
                    let plane = &mut dst[ic * xs.plane()..][..xs.plane()];
                    for ky in 0..ws.h {
                        let (y0, y1) = valid_range(ky, stride, pad, xs.h, oh);
                        for kx in 0..ws.w {
                            let wv = wd[ws.index(oc, ic, ky, kx)];
                            let (x0, x1) = valid_range(kx, stride, pad, xs.w, ow);
                            for oy in y0..y1 {
                                let iy = oy * stride + ky - pad;
                                let row = &mut plane[iy * xs.w..][..xs.w];
                                let grow = &g[oy * ow..][..ow];
                                for ox in x0..x1 {
                                    let ix = ox * stride + kx - pad;
                                    row[ix] = row[ix] + wv * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
        });

    Ok(ConvGrads {
        input: Tensor::from_vec(xs, dx)?,
        weight: Tensor::from_vec(ws, dw)?,
        bias,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone)]
pub struct Pooled<T> {
    pub output: Tensor<T>,
    /// Flat input index chosen by each max-pool window; empty for average pooling.
    pub argmax: Vec<usize>,
}

pub fn pool_out_shape(x: Shape, kernel: usize, stride: usize, pad: usize) -> Result<Shape> {
    if pad >= kernel {
        return Err(Error::Geometry {
            extent: x.h.min(x.w),
            kernel,
            stride,
            pad,
        });
    }
    let oh = conv_out_extent(x.h, kernel, stride, pad)?;
    let ow = conv_out_extent(x.w, kernel, stride, pad)?;
    Ok(Shape::new(x.n, x.c, oh, ow))
}

/// Square-window pooling. Average pooling divides by the full window area,
/// padding included. Max pooling ignores padded cells and keeps the first
/// maximum found in row-major window order.
pub fn pool2d<T: Real>(
    x: &Tensor<T>,
    kind: PoolKind,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<Pooled<T>> {
    let xs = x.shape();
    let ys = pool_out_shape(xs, kernel, stride, pad)?;
    let xd = x.data();
    let mut out = Vec::with_capacity(ys.len());
    let mut argmax = Vec::new();
    if kind == PoolKind::Max {
        argmax.reserve(ys.len());
    }
    let area = T::of((kernel * kernel) as f64);
    for n in 0..xs.n {
        for c in 0..xs.c {
            let base = xs.index(n, c, 0, 0);
            for oy in 0..ys.h {
                let (r0, r1) = window(oy, stride, pad, kernel, xs.h);
                for ox in 0..ys.w {
                    let (c0, c1) = window(ox, stride, pad, kernel, xs.w);
                    match kind {
                        PoolKind::Max => {
                            let mut best = base + r0 * xs.w + c0;
                            for iy in r0..r1 {
                                for ix in c0..c1 {
                                    let i = base + iy * xs.w + ix;
                                    if xd[i] > xd[best] {
                                        best = i;
                                    }
                                }
                            }
                            out.push(xd[best]);
                            argmax.push(best);
                        }
                        PoolKind::Avg => {
                            let mut acc = T::zero();
                            for iy in r0..r1 {
                                for ix in c0..c1 {
                                    acc = acc + xd[base + iy * xs.w + ix];
                                }
                            }
                            out.push(acc / area);
                        }
                    }
                }
            }
        }
    }
    Ok(Pooled {
        output: Tensor::from_vec(ys, out)?,
        argmax,
    })
}

/// Clipped input range `[lo, hi)` covered by window `o`.
#[inline]
fn window(o: usize, stride: usize, pad: usize, kernel: usize, extent: usize) -> (usize, usize) {
    let start = (o * stride) as isize - pad as isize;
    let lo = start.max(0) as usize;
    let hi = ((start + kernel as isize).max(0) as usize).min(extent);
    (lo, hi)
}

/// `argmax` is [`Pooled::argmax`] from the forward pass (ignored for
/// average pooling).
pub fn pool2d_backward<T: Real>(
    input_shape: Shape,
    argmax: &[usize],
    upstream: &Tensor<T>,
    kind: PoolKind,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let ys = pool_out_shape(input_shape, kernel, stride, pad)?;
    if upstream.shape() != ys {
        return Err(Error::dim(format!(
            "pool upstream gradient {} does not match output {ys}",
            upstream.shape()
        )));
    }
    let dy = upstream.data();
    let mut dx = vec![T::zero(); input_shape.len()];
    match kind {
        PoolKind::Max => {
            if argmax.len() != dy.len() {
                return Err(Error::dim("max-pool backward needs the forward argmax"));
            }
            for (&src, &g) in argmax.iter().zip(dy) {
                dx[src] = dx[src] + g;
            }
        }
        PoolKind::Avg => {
            let area = T::of((kernel * kernel) as f64);
            for n in 0..ys.n {
                for c in 0..ys.c {
                    let base = input_shape.index(n, c, 0, 0);
                    for oy in 0..ys.h {
                        let (r0, r1) = window(oy, stride, pad, kernel, input_shape.h);
                        for ox in 0..ys.w {
                            let (c0, c1) = window(ox, stride, pad, kernel, input_shape.w);
                            let g = dy[ys.index(n, c, oy, ox)] / area;
                            for iy in r0..r1 {
                                for ix in c0..c1 {
                                    let i = base + iy * input_shape.w + ix;
                                    dx[i] = dx[i] + g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(input_shape, dx)
}

/// Mean over each channel plane; output is `(n, c, 1, 1)`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let xs = x.shape();
    let plane = xs.plane();
    let count = T::of(plane as f64);
    let out = x
        .data()
        .chunks(plane)
        .map(|p| p.iter().fold(T::zero(), |a, &v| a + v) / count)
        .collect();
    Tensor::from_vec(Shape::new(xs.n, xs.c, 1, 1), out).expect("plane count matches")
}

pub fn global_avg_pool_backward<T: Real>(input_shape: Shape, upstream: &Tensor<T>) -> Tensor<T> {
    let plane = input_shape.plane();
    let count = T::of(plane as f64);
    let mut dx = Vec::with_capacity(input_shape.len());
    for &g in upstream.data() {
        dx.extend(std::iter::repeat_n(g / count, plane));
    }
    Tensor::from_vec(input_shape, dx).expect("plane count matches")
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    map(x, |v| if v > T::zero() { v } else { T::zero() })
}

/// Passes gradient only where the forward input was strictly positive.
pub fn relu_backward<T: Real>(x: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    zip(x, upstream, |v, g| if v > T::zero() { g } else { T::zero() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Train,
    Infer,
}

/// Inverted-dropout multipliers: `0` for dropped elements, `1 / (1 - rate)`
/// for survivors. `stream` separates independent masks drawn from one seed.
pub fn dropout_mask<T: Real>(len: usize, rate: f64, seed: u64, stream: u64) -> Result<Vec<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Domain(format!("dropout rate {rate} outside [0, 1)")));
    }
    let keep = T::of(1.0 / (1.0 - rate));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    Ok((0..len)
        .map(|_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect())
}

/// Returns the output and the multiplier mask (all ones in inference mode).
pub fn dropout<T: Real>(
    x: &Tensor<T>,
    rate: f64,
    mode: Mode,
    seed: u64,
    stream: u64,
) -> Result<(Tensor<T>, Vec<T>)> {
    let mask = match mode {
        Mode::Infer => {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Domain(format!("dropout rate {rate} outside [0, 1)")));
            }
            vec![T::one(); x.len()]
        }
        Mode::Train => dropout_mask(x.len(), rate, seed, stream)?,
    };
    let out = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Ok((Tensor::from_vec(x.shape(), out)?, mask))
}

pub fn dropout_backward<T: Real>(mask: &[T], upstream: &Tensor<T>) -> Tensor<T> {
    let dx = upstream.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
    Tensor::from_vec(upstream.shape(), dx).expect("mask matches upstream")
}

/// Channel concatenation, `a`'s channels first.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    concat_all(&[a, b])
}

pub fn concat_all<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::dim("concat needs at least one input"))?
        .shape();
    for p in parts {
        let s = p.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::dim(format!("cannot concat {s} with {first}")));
        }
    }
    let channels = parts.iter().map(|p| p.shape().c).sum();
    let out_shape = Shape::new(first.n, channels, first.h, first.w);
    let mut out = Vec::with_capacity(out_shape.len());
    for n in 0..first.n {
        for p in parts {
            let len = p.shape().sample_len();
            out.extend_from_slice(&p.data()[n * len..][..len]);
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Splits a concat gradient back into pieces with the given channel counts.
pub fn concat_backward<T: Real>(upstream: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>> {
    let s = upstream.shape();
    if channels.iter().sum::<usize>() != s.c {
        return Err(Error::dim(format!(
            "concat split {channels:?} does not sum to {} channels",
            s.c
        )));
    }
    let mut parts: Vec<Vec<T>> = channels
        .iter()
        .map(|&c| Vec::with_capacity(c * s.plane() * s.n))
        .collect();
    let g = upstream.data();
    let mut offset = 0;
    for _ in 0..s.n {
        for (part, &c) in parts.iter_mut().zip(channels) {
            let len = c * s.plane();
            part.extend_from_slice(&g[offset..offset + len]);
            offset += len;
        }
    }
    parts
        .into_iter()
        .zip(channels)
        .map(|(data, &c)| Tensor::from_vec(Shape::new(s.n, c, s.h, s.w), data))
        .collect()
}

pub fn add_elementwise<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip(a, b, |x, y| x + y)
}

/// Per-channel affine map `v * gamma[c] + beta[c]`.
pub fn scale_channels<T: Real>(x: &Tensor<T>, gamma: &[T], beta: &[T]) -> Result<Tensor<T>> {
    let s = x.shape();
    if gamma.len() != s.c || beta.len() != s.c {
        return Err(Error::dim(format!(
            "scale parameters have {}/{} entries for {} channels",
            gamma.len(),
            beta.len(),
            s.c
        )));
    }
    let plane = s.plane();
    let out = x
        .data()
        .chunks(plane)
        .enumerate()
        .flat_map(|(i, p)| {
            let c = i % s.c;
            p.iter().map(move |&v| v * gamma[c] + beta[c])
        })
        .collect();
    Tensor::from_vec(s, out)
}

#[derive(Debug, Clone)]
pub struct ScaleGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub fn scale_channels_backward<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    upstream: &Tensor<T>,
) -> Result<ScaleGrads<T>> {
    let s = x.shape();
    if upstream.shape() != s || gamma.len() != s.c {
        return Err(Error::dim("scale backward shape mismatch"));
    }
    let plane = s.plane();
    let mut dg = vec![T::zero(); s.c];
    let mut db = vec![T::zero(); s.c];
    let mut dx = Vec::with_capacity(s.len());
    for (i, (xp, gp)) in x.data().chunks(plane).zip(upstream.data().chunks(plane)).enumerate() {
        let c = i % s.c;
        for (&v, &g) in xp.iter().zip(gp) {
            dg[c] = dg[c] + g * v;
            db[c] = db[c] + g;
            dx.push(g * gamma[c]);
        }
    }
    Ok(ScaleGrads {
        input: Tensor::from_vec(s, dx)?,
        gamma: dg,
        beta: db,
    })
}

/// Numerically stable softmax (the maximum logit is subtracted first).
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum = exps.iter().fold(T::zero(), |a, &b| a + b);
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-ln p[label]`, with `p` clamped at [`PROB_FLOOR`].
pub fn cross_entropy<T: Real>(probs: &[T], label: usize) -> Result<T> {
    let p = probs.get(label).ok_or(Error::Index {
        label,
        classes: probs.len(),
    })?;
    Ok(-p.max(T::of(PROB_FLOOR)).ln())
}

/// Gradient of the fused softmax + cross-entropy loss w.r.t. the logits.
pub fn softmax_xent_grad<T: Real>(probs: &[T], label: usize) -> Result<Vec<T>> {
    if label >= probs.len() {
        return Err(Error::Index {
            label,
            classes: probs.len(),
        });
    }
    Ok(probs
        .iter()
        .enumerate()
        .map(|(k, &p)| if k == label { p - T::one() } else { p })
        .collect())
}

/// Row-wise softmax of an `(n, K, 1, 1)` logit tensor.
pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let s = logits.shape();
    if s.h != 1 || s.w != 1 {
        return Err(Error::dim(format!("softmax expects (n, K, 1, 1) logits, got {s}")));
    }
    let out = logits.data().chunks(s.c).flat_map(softmax).collect();
    Tensor::from_vec(s, out)
}

fn map<T: Real>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::from_vec(x.shape(), x.data().iter().map(|&v| f(v)).collect()).expect("same length")
}

fn zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "elementwise shapes differ: {} vs {}",
            a.shape(),
            b.shape()
        )));
    }
    let out = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, v).unwrap()
    }

    fn one_to_nine() -> Tensor<f64> {
        t(Shape::new(1, 1, 3, 3), (1..=9).map(f64::from).collect())
    }

    #[test]
    fn conv_out_extent_examples() {
        assert_eq!(conv_out_extent(227, 3, 2, 0).unwrap(), 113);
        assert_eq!(conv_out_extent(13, 3, 2, 0).unwrap(), 6);
        assert_eq!(conv_out_extent(2, 3, 1, 1).unwrap(), 2);
        assert!(matches!(
            conv_out_extent(2, 3, 1, 0),
            Err(Error::Geometry { .. })
        ));
        assert!(conv_out_extent(5, 3, 0, 0).is_err());
    }

    #[test]
    fn conv_sums_ones() {
        let x = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        let w = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        let y = conv2d(&x, &w, &[0.0], 1, 0).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn unit_1x1_conv_is_identity() {
        let x = one_to_nine();
        let w = Tensor::full(Shape::new(1, 1, 1, 1), 1.0);
        let y = conv2d(&x, &w, &[0.0], 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_geometry_and_channel_errors() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 3, 227, 227));
        let w = Tensor::<f32>::zeros(Shape::new(2, 3, 3, 3));
        assert_eq!(conv2d(&x, &w, &[0.0; 2], 2, 0).unwrap().shape().h, 113);

        let bad = Tensor::<f32>::zeros(Shape::new(2, 4, 3, 3));
        assert!(matches!(conv2d(&x, &bad, &[0.0; 2], 1, 0), Err(Error::Dimension(_))));

        let tiny = Tensor::<f32>::zeros(Shape::new(1, 3, 2, 2));
        assert!(matches!(conv2d(&tiny, &w, &[0.0; 2], 1, 0), Err(Error::Geometry { .. })));
    }

    #[test]
    fn padded_conv_matches_hand_computation() {
        // 2x2 input, 3x3 all-ones kernel, pad 1: every output sees all four inputs.
        let x = t(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]);
        let w = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        let y = conv2d(&x, &w, &[0.5], 1, 1).unwrap();
        assert_eq!(y.data(), &[10.5; 4]);
    }

    #[test]
    fn pooling_examples() {
        let x = one_to_nine();
        let m = pool2d(&x, PoolKind::Max, 3, 2, 0).unwrap();
        assert_eq!(m.output.data(), &[9.0]);
        assert_eq!(m.argmax, vec![8]);
        let a = pool2d(&x, PoolKind::Avg, 3, 1, 0).unwrap();
        assert_eq!(a.output.data(), &[5.0]);

        let big = Tensor::<f32>::zeros(Shape::new(1, 1, 56, 56));
        assert_eq!(pool2d(&big, PoolKind::Max, 3, 2, 0).unwrap().output.shape().h, 27);
    }

    #[test]
    fn max_pool_ties_pick_first() {
        let x = t(Shape::new(1, 1, 2, 2), vec![3.0, 3.0, 3.0, 3.0]);
        let p = pool2d(&x, PoolKind::Max, 2, 1, 0).unwrap();
        assert_eq!(p.argmax, vec![0]);
        let g = pool2d_backward(
            x.shape(),
            &p.argmax,
            &Tensor::full(p.output.shape(), 1.0),
            PoolKind::Max,
            2,
            1,
            0,
        )
        .unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn pool_rejects_pad_not_below_kernel() {
        let x = one_to_nine();
        assert!(pool2d(&x, PoolKind::Max, 2, 1, 2).is_err());
    }

    #[test]
    fn padded_max_pool_ignores_padding() {
        let x = t(Shape::new(1, 1, 2, 2), vec![-1.0, -2.0, -3.0, -4.0]);
        let p = pool2d(&x, PoolKind::Max, 3, 2, 1).unwrap();
        assert_eq!(p.output.data(), &[-1.0]);
    }

    #[test]
    fn gap_examples() {
        let c = Tensor::full(Shape::new(1, 1, 4, 4), 7.0);
        assert_eq!(global_avg_pool(&c).data(), &[7.0]);
        let q = t(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(global_avg_pool(&q).data(), &[2.5]);
        let one = t(Shape::new(2, 3, 1, 1), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(global_avg_pool(&one), one);
    }

    #[test]
    fn relu_examples() {
        let x = t(Shape::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &Tensor::full(x.shape(), 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
        let pos = t(Shape::new(1, 1, 1, 2), vec![0.5, 3.0]);
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn dropout_modes() {
        let x = one_to_nine();
        assert_eq!(dropout(&x, 0.0, Mode::Train, 1, 0).unwrap().0, x);
        assert_eq!(dropout(&x, 0.5, Mode::Infer, 1, 0).unwrap().0, x);
        assert!(dropout(&x, 1.0, Mode::Train, 1, 0).is_err());
        let a = dropout(&x, 0.5, Mode::Train, 9, 3).unwrap();
        let b = dropout(&x, 0.5, Mode::Train, 9, 3).unwrap();
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn dropout_preserves_mean() {
        // Monte Carlo over 2^17 elements; the standard error of the mean is ~0.003.
        let n = 1 << 17;
        let x = Tensor::<f64>::full(Shape::new(1, 1, 1, n), 1.0);
        let (y, _) = dropout(&x, 0.5, Mode::Train, 42, 0).unwrap();
        let mean = y.data().iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn concat_examples() {
        let a = Tensor::<f32>::full(Shape::new(2, 64, 3, 3), 1.0);
        let b = Tensor::<f32>::full(Shape::new(2, 64, 3, 3), 2.0);
        let y = concat_channels(&a, &b).unwrap();
        assert_eq!(y.shape().c, 128);
        assert_eq!(y.at(1, 63, 2, 2), 1.0);
        assert_eq!(y.at(1, 64, 0, 0), 2.0);
        assert_eq!(concat_all(&[&a]).unwrap(), a);

        let parts = concat_backward(&y, &[64, 64]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);

        let wrong = Tensor::<f32>::zeros(Shape::new(2, 1, 2, 3));
        assert!(concat_channels(&a, &wrong).is_err());
    }

    #[test]
    fn add_examples() {
        let x = one_to_nine();
        let zero = Tensor::zeros(x.shape());
        assert_eq!(add_elementwise(&zero, &x).unwrap(), x);
        let y = t(x.shape(), (0..9).map(|v| v as f64 * 0.3).collect());
        assert_eq!(add_elementwise(&x, &y).unwrap(), add_elementwise(&y, &x).unwrap());
        assert!(add_elementwise(&x, &Tensor::zeros(Shape::new(1, 1, 1, 9))).is_err());
    }

    #[test]
    fn scale_examples() {
        let x = t(Shape::new(1, 2, 1, 2), vec![1.0, -2.0, 3.0, 4.0]);
        assert_eq!(scale_channels(&x, &[1.0, 1.0], &[0.0, 0.0]).unwrap(), x);
        assert_eq!(
            scale_channels(&x, &[2.0, 2.0], &[0.0, 0.0]).unwrap().data(),
            &[2.0, -4.0, 6.0, 8.0]
        );
        assert_eq!(
            scale_channels(&x, &[0.0, 0.0], &[5.0, 5.0]).unwrap().data(),
            &[5.0; 4]
        );
        assert!(scale_channels(&x, &[1.0], &[0.0]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.3f64; 4]);
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let z = [1.0f64, -2.0, 0.5];
        let shifted: Vec<f64> = z.iter().map(|v| v + 100.0).collect();
        let (a, b) = (softmax(&z), softmax(&shifted));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }

        let p = softmax(&[10.0f64, 0.0]);
        let expected = 1.0 / (1.0 + (-10.0f64).exp());
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_examples() {
        let p = [0.25f64; 4];
        assert!((cross_entropy(&p, 0).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&[1.0f64, 0.0], 0).unwrap().abs() < 1e-15);
        assert_eq!(softmax_xent_grad(&p, 0).unwrap(), vec![-0.75, 0.25, 0.25, 0.25]);
        assert!(matches!(cross_entropy(&p, 4), Err(Error::Index { .. })));
        // clamped, not infinite
        assert!(cross_entropy(&[1.0f64, 0.0], 1).unwrap().is_finite());
    }
}
