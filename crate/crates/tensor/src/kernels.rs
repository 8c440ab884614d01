//! Raw array compute kernels: im2col-based convolutions, transposed
//! convolutions, weight gradients and pooling. All kernels are deterministic:
//! parallel sections write disjoint output regions and every floating point
//! reduction runs in a fixed sequential order.

use ndarray::{s, Array2, Array4, ArrayView2, ArrayView3, ArrayView4, Axis};
use rayon::prelude::*;

/// Output side of a convolution along one spatial dimension.
pub fn conv_out_side(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(
        input + 2 * pad >= kernel,
        "conv: input side {input} with pad {pad} smaller than kernel {kernel}"
    );
    (input + 2 * pad - kernel) / stride + 1
}

/// Output side of a transposed convolution along one spatial dimension.
pub fn convt_out_side(input: usize, kernel: usize, stride: usize, pad: usize, out_pad: usize) -> usize {
    assert!(out_pad < stride, "convt: output padding must be < stride");
    (input - 1) * stride + kernel + out_pad - 2 * pad
}

/// Gathers convolution patches for output positions `lo..hi` (row-major over
/// the output plane) into a `(C*kh*kw, hi-lo)` matrix.
fn im2col_range(
    x: &ArrayView3<f32>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    wo: usize,
    lo: usize,
    hi: usize,
) -> Array2<f32> {
    let (c, h, w) = x.dim();
    let xs = x.as_slice().expect("im2col: input must be contiguous");
    let cols = hi - lo;
    let mut out = Array2::<f32>::zeros((c * kh * kw, cols));
    {
        let os = out.as_slice_mut().unwrap();
        for ci in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    let dst_base = row * cols;
                    for (p, pos) in (lo..hi).enumerate() {
                        let oh = pos / wo;
                        let ow = pos % wo;
                        let ih = (oh * stride + ki) as isize - pad as isize;
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if ih >= 0 && (ih as usize) < h && iw >= 0 && (iw as usize) < w {
                            os[dst_base + p] = xs[(ci * h + ih as usize) * w + iw as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Target number of parallel tasks; a small multiple of the pool size keeps
/// both cores busy without oversplitting the GEMMs.
fn task_count() -> usize {
    rayon::current_num_threads().max(1) * 4
}

/// 2-D convolution over a `(N, Ci, H, W)` batch with weights `(Co, Ci, kh, kw)`.
pub fn conv2d(x: &ArrayView4<f32>, w: &ArrayView4<f32>, stride: usize, pad: usize) -> Array4<f32> {
    let (n, ci, h, win) = x.dim();
    let (co, wci, kh, kw) = w.dim();
    assert_eq!(ci, wci, "conv2d: input channels {ci} != weight channels {wci}");
    let ho = conv_out_side(h, kh, stride, pad);
    let wo = conv_out_side(win, kw, stride, pad);
    let plane = ho * wo;

    let w2 = w
        .to_shape((co, ci * kh * kw))
        .expect("conv2d: weight reshape");
    let w2 = w2.view();

    // Split (sample, output-position range) into tasks so a batch of one large
    // image still parallelizes.
    let chunks_per_sample = (task_count() / n).max(1).min(plane);
    let chunk = plane.div_ceil(chunks_per_sample);
    let mut tasks = Vec::new();
    for ni in 0..n {
        let mut lo = 0;
        while lo < plane {
            let hi = (lo + chunk).min(plane);
            tasks.push((ni, lo, hi));
            lo = hi;
        }
    }

    let pieces: Vec<(usize, usize, Array2<f32>)> = tasks
        .into_par_iter()
        .map(|(ni, lo, hi)| {
            let cols = im2col_range(&x.index_axis(Axis(0), ni), kh, kw, stride, pad, wo, lo, hi);
            (ni, lo, w2.dot(&cols))
        })
        .collect();

    let mut y = Array4::<f32>::zeros((n, co, ho, wo));
    {
        let ys = y.as_slice_mut().unwrap();
        for (ni, lo, piece) in &pieces {
            let len = piece.dim().1;
            let ps = piece.as_slice().unwrap();
            for c in 0..co {
                let dst = (ni * co + c) * plane + lo;
                ys[dst..dst + len].copy_from_slice(&ps[c * len..(c + 1) * len]);
            }
        }
    }
    y
}

/// Transposed 2-D convolution (the adjoint of [`conv2d`]) over `(N, Ci, H, W)`
/// with weights in `(Ci, Co, kh, kw)` layout.
///
/// Implemented as a stride-1 convolution of the zero-stuffed input with the
/// spatially flipped, channel-swapped weight, which is arithmetically the
/// exact adjoint map.
pub fn conv_transpose2d(
    x: &ArrayView4<f32>,
    w: &ArrayView4<f32>,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Array4<f32> {
    let (n, ci, h, win) = x.dim();
    let (wci, co, kh, kw) = w.dim();
    assert_eq!(ci, wci, "conv_transpose2d: input channels {ci} != weight channels {wci}");
    assert!(pad < kh && pad < kw, "conv_transpose2d: pad must be < kernel");

    let hs = (h - 1) * stride + 1 + out_pad;
    let ws = (win - 1) * stride + 1 + out_pad;
    let mut stuffed = Array4::<f32>::zeros((n, ci, hs, ws));
    stuffed
        .slice_mut(s![.., .., ..hs - out_pad;stride, ..ws - out_pad;stride])
        .assign(x);

    // (Ci, Co, kh, kw) -> (Co, Ci, kh, kw) with both spatial axes flipped.
    let mut wf = Array4::<f32>::zeros((co, ci, kh, kw));
    for a in 0..ci {
        for b in 0..co {
            for i in 0..kh {
                for j in 0..kw {
                    wf[[b, a, kh - 1 - i, kw - 1 - j]] = w[[a, b, i, j]];
                }
            }
        }
    }

    conv2d(&stuffed.view(), &wf.view(), 1, kh - 1 - pad)
}

/// Gradient of a convolution's weights: correlates the conv input with the
/// output gradient. `x` is `(N, Ci, H, W)`, `gy` is `(N, Co, Ho, Wo)`; the
/// result has the conv weight shape `(Co, Ci, kh, kw)`.
pub fn conv_wgrad(
    x: &ArrayView4<f32>,
    gy: &ArrayView4<f32>,
    stride: usize,
    pad: usize,
    kh: usize,
    kw: usize,
) -> Array4<f32> {
    let (n, ci, _h, _w) = x.dim();
    let (gn, co, ho, wo) = gy.dim();
    assert_eq!(n, gn, "conv_wgrad: batch mismatch");
    let plane = ho * wo;

    // Per-sample partial gradients into disjoint buffers, then a sequential
    // sum keeps the reduction order fixed.
    let partials: Vec<Array2<f32>> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let cols = im2col_range(&x.index_axis(Axis(0), ni), kh, kw, stride, pad, wo, 0, plane);
            let g2 = gy
                .index_axis(Axis(0), ni)
                .to_shape((co, plane))
                .expect("conv_wgrad: grad reshape")
                .to_owned();
            g2.dot(&cols.t())
        })
        .collect();

    let mut acc = Array2::<f32>::zeros((co, ci * kh * kw));
    for p in &partials {
        acc += p;
    }
    acc.into_shape_with_order((co, ci, kh, kw)).unwrap()
}

/// 2x2 max pooling with stride 2. Input sides must be even.
pub fn maxpool2(x: &ArrayView4<f32>) -> Array4<f32> {
    let (n, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "maxpool2: odd input side {h}x{w}");
    let mut y = Array4::<f32>::zeros((n, c, h / 2, w / 2));
    let xs = x.as_slice().expect("maxpool2: input must be contiguous");
    let ys = y.as_slice_mut().unwrap();
    let planes = n * c;
    ys.par_chunks_mut((h / 2) * (w / 2))
        .zip(xs.par_chunks(h * w))
        .take(planes)
        .for_each(|(yp, xp)| {
            for oh in 0..h / 2 {
                for ow in 0..w / 2 {
                    let i0 = (2 * oh) * w + 2 * ow;
                    let i1 = i0 + w;
                    yp[oh * (w / 2) + ow] = xs_max(xp[i0], xp[i0 + 1], xp[i1], xp[i1 + 1]);
                }
            }
        });
    y
}

#[inline]
fn xs_max(a: f32, b: f32, c: f32, d: f32) -> f32 {
    a.max(b).max(c.max(d))
}

/// Row-major matrix product helper used by the dense layers.
pub fn matmul(a: &ArrayView2<f32>, b: &ArrayView2<f32>) -> Array2<f32> {
    a.dot(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array};

    fn conv2d_naive(x: &Array4<f32>, w: &Array4<f32>, stride: usize, pad: usize) -> Array4<f32> {
        let (n, ci, h, win) = x.dim();
        let (co, _, kh, kw) = w.dim();
        let ho = conv_out_side(h, kh, stride, pad);
        let wo = conv_out_side(win, kw, stride, pad);
        let mut y = Array4::<f32>::zeros((n, co, ho, wo));
        for ni in 0..n {
            for c in 0..co {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = 0.0;
                        for cc in 0..ci {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let ih = (oh * stride + ki) as isize - pad as isize;
                                    let iw = (ow * stride + kj) as isize - pad as isize;
                                    if ih >= 0 && (ih as usize) < h && iw >= 0 && (iw as usize) < win {
                                        acc += x[[ni, cc, ih as usize, iw as usize]]
                                            * w[[c, cc, ki, kj]];
                                    }
                                }
                            }
                        }
                        y[[ni, c, oh, ow]] = acc;
                    }
                }
            }
        }
        y
    }

    fn ramp4(shape: (usize, usize, usize, usize)) -> Array4<f32> {
        let len = shape.0 * shape.1 * shape.2 * shape.3;
        Array::from_iter((0..len).map(|i| ((i * 37 % 23) as f32 - 11.0) / 7.0))
            .into_shape_with_order(shape)
            .unwrap()
    }

    #[test]
    fn conv2d_matches_naive() {
        for &(stride, pad) in &[(1usize, 1usize), (2, 1), (1, 0), (2, 0)] {
            let x = ramp4((2, 3, 6, 5));
            let w = ramp4((4, 3, 3, 3));
            let fast = conv2d(&x.view(), &w.view(), stride, pad);
            let slow = conv2d_naive(&x, &w, stride, pad);
            assert_eq!(fast.dim(), slow.dim());
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-4, "stride={stride} pad={pad}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <gy, conv(x, w)> == <convT(gy, w), x> for every geometry we use.
        for &(stride, pad, k) in &[(1usize, 1usize, 3usize), (2, 1, 3), (2, 1, 4)] {
            let x = ramp4((2, 3, 8, 8));
            let w = ramp4((5, 3, k, k));
            let y = conv2d(&x.view(), &w.view(), stride, pad);
            let gy = ramp4(y.dim());
            let lhs: f32 = (&gy * &y).sum();
            let out_pad = 8 - convt_out_side(y.dim().2, k, stride, pad, 0);
            let gx = conv_transpose2d(&gy.view(), &w.view(), stride, pad, out_pad);
            assert_eq!(gx.dim(), x.dim());
            let rhs: f32 = (&gx * &x).sum();
            assert!((lhs - rhs).abs() < 1e-2 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn conv_wgrad_matches_finite_difference_direction() {
        let x = ramp4((2, 2, 5, 5));
        let mut w = ramp4((3, 2, 3, 3));
        let gy = ramp4((2, 3, 3, 3));
        let dw = conv_wgrad(&x.view(), &gy.view(), 2, 1, 3, 3);
        assert_eq!(dw.dim(), w.dim());
        // Directional derivative of <gy, conv(x, w)> along one coordinate.
        let h = 1e-3;
        let idx = [1usize, 0, 2, 1];
        w[idx] += h;
        let up: f32 = (&gy * &conv2d(&x.view(), &w.view(), 2, 1)).sum();
        w[idx] -= 2.0 * h;
        let dn: f32 = (&gy * &conv2d(&x.view(), &w.view(), 2, 1)).sum();
        let fd = (up - dn) / (2.0 * h);
        assert!((dw[idx] - fd).abs() < 1e-2, "{} vs {}", dw[idx], fd);
    }

    #[test]
    fn maxpool_halves_and_picks_max() {
        let x = arr2(&[[1.0f32, 2.0, 5.0, 0.0], [3.0, 4.0, -1.0, -2.0]])
            .into_shape_with_order((1, 1, 2, 4))
            .unwrap();
        let y = maxpool2(&x.view());
        assert_eq!(y.dim(), (1, 1, 1, 2));
        assert_eq!(y[[0, 0, 0, 0]], 4.0);
        assert_eq!(y[[0, 0, 0, 1]], 5.0);
    }

    #[test]
    fn convt_output_padding_controls_side() {
        let x = ramp4((1, 2, 4, 4));
        let w = ramp4((2, 3, 3, 3));
        let y0 = conv_transpose2d(&x.view(), &w.view(), 2, 1, 0);
        let y1 = conv_transpose2d(&x.view(), &w.view(), 2, 1, 1);
        assert_eq!(y0.dim(), (1, 3, 7, 7));
        assert_eq!(y1.dim(), (1, 3, 8, 8));
    }
}
