//! Plain (non-differentiable) tensor ops used by the frozen feature
//! extractor, plus shared numeric conventions.
//!
//! Feature maps are channels-first `[C, H, W]`; token matrices are `[T, D]`.
//! Bilinear resampling uses half-pixel centers (the `align_corners = false`
//! convention), and the same convention is reused by the differentiable ops
//! in [`crate::tape`] so forward paths agree wherever both exist.

use ndarray::{Array1, Array2, Array3, Array4};

/// The output slice (on the `[oh]`/`[ow]` axis) and matching input slice
/// (on the `[h]`/`[w]` axis) a kernel offset touches under zero padding:
/// positions where `o*stride + k - pad` stays inside `[0, len)`.
fn conv_span(len: usize, out_len: usize, k: usize, stride: usize, pad: usize) -> Option<(usize, usize, usize)> {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    if len + pad < k + 1 {
        return None;
    }
    let hi = ((len - 1 + pad - k) / stride).min(out_len - 1);
    if lo > hi {
        return None;
    }
    Some((lo, hi, lo * stride + k - pad))
}

/// Gather conv patches into a `[Ci*kh*kw, oh*ow]` matrix (zero padding).
pub(crate) fn im2col(
    x: &Array3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (ci, h, wd) = x.dim();
    let mut cols = Array2::<f64>::zeros((ci * kh * kw, oh * ow));
    for c in 0..ci {
        for ky in 0..kh {
            let Some((oy_lo, oy_hi, iy0)) = conv_span(h, oh, ky, stride, pad) else {
                continue;
            };
            for kx in 0..kw {
                let Some((ox_lo, ox_hi, ix0)) = conv_span(wd, ow, kx, stride, pad) else {
                    continue;
                };
                let r = (c * kh + ky) * kw + kx;
                let mut row = cols
                    .row_mut(r)
                    .into_shape_with_order((oh, ow))
                    .expect("row of a standard-layout matrix reshapes");
                let iy1 = iy0 + (oy_hi - oy_lo) * stride;
                let ix1 = ix0 + (ox_hi - ox_lo) * stride;
                let src = x.slice(ndarray::s![c, iy0..=iy1;stride, ix0..=ix1;stride]);
                row.slice_mut(ndarray::s![oy_lo..=oy_hi, ox_lo..=ox_hi])
                    .assign(&src);
            }
        }
    }
    cols
}

/// Scatter-add the im2col adjoint back onto the input grid: the transpose
/// of [`im2col`], accumulating where kernel windows overlap.
pub(crate) fn col2im_add(
    dcols: &Array2<f64>,
    ci: usize,
    h: usize,
    wd: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array3<f64> {
    let mut dx = Array3::<f64>::zeros((ci, h, wd));
    for c in 0..ci {
        for ky in 0..kh {
            let Some((oy_lo, oy_hi, iy0)) = conv_span(h, oh, ky, stride, pad) else {
                continue;
            };
            for kx in 0..kw {
                let Some((ox_lo, ox_hi, ix0)) = conv_span(wd, ow, kx, stride, pad) else {
                    continue;
                };
                let r = (c * kh + ky) * kw + kx;
                let row = dcols
                    .row(r)
                    .into_shape_with_order((oh, ow))
                    .expect("row of a standard-layout matrix reshapes");
                let iy1 = iy0 + (oy_hi - oy_lo) * stride;
                let ix1 = ix0 + (ox_hi - ox_lo) * stride;
                let mut dst = dx.slice_mut(ndarray::s![c, iy0..=iy1;stride, ix0..=ix1;stride]);
                dst += &row.slice(ndarray::s![oy_lo..=oy_hi, ox_lo..=ox_hi]);
            }
        }
    }
    dx
}

/// 2D convolution with zero padding, computed as im2col + matrix multiply.
/// `x: [Ci, H, W]`, `w: [Co, Ci, kh, kw]`.
pub fn conv2d(
    x: &Array3<f64>,
    w: &Array4<f64>,
    b: Option<&Array1<f64>>,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let (ci, h, wd) = x.dim();
    let (co, ci_w, kh, kw) = w.dim();
    assert_eq!(ci, ci_w, "conv2d: input channels {ci} vs weight {ci_w}");
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let cols = im2col(x, kh, kw, stride, pad, oh, ow);
    let wmat = w
        .to_owned()
        .into_shape_with_order((co, ci * kh * kw))
        .expect("weight reshapes to a matrix");
    let mut out = wmat.dot(&cols);
    if let Some(b) = b {
        for (mut row, &bias) in out.rows_mut().into_iter().zip(b.iter()) {
            row += bias;
        }
    }
    out.into_shape_with_order((co, oh, ow))
        .expect("conv output reshapes to [Co, oh, ow]")
}

pub fn relu3(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Row-major dense layer: `x: [T, Din]`, `w: [Dout, Din]` -> `[T, Dout]`.
pub fn linear(x: &Array2<f64>, w: &Array2<f64>, b: Option<&Array1<f64>>) -> Array2<f64> {
    let mut out = x.dot(&w.t());
    if let Some(b) = b {
        out += b;
    }
    out
}

/// Numerically safe softmax over each row.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s: f64 = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Per-row layer normalization with affine parameters.
pub fn layer_norm_rows(
    x: &Array2<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
    eps: f64,
) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + eps).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gamma[j] + beta[j];
        }
    }
    out
}

/// Single-head scaled dot-product attention.
/// `q: [Tq, D]`, `k: [Tk, D]`, `v: [Tk, Dv]` -> `[Tq, Dv]`.
pub fn attention(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> Array2<f64> {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let logits = q.dot(&k.t()) * scale;
    softmax_rows(&logits).dot(v)
}

fn src_coord(dst: usize, scale: f64) -> f64 {
    (dst as f64 + 0.5) * scale - 0.5
}

/// Bilinear resize of a `[C, H, W]` map with half-pixel centers and edge
/// clamping. Identity when the size is unchanged.
pub fn bilinear_resize(x: &Array3<f64>, oh: usize, ow: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    if h == oh && w == ow {
        return x.clone();
    }
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let mut out = Array3::<f64>::zeros((c, oh, ow));
    for oy in 0..oh {
        let fy = src_coord(oy, sy).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..ow {
            let fx = src_coord(ox, sx).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ch in 0..c {
                let top = x[[ch, y0, x0]] * (1.0 - wx) + x[[ch, y0, x1]] * wx;
                let bot = x[[ch, y1, x0]] * (1.0 - wx) + x[[ch, y1, x1]] * wx;
                out[[ch, oy, ox]] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

/// Average pooling over contiguous chunks that shrinks `[T, D]` tokens to
/// `out_t` rows (the 1D "adaptive" scheme: chunk `i` covers
/// `[i*T/out_t, (i+1)*T/out_t)`).
pub fn adaptive_avg_pool_tokens(x: &Array2<f64>, out_t: usize) -> Array2<f64> {
    let (t, d) = x.dim();
    assert!(t >= out_t && out_t > 0, "cannot pool {t} tokens down to {out_t}");
    let mut out = Array2::<f64>::zeros((out_t, d));
    for i in 0..out_t {
        let start = i * t / out_t;
        let end = (i + 1) * t / out_t;
        let n = (end - start) as f64;
        for j in 0..d {
            let mut acc = 0.0;
            for r in start..end {
                acc += x[[r, j]];
            }
            out[[i, j]] = acc / n;
        }
    }
    out
}

/// Fixed 2D sinusoidal positional embedding, `[(h*w), d]`, row-major over
/// the grid. Half the channels encode y, half encode x.
pub fn pos_embed_2d(h: usize, w: usize, d: usize) -> Array2<f64> {
    assert!(d >= 4 && d % 4 == 0, "pos_embed_2d needs d divisible by 4, got {d}");
    let quarter = d / 4;
    let mut out = Array2::<f64>::zeros((h * w, d));
    for y in 0..h {
        for x in 0..w {
            let row = y * w + x;
            for i in 0..quarter {
                let freq = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                out[[row, 2 * i]] = (y as f64 * freq).sin();
                out[[row, 2 * i + 1]] = (y as f64 * freq).cos();
                out[[row, 2 * quarter + 2 * i]] = (x as f64 * freq).sin();
                out[[row, 2 * quarter + 2 * i + 1]] = (x as f64 * freq).cos();
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array3, Array4};

    #[test]
    fn conv2d_identity_kernel() {
        let x = Array3::from_shape_fn((1, 3, 3), |(_, y, xx)| (y * 3 + xx) as f64);
        let mut w = Array4::<f64>::zeros((1, 1, 1, 1));
        w[[0, 0, 0, 0]] = 1.0;
        let y = conv2d(&x, &w, None, 1, 0);
        assert_eq!(x, y);
    }

    #[test]
    fn conv2d_known_sum() {
        // 2x2 all-ones kernel over a 2x2 all-ones image with pad 0 = 4.
        let x = Array3::from_elem((1, 2, 2), 1.0);
        let w = Array4::from_elem((1, 1, 2, 2), 1.0);
        let y = conv2d(&x, &w, Some(&arr1(&[0.5])), 1, 0);
        assert_eq!(y.dim(), (1, 1, 1));
        assert_eq!(y[[0, 0, 0]], 4.5);
    }

    #[test]
    fn conv2d_stride_and_padding_shapes() {
        let x = Array3::<f64>::zeros((3, 9, 8));
        let w = Array4::<f64>::zeros((5, 3, 3, 3));
        let y = conv2d(&x, &w, None, 2, 1);
        assert_eq!(y.dim(), (5, 5, 4));
    }

    /// Direct sliding-window convolution, kept only as a test oracle for the
    /// im2col path.
    fn conv2d_reference(
        x: &Array3<f64>,
        w: &Array4<f64>,
        b: Option<&Array1<f64>>,
        stride: usize,
        pad: usize,
    ) -> Array3<f64> {
        let (ci, h, wd) = x.dim();
        let (co, _, kh, kw) = w.dim();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Array3::<f64>::zeros((co, oh, ow));
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b[o]);
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = oy * stride + ky;
                                let ix = ox * stride + kx;
                                if iy >= pad && iy - pad < h && ix >= pad && ix - pad < wd {
                                    acc += x[[c, iy - pad, ix - pad]] * w[[o, c, ky, kx]];
                                }
                            }
                        }
                    }
                    out[[o, oy, ox]] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_sliding_window_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(20_240_301);
        for case in 0..40 {
            let ci: usize = rng.gen_range(1..4);
            let co: usize = rng.gen_range(1..4);
            let kh: usize = rng.gen_range(1..4);
            let kw: usize = rng.gen_range(1..4);
            let stride: usize = rng.gen_range(1..3);
            let pad: usize = rng.gen_range(0..3);
            // Keep the padded input at least as large as the kernel.
            let h = rng.gen_range(kh.saturating_sub(2 * pad).max(1)..kh.max(2) + 6);
            let wd = rng.gen_range(kw.saturating_sub(2 * pad).max(1)..kw.max(2) + 6);
            if h + 2 * pad < kh || wd + 2 * pad < kw {
                continue;
            }
            let x = Array3::from_shape_fn((ci, h, wd), |_| rng.gen_range(-2.0..2.0));
            let w = Array4::from_shape_fn((co, ci, kh, kw), |_| rng.gen_range(-1.0..1.0));
            let b = Array1::from_shape_fn(co, |_| rng.gen_range(-0.5..0.5));
            let fast = conv2d(&x, &w, Some(&b), stride, pad);
            let slow = conv2d_reference(&x, &w, Some(&b), stride, pad);
            assert_eq!(fast.dim(), slow.dim(), "case {case}");
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!(
                    (a - b).abs() <= 1e-12 * (1.0 + b.abs()),
                    "case {case}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn softmax_rows_normalizes() {
        let x = arr2(&[[0.0, 1.0, 2.0], [5.0, 5.0, 5.0]]);
        let s = softmax_rows(&x);
        for row in s.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!((s[[1, 0]] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn bilinear_resize_identity_and_constant() {
        let x = Array3::from_shape_fn((2, 4, 4), |(c, y, xx)| (c + y + xx) as f64);
        assert_eq!(bilinear_resize(&x, 4, 4), x);
        let c = Array3::from_elem((1, 3, 3), 2.5);
        let up = bilinear_resize(&c, 7, 5);
        for &v in up.iter() {
            assert!((v - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_resize_2x_midpoints() {
        let x = Array3::from_shape_vec((1, 1, 2), vec![0.0, 1.0]).unwrap();
        let up = bilinear_resize(&x, 1, 4);
        // Half-pixel centers: src coords -0.25, 0.25, 0.75, 1.25 clamp to [0,1].
        let want = [0.0, 0.25, 0.75, 1.0];
        for (a, b) in up.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn adaptive_pool_means_chunks() {
        let x = arr2(&[[0.0], [2.0], [4.0], [6.0]]);
        let p = adaptive_avg_pool_tokens(&x, 2);
        assert_eq!(p, arr2(&[[1.0], [5.0]]));
    }

    #[test]
    fn attention_uniform_when_keys_equal() {
        let q = arr2(&[[1.0, 0.0]]);
        let k = arr2(&[[0.5, 0.5], [0.5, 0.5]]);
        let v = arr2(&[[1.0, 3.0], [3.0, 1.0]]);
        let o = attention(&q, &k, &v);
        assert!((o[[0, 0]] - 2.0).abs() < 1e-12);
        assert!((o[[0, 1]] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let x = arr2(&[[1.0, 2.0, 3.0, 4.0]]);
        let g = arr1(&[1.0, 1.0, 1.0, 1.0]);
        let b = arr1(&[0.0, 0.0, 0.0, 0.0]);
        let y = layer_norm_rows(&x, &g, &b, 1e-6);
        let mean: f64 = y.row(0).sum() / 4.0;
        let var: f64 = y.row(0).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn pos_embed_rows_distinct() {
        let pe = pos_embed_2d(3, 3, 8);
        assert_eq!(pe.dim(), (9, 8));
        let a = pe.row(0);
        let b = pe.row(4);
        let diff: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-3);
    }
}
