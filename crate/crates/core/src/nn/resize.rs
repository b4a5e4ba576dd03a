//! Separable spatial resampling of channel-last grids.

use crate::error::{Error, Result};
use crate::nn::tensor::FeatureMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ResizeKind {
    /// Bilinear, align-corners false, source coordinates clamped at the border.
    Bilinear,
    /// Adaptive average pooling (box filter); used for downsampling.
    Area,
}

#[derive(Clone, Copy, Debug)]
enum AxisTap {
    /// `a + t * (b - a)`; the lerp form keeps constants exactly constant.
    Lerp(usize, usize, f32),
    Mean(usize, usize),
}

fn axis_taps(kind: ResizeKind, src: usize, dst: usize) -> Vec<AxisTap> {
    match kind {
        ResizeKind::Bilinear => {
            let scale = src as f64 / dst as f64;
            (0..dst)
                .map(|i| {
                    let coord = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
                    let i0 = (coord.floor() as usize).min(src - 1);
                    let i1 = (i0 + 1).min(src - 1);
                    let t = if i1 == i0 { 0.0 } else { (coord - i0 as f64) as f32 };
                    AxisTap::Lerp(i0, i1, t)
                })
                .collect()
        }
        ResizeKind::Area => (0..dst)
            .map(|i| {
                let start = i * src / dst;
                let end = ((i + 1) * src).div_ceil(dst);
                AxisTap::Mean(start, end.max(start + 1))
            })
            .collect(),
    }
}

/// Resample along one axis of a `[outer, len, inner]` view.
fn resample_axis(
    input: &[f32],
    outer: usize,
    src: usize,
    inner: usize,
    taps: &[AxisTap],
) -> Vec<f32> {
    let dst = taps.len();
    let mut out = vec![0.0f32; outer * dst * inner];
    for o in 0..outer {
        let in_base = o * src * inner;
        let out_base = o * dst * inner;
        for (j, tap) in taps.iter().enumerate() {
            let dst_row = &mut out[out_base + j * inner..out_base + (j + 1) * inner];
            match *tap {
                AxisTap::Lerp(a, b, t) => {
                    let ra = &input[in_base + a * inner..in_base + (a + 1) * inner];
                    let rb = &input[in_base + b * inner..in_base + (b + 1) * inner];
                    if t == 0.0 {
                        dst_row.copy_from_slice(ra);
                    } else {
                        for ((d, &va), &vb) in dst_row.iter_mut().zip(ra).zip(rb) {
                            *d = va + t * (vb - va);
                        }
                    }
                }
                AxisTap::Mean(s, e) => {
                    for i in s..e {
                        let r = &input[in_base + i * inner..in_base + (i + 1) * inner];
                        for (d, &v) in dst_row.iter_mut().zip(r) {
                            *d += v;
                        }
                    }
                    let inv = 1.0 / (e - s) as f32;
                    for d in dst_row.iter_mut() {
                        *d *= inv;
                    }
                }
            }
        }
    }
    out
}

/// Transpose of [`resample_axis`].
fn resample_axis_adjoint(
    grad: &[f32],
    outer: usize,
    src: usize,
    inner: usize,
    taps: &[AxisTap],
) -> Vec<f32> {
    let dst = taps.len();
    let mut out = vec![0.0f32; outer * src * inner];
    for o in 0..outer {
        let g_base = o * dst * inner;
        let in_base = o * src * inner;
        for (j, tap) in taps.iter().enumerate() {
            let g_row = &grad[g_base + j * inner..g_base + (j + 1) * inner];
            match *tap {
                AxisTap::Lerp(a, b, t) => {
                    for (c, &g) in g_row.iter().enumerate() {
                        out[in_base + a * inner + c] += (1.0 - t) * g;
                        if t != 0.0 {
                            out[in_base + b * inner + c] += t * g;
                        }
                    }
                }
                AxisTap::Mean(s, e) => {
                    let inv = 1.0 / (e - s) as f32;
                    for i in s..e {
                        for (c, &g) in g_row.iter().enumerate() {
                            out[in_base + i * inner + c] += g * inv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Resize a batch of `[n, src_h, src_w, c]` grids.
pub fn resize_batch(
    input: &[f32],
    n: usize,
    src: (usize, usize),
    dst: (usize, usize),
    channels: usize,
    kind: ResizeKind,
) -> Vec<f32> {
    if src == dst {
        return input.to_vec();
    }
    let (sh, sw) = src;
    let (dh, dw) = dst;
    // width pass: view as [n*sh, sw, c]
    let wide = resample_axis(input, n * sh, sw, channels, &axis_taps(kind, sw, dw));
    // height pass: view as [n, sh, dw*c]
    resample_axis(&wide, n, sh, dw * channels, &axis_taps(kind, sh, dh))
}

/// Gradient of [`resize_batch`] with respect to its input.
pub fn resize_batch_adjoint(
    grad: &[f32],
    n: usize,
    src: (usize, usize),
    dst: (usize, usize),
    channels: usize,
    kind: ResizeKind,
) -> Vec<f32> {
    if src == dst {
        return grad.to_vec();
    }
    let (sh, sw) = src;
    let (dh, dw) = dst;
    let tall = resample_axis_adjoint(grad, n, sh, dw * channels, &axis_taps(kind, sh, dh));
    resample_axis_adjoint(&tall, n * sh, sw, channels, &axis_taps(kind, sw, dw))
}

pub fn resize(map: &FeatureMap, h: usize, w: usize, kind: ResizeKind) -> Result<FeatureMap> {
    if h == 0 || w == 0 {
        return Err(Error::shape(
            "resize",
            format!("target size {h}x{w} must be at least 1x1"),
        ));
    }
    let (sh, sw, c) = map.dims();
    if (sh, sw) == (h, w) {
        return Ok(map.clone());
    }
    let data = resize_batch(map.data(), 1, (sh, sw), (h, w), c, kind);
    FeatureMap::new(h, w, c, data)
}

/// Bilinear (align-corners false) resampling; exact identity at equal size.
pub fn resize_bilinear(map: &FeatureMap, h: usize, w: usize) -> Result<FeatureMap> {
    resize(map, h, w, ResizeKind::Bilinear)
}

/// Box-filter downsampling.
pub fn resize_area(map: &FeatureMap, h: usize, w: usize) -> Result<FeatureMap> {
    resize(map, h, w, ResizeKind::Area)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> FeatureMap {
        let data = (0..h * w * c).map(|i| (i as f32 * 0.37).sin()).collect();
        FeatureMap::new(h, w, c, data).unwrap()
    }

    #[test]
    fn one_by_one_upsamples_to_constant() {
        let m = FeatureMap::constant(1, 1, &[0.3, -1.25]);
        let up = resize_bilinear(&m, 8, 8).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(up.site(y, x), &[0.3, -1.25]);
            }
        }
    }

    #[test]
    fn same_size_is_bit_identical() {
        let m = ramp(5, 7, 3);
        assert_eq!(resize_bilinear(&m, 5, 7).unwrap(), m);
        assert_eq!(resize_area(&m, 5, 7).unwrap(), m);
    }

    #[test]
    fn constants_stay_constant() {
        let m = FeatureMap::constant(4, 4, &[0.1, 0.7, -0.3]);
        for &(h, w) in &[(1, 1), (3, 5), (8, 8), (32, 32), (2, 9)] {
            let r = resize_bilinear(&m, h, w).unwrap();
            assert!(r.data().chunks(3).all(|s| s == [0.1, 0.7, -0.3]), "{h}x{w}");
        }
    }

    #[test]
    fn factor_two_bilinear_downsample_is_box_average() {
        let m = ramp(4, 4, 1);
        let d = resize_bilinear(&m, 2, 2).unwrap();
        let a = resize_area(&m, 2, 2).unwrap();
        assert!(d.max_abs_diff(&a) < 1e-6);
    }

    #[test]
    fn area_to_one_is_mean() {
        let m = ramp(8, 8, 2);
        let d = resize_area(&m, 1, 1).unwrap();
        for c in 0..2 {
            let mean: f32 = m.data().iter().skip(c).step_by(2).sum::<f32>() / 64.0;
            assert!((d.data()[c] - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn adjoint_matches_dot_product_identity() {
        for kind in [ResizeKind::Bilinear, ResizeKind::Area] {
            for &(src, dst) in &[((4, 4), (8, 8)), ((8, 8), (2, 2)), ((3, 5), (7, 2))] {
                let x: Vec<f32> = (0..2 * src.0 * src.1 * 3)
                    .map(|i| ((i * 7 % 13) as f32 - 6.0) * 0.1)
                    .collect();
                let y: Vec<f32> = (0..2 * dst.0 * dst.1 * 3)
                    .map(|i| ((i * 5 % 11) as f32 - 5.0) * 0.1)
                    .collect();
                let ax = resize_batch(&x, 2, src, dst, 3, kind);
                let aty = resize_batch_adjoint(&y, 2, src, dst, 3, kind);
                let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| (a * b) as f64).sum();
                let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| (a * b) as f64).sum();
                assert!((lhs - rhs).abs() < 1e-4, "{kind:?} {src:?}->{dst:?}");
            }
        }
    }

    #[test]
    fn zero_target_is_rejected() {
        assert!(resize_bilinear(&ramp(2, 2, 1), 0, 3).is_err());
    }
}
