//! Bilinear upsampling and sub-pixel sampling of feature maps.
//!
//! Both use the align-corners convention: output corner pixels coincide with
//! input corner pixels, so values at source grid points are reproduced
//! exactly and affine fields survive resampling unchanged. Out-of-bounds
//! sample coordinates are clamped to the valid pixel rectangle.

use super::{FeatureMap, Tensor};
use crate::error::{Error, Result};

/// Align-corners source coordinate of output position `i`.
#[inline]
fn src_coord(i: usize, src_extent: usize, dst_extent: usize) -> f64 {
    if dst_extent <= 1 || src_extent <= 1 {
        0.0
    } else {
        i as f64 * (src_extent - 1) as f64 / (dst_extent - 1) as f64
    }
}

/// Interpolated value at fractional pixel `(u, v)`, clamped to the map.
#[inline]
fn sample_one(f: &FeatureMap, u: f64, v: f64, c: usize) -> f64 {
    let u = u.clamp(0.0, (f.width() - 1) as f64);
    let v = v.clamp(0.0, (f.height() - 1) as f64);
    let x0 = u.floor() as usize;
    let y0 = v.floor() as usize;
    let x1 = (x0 + 1).min(f.width() - 1);
    let y1 = (y0 + 1).min(f.height() - 1);
    let fx = u - x0 as f64;
    let fy = v - y0 as f64;
    (1.0 - fx) * (1.0 - fy) * f.at(x0, y0, c)
        + fx * (1.0 - fy) * f.at(x1, y0, c)
        + (1.0 - fx) * fy * f.at(x0, y1, c)
        + fx * fy * f.at(x1, y1, c)
}

/// Upsample to `(target_w, target_h)`. Target extents must be at least the
/// source extents; channels are unchanged.
pub fn bilinear_upsample(f: &FeatureMap, target_w: usize, target_h: usize) -> Result<FeatureMap> {
    if target_w < f.width() || target_h < f.height() {
        return Err(Error::Argument(format!(
            "upsample target {}x{} smaller than source {}x{}",
            target_w,
            target_h,
            f.width(),
            f.height()
        )));
    }
    let c = f.channels();
    let mut data = vec![0.0; target_w * target_h * c];
    for u in 0..target_w {
        let su = src_coord(u, f.width(), target_w);
        for v in 0..target_h {
            let sv = src_coord(v, f.height(), target_h);
            let base = (u * target_h + v) * c;
            for ch in 0..c {
                data[base + ch] = sample_one(f, su, sv, ch);
            }
        }
    }
    FeatureMap::new(target_w, target_h, c, data)
}

/// Sample the map at each `(u, v)` coordinate; returns `len(coords) x C`.
/// Coordinates must be non-empty (tensor extents are at least 1).
pub fn bilinear_sample(f: &FeatureMap, coords: &[[f64; 2]]) -> Result<Tensor> {
    if coords.is_empty() {
        return Err(Error::Argument("bilinear_sample: empty coordinate list".into()));
    }
    let c = f.channels();
    let mut data = vec![0.0; coords.len() * c];
    for (i, &[u, v]) in coords.iter().enumerate() {
        for ch in 0..c {
            data[i * c + ch] = sample_one(f, u, v, ch);
        }
    }
    Tensor::from_f64(vec![coords.len(), c], data)
}
