//! Unsupervised fallback: change-vector magnitude thresholded with Otsu's method.

use crate::dataset::{normalize_raster, NormStats};
use crate::error::{invalid, shape_err, Error, Result};
use crate::raster::{ChangeMask, Raster, CHANGED, UNCHANGED};

pub const OTSU_BINS: usize = 256;

/// Per-pixel Euclidean norm of the standardized spectral difference.
#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeMap(Raster);

impl MagnitudeMap {
    pub fn raster(&self) -> &Raster {
        &self.0
    }

    pub fn values(&self) -> &[f32] {
        self.0.data()
    }

    pub fn into_raster(self) -> Raster {
        self.0
    }
}

pub fn cva_magnitude(pre: &Raster, post: &Raster, stats: &NormStats) -> Result<MagnitudeMap> {
    if !pre.same_shape(post) {
        return Err(shape_err!("pre and post images differ in shape"));
    }
    let a = normalize_raster(pre, stats)?;
    let b = normalize_raster(post, stats)?;
    let n = a.pixels();
    let mut sq = vec![0.0f32; n];
    for c in 0..a.channels() {
        for ((acc, &x), &y) in sq.iter_mut().zip(a.plane(c)).zip(b.plane(c)) {
            let d = y - x;
            *acc += d * d;
        }
    }
    let data = sq.into_iter().map(f32::sqrt).collect();
    Ok(MagnitudeMap(Raster::new(pre.height(), pre.width(), 1, data)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OtsuThreshold {
    pub threshold: f32,
    /// Index `k` in `1..OTSU_BINS`: bins below `k` form the low class.
    pub split_bin: usize,
    /// Fewer than two distinct values; `threshold` is the maximum and nothing exceeds it.
    pub degenerate: bool,
}

/// Between-class variance (up to a constant factor) for every split `k` in
/// `1..hist.len()`, computed in one cumulative pass. Bin `b` is represented
/// by its index, which is affine in the bin centre, so the argmax is unchanged.
///
/// With `n` pixels, index sum `S`, and `n0`, `s0` the count and index sum below
/// `k`, the value is `(n*s0 - n0*S)^2 / (n0*n1)`. The difference is formed in
/// integers, so equal splits compare exactly equal.
pub fn between_class_variances(hist: &[u64]) -> Vec<f64> {
    let total: u64 = hist.iter().sum();
    let total_sum: u128 = hist.iter().enumerate().map(|(b, &c)| b as u128 * u128::from(c)).sum();
    let mut out = Vec::with_capacity(hist.len().saturating_sub(1));
    let (mut n0, mut s0) = (0u64, 0u128);
    for (b, &c) in hist.iter().enumerate().take(hist.len().saturating_sub(1)) {
        n0 += c;
        s0 += b as u128 * u128::from(c);
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            out.push(0.0);
            continue;
        }
        let d = (u128::from(total) * s0).abs_diff(u128::from(n0) * total_sum) as f64;
        out.push(d * d / (n0 as f64 * n1 as f64));
    }
    out
}

/// Best split `k` (low class = bins `< k`); ties go to the lowest `k`.
/// `None` when no split separates two non-empty classes.
pub fn otsu_split(hist: &[u64]) -> Option<usize> {
    let vars = between_class_variances(hist);
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in vars.iter().enumerate() {
        if v > 0.0 && best.is_none_or(|(_, bv)| v > bv) {
            best = Some((i + 1, v));
        }
    }
    best.map(|(k, _)| k)
}

/// Histogram of `values` over `[min, max]` with `bins` equal-width bins; the
/// maximum falls in the last bin.
pub fn histogram(values: &[f32], bins: usize) -> (Vec<u64>, f32, f32) {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut hist = vec![0u64; bins];
    let span = f64::from(hi) - f64::from(lo);
    for &v in values {
        let b = if span > 0.0 {
            (((f64::from(v) - f64::from(lo)) / span) * bins as f64) as usize
        } else {
            0
        };
        hist[b.min(bins - 1)] += 1;
    }
    (hist, lo, hi)
}

/// Otsu threshold over a 256-bin histogram spanning the observed range.
/// The returned threshold is the lower edge of the first high-class bin.
pub fn otsu_threshold(values: &[f32]) -> Result<OtsuThreshold> {
    if values.is_empty() {
        return Err(Error::Degenerate("otsu threshold of an empty map".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(invalid!("otsu input must be finite"));
    }
    let (hist, lo, hi) = histogram(values, OTSU_BINS);
    match otsu_split(&hist) {
        Some(k) if hi > lo => {
            let edge = f64::from(lo) + (f64::from(hi) - f64::from(lo)) * k as f64 / OTSU_BINS as f64;
            Ok(OtsuThreshold {
                threshold: edge as f32,
                split_bin: k,
                degenerate: false,
            })
        }
        _ => Ok(OtsuThreshold {
            threshold: hi,
            split_bin: OTSU_BINS,
            degenerate: true,
        }),
    }
}

/// 1 where `magnitude > threshold`, else 0.
pub fn threshold_mask(m: &MagnitudeMap, threshold: f32) -> ChangeMask {
    let labels = m
        .values()
        .iter()
        .map(|&v| if v > threshold { CHANGED } else { UNCHANGED })
        .collect();
    ChangeMask::new(m.0.height(), m.0.width(), labels).expect("magnitude dims are valid")
}

/// Full fallback: CVA magnitude, Otsu threshold, strict comparison.
pub fn unsupervised_change_map(pre: &Raster, post: &Raster, stats: &NormStats) -> Result<ChangeMask> {
    let m = cva_magnitude(pre, post, stats)?;
    let t = otsu_threshold(m.values())?;
    Ok(threshold_mask(&m, t.threshold))
}
