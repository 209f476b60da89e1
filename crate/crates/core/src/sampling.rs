//! Deterministic temporal and spatial preprocessing plans.
//!
//! A clip of `source_len` frames is reduced to exactly `target_len` indices
//! (16 by default downstream). Validation and test pipelines use the fixed
//! center-of-segment rule; training pipelines may use the seeded jitter
//! variant, which stays inside the same per-segment bounds. Spatial rescaling
//! is likewise described as a plan (scale factors and padding) — no pixels are
//! touched here.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("{0} must be at least 1")]
    NonPositive(&'static str),
}

/// How the frame indices of a plan were chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    Fixed,
    Jitter { seed: u64 },
}

/// A frame-index selection for one clip: exactly `target_len` non-decreasing
/// indices into `0..source_len`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub source_len: usize,
    pub target_len: usize,
    pub mode: SamplingMode,
    pub indices: Vec<usize>,
}

/// Inclusive index bounds of temporal segment `i`: frames
/// `floor(i*L/T) ..= max(floor(i*L/T), ceil((i+1)*L/T) - 1)`.
fn segment_bounds(source_len: usize, target_len: usize, i: usize) -> (usize, usize) {
    let (len, t, i) = (source_len as u64, target_len as u64, i as u64);
    let lo = i * len / t;
    let hi = ((i + 1) * len).div_ceil(t) - 1;
    (lo as usize, lo.max(hi) as usize)
}

/// Fixed sampling: `indices[i] = floor((i + 1/2) * source_len / target_len)`.
///
/// The rule picks the center frame of each of `target_len` equal temporal
/// segments, so the whole clip is covered and the result is identical across
/// runs. Short clips (`source_len < target_len`) repeat frames.
pub fn plan_fixed(source_len: usize, target_len: usize) -> Result<SamplingPlan, SamplingError> {
    if source_len == 0 {
        return Err(SamplingError::NonPositive("source_len"));
    }
    if target_len == 0 {
        return Err(SamplingError::NonPositive("target_len"));
    }
    let (len, t) = (source_len as u64, target_len as u64);
    let indices = (0..t)
        .map(|i| (((2 * i + 1) * len) / (2 * t)) as usize)
        .collect();
    Ok(SamplingPlan {
        source_len,
        target_len,
        mode: SamplingMode::Fixed,
        indices,
    })
}

/// Jittered sampling for training: segment `i` contributes one index drawn
/// uniformly from that segment's bounds (see [`plan_fixed`] for the segment
/// grid). Draws come from a ChaCha8 stream seeded with `seed`, one draw per
/// segment in segment order, so the same `(source_len, target_len, seed)`
/// always yields the same plan.
pub fn plan_jitter(
    source_len: usize,
    target_len: usize,
    seed: u64,
) -> Result<SamplingPlan, SamplingError> {
    if source_len == 0 {
        return Err(SamplingError::NonPositive("source_len"));
    }
    if target_len == 0 {
        return Err(SamplingError::NonPositive("target_len"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices = (0..target_len)
        .map(|i| {
            let (lo, hi) = segment_bounds(source_len, target_len, i);
            rng.random_range(lo..=hi)
        })
        .collect();
    Ok(SamplingPlan {
        source_len,
        target_len,
        mode: SamplingMode::Jitter { seed },
        indices,
    })
}

/// Spatial rescale behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeMode {
    /// Independent per-axis scaling; the aspect ratio may change.
    Stretch,
    /// Uniform scaling that fits inside the target, with centered padding.
    Letterbox,
}

/// Description of a spatial rescale: per-axis scale factors, the scaled
/// content size and the padding that centers it inside the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionPlan {
    pub src_h: usize,
    pub src_w: usize,
    pub dst_h: usize,
    pub dst_w: usize,
    pub mode: ResizeMode,
    pub scale_h: f64,
    pub scale_w: f64,
    pub content_h: usize,
    pub content_w: usize,
    pub pad_top: usize,
    pub pad_bottom: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

/// Plans a rescale from `(src_h, src_w)` to `(dst_h, dst_w)`.
///
/// `Stretch` records independent scale factors and no padding. `Letterbox`
/// records the uniform scale `min(dst_h/src_h, dst_w/src_w)`, the rounded
/// content size (clamped so it never exceeds the target) and centered
/// non-negative padding.
pub fn plan_resolution(
    src_h: usize,
    src_w: usize,
    dst_h: usize,
    dst_w: usize,
    mode: ResizeMode,
) -> Result<ResolutionPlan, SamplingError> {
    for (name, v) in [
        ("src_h", src_h),
        ("src_w", src_w),
        ("dst_h", dst_h),
        ("dst_w", dst_w),
    ] {
        if v == 0 {
            return Err(SamplingError::NonPositive(name));
        }
    }
    let (scale_h, scale_w, content_h, content_w) = match mode {
        ResizeMode::Stretch => (
            dst_h as f64 / src_h as f64,
            dst_w as f64 / src_w as f64,
            dst_h,
            dst_w,
        ),
        ResizeMode::Letterbox => {
            let s = (dst_h as f64 / src_h as f64).min(dst_w as f64 / src_w as f64);
            let ch = ((src_h as f64 * s).round() as usize).min(dst_h).max(1);
            let cw = ((src_w as f64 * s).round() as usize).min(dst_w).max(1);
            (s, s, ch, cw)
        }
    };
    let pad_v = dst_h - content_h;
    let pad_h = dst_w - content_w;
    Ok(ResolutionPlan {
        src_h,
        src_w,
        dst_h,
        dst_w,
        mode,
        scale_h,
        scale_w,
        content_h,
        content_w,
        pad_top: pad_v / 2,
        pad_bottom: pad_v - pad_v / 2,
        pad_left: pad_h / 2,
        pad_right: pad_h - pad_h / 2,
    })
}
