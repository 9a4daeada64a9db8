//! Rotated-RoI feature extraction.
//!
//! Spatial alignment warps a rotated box into a fixed `s × s` bin grid
//! (bilinear sampling along the box axes). Orientation alignment then
//! circularly shifts the orientation channels by `r = ⌊θN/2π⌋` and
//! interpolates with the nearest `l ∈ {1, 2, 4}` channels using the
//! fractional part `α = θN/2π - r`, so that the resulting feature no longer
//! depends on how the box (and the world around it) was rotated. Max pooling
//! over the orientation axis is provided as the ablation baseline.

use crate::error::{Error, Result};
use crate::group::{RRoI, RegularField};
use crate::scalar::Scalar;
use crate::tensor::{bilinear_plane, for_each_bilinear_tap};
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

/// How an RoI feature has been aligned so far.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignmentTag {
    SpatialOnly,
    OrientationAligned,
    OrientationPooled,
}

impl AlignmentTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            AlignmentTag::SpatialOnly => "spatial-only",
            AlignmentTag::OrientationAligned => "orientation-aligned",
            AlignmentTag::OrientationPooled => "orientation-pooled",
        }
    }
}

/// RoI warping parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignSpec {
    /// Output bin grid side `s`.
    pub output_size: usize,
    /// Sampling points per bin axis.
    pub samples_per_axis: usize,
    /// Number of orientation channels used for interpolation, `l ∈ {1,2,4}`.
    pub interp_channels: usize,
}

impl Default for AlignSpec {
    fn default() -> Self {
        Self {
            output_size: 7,
            samples_per_axis: 2,
            interp_channels: 2,
        }
    }
}

impl AlignSpec {
    pub fn validate(&self) -> Result<()> {
        if self.output_size == 0 {
            return Err(Error::InvalidArgument("output size must be at least 1".into()));
        }
        if self.samples_per_axis == 0 {
            return Err(Error::InvalidArgument(
                "samples per bin axis must be at least 1".into(),
            ));
        }
        if ![1, 2, 4].contains(&self.interp_channels) {
            return Err(Error::InvalidArgument(
                "interpolation channel count must be 1, 2 or 4".into(),
            ));
        }
        Ok(())
    }
}

/// A pooled `(K, N, s, s)` RoI feature with its alignment state.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedRoIFeature<T> {
    base_channels: usize,
    orientations: usize,
    size: usize,
    tag: AlignmentTag,
    /// Box orientation the feature was (or will be) aligned with.
    theta: f64,
    data: Vec<T>,
}

impl<T: Scalar> AlignedRoIFeature<T> {
    pub(crate) fn new(
        base_channels: usize,
        orientations: usize,
        size: usize,
        tag: AlignmentTag,
        theta: f64,
        data: Vec<T>,
    ) -> Self {
        debug_assert_eq!(data.len(), base_channels * orientations * size * size);
        Self {
            base_channels,
            orientations,
            size,
            tag,
            theta,
            data,
        }
    }

    pub fn base_channels(&self) -> usize {
        self.base_channels
    }
    pub fn orientations(&self) -> usize {
        self.orientations
    }
    pub fn size(&self) -> usize {
        self.size
    }
    pub fn tag(&self) -> AlignmentTag {
        self.tag
    }
    pub fn theta(&self) -> f64 {
        self.theta
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, by: usize, bx: usize) -> T {
        self.data[((c * self.orientations + i) * self.size + by) * self.size + bx]
    }

    /// Flattened feature vector in f64, for metric computations.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }
}

/// Metadata written next to dumped RoI feature tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureSidecar {
    pub k: usize,
    pub n: usize,
    pub s: usize,
    pub tag: AlignmentTag,
    pub theta: f64,
}

/// Enumerate the RoI sampling points of bin `(by, bx)`: box-local offsets
/// `(u, v)` at the per-bin quarter positions, mapped into image coordinates
/// through the box center and orientation. Shared by the forward pass and
/// the gradient scatter.
#[inline]
pub(crate) fn for_each_roi_sample(
    b: &RRoI,
    spec: &AlignSpec,
    by: usize,
    bx: usize,
    mut f: impl FnMut(f64, f64),
) {
    let s = spec.output_size as f64;
    let m = spec.samples_per_axis;
    let (sin, cos) = b.theta.sin_cos();
    for sy in 0..m {
        let v = (by as f64 + (2.0 * sy as f64 + 1.0) / (2.0 * m as f64)) * b.h / s - b.h / 2.0;
        for sx in 0..m {
            let u = (bx as f64 + (2.0 * sx as f64 + 1.0) / (2.0 * m as f64)) * b.w / s - b.w / 2.0;
            // R(theta) applied to the box-local offset (u, v), y-down CCW.
            let px = b.x + cos * u + sin * v;
            let py = b.y - sin * u + cos * v;
            f(px, py);
        }
    }
}

/// Spatial alignment (RRoI Align): warp the rotated box into an `s × s`
/// grid, sampling each `(base, orientation)` channel independently and
/// averaging the per-bin sample points. Out-of-map samples read zero. For
/// `θ = 0` this reduces to standard axis-aligned RoI Align.
pub fn rroi_align_spatial<T: Scalar>(
    f: &RegularField<T>,
    b: &RRoI,
    spec: &AlignSpec,
) -> Result<AlignedRoIFeature<T>> {
    spec.validate()?;
    if !(b.w > 0.0 && b.h > 0.0) {
        return Err(Error::DegenerateRroi);
    }
    let (k, n, h, w) = (f.base_channels(), f.orientations(), f.height(), f.width());
    let s = spec.output_size;
    let m2 = (spec.samples_per_axis * spec.samples_per_axis) as f64;
    let mut data = vec![T::zero(); k * n * s * s];
    let mut out_idx = 0;
    for c in 0..k {
        for i in 0..n {
            let plane = f.plane(c, i);
            for by in 0..s {
                for bx in 0..s {
                    let mut acc = 0.0;
                    for_each_roi_sample(b, spec, by, bx, |px, py| {
                        acc += bilinear_plane(plane, h, w, px, py).to_f64();
                    });
                    data[out_idx] = T::from_f64(acc / m2);
                    out_idx += 1;
                }
            }
        }
    }
    Ok(AlignedRoIFeature::new(
        k,
        n,
        s,
        AlignmentTag::SpatialOnly,
        b.theta,
        data,
    ))
}

/// Adjoint of [`rroi_align_spatial`]: scatter bin gradients back onto the
/// field through the same sample taps.
pub(crate) fn rroi_align_spatial_scatter<T: Scalar>(
    grad_out: &[T],
    field_shape: (usize, usize, usize, usize),
    b: &RRoI,
    spec: &AlignSpec,
) -> Vec<T> {
    let (k, n, h, w) = field_shape;
    let s = spec.output_size;
    let m2 = (spec.samples_per_axis * spec.samples_per_axis) as f64;
    let mut grad_field = vec![T::zero(); k * n * h * w];
    let hw = h * w;
    let mut out_idx = 0;
    for c in 0..k {
        for i in 0..n {
            let base = (c * n + i) * hw;
            for by in 0..s {
                for bx in 0..s {
                    let g = grad_out[out_idx].to_f64() / m2;
                    out_idx += 1;
                    if g == 0.0 {
                        continue;
                    }
                    for_each_roi_sample(b, spec, by, bx, |px, py| {
                        for_each_bilinear_tap(h, w, px, py, |idx, wt| {
                            grad_field[base + idx] += T::from_f64(g * wt);
                        });
                    });
                }
            }
        }
    }
    grad_field
}

/// 1D Keys cubic-convolution kernel with `a = -1/2`.
fn keys_cubic(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        (1.5 * t - 2.5) * t * t + 1.0
    } else if t < 2.0 {
        ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0
    } else {
        0.0
    }
}

/// Orientation-interpolation weights for a box angle `theta` under a cyclic
/// group of order `n`: returns the channel switch `r = ⌊θN/2π⌋` and a list
/// of `(channel offset, weight)` pairs applied to the switched feature
/// (offsets are relative to each output channel, modulo `n`). Weights sum to
/// one for every `l`.
pub fn orientation_weights(theta: f64, n: usize, l: usize) -> (usize, Vec<(usize, f64)>) {
    let theta = theta.rem_euclid(TAU);
    let t = theta * n as f64 / TAU;
    let r = (t.floor() as usize).min(n - 1);
    let alpha = t - r as f64;
    let weights = match l {
        1 => vec![(0, 1.0)],
        2 => vec![(0, 1.0 - alpha), (1 % n, alpha)],
        4 => {
            let raw = [
                (n - 1, keys_cubic(1.0 + alpha)),
                (0, keys_cubic(alpha)),
                (1 % n, keys_cubic(1.0 - alpha)),
                (2 % n, keys_cubic(2.0 - alpha)),
            ];
            let total: f64 = raw.iter().map(|(_, w)| w).sum();
            raw.iter().map(|&(o, w)| (o, w / total)).collect()
        }
        _ => unreachable!("interp_channels validated to 1, 2 or 4"),
    };
    (r, weights)
}

/// Orientation alignment: circularly switch orientation channels so channel
/// `r = ⌊θN/2π⌋` comes first, then interpolate each output channel from its
/// nearest `l` switched channels.
pub fn orientation_align<T: Scalar>(
    fr: &AlignedRoIFeature<T>,
    theta: f64,
    spec: &AlignSpec,
) -> Result<AlignedRoIFeature<T>> {
    spec.validate()?;
    if fr.tag() != AlignmentTag::SpatialOnly {
        return Err(Error::WrongTag {
            expected: AlignmentTag::SpatialOnly.as_str(),
            found: fr.tag().as_str(),
        });
    }
    let (k, n, s) = (fr.base_channels(), fr.orientations(), fr.size());
    let (r, weights) = orientation_weights(theta, n, spec.interp_channels);
    let ss = s * s;
    let mut data = vec![T::zero(); fr.data().len()];
    for c in 0..k {
        for i in 0..n {
            let out_base = (c * n + i) * ss;
            for &(off, wt) in &weights {
                let src = (c * n + (i + r + off) % n) * ss;
                for p in 0..ss {
                    data[out_base + p] += T::from_f64(fr.data()[src + p].to_f64() * wt);
                }
            }
        }
    }
    Ok(AlignedRoIFeature::new(
        k,
        n,
        s,
        AlignmentTag::OrientationAligned,
        theta.rem_euclid(TAU),
        data,
    ))
}

/// Adjoint of [`orientation_align`] as a pure channel-mixing transpose.
pub(crate) fn orientation_align_scatter<T: Scalar>(
    grad_out: &[T],
    shape: (usize, usize, usize),
    theta: f64,
    l: usize,
) -> Vec<T> {
    let (k, n, s) = shape;
    let (r, weights) = orientation_weights(theta, n, l);
    let ss = s * s;
    let mut grad_in = vec![T::zero(); grad_out.len()];
    for c in 0..k {
        for i in 0..n {
            let out_base = (c * n + i) * ss;
            for &(off, wt) in &weights {
                let src = (c * n + (i + r + off) % n) * ss;
                for p in 0..ss {
                    grad_in[src + p] += T::from_f64(grad_out[out_base + p].to_f64() * wt);
                }
            }
        }
    }
    grad_in
}

/// Rotation-invariant RoI Align: spatial alignment followed by orientation
/// alignment with the box's own angle. Rotating the scene and the box by the
/// same group element leaves the result unchanged (up to interpolation).
pub fn riroi_align<T: Scalar>(
    f: &RegularField<T>,
    b: &RRoI,
    spec: &AlignSpec,
) -> Result<AlignedRoIFeature<T>> {
    let spatial = rroi_align_spatial(f, b, spec)?;
    orientation_align(&spatial, b.theta, spec)
}

/// Max-pool over the orientation dimension (the RRoI-Align + MaxPool
/// ablation baseline): keeps only the strongest orientation response per
/// `(base channel, bin)`, collapsing `N` to 1.
pub fn orientation_maxpool<T: Scalar>(fr: &AlignedRoIFeature<T>) -> Result<AlignedRoIFeature<T>> {
    let (out, _) = orientation_maxpool_with_argmax(fr)?;
    Ok(out)
}

pub(crate) fn orientation_maxpool_with_argmax<T: Scalar>(
    fr: &AlignedRoIFeature<T>,
) -> Result<(AlignedRoIFeature<T>, Vec<usize>)> {
    if fr.tag() != AlignmentTag::SpatialOnly {
        return Err(Error::WrongTag {
            expected: AlignmentTag::SpatialOnly.as_str(),
            found: fr.tag().as_str(),
        });
    }
    let (k, n, s) = (fr.base_channels(), fr.orientations(), fr.size());
    let ss = s * s;
    let mut data = vec![T::zero(); k * ss];
    let mut argmax = vec![0usize; k * ss];
    for c in 0..k {
        for p in 0..ss {
            let mut best = fr.data()[(c * n) * ss + p];
            let mut best_i = 0usize;
            for i in 1..n {
                let v = fr.data()[(c * n + i) * ss + p];
                if v > best {
                    best = v;
                    best_i = i;
                }
            }
            data[c * ss + p] = best;
            argmax[c * ss + p] = (c * n + best_i) * ss + p;
        }
    }
    Ok((
        AlignedRoIFeature::new(k, 1, s, AlignmentTag::OrientationPooled, fr.theta(), data),
        argmax,
    ))
}
