//! Dense tensor storage and the planar geometric kernels everything else
//! builds on: bilinear sampling, rotation, plain convolution, pooling and
//! upsampling.
//!
//! # Coordinate convention
//!
//! `x` is the column index, `y` the row index, origin at the top-left pixel.
//! Angles are measured counter-clockwise as the image is displayed (y grows
//! downward), which fixes the rotation matrix to
//!
//! ```text
//! R(θ) = [  cos θ   sin θ ]      applied to column vectors (x, y).
//!        [ -sin θ   cos θ ]
//! ```
//!
//! This one matrix is used everywhere: image warps, box transforms, filter
//! expansion. `rotate_planar` by `+π/2` therefore sends the right edge of an
//! image to its top edge, matching the usual `rot90` permutation.
//!
//! Out-of-bounds reads are zero everywhere (sampling, rotation, convolution
//! padding).

mod io;

pub use io::{load_raw_tensor, read_tensor, save_raw_tensor, write_tensor, TENSOR_MAGIC};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rayon::prelude::*;

/// A `(C, H, W)` planar tensor: a multi-channel image or one spatial slice
/// of a feature field. Row-major storage, `data[c*H*W + y*W + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarTensor<T> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> PlanarTensor<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidArgument(
                "tensor dimensions must be at least 1".into(),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        })
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidArgument(
                "tensor dimensions must be at least 1".into(),
            ));
        }
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("tensor payload".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub(crate) fn from_vec_unchecked(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<T>,
    ) -> Self {
        debug_assert_eq!(data.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// One channel as a contiguous `H*W` slice.
    pub fn plane(&self, c: usize) -> &[T] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    /// Geometric center `(cx, cy)` in pixel coordinates.
    pub fn center(&self) -> (f64, f64) {
        ((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Relative L2 distance to another tensor of the same shape.
    pub fn rel_l2(&self, other: &Self) -> f64 {
        rel_l2(&self.data, &other.data)
    }
}

/// A generic 4-axis tensor `(d0, d1, d2, d3)`; filter banks and regular
/// feature field storage. Row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(dims: [usize; 4]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(
                "tensor dimensions must be at least 1".into(),
            ));
        }
        Ok(Self {
            dims,
            data: vec![T::zero(); dims.iter().product()],
        })
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(
                "tensor dimensions must be at least 1".into(),
            ));
        }
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values, got {}",
                dims.iter().product::<usize>(),
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("tensor payload".into()));
        }
        Ok(Self { dims, data })
    }

    pub(crate) fn from_vec_unchecked(dims: [usize; 4], data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), dims.iter().product::<usize>());
        Self { dims, data }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i0: usize, i1: usize, i2: usize, i3: usize) -> T {
        let [_, d1, d2, d3] = self.dims;
        self.data[((i0 * d1 + i1) * d2 + i2) * d3 + i3]
    }

    #[inline]
    pub fn set(&mut self, i0: usize, i1: usize, i2: usize, i3: usize, v: T) {
        let [_, d1, d2, d3] = self.dims;
        self.data[((i0 * d1 + i1) * d2 + i2) * d3 + i3] = v;
    }
}

/// Enumerate the bilinear taps of `(x, y)` on an `h × w` grid with zero
/// padding: calls `f(y*w + x, weight)` for every in-bounds neighbor with
/// nonzero weight. Shared by the sampling forward pass and its adjoint so
/// the two stay exactly transposed.
#[inline]
pub(crate) fn for_each_bilinear_tap(
    h: usize,
    w: usize,
    x: f64,
    y: f64,
    mut f: impl FnMut(usize, f64),
) {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let x0 = x0 as i64;
    let y0 = y0 as i64;
    let mut tap = |xi: i64, yi: i64, wt: f64| {
        if wt != 0.0 && xi >= 0 && yi >= 0 && (xi as usize) < w && (yi as usize) < h {
            f(yi as usize * w + xi as usize, wt);
        }
    };
    tap(x0, y0, (1.0 - fx) * (1.0 - fy));
    tap(x0 + 1, y0, fx * (1.0 - fy));
    tap(x0, y0 + 1, (1.0 - fx) * fy);
    tap(x0 + 1, y0 + 1, fx * fy);
}

/// Bilinear interpolation on one plane with zero padding outside
/// `[0,h) × [0,w)`. Exact grid points return the stored value exactly.
#[inline]
pub(crate) fn bilinear_plane<T: Scalar>(plane: &[T], h: usize, w: usize, x: f64, y: f64) -> T {
    let mut acc = 0.0;
    for_each_bilinear_tap(h, w, x, y, |idx, wt| {
        acc += plane[idx].to_f64() * wt;
    });
    T::from_f64(acc)
}

/// Bilinear sample of channel `c` at real coordinates `(x, y)`.
///
/// Coordinates may lie anywhere; grid values outside the tensor contribute
/// zero.
pub fn bilinear_sample<T: Scalar>(t: &PlanarTensor<T>, c: usize, x: f64, y: f64) -> Result<T> {
    if c >= t.channels() {
        return Err(Error::ChannelOutOfRange);
    }
    Ok(bilinear_plane(t.plane(c), t.height(), t.width(), x, y))
}

/// Which quarter-turn permutation an angle reduces to, if any.
///
/// Returns `Some(k)` with `k ∈ {0,1,2,3}` when `angle` is within `1e-12` of
/// `k·π/2 (mod 2π)`.
pub(crate) fn quarter_turns(angle: f64) -> Option<usize> {
    let q = angle.rem_euclid(std::f64::consts::TAU) / std::f64::consts::FRAC_PI_2;
    let r = q.round();
    if (q - r).abs() < 1e-12 {
        Some((r as usize) % 4)
    } else {
        None
    }
}

/// Source index for the exact quarter-turn permutation path: output pixel
/// `(y, x)` of a `size × size` plane rotated by `k` quarter turns reads
/// input pixel `perm_source(k, size, y, x)`.
#[inline]
pub(crate) fn quarter_turn_source(k: usize, size: usize, y: usize, x: usize) -> (usize, usize) {
    let m = size - 1;
    match k {
        0 => (y, x),
        1 => (x, m - y),
        2 => (m - y, m - x),
        _ => (m - x, y),
    }
}

/// Rotate one plane counter-clockwise by `angle` about `center` using the
/// inverse-mapping warp `out(p) = in(R(-angle)·(p - c) + c)` with bilinear
/// sampling and zero padding.
pub(crate) fn rotate_plane<T: Scalar>(
    plane: &[T],
    h: usize,
    w: usize,
    angle: f64,
    center: (f64, f64),
) -> Vec<T> {
    let (cx, cy) = center;
    let geometric = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    if center == geometric {
        if let Some(k) = quarter_turns(angle) {
            // Exact index permutation: no interpolation error. Quarter turns
            // need a square plane; a half turn is a permutation for any shape.
            if h == w || k % 2 == 0 {
                let mut out = vec![T::zero(); plane.len()];
                if k == 0 {
                    out.copy_from_slice(plane);
                } else if k == 2 {
                    for (o, i) in out.iter_mut().zip(plane.iter().rev()) {
                        *o = *i;
                    }
                } else {
                    for y in 0..h {
                        for x in 0..w {
                            let (sy, sx) = quarter_turn_source(k, h, y, x);
                            out[y * w + x] = plane[sy * w + sx];
                        }
                    }
                }
                return out;
            }
        }
    }
    let (sin, cos) = (-angle).sin_cos();
    let mut out = vec![T::zero(); plane.len()];
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            // R(-angle) applied to (dx, dy) in the y-down convention.
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            out[y * w + x] = bilinear_plane(plane, h, w, sx, sy);
        }
    }
    out
}

/// Adjoint of [`rotate_plane`]: scatters `grad_out` back through the same
/// bilinear taps. `rotate_plane_adjoint(g, ...)` is the exact transpose of
/// the linear map `rotate_plane(·, ...)`.
pub(crate) fn rotate_plane_adjoint<T: Scalar>(
    grad_out: &[T],
    h: usize,
    w: usize,
    angle: f64,
    center: (f64, f64),
) -> Vec<T> {
    let (cx, cy) = center;
    let geometric = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    if center == geometric {
        if let Some(k) = quarter_turns(angle) {
            if h == w || k % 2 == 0 {
                let mut out = vec![T::zero(); grad_out.len()];
                for y in 0..h {
                    for x in 0..w {
                        let (sy, sx) = quarter_turn_source(k, h, y, x);
                        out[sy * w + sx] += grad_out[y * w + x];
                    }
                }
                return out;
            }
        }
    }
    let (sin, cos) = (-angle).sin_cos();
    let mut out = vec![T::zero(); grad_out.len()];
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            let g = grad_out[y * w + x].to_f64();
            for_each_bilinear_tap(h, w, sx, sy, |idx, wt| {
                out[idx] += T::from_f64(g * wt);
            });
        }
    }
    out
}

/// Rotate a planar tensor counter-clockwise by `angle` (radians) about
/// `center` (defaults to the geometric center). Inverse-mapping warp with
/// bilinear sampling; exact multiples of `π/2` about the geometric center of
/// a square tensor take an exact permutation path.
pub fn rotate_planar<T: Scalar>(
    t: &PlanarTensor<T>,
    angle: f64,
    center: Option<(f64, f64)>,
) -> PlanarTensor<T> {
    assert!(angle.is_finite(), "rotation angle must be finite");
    let center = center.unwrap_or_else(|| t.center());
    let (h, w) = (t.height(), t.width());
    let mut data = Vec::with_capacity(t.data().len());
    for c in 0..t.channels() {
        data.extend(rotate_plane(t.plane(c), h, w, angle, center));
    }
    PlanarTensor::from_vec_unchecked(t.channels(), h, w, data)
}

/// Standard cross-correlation with zero padding.
///
/// `filters` has shape `(C_out, C_in, kH, kW)`; `kH`/`kW` must be odd and
/// `C_in` must match the input. Output spatial size is
/// `(in + 2·padding - k) / stride + 1`.
pub fn conv2d_plain<T: Scalar>(
    t: &PlanarTensor<T>,
    filters: &Tensor4<T>,
    stride: usize,
    padding: usize,
) -> Result<PlanarTensor<T>> {
    let [c_out, c_in, kh, kw] = filters.dims();
    if c_in != t.channels() {
        return Err(Error::ShapeMismatch(format!(
            "filter expects {} input channels, tensor has {}",
            c_in,
            t.channels()
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::InvalidArgument(
            "kernel size must be odd".into(),
        ));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be at least 1".into()));
    }
    let (h, w) = (t.height(), t.width());
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::ShapeMismatch(
            "kernel larger than padded input".into(),
        ));
    }
    let h_out = (h + 2 * padding - kh) / stride + 1;
    let w_out = (w + 2 * padding - kw) / stride + 1;
    let data = conv2d_kernel(
        t.data(),
        c_in,
        h,
        w,
        filters.data(),
        c_out,
        kh,
        kw,
        stride,
        padding,
        h_out,
        w_out,
    );
    Ok(PlanarTensor::from_vec_unchecked(c_out, h_out, w_out, data))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_kernel<T: Scalar>(
    input: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    filters: &[T],
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); c_out * h_out * w_out];
    let run = |co: usize, plane: &mut [T]| {
        let fbase = co * c_in * kh * kw;
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut acc = T::zero();
                for ci in 0..c_in {
                    let ibase = ci * h * w;
                    let fcbase = fbase + ci * kh * kw;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as i64 - padding as i64;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        let irow = ibase + iy as usize * w;
                        let frow = fcbase + ky * kw;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as i64 - padding as i64;
                            if ix < 0 || ix >= w as i64 {
                                continue;
                            }
                            acc += input[irow + ix as usize] * filters[frow + kx];
                        }
                    }
                }
                plane[oy * w_out + ox] = acc;
            }
        }
    };
    // Output channels are independent; parallelize when the work is real.
    if c_out * h_out * w_out >= 1 << 14 {
        out.par_chunks_mut(h_out * w_out)
            .enumerate()
            .for_each(|(co, plane)| run(co, plane));
    } else {
        for (co, plane) in out.chunks_mut(h_out * w_out).enumerate() {
            run(co, plane);
        }
    }
    out
}

/// Gradient of [`conv2d_kernel`] with respect to its input.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_grad_input<T: Scalar>(
    grad_out: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    filters: &[T],
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
) -> Vec<T> {
    let mut grad_in = vec![T::zero(); c_in * h * w];
    for co in 0..c_out {
        let obase = co * h_out * w_out;
        let fbase = co * c_in * kh * kw;
        for oy in 0..h_out {
            for ox in 0..w_out {
                let g = grad_out[obase + oy * w_out + ox];
                for ci in 0..c_in {
                    let ibase = ci * h * w;
                    let fcbase = fbase + ci * kh * kw;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as i64 - padding as i64;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as i64 - padding as i64;
                            if ix < 0 || ix >= w as i64 {
                                continue;
                            }
                            grad_in[ibase + iy as usize * w + ix as usize] +=
                                g * filters[fcbase + ky * kw + kx];
                        }
                    }
                }
            }
        }
    }
    grad_in
}

/// Gradient of [`conv2d_kernel`] with respect to the filter bank.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_grad_filters<T: Scalar>(
    grad_out: &[T],
    input: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
) -> Vec<T> {
    let mut grad_f = vec![T::zero(); c_out * c_in * kh * kw];
    for co in 0..c_out {
        let obase = co * h_out * w_out;
        let fbase = co * c_in * kh * kw;
        for oy in 0..h_out {
            for ox in 0..w_out {
                let g = grad_out[obase + oy * w_out + ox];
                for ci in 0..c_in {
                    let ibase = ci * h * w;
                    let fcbase = fbase + ci * kh * kw;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as i64 - padding as i64;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as i64 - padding as i64;
                            if ix < 0 || ix >= w as i64 {
                                continue;
                            }
                            grad_f[fcbase + ky * kw + kx] +=
                                g * input[ibase + iy as usize * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    grad_f
}

/// Max pooling per channel. Window and stride must agree and divide the
/// spatial dims.
pub fn maxpool2d<T: Scalar>(
    t: &PlanarTensor<T>,
    window: usize,
    stride: usize,
) -> Result<PlanarTensor<T>> {
    let (out, _) = maxpool2d_with_argmax(t, window, stride)?;
    Ok(out)
}

/// Max pooling that also reports, per output element, the flat input index
/// of the first maximal element in scan order (the deterministic
/// subgradient route).
pub(crate) fn maxpool2d_with_argmax<T: Scalar>(
    t: &PlanarTensor<T>,
    window: usize,
    stride: usize,
) -> Result<(PlanarTensor<T>, Vec<usize>)> {
    if window == 0 || stride == 0 || window != stride {
        return Err(Error::InvalidArgument(
            "pooling window and stride must be equal and at least 1".into(),
        ));
    }
    let (h, w) = (t.height(), t.width());
    if h % stride != 0 || w % stride != 0 {
        return Err(Error::InvalidArgument(format!(
            "spatial dims {}x{} not divisible by pooling stride {}",
            h, w, stride
        )));
    }
    let (h_out, w_out) = (h / stride, w / stride);
    let mut out = vec![T::zero(); t.channels() * h_out * w_out];
    let mut argmax = vec![0usize; out.len()];
    for c in 0..t.channels() {
        let ibase = c * h * w;
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut best = T::from_f64(f64::NEG_INFINITY);
                let mut best_idx = 0usize;
                for wy in 0..window {
                    for wx in 0..window {
                        let iy = oy * stride + wy;
                        let ix = ox * stride + wx;
                        let idx = ibase + iy * w + ix;
                        let v = t.data()[idx];
                        if v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                let o = (c * h_out + oy) * w_out + ox;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    Ok((
        PlanarTensor::from_vec_unchecked(t.channels(), h_out, w_out, out),
        argmax,
    ))
}

/// Nearest-neighbor upsampling per channel by an integer factor.
pub fn upsample_nearest<T: Scalar>(t: &PlanarTensor<T>, factor: usize) -> Result<PlanarTensor<T>> {
    if factor == 0 {
        return Err(Error::InvalidArgument("factor must be at least 1".into()));
    }
    let (h, w) = (t.height(), t.width());
    let (h_out, w_out) = (h * factor, w * factor);
    let mut out = vec![T::zero(); t.channels() * h_out * w_out];
    for c in 0..t.channels() {
        let ibase = c * h * w;
        let obase = c * h_out * w_out;
        for oy in 0..h_out {
            let iy = oy / factor;
            for ox in 0..w_out {
                out[obase + oy * w_out + ox] = t.data()[ibase + iy * w + ox / factor];
            }
        }
    }
    Ok(PlanarTensor::from_vec_unchecked(
        t.channels(),
        h_out,
        w_out,
        out,
    ))
}

/// Relative L2 distance `‖a - b‖ / max(‖b‖, 1e-12)` between two equal-length
/// slices, computed in f64.
pub fn rel_l2<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut num = 0.0;
    let mut den = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let d = x.to_f64() - y.to_f64();
        num += d * d;
        den += y.to_f64() * y.to_f64();
    }
    num.sqrt() / den.sqrt().max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tensor_2x2() -> PlanarTensor<f64> {
        PlanarTensor::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    #[test]
    fn bilinear_exact_grid_point() {
        let mut t = PlanarTensor::<f64>::zeros(1, 4, 5).unwrap();
        t.set(0, 2, 3, 7.0);
        assert_eq!(bilinear_sample(&t, 0, 3.0, 2.0).unwrap(), 7.0);
    }

    #[test]
    fn bilinear_constant_interior() {
        let t = PlanarTensor::from_vec(1, 4, 4, vec![5.0; 16]).unwrap();
        assert!((bilinear_sample(&t, 0, 1.5, 1.5).unwrap() - 5.0).abs() < 1e-15);
    }

    #[test]
    fn bilinear_zero_padding() {
        // 1x1x1 tensor holding 4; half a pixel to the right mixes with the
        // zero-padded neighbor: 0.5*4 + 0.5*0 = 2.
        let t = PlanarTensor::from_vec(1, 1, 1, vec![4.0]).unwrap();
        assert!((bilinear_sample(&t, 0, 0.5, 0.0).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn bilinear_channel_out_of_range() {
        let t = PlanarTensor::<f64>::zeros(2, 3, 3).unwrap();
        assert!(matches!(
            bilinear_sample(&t, 2, 0.0, 0.0),
            Err(Error::ChannelOutOfRange)
        ));
    }

    #[test]
    fn bilinear_linearity_in_values() {
        let mut rng = crate::rng::SplitMix64::new(11);
        let d1: Vec<f64> = (0..36).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let d2: Vec<f64> = (0..36).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let t1 = PlanarTensor::from_vec(1, 6, 6, d1.clone()).unwrap();
        let t2 = PlanarTensor::from_vec(1, 6, 6, d2.clone()).unwrap();
        let (a, b) = (0.7, -2.3);
        let combo: Vec<f64> = d1.iter().zip(&d2).map(|(x, y)| a * x + b * y).collect();
        let tc = PlanarTensor::from_vec(1, 6, 6, combo).unwrap();
        for &(x, y) in &[(1.3, 2.7), (0.1, 4.9), (-0.4, 2.0), (5.5, 5.5)] {
            let lhs = bilinear_sample(&tc, 0, x, y).unwrap();
            let rhs = a * bilinear_sample(&t1, 0, x, y).unwrap()
                + b * bilinear_sample(&t2, 0, x, y).unwrap();
            assert!(
                (lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()).max(1.0),
                "lhs={lhs} rhs={rhs}"
            );
        }
    }

    #[test]
    fn rotate_identity() {
        let t = tensor_2x2();
        assert_eq!(rotate_planar(&t, 0.0, None).data(), t.data());
    }

    #[test]
    fn rotate_quarter_turn_permutation() {
        // Counter-clockwise quarter turn as displayed (y down): the right
        // column becomes the top row.
        let t = tensor_2x2();
        let r = rotate_planar(&t, std::f64::consts::FRAC_PI_2, None);
        assert_eq!(r.data(), &[2.0, 4.0, 1.0, 3.0]);
    }

    #[test]
    fn rotate_half_turn_twice_is_identity() {
        let t = tensor_2x2();
        let r = rotate_planar(&t, std::f64::consts::PI, None);
        let rr = rotate_planar(&r, std::f64::consts::PI, None);
        assert_eq!(rr.data(), t.data());
    }

    #[test]
    fn rotate_quarter_turns_match_bruteforce_permutation() {
        let n = 5;
        let data: Vec<f64> = (0..n * n).map(|i| i as f64).collect();
        let t = PlanarTensor::from_vec(1, n, n, data.clone()).unwrap();
        for k in 0..4usize {
            let r = rotate_planar(&t, k as f64 * std::f64::consts::FRAC_PI_2, None);
            for y in 0..n {
                for x in 0..n {
                    let (sy, sx) = quarter_turn_source(k, n, y, x);
                    assert_eq!(r.get(0, y, x), data[sy * n + sx], "k={k} y={y} x={x}");
                }
            }
        }
    }

    /// Smooth analytic test image: a mixture of Gaussian bumps.
    fn smooth_image(side: usize, seed: u64) -> PlanarTensor<f64> {
        let mut rng = crate::rng::SplitMix64::new(seed);
        let mut data = vec![0.0f64; side * side];
        let blobs: Vec<(f64, f64, f64, f64)> = (0..6)
            .map(|_| {
                (
                    rng.uniform(side as f64 * 0.25, side as f64 * 0.75),
                    rng.uniform(side as f64 * 0.25, side as f64 * 0.75),
                    rng.uniform(side as f64 / 16.0, side as f64 / 6.0),
                    rng.uniform(-1.0, 1.0),
                )
            })
            .collect();
        for y in 0..side {
            for x in 0..side {
                let mut v = 0.0;
                for &(bx, by, sigma, amp) in &blobs {
                    let d2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
                    v += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                }
                data[y * side + x] = v;
            }
        }
        PlanarTensor::from_vec(1, side, side, data).unwrap()
    }

    /// Like `smooth_image` but band-limited harder: double interpolation
    /// error scales with |f''|, so the composition property needs blobs a
    /// few pixels wide.
    fn smoother_image(side: usize, seed: u64) -> PlanarTensor<f64> {
        let mut rng = crate::rng::SplitMix64::new(seed);
        let mut data = vec![0.0f64; side * side];
        let blobs: Vec<(f64, f64, f64, f64)> = (0..6)
            .map(|_| {
                (
                    rng.uniform(side as f64 * 0.3, side as f64 * 0.7),
                    rng.uniform(side as f64 * 0.3, side as f64 * 0.7),
                    rng.uniform(side as f64 / 8.0, side as f64 / 4.0),
                    rng.uniform(-1.0, 1.0),
                )
            })
            .collect();
        for y in 0..side {
            for x in 0..side {
                let mut v = 0.0;
                for &(bx, by, sigma, amp) in &blobs {
                    let d2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
                    v += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                }
                data[y * side + x] = v;
            }
        }
        PlanarTensor::from_vec(1, side, side, data).unwrap()
    }

    #[test]
    fn rotate_composition_on_interior() {
        let side = 49;
        let t = smoother_image(side, 3);
        let (a, b) = (0.43, 0.91);
        let lhs = rotate_planar(&rotate_planar(&t, a, None), b, None);
        let rhs = rotate_planar(&t, a + b, None);
        // Compare on the interior disk, away from the crop boundary.
        let c = (side as f64 - 1.0) / 2.0;
        let r_max = c - (side as f64 / 8.0).ceil();
        let mut num = 0.0;
        let mut den = 0.0;
        for y in 0..side {
            for x in 0..side {
                let d2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2);
                if d2 <= r_max * r_max {
                    let diff = lhs.get(0, y, x) - rhs.get(0, y, x);
                    num += diff * diff;
                    den += rhs.get(0, y, x).powi(2);
                }
            }
        }
        let err = (num / den).sqrt();
        assert!(err <= 1e-2, "interior composition error {err}");
    }

    #[test]
    fn conv_identity_filter() {
        let t = smooth_image(9, 5);
        let f = Tensor4::from_vec([1, 1, 1, 1], vec![1.0]).unwrap();
        let out = conv2d_plain(&t, &f, 1, 0).unwrap();
        assert_eq!(out.data(), t.data());
    }

    #[test]
    fn conv_box_filter_interior_sum() {
        let t = PlanarTensor::from_vec(1, 5, 5, vec![1.0; 25]).unwrap();
        let f = Tensor4::from_vec([1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let out = conv2d_plain(&t, &f, 1, 1).unwrap();
        assert_eq!(out.height(), 5);
        assert!((out.get(0, 2, 2) - 9.0).abs() < 1e-15);
        // Corner only overlaps 4 pixels under zero padding.
        assert!((out.get(0, 0, 0) - 4.0).abs() < 1e-15);
    }

    #[test]
    fn conv_translation_equivariance_interior() {
        let side = 11;
        let t = smooth_image(side, 8);
        let mut shifted = PlanarTensor::<f64>::zeros(1, side, side).unwrap();
        for y in 0..side {
            for x in 1..side {
                shifted.set(0, y, x, t.get(0, y, x - 1));
            }
        }
        let mut rng = crate::rng::SplitMix64::new(21);
        let f = Tensor4::from_vec([2, 1, 3, 3], (0..18).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .unwrap();
        let a = conv2d_plain(&t, &f, 1, 1).unwrap();
        let b = conv2d_plain(&shifted, &f, 1, 1).unwrap();
        for c in 0..2 {
            for y in 2..side - 2 {
                for x in 2..side - 2 {
                    assert_eq!(b.get(c, y, x), a.get(c, y, x - 1), "c={c} y={y} x={x}");
                }
            }
        }
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let t = PlanarTensor::<f64>::zeros(2, 5, 5).unwrap();
        let wrong_ch = Tensor4::<f64>::zeros([1, 3, 3, 3]).unwrap();
        assert!(conv2d_plain(&t, &wrong_ch, 1, 1).is_err());
        let even = Tensor4::<f64>::zeros([1, 2, 2, 2]).unwrap();
        assert!(conv2d_plain(&t, &even, 1, 1).is_err());
        let f = Tensor4::<f64>::zeros([1, 2, 3, 3]).unwrap();
        assert!(conv2d_plain(&t, &f, 0, 1).is_err());
    }

    #[test]
    fn maxpool_basic_and_errors() {
        let t = tensor_2x2();
        let p = maxpool2d(&t, 2, 2).unwrap();
        assert_eq!(p.data(), &[4.0]);
        let odd = PlanarTensor::<f64>::zeros(1, 3, 3).unwrap();
        assert!(maxpool2d(&odd, 2, 2).is_err());
    }

    #[test]
    fn upsample_and_pool_roundtrip() {
        let t = PlanarTensor::from_vec(1, 1, 1, vec![1.0]).unwrap();
        let u = upsample_nearest(&t, 2).unwrap();
        assert_eq!(u.data(), &[1.0, 1.0, 1.0, 1.0]);
        let t2 = smooth_image(6, 10);
        let u2 = upsample_nearest(&t2, 2).unwrap();
        let back = maxpool2d(&u2, 2, 2).unwrap();
        assert_eq!(back.data(), t2.data());
    }

    #[test]
    fn rotate_adjoint_is_transpose() {
        // <R x, y> == <x, R^T y> for random x, y and a generic angle.
        let mut rng = crate::rng::SplitMix64::new(77);
        let n = 7;
        let x: Vec<f64> = (0..n * n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let y: Vec<f64> = (0..n * n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let c = ((n as f64 - 1.0) / 2.0, (n as f64 - 1.0) / 2.0);
        let angle = 0.731;
        let rx = rotate_plane(&x, n, n, angle, c);
        let rty = rotate_plane_adjoint(&y, n, n, angle, c);
        let lhs: f64 = rx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&rty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12, "lhs={lhs} rhs={rhs}");
    }

    proptest! {
        #[test]
        fn prop_rotate_full_cycle_of_quarter_turns(seed in 0u64..1000) {
            let t = smooth_image(8, seed);
            let mut r = t.clone();
            for _ in 0..4 {
                r = rotate_planar(&r, std::f64::consts::FRAC_PI_2, None);
            }
            prop_assert_eq!(r.data(), t.data());
        }

        #[test]
        fn prop_pool_of_upsample_roundtrips(seed in 0u64..200, side in 1usize..8) {
            let mut rng = crate::rng::SplitMix64::new(seed);
            let data: Vec<f64> = (0..side * side).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let t = PlanarTensor::from_vec(1, side, side, data).unwrap();
            let u = upsample_nearest(&t, 2).unwrap();
            let p = maxpool2d(&u, 2, 2).unwrap();
            prop_assert_eq!(p.data(), t.data());
        }
    }
}
