//! The cyclic rotation group `C_N`, its action on planar tensors, regular
//! feature fields, and rotated boxes. This module is the single source of
//! truth for what "rotate by a group element" means in each space.
//!
//! Orientation channels are 0-based: channel `k` is associated with the
//! rotation angle `2πk/N`. The action on a regular field rotates every
//! spatial slice by `2πk/N` and cyclically shifts orientation channels so
//! that output channel `i` reads input channel `(i - k) mod N`; this shift
//! direction is the one that makes the lifting convolution's equivariance
//! test pass (it is asserted by tests, not assumed).

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{rel_l2, PlanarTensor};
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

/// The cyclic group of `N` planar rotations by multiples of `2π/N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CyclicGroup {
    order: usize,
}

impl CyclicGroup {
    pub fn new(order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidArgument(
                "group order must be a positive integer".into(),
            ));
        }
        Ok(Self { order })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    fn check(&self, k: usize) -> Result<()> {
        if k >= self.order {
            return Err(Error::InvalidArgument(format!(
                "element index {} out of range for C_{}",
                k, self.order
            )));
        }
        Ok(())
    }

    /// Rotation angle of element `k`, in radians.
    pub fn angle_of(&self, k: usize) -> Result<f64> {
        self.check(k)?;
        Ok(TAU * k as f64 / self.order as f64)
    }

    pub fn compose(&self, a: usize, b: usize) -> Result<usize> {
        self.check(a)?;
        self.check(b)?;
        Ok((a + b) % self.order)
    }

    pub fn inverse(&self, a: usize) -> Result<usize> {
        self.check(a)?;
        Ok((self.order - a) % self.order)
    }
}

/// A rotation-equivariant feature field: `(K, N, H, W)` values under a
/// cyclic group of order `N`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularField<T> {
    group: CyclicGroup,
    base_channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> RegularField<T> {
    pub fn zeros(group: CyclicGroup, base_channels: usize, height: usize, width: usize) -> Result<Self> {
        if base_channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidArgument(
                "field dimensions must be at least 1".into(),
            ));
        }
        Ok(Self {
            group,
            base_channels,
            height,
            width,
            data: vec![T::zero(); base_channels * group.order() * height * width],
        })
    }

    pub fn from_vec(
        group: CyclicGroup,
        base_channels: usize,
        height: usize,
        width: usize,
        data: Vec<T>,
    ) -> Result<Self> {
        let expected = base_channels * group.order() * height * width;
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values for a ({},{},{},{}) field, got {}",
                expected,
                base_channels,
                group.order(),
                height,
                width,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("field payload".into()));
        }
        Ok(Self {
            group,
            base_channels,
            height,
            width,
            data,
        })
    }

    pub(crate) fn from_vec_unchecked(
        group: CyclicGroup,
        base_channels: usize,
        height: usize,
        width: usize,
        data: Vec<T>,
    ) -> Self {
        debug_assert_eq!(
            data.len(),
            base_channels * group.order() * height * width
        );
        Self {
            group,
            base_channels,
            height,
            width,
            data,
        }
    }

    pub fn group(&self) -> CyclicGroup {
        self.group
    }
    pub fn orientations(&self) -> usize {
        self.group.order()
    }
    pub fn base_channels(&self) -> usize {
        self.base_channels
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
    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The `(c, i)` spatial slice as a contiguous `H*W` view.
    pub fn plane(&self, c: usize, i: usize) -> &[T] {
        let hw = self.height * self.width;
        let base = (c * self.orientations() + i) * hw;
        &self.data[base..base + hw]
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, y: usize, x: usize) -> T {
        self.data[((c * self.orientations() + i) * self.height + y) * self.width + x]
    }

    /// Reinterpret as a `(K·N, H, W)` planar tensor (same memory layout).
    pub fn to_planar(&self) -> PlanarTensor<T> {
        PlanarTensor::from_vec_unchecked(
            self.base_channels * self.orientations(),
            self.height,
            self.width,
            self.data.clone(),
        )
    }

    /// Inverse of [`to_planar`]: wrap a `(K·N, H, W)` tensor as a field.
    pub fn from_planar(group: CyclicGroup, base_channels: usize, t: PlanarTensor<T>) -> Result<Self> {
        if t.channels() != base_channels * group.order() {
            return Err(Error::ShapeMismatch(format!(
                "{} channels cannot form a ({}, {}) field",
                t.channels(),
                base_channels,
                group.order()
            )));
        }
        let (h, w) = (t.height(), t.width());
        Ok(Self::from_vec_unchecked(group, base_channels, h, w, t.into_data()))
    }

    /// Relative L2 distance to another field of the same shape.
    pub fn rel_l2(&self, other: &Self) -> f64 {
        rel_l2(&self.data, &other.data)
    }
}

/// Apply group element `k` to a regular field: every spatial slice rotates
/// by `2πk/N` about the field center while orientation channels shift
/// cyclically, `out[c, i] = rotate(f[c, (i - k) mod N], 2πk/N)`.
///
/// Requires a square spatial extent so the quarter-turn paths stay exact.
pub fn act_on_field<T: Scalar>(f: &RegularField<T>, k: usize) -> Result<RegularField<T>> {
    f.group().check(k)?;
    if f.height() != f.width() {
        return Err(Error::ShapeMismatch(format!(
            "act_on_field requires a square field, got {}x{}",
            f.height(),
            f.width()
        )));
    }
    let n = f.orientations();
    let angle = f.group().angle_of(k)?;
    let (h, w) = (f.height(), f.width());
    let center = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut data = Vec::with_capacity(f.data().len());
    for c in 0..f.base_channels() {
        for i in 0..n {
            let src = (i + n - k % n) % n;
            data.extend(crate::tensor::rotate_plane(
                f.plane(c, src),
                h,
                w,
                angle,
                center,
            ));
        }
    }
    Ok(RegularField::from_vec_unchecked(
        f.group(),
        f.base_channels(),
        h,
        w,
        data,
    ))
}

/// A rotated region of interest: center `(x, y)`, size `(w, h)` in pixels,
/// orientation `theta` in radians normalized to `[0, 2π)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RRoI {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

impl RRoI {
    pub fn new(x: f64, y: f64, w: f64, h: f64, theta: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
            return Err(Error::DegenerateRroi);
        }
        if !(x.is_finite() && y.is_finite() && theta.is_finite()) {
            return Err(Error::NonFinite("RRoI coordinates".into()));
        }
        Ok(Self {
            x,
            y,
            w,
            h,
            theta: theta.rem_euclid(TAU),
        })
    }

    /// Radius of the circumscribed circle.
    pub fn circumradius(&self) -> f64 {
        ((self.w / 2.0).powi(2) + (self.h / 2.0).powi(2)).sqrt()
    }
}

/// Rotate an RRoI by `angle` about `image_center`: the center moves with the
/// rotation, the size is unchanged, and `theta` advances by `angle`
/// (mod 2π).
pub fn act_on_rroi(b: &RRoI, angle: f64, image_center: (f64, f64)) -> RRoI {
    assert!(angle.is_finite(), "rotation angle must be finite");
    let (cx, cy) = image_center;
    let (sin, cos) = angle.sin_cos();
    let dx = b.x - cx;
    let dy = b.y - cy;
    // R(angle) in the shared y-down convention.
    RRoI {
        x: cos * dx + sin * dy + cx,
        y: -sin * dx + cos * dy + cy,
        w: b.w,
        h: b.h,
        theta: (b.theta + angle).rem_euclid(TAU),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn group_bookkeeping() {
        let g = CyclicGroup::new(8).unwrap();
        assert_eq!(g.compose(1, 7).unwrap(), 0);
        assert_eq!(g.inverse(0).unwrap(), 0);
        assert_eq!(g.inverse(3).unwrap(), 5);
        assert!((g.angle_of(3).unwrap() - 3.0 * PI / 4.0).abs() < 1e-15);
        assert!(g.angle_of(8).is_err());
        assert!(CyclicGroup::new(0).is_err());
    }

    fn constant_field(values: &[f64], side: usize) -> RegularField<f64> {
        let g = CyclicGroup::new(values.len()).unwrap();
        let mut data = Vec::new();
        for &v in values {
            data.extend(std::iter::repeat(v).take(side * side));
        }
        RegularField::from_vec(g, 1, side, side, data).unwrap()
    }

    #[test]
    fn act_identity_element() {
        let f = constant_field(&[10.0, 20.0, 30.0, 40.0], 4);
        let out = act_on_field(&f, 0).unwrap();
        assert_eq!(out.data(), f.data());
    }

    #[test]
    fn act_cyclic_shift_of_constants() {
        // Spatial rotation of constant planes is the identity, so only the
        // channel shift remains: k=1 sends [10,20,30,40] to [40,10,20,30].
        let f = constant_field(&[10.0, 20.0, 30.0, 40.0], 4);
        let out = act_on_field(&f, 1).unwrap();
        for (i, &expect) in [40.0, 10.0, 20.0, 30.0].iter().enumerate() {
            assert_eq!(out.get(0, i, 2, 1), expect, "channel {i}");
        }
    }

    #[test]
    fn act_full_cycle_n4_exact() {
        let mut rng = crate::rng::SplitMix64::new(5);
        let g = CyclicGroup::new(4).unwrap();
        let data: Vec<f64> = (0..2 * 4 * 6 * 6).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let f = RegularField::from_vec(g, 2, 6, 6, data).unwrap();
        let mut r = f.clone();
        for _ in 0..4 {
            r = act_on_field(&r, 1).unwrap();
        }
        assert_eq!(r.data(), f.data());
    }

    #[test]
    fn act_inverse_roundtrip_n4_exact() {
        let mut rng = crate::rng::SplitMix64::new(6);
        let g = CyclicGroup::new(4).unwrap();
        let data: Vec<f64> = (0..4 * 8 * 8).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let f = RegularField::from_vec(g, 1, 8, 8, data).unwrap();
        for k in 0..4 {
            let r = act_on_field(&act_on_field(&f, k).unwrap(), g.inverse(k).unwrap()).unwrap();
            assert_eq!(r.data(), f.data(), "k={k}");
        }
    }

    #[test]
    fn act_group_law_quarter_turns() {
        let mut rng = crate::rng::SplitMix64::new(7);
        let g = CyclicGroup::new(4).unwrap();
        let data: Vec<f64> = (0..4 * 6 * 6).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let f = RegularField::from_vec(g, 1, 6, 6, data).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                let lhs = act_on_field(&act_on_field(&f, a).unwrap(), b).unwrap();
                let rhs = act_on_field(&f, (a + b) % 4).unwrap();
                assert_eq!(lhs.data(), rhs.data(), "a={a} b={b}");
            }
        }
    }

    #[test]
    fn act_requires_square_and_valid_element() {
        let g = CyclicGroup::new(4).unwrap();
        let f = RegularField::<f64>::zeros(g, 1, 4, 6).unwrap();
        assert!(act_on_field(&f, 1).is_err());
        let f2 = RegularField::<f64>::zeros(g, 1, 4, 4).unwrap();
        assert!(act_on_field(&f2, 4).is_err());
    }

    #[test]
    fn rroi_validation_and_normalization() {
        assert!(RRoI::new(0.0, 0.0, 0.0, 1.0, 0.0).is_err());
        assert!(RRoI::new(0.0, 0.0, 1.0, -2.0, 0.0).is_err());
        let b = RRoI::new(1.0, 2.0, 3.0, 4.0, -FRAC_PI_2).unwrap();
        assert!((b.theta - 3.0 * FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn rroi_identity_rotation() {
        let b = RRoI::new(10.0, 0.0, 4.0, 2.0, 0.0).unwrap();
        let r = act_on_rroi(&b, 0.0, (0.0, 0.0));
        assert_eq!(r, b);
    }

    #[test]
    fn rroi_quarter_turn_matches_rotation_matrix() {
        // In the shared y-down CCW convention a quarter turn about the
        // origin sends (10, 0) to (0, -10); theta advances by π/2.
        let b = RRoI::new(10.0, 0.0, 4.0, 2.0, 0.0).unwrap();
        let r = act_on_rroi(&b, FRAC_PI_2, (0.0, 0.0));
        assert!(r.x.abs() < 1e-12);
        assert!((r.y + 10.0).abs() < 1e-12);
        assert_eq!((r.w, r.h), (4.0, 2.0));
        assert!((r.theta - FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn rroi_consistent_with_image_quarter_turn() {
        // The box transform must agree with where rotate_planar moves image
        // content: mark one pixel, rotate both, check they still coincide.
        let side = 9;
        let mut img = PlanarTensor::<f64>::zeros(1, side, side).unwrap();
        img.set(0, 2, 6, 1.0);
        let b = RRoI::new(6.0, 2.0, 1.0, 1.0, 0.0).unwrap();
        let center = img.center();
        for k in 0..4 {
            let angle = k as f64 * FRAC_PI_2;
            let rimg = crate::tensor::rotate_planar(&img, angle, None);
            let rb = act_on_rroi(&b, angle, center);
            assert!(
                (rimg.get(0, rb.y.round() as usize, rb.x.round() as usize) - 1.0).abs() < 1e-12,
                "k={k} box=({}, {})",
                rb.x,
                rb.y
            );
        }
    }

    #[test]
    fn rroi_two_half_turns_compose_to_identity() {
        let b = RRoI::new(3.0, 4.0, 2.0, 1.0, 1.0).unwrap();
        let r = act_on_rroi(&act_on_rroi(&b, PI, (5.0, 5.0)), PI, (5.0, 5.0));
        assert!((r.x - b.x).abs() < 1e-12);
        assert!((r.y - b.y).abs() < 1e-12);
        assert!((r.theta - b.theta).abs() < 1e-12);
    }

    #[test]
    fn rroi_action_composes_additively() {
        let b = RRoI::new(3.0, 4.0, 2.0, 1.0, 0.7).unwrap();
        let c = (1.5, -2.0);
        let (a1, a2) = (0.9, 2.3);
        let lhs = act_on_rroi(&act_on_rroi(&b, a1, c), a2, c);
        let rhs = act_on_rroi(&b, a1 + a2, c);
        assert!((lhs.x - rhs.x).abs() < 1e-12);
        assert!((lhs.y - rhs.y).abs() < 1e-12);
        assert!((lhs.theta - rhs.theta).abs() < 1e-12);
    }
}
