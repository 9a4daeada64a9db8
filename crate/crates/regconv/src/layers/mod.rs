//! Rotation-equivariant network layers: lifting convolution, group
//! convolution, group-shared normalization, pointwise nonlinearity and
//! spatial pooling. A miniature residual backbone with a feature-pyramid
//! merge lives in [`backbone`]; checkpoint serialization in [`checkpoint`].
//!
//! # Weight sharing and expansion
//!
//! Both convolution layers store one *base* filter bank and expand it into
//! `N` rotated copies on the fly, so the trainable parameter count is `1/N`
//! of a plain convolution with the same effective channel budget.
//!
//! Expansion slice `r` rotates the base filter spatially by `+2πr/N` about
//! the kernel center (group convolutions also cyclically shift the
//! input-orientation axis by `r`). Together with the `(i - k) mod N` channel
//! shift in [`crate::group::act_on_field`] this is the sign pairing under
//! which the equivariance contract `Φ(T_k I) = T_k Φ(I)` holds; the pairing
//! is pinned by the equivariance tests below, not assumed.

pub mod backbone;
pub mod checkpoint;

use crate::error::{Error, Result};
use crate::group::{CyclicGroup, RegularField};
use crate::scalar::Scalar;
use crate::tensor::{conv2d_plain, quarter_turn_source, quarter_turns, PlanarTensor, Tensor4};
use std::f64::consts::TAU;

/// Width of the Gaussian radial atoms that carry filter content between
/// rotations. Wide enough that the tap-grid evaluation of an atom is nearly
/// independent of its sub-grid position (the Poisson-summation fluctuation
/// of `Σ_u G(u - q)` over `q` decays like `exp(-2π²σ²/2)`, ≈ 8e-4 here);
/// narrower atoms make per-atom conv gains angle-dependent at the percent
/// level, which is exactly an equivariance error.
const FILTER_ATOM_SIGMA: f64 = 1.0;
/// Atoms per ring; rotations by multiples of `2π/8` permute each ring
/// exactly.
const RING_ATOMS: usize = 8;

/// Filter atom layout for an odd `k × k` kernel: one atom at the center and
/// `(k² - 1)/8` rings of eight Gaussian atoms at 45° spacing, giving exactly
/// `k²` atoms. Returns the atom positions (kernel-centered coordinates) and
/// each atom's ring radius.
fn filter_atom_layout(k: usize) -> (Vec<(f64, f64)>, Vec<f64>) {
    debug_assert!(k % 2 == 1);
    let rings = (k * k - 1) / RING_ATOMS;
    let mut positions = vec![(0.0, 0.0)];
    let mut radii = vec![0.0];
    let outer = 1.1 * (k as f64 - 1.0) / 2.0;
    for ring in 1..=rings {
        let rho = outer * ring as f64 / rings as f64;
        for m in 0..RING_ATOMS {
            let phi = TAU * m as f64 / RING_ATOMS as f64;
            positions.push((rho * phi.cos(), -rho * phi.sin()));
            radii.push(rho);
        }
    }
    (positions, radii)
}

/// Evaluation matrix `S[u][a] = exp(-|p_u - q_a|²/2σ²)` of the atoms at the
/// tap grid points (row-major, taps × atoms).
fn filter_sampling_matrix(k: usize) -> Vec<f64> {
    let n = k * k;
    let (atoms, _) = filter_atom_layout(k);
    let c = (k as f64 - 1.0) / 2.0;
    let mut s = vec![0.0f64; n * n];
    for u in 0..n {
        let (uy, ux) = ((u / k) as f64 - c, (u % k) as f64 - c);
        for (a, &(ax, ay)) in atoms.iter().enumerate() {
            let d2 = (uy - ay).powi(2) + (ux - ax).powi(2);
            s[u * n + a] = (-d2 / (2.0 * FILTER_ATOM_SIGMA * FILTER_ATOM_SIGMA)).exp();
        }
    }
    s
}

/// Rotation of the atom coefficients by `angle`: the center is fixed and
/// each ring rotates within itself. Multiples of `2π/8` are exact
/// permutations of the ring; other angles interpolate along the ring with a
/// chordal-Gaussian cardinal kernel (the restriction of the 2D atom Gaussian
/// to the ring).
fn coefficient_rotation(k: usize, angle: f64) -> Vec<f64> {
    let n = k * k;
    let rings = (n - 1) / RING_ATOMS;
    let mut m = vec![0.0f64; n * n];
    m[0] = 1.0;
    let step = TAU / RING_ATOMS as f64;
    let turns = angle.rem_euclid(TAU) / step;
    let whole = turns.round();
    let is_exact = (turns - whole).abs() < 1e-12;
    for ring in 1..=rings {
        let base = 1 + (ring - 1) * RING_ATOMS;
        let (_, radii) = filter_atom_layout(k);
        let rho = radii[base];
        if is_exact {
            // Coefficient at slot j moves in from slot (j - shift) mod 8,
            // matching "rotate the mixture by +angle".
            let shift = whole as usize % RING_ATOMS;
            for j in 0..RING_ATOMS {
                m[(base + j) * n + base + (j + RING_ATOMS - shift) % RING_ATOMS] = 1.0;
            }
        } else {
            let chord_gauss = |dphi: f64| {
                let chord = 2.0 * rho * (dphi / 2.0).sin();
                (-(chord * chord) / (2.0 * FILTER_ATOM_SIGMA * FILTER_ATOM_SIGMA)).exp()
            };
            let mut g0 = vec![0.0f64; RING_ATOMS * RING_ATOMS];
            let mut gr = vec![0.0f64; RING_ATOMS * RING_ATOMS];
            for j in 0..RING_ATOMS {
                for p in 0..RING_ATOMS {
                    let dphi = (j as f64 - p as f64) * step;
                    g0[j * RING_ATOMS + p] = chord_gauss(dphi);
                    gr[j * RING_ATOMS + p] = chord_gauss(dphi - angle);
                }
            }
            let g0_inv = invert_dense(&g0, RING_ATOMS);
            for j in 0..RING_ATOMS {
                for p in 0..RING_ATOMS {
                    let mut acc = 0.0;
                    for q in 0..RING_ATOMS {
                        acc += gr[j * RING_ATOMS + q] * g0_inv[q * RING_ATOMS + p];
                    }
                    m[(base + j) * n + base + p] = acc;
                }
            }
        }
    }
    m
}

/// Linear map (row-major `out[u] = Σ_a m[u*n + a]·in[a]`) that rotates a
/// `kh × kw` filter plane counter-clockwise by `angle` about its center.
///
/// Quarter turns are exact index permutations of the taps. Other angles go
/// through the ring-atom representation: taps are interpreted as samples of
/// a Gaussian mixture on the ring atoms (`c = S⁻¹·taps`), the coefficients
/// rotate within their rings — exactly, for multiples of 45° — and the
/// rotated mixture is resampled on the tap grid (`S·R·S⁻¹`). Plain bilinear
/// tap resampling is far too crude here: it corrupts the kernel's low-order
/// moments by tens of percent, which multiplies through every layer of a
/// stack.
pub(crate) fn filter_rotation_matrix(kh: usize, kw: usize, angle: f64) -> Vec<f64> {
    let n = kh * kw;
    if let Some(k) = quarter_turns(angle) {
        if kh == kw || k % 2 == 0 {
            let mut m = vec![0.0f64; n * n];
            for y in 0..kh {
                for x in 0..kw {
                    let (sy, sx) = quarter_turn_source(k, kh, y, x);
                    m[(y * kw + x) * n + sy * kw + sx] = 1.0;
                }
            }
            return m;
        }
    }
    assert_eq!(kh, kw, "rotation of non-square kernels is undefined");
    let s = filter_sampling_matrix(kh);
    let s_inv = invert_dense(&s, n);
    let r = coefficient_rotation(kh, angle);
    let mut rs_inv = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for q in 0..n {
                acc += r[i * n + q] * s_inv[q * n + j];
            }
            rs_inv[i * n + j] = acc;
        }
    }
    let mut m = vec![0.0f64; n * n];
    for u in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for q in 0..n {
                acc += s[u * n + q] * rs_inv[q * n + j];
            }
            m[u * n + j] = acc;
        }
    }
    m
}

/// Draw smooth filter taps for `rows` output channels of `planes_per_row`
/// kernel planes each: random coefficients on the ring atoms, radially
/// windowed, evaluated at the tap grid, and anchored by a fixed-magnitude
/// center-atom component whose sign is shared by all planes of a row.
///
/// Filters built this way live in the subspace the rotation matrices move
/// essentially losslessly, and the isotropic anchor keeps per-channel
/// response magnitudes comparable: without it the shared normalization
/// rescales weak channels to unit variance and amplifies any propagated
/// equivariance error by the response spread, layer after layer. The anchor
/// sign is shared by all planes of a row. 1×1 kernels rotate trivially and
/// are left as plain uniforms. Returns raw (unscaled) values.
pub(crate) fn sample_smooth_filter_taps(
    rng: &mut crate::rng::SplitMix64,
    rows: usize,
    planes_per_row: usize,
    k: usize,
) -> Vec<f64> {
    let n = k * k;
    if n == 1 {
        return (0..rows * planes_per_row).map(|_| rng.uniform(-1.0, 1.0)).collect();
    }
    let s = filter_sampling_matrix(k);
    let (_, radii) = filter_atom_layout(k);
    let window_sigma = 0.6;
    let window: Vec<f64> = radii
        .iter()
        .map(|r| (-(r * r) / (2.0 * window_sigma * window_sigma)).exp())
        .collect();
    let anchor = 2.0;
    let mut out = vec![0.0f64; rows * planes_per_row * n];
    for row in 0..rows {
        let sign = if rng.next_f64() < 0.5 { -1.0 } else { 1.0 };
        for p in 0..planes_per_row {
            let mut coeffs: Vec<f64> =
                (0..n).map(|a| rng.uniform(-1.0, 1.0) * window[a]).collect();
            coeffs[0] = sign * anchor;
            for u in 0..n {
                let mut acc = 0.0;
                for a in 0..n {
                    acc += s[u * n + a] * coeffs[a];
                }
                out[(row * planes_per_row + p) * n + u] = acc;
            }
        }
    }
    out
}

/// Dense matrix inverse by Gauss-Jordan with partial pivoting. The Gaussian
/// gram matrix is small (kernel-size squared) and strongly diagonally
/// dominant at the σ used here.
fn invert_dense(a: &[f64], n: usize) -> Vec<f64> {
    let mut aug = vec![0.0f64; n * 2 * n];
    for r in 0..n {
        aug[r * 2 * n..r * 2 * n + n].copy_from_slice(&a[r * n..(r + 1) * n]);
        aug[r * 2 * n + n + r] = 1.0;
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| {
                aug[i * 2 * n + col]
                    .abs()
                    .partial_cmp(&aug[j * 2 * n + col].abs())
                    .unwrap()
            })
            .unwrap();
        if pivot != col {
            for j in 0..2 * n {
                aug.swap(col * 2 * n + j, pivot * 2 * n + j);
            }
        }
        let p = aug[col * 2 * n + col];
        assert!(p.abs() > 1e-12, "atom gram matrix is singular");
        for j in 0..2 * n {
            aug[col * 2 * n + j] /= p;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let factor = aug[r * 2 * n + col];
            if factor == 0.0 {
                continue;
            }
            for j in 0..2 * n {
                aug[r * 2 * n + j] -= factor * aug[col * 2 * n + j];
            }
        }
    }
    let mut inv = vec![0.0f64; n * n];
    for r in 0..n {
        inv[r * n..(r + 1) * n].copy_from_slice(&aug[r * 2 * n + n..(r + 1) * 2 * n]);
    }
    inv
}

/// Rotate every `(kh, kw)` plane of a filter block through the rotation
/// matrix. `count` is the number of leading planes (e.g. `C_in` for one lift
/// slice).
fn apply_rotation_matrix<T: Scalar>(
    src: &[T],
    count: usize,
    plane: usize,
    m: &[f64],
) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for p in 0..count {
        let s = &src[p * plane..(p + 1) * plane];
        let o = &mut out[p * plane..(p + 1) * plane];
        for u in 0..plane {
            let mut acc = 0.0;
            for a in 0..plane {
                let w = m[u * plane + a];
                if w != 0.0 {
                    acc += w * s[a].to_f64();
                }
            }
            o[u] = T::from_f64(acc);
        }
    }
    out
}

/// Adjoint of [`apply_rotation_matrix`] (the transpose map).
fn apply_rotation_matrix_adjoint<T: Scalar>(
    grad: &[T],
    count: usize,
    plane: usize,
    m: &[f64],
) -> Vec<T> {
    let mut out = vec![T::zero(); grad.len()];
    for p in 0..count {
        let g = &grad[p * plane..(p + 1) * plane];
        let o = &mut out[p * plane..(p + 1) * plane];
        for a in 0..plane {
            let mut acc = 0.0;
            for u in 0..plane {
                let w = m[u * plane + a];
                if w != 0.0 {
                    acc += w * g[u].to_f64();
                }
            }
            o[a] = T::from_f64(acc);
        }
    }
    out
}

/// Expand a lifting filter bank `(K_out, C_in, kH, kW)` into the rotated
/// stack `(K_out, N, C_in, kH, kW)`, returned flat in conv layout
/// `(K_out·N, C_in, kH, kW)`: slice `r` is the base filter rotated by
/// `+2πr/N` about the kernel center.
pub(crate) fn expand_lift_kernel<T: Scalar>(
    base: &[T],
    k_out: usize,
    c_in: usize,
    kh: usize,
    kw: usize,
    n: usize,
) -> Vec<T> {
    let slice = c_in * kh * kw;
    let matrices: Vec<Vec<f64>> = (0..n)
        .map(|r| filter_rotation_matrix(kh, kw, TAU * r as f64 / n as f64))
        .collect();
    let mut out = Vec::with_capacity(k_out * n * slice);
    for k in 0..k_out {
        let src = &base[k * slice..(k + 1) * slice];
        for m in &matrices {
            out.extend(apply_rotation_matrix(src, c_in, kh * kw, m));
        }
    }
    out
}

/// Adjoint of [`expand_lift_kernel`].
pub(crate) fn expand_lift_adjoint<T: Scalar>(
    grad_out: &[T],
    k_out: usize,
    c_in: usize,
    kh: usize,
    kw: usize,
    n: usize,
) -> Vec<T> {
    let plane = kh * kw;
    let slice = c_in * plane;
    let matrices: Vec<Vec<f64>> = (0..n)
        .map(|r| filter_rotation_matrix(kh, kw, TAU * r as f64 / n as f64))
        .collect();
    let mut grad_base = vec![T::zero(); k_out * slice];
    for k in 0..k_out {
        for (r, m) in matrices.iter().enumerate() {
            let gsrc = &grad_out[(k * n + r) * slice..(k * n + r + 1) * slice];
            let adj = apply_rotation_matrix_adjoint(gsrc, c_in, plane, m);
            for (dst, g) in grad_base[k * slice..(k + 1) * slice].iter_mut().zip(adj) {
                *dst += g;
            }
        }
    }
    grad_base
}

/// Expand a group-convolution filter bank `(K_out, K_in, N, kH, kW)` into
/// the conv-ready stack `(K_out·N, K_in·N, kH, kW)`: output-orientation
/// slice `r` rotates spatially by `+2πr/N` and shifts the input-orientation
/// axis so that position `j` reads base orientation `(j - r) mod N`.
pub(crate) fn expand_group_kernel<T: Scalar>(
    base: &[T],
    k_out: usize,
    k_in: usize,
    n: usize,
    kh: usize,
    kw: usize,
) -> Vec<T> {
    let plane = kh * kw;
    let matrices: Vec<Vec<f64>> = (0..n)
        .map(|r| filter_rotation_matrix(kh, kw, TAU * r as f64 / n as f64))
        .collect();
    let mut out = vec![T::zero(); k_out * n * k_in * n * plane];
    for ko in 0..k_out {
        for (r, m) in matrices.iter().enumerate() {
            for ki in 0..k_in {
                for j in 0..n {
                    let src_j = (j + n - r) % n;
                    let src = &base[((ko * k_in + ki) * n + src_j) * plane..][..plane];
                    let rotated = apply_rotation_matrix(src, 1, plane, m);
                    let dst = ((ko * n + r) * k_in * n + ki * n + j) * plane;
                    out[dst..dst + plane].copy_from_slice(&rotated);
                }
            }
        }
    }
    out
}

/// Adjoint of [`expand_group_kernel`].
pub(crate) fn expand_group_adjoint<T: Scalar>(
    grad_out: &[T],
    k_out: usize,
    k_in: usize,
    n: usize,
    kh: usize,
    kw: usize,
) -> Vec<T> {
    let plane = kh * kw;
    let matrices: Vec<Vec<f64>> = (0..n)
        .map(|r| filter_rotation_matrix(kh, kw, TAU * r as f64 / n as f64))
        .collect();
    let mut grad_base = vec![T::zero(); k_out * k_in * n * plane];
    for ko in 0..k_out {
        for (r, m) in matrices.iter().enumerate() {
            for ki in 0..k_in {
                for j in 0..n {
                    let src_j = (j + n - r) % n;
                    let gsrc = &grad_out[((ko * n + r) * k_in * n + ki * n + j) * plane..][..plane];
                    let adj = apply_rotation_matrix_adjoint(gsrc, 1, plane, m);
                    let dst = ((ko * k_in + ki) * n + src_j) * plane;
                    for (d, g) in grad_base[dst..dst + plane].iter_mut().zip(adj) {
                        *d += g;
                    }
                }
            }
        }
    }
    grad_base
}

/// First equivariant layer: convolves a planar image with `N` rotated copies
/// of each base filter, lifting it to a regular feature field.
#[derive(Debug, Clone)]
pub struct LiftConvLayer<T> {
    base: Tensor4<T>,
    stride: usize,
    padding: usize,
    group: CyclicGroup,
}

impl<T: Scalar> LiftConvLayer<T> {
    /// `base` has shape `(K_out, C_in, kH, kW)` with odd `kH = kW`.
    pub fn new(base: Tensor4<T>, stride: usize, padding: usize, group: CyclicGroup) -> Result<Self> {
        let [_, _, kh, kw] = base.dims();
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidArgument("kernel size must be odd".into()));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be at least 1".into()));
        }
        Ok(Self {
            base,
            stride,
            padding,
            group,
        })
    }

    pub fn base(&self) -> &Tensor4<T> {
        &self.base
    }
    pub fn group(&self) -> CyclicGroup {
        self.group
    }

    /// Trainable parameter count (the expansion adds none).
    pub fn param_count(&self) -> usize {
        self.base.dims().iter().product()
    }

    /// Expanded filter stack in conv layout `(K_out·N, C_in, kH, kW)`;
    /// row `k·N + r` is base filter `k` rotated by `+2πr/N`.
    pub fn expand(&self) -> Tensor4<T> {
        let [k_out, c_in, kh, kw] = self.base.dims();
        let n = self.group.order();
        Tensor4::from_vec_unchecked(
            [k_out * n, c_in, kh, kw],
            expand_lift_kernel(self.base.data(), k_out, c_in, kh, kw, n),
        )
    }
}

/// Expanded lifting filters as a standalone operation.
pub fn expand_lift_filters<T: Scalar>(layer: &LiftConvLayer<T>) -> Tensor4<T> {
    layer.expand()
}

/// Lift a planar image to a regular field under the layer's group.
pub fn lift_forward<T: Scalar>(
    img: &PlanarTensor<T>,
    layer: &LiftConvLayer<T>,
) -> Result<RegularField<T>> {
    let [k_out, _, _, _] = layer.base.dims();
    let out = conv2d_plain(img, &layer.expand(), layer.stride, layer.padding)?;
    RegularField::from_planar(layer.group, k_out, out)
}

/// Equivariant layer from regular fields to regular fields with rotation
/// weight sharing.
#[derive(Debug, Clone)]
pub struct GConvLayer<T> {
    base: Vec<T>,
    k_out: usize,
    k_in: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    group: CyclicGroup,
}

impl<T: Scalar> GConvLayer<T> {
    /// `base` is flat `(K_out, K_in, N, kH, kW)` with odd `kH = kW`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        base: Vec<T>,
        k_out: usize,
        k_in: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
        group: CyclicGroup,
    ) -> Result<Self> {
        let n = group.order();
        if base.len() != k_out * k_in * n * kh * kw {
            return Err(Error::ShapeMismatch(format!(
                "expected {} base weights, got {}",
                k_out * k_in * n * kh * kw,
                base.len()
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidArgument("kernel size must be odd".into()));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be at least 1".into()));
        }
        Ok(Self {
            base,
            k_out,
            k_in,
            kh,
            kw,
            stride,
            padding,
            group,
        })
    }

    pub fn group(&self) -> CyclicGroup {
        self.group
    }
    pub fn base(&self) -> &[T] {
        &self.base
    }

    pub fn param_count(&self) -> usize {
        self.k_out * self.k_in * self.group.order() * self.kh * self.kw
    }

    /// Expanded filter stack in conv layout `(K_out·N, K_in·N, kH, kW)`.
    pub fn expand(&self) -> Tensor4<T> {
        let n = self.group.order();
        Tensor4::from_vec_unchecked(
            [self.k_out * n, self.k_in * n, self.kh, self.kw],
            expand_group_kernel(&self.base, self.k_out, self.k_in, n, self.kh, self.kw),
        )
    }
}

/// Group convolution over a regular field.
pub fn gconv_forward<T: Scalar>(
    f: &RegularField<T>,
    layer: &GConvLayer<T>,
) -> Result<RegularField<T>> {
    if f.group() != layer.group {
        return Err(Error::ShapeMismatch("field and layer group differ".into()));
    }
    if f.base_channels() != layer.k_in {
        return Err(Error::ShapeMismatch(format!(
            "layer expects {} base channels, field has {}",
            layer.k_in,
            f.base_channels()
        )));
    }
    let out = conv2d_plain(&f.to_planar(), &layer.expand(), layer.stride, layer.padding)?;
    RegularField::from_planar(layer.group, layer.k_out, out)
}

/// Shared normalization kernel: statistics per leading group over the
/// remaining axes. Returns the normalized data plus the per-group mean and
/// inverse standard deviation used (needed by the backward pass).
pub(crate) fn group_norm_kernel<T: Scalar>(
    data: &[T],
    groups: usize,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> (Vec<T>, Vec<f64>, Vec<f64>) {
    let inner = data.len() / groups;
    let mut out = vec![T::zero(); data.len()];
    let mut means = vec![0.0f64; groups];
    let mut inv_stds = vec![0.0f64; groups];
    for g in 0..groups {
        let chunk = &data[g * inner..(g + 1) * inner];
        let mean = chunk.iter().map(|v| v.to_f64()).sum::<f64>() / inner as f64;
        let var = chunk
            .iter()
            .map(|v| {
                let d = v.to_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / inner as f64;
        let inv_std = 1.0 / (var.max(0.0) + eps).sqrt();
        means[g] = mean;
        inv_stds[g] = inv_std;
        let (ga, be) = (gamma[g].to_f64(), beta[g].to_f64());
        for (o, v) in out[g * inner..(g + 1) * inner].iter_mut().zip(chunk) {
            *o = T::from_f64((v.to_f64() - mean) * inv_std * ga + be);
        }
    }
    (out, means, inv_stds)
}

/// Group-shared batch normalization: scale and bias per base channel with
/// statistics computed jointly over the `(N, H, W)` axes — never per
/// orientation channel, which would break equivariance.
///
/// At desk-scale batch sizes the operational mode is per-sample statistics;
/// running estimates are tracked for inference use.
#[derive(Debug, Clone)]
pub struct GroupBatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Scalar> GroupBatchNorm<T> {
    pub fn new(base_channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); base_channels],
            beta: vec![T::zero(); base_channels],
            running_mean: vec![0.0; base_channels],
            running_var: vec![1.0; base_channels],
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    /// Normalize with statistics from this field, updating the running
    /// estimates.
    pub fn forward_train(&mut self, f: &RegularField<T>) -> Result<RegularField<T>> {
        let out = gbn_forward(f, &self.gamma, &self.beta, self.eps)?;
        let inner = (f.data().len() / f.base_channels()) as f64;
        for k in 0..f.base_channels() {
            let chunk_mean = (0..f.orientations())
                .flat_map(|i| f.plane(k, i))
                .map(|v| v.to_f64())
                .sum::<f64>()
                / inner;
            let chunk_var = (0..f.orientations())
                .flat_map(|i| f.plane(k, i))
                .map(|v| (v.to_f64() - chunk_mean).powi(2))
                .sum::<f64>()
                / inner;
            self.running_mean[k] = (1.0 - self.momentum) * self.running_mean[k] + self.momentum * chunk_mean;
            self.running_var[k] = (1.0 - self.momentum) * self.running_var[k] + self.momentum * chunk_var;
        }
        Ok(out)
    }

    /// Normalize with the stored running statistics.
    pub fn forward_eval(&self, f: &RegularField<T>) -> Result<RegularField<T>> {
        if self.gamma.len() != f.base_channels() {
            return Err(Error::ShapeMismatch(format!(
                "norm has {} channels, field has {}",
                self.gamma.len(),
                f.base_channels()
            )));
        }
        let inner = f.data().len() / f.base_channels();
        let mut out = vec![T::zero(); f.data().len()];
        for k in 0..f.base_channels() {
            let inv_std = 1.0 / (self.running_var[k] + self.eps).sqrt();
            let (ga, be) = (self.gamma[k].to_f64(), self.beta[k].to_f64());
            for (o, v) in out[k * inner..(k + 1) * inner]
                .iter_mut()
                .zip(&f.data()[k * inner..(k + 1) * inner])
            {
                *o = T::from_f64((v.to_f64() - self.running_mean[k]) * inv_std * ga + be);
            }
        }
        Ok(RegularField::from_vec_unchecked(
            f.group(),
            f.base_channels(),
            f.height(),
            f.width(),
            out,
        ))
    }
}

/// Per-sample group-shared normalization of a field.
pub fn gbn_forward<T: Scalar>(
    f: &RegularField<T>,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> Result<RegularField<T>> {
    if gamma.len() != f.base_channels() || beta.len() != f.base_channels() {
        return Err(Error::ShapeMismatch(format!(
            "norm has {} scales for {} base channels",
            gamma.len(),
            f.base_channels()
        )));
    }
    let (out, _, _) = group_norm_kernel(f.data(), f.base_channels(), gamma, beta, eps);
    Ok(RegularField::from_vec_unchecked(
        f.group(),
        f.base_channels(),
        f.height(),
        f.width(),
        out,
    ))
}

/// Pointwise `max(0, x)` over a field.
pub fn grelu_forward<T: Scalar>(f: &RegularField<T>) -> RegularField<T> {
    RegularField::from_vec_unchecked(
        f.group(),
        f.base_channels(),
        f.height(),
        f.width(),
        f.data().iter().map(|&v| v.max(T::zero())).collect(),
    )
}

/// 2×2 spatial max pooling per `(base, orientation)` channel.
pub fn gmaxpool_forward<T: Scalar>(f: &RegularField<T>) -> Result<RegularField<T>> {
    let pooled = crate::tensor::maxpool2d(&f.to_planar(), 2, 2)?;
    RegularField::from_planar(f.group(), f.base_channels(), pooled)
}
