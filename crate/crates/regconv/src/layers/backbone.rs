//! Miniature rotation-equivariant residual backbone with a feature-pyramid
//! merge, plus an ordinary-CNN counterpart with the same structure and a
//! matched effective channel budget (`C = K·N`) for control experiments.
//!
//! Stage layout: a lifting stem, then per stage a 2×2 average-pool
//! downsample (skipped for stage 0) followed by residual blocks
//! `conv → norm → relu → conv → norm (+ skip) → relu`, all stride 1. The
//! pyramid merge applies a 1×1 lateral per stage output, adds the nearest
//! 2× upsample of the coarser level top-down, and smooths with a 3×3 conv.
//! Downsampling by pooling keeps the quarter-turn equivariance path exact on
//! even grids; a strided convolution cannot (its sampling lattice is not
//! preserved by the rotation), which is measurable as an O(1) equivariance
//! error, so the pooled form is used everywhere. Average pooling rather than
//! max: the max over a 2×2 block does not commute with the fractional warp
//! of non-quarter-turn angles for content near the pixel scale, which costs
//! roughly a tenfold error blow-up at the coarse levels.

use crate::autodiff::{NodeId, ParamSet, Tape};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

const NORM_EPS: f64 = 1e-5;

/// Architecture hyperparameters shared by the equivariant backbone and its
/// plain control.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub group_order: usize,
    pub in_channels: usize,
    /// Base channels `K` per stage (the plain control uses `K·N`).
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub fpn_width: usize,
    pub kernel_size: usize,
}

impl BackboneConfig {
    /// Verification-scale default: two stages of width 8.
    pub fn toy(group_order: usize) -> Self {
        Self {
            group_order,
            in_channels: 1,
            stage_widths: vec![8, 8],
            blocks_per_stage: vec![1, 1],
            fpn_width: 8,
            kernel_size: 3,
        }
    }

    /// Training-scale default: small widths keep desk-scale steps cheap.
    pub fn tiny(group_order: usize) -> Self {
        Self {
            group_order,
            in_channels: 1,
            stage_widths: vec![2, 4],
            blocks_per_stage: vec![1, 1],
            fpn_width: 2,
            kernel_size: 3,
        }
    }

    /// Stem-only configuration (no stages, no pyramid): reduces to a single
    /// lifting convolution.
    pub fn stem_only(group_order: usize, width: usize) -> Self {
        Self {
            group_order,
            in_channels: 1,
            stage_widths: vec![],
            blocks_per_stage: vec![],
            fpn_width: width,
            kernel_size: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_order == 0 {
            return Err(Error::InvalidArgument(
                "group order must be a positive integer".into(),
            ));
        }
        if self.in_channels == 0 || self.fpn_width == 0 {
            return Err(Error::InvalidArgument("widths must be at least 1".into()));
        }
        if self.stage_widths.len() != self.blocks_per_stage.len() {
            return Err(Error::InvalidArgument(
                "stage widths and block counts must have equal length".into(),
            ));
        }
        if self.stage_widths.iter().any(|&w| w == 0)
            || self.blocks_per_stage.iter().any(|&b| b == 0)
        {
            return Err(Error::InvalidArgument("widths must be at least 1".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::InvalidArgument("kernel size must be odd".into()));
        }
        Ok(())
    }

    /// Stem output width: the first stage width, or the pyramid width for a
    /// stem-only configuration.
    fn stem_width(&self) -> usize {
        self.stage_widths.first().copied().unwrap_or(self.fpn_width)
    }

    /// Number of pyramid levels produced by `forward`.
    pub fn num_levels(&self) -> usize {
        self.stage_widths.len().max(1)
    }

    /// Minimum input side: every pooled stage must keep even dims.
    pub fn side_multiple(&self) -> usize {
        1 << self.stage_widths.len().saturating_sub(1)
    }
}

/// Which of the two matched models to build and run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Equivariant,
    Plain,
}

/// Zero-mean initialization with variance `2/fan_in`.
///
/// Plain filters draw i.i.d. uniform taps. Equivariant base filters draw
/// random coefficients on the smooth Gaussian filter atoms (radially
/// windowed to keep corner content small) and take their tap samples, then
/// rescale the whole tensor to the target variance: filters in that
/// band-limited subspace survive the non-quarter-turn rotation resampling
/// of the expansion essentially losslessly, which is what the N = 8, 16
/// equivariance budgets require. Arbitrary i.i.d. taps cannot be rotated by
/// 45° on a 3×3 grid with small error — the high-frequency content is not
/// representable — so drawing them would void those budgets at
/// initialization. Quarter-turn groups take an exact permutation path
/// either way.
fn he_uniform<T: Scalar>(
    rng: &mut SplitMix64,
    count: usize,
    fan_in: usize,
    smooth: Option<(usize, usize)>,
) -> Vec<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let values: Vec<f64> = match smooth {
        None => (0..count).map(|_| rng.uniform(-limit, limit)).collect(),
        Some((rows, kh)) => {
            let plane = kh * kh;
            let mut raw = crate::layers::sample_smooth_filter_taps(
                rng,
                rows,
                count / plane / rows,
                kh,
            );
            let target_rms = limit / 3.0f64.sqrt();
            let rms = (raw.iter().map(|v| v * v).sum::<f64>() / raw.len() as f64).sqrt();
            let scale = target_rms / rms.max(1e-12);
            raw.iter_mut().for_each(|v| *v *= scale);
            raw
        }
    };
    values.into_iter().map(T::from_f64).collect()
}

struct LayerSpec {
    name: String,
    dims: Vec<usize>,
    fan_in: usize,
    kind: LayerParamKind,
}

enum LayerParamKind {
    Filter,
    Gamma,
    Beta,
}

/// Enumerate every parameter of the model in a fixed order. The plain model
/// mirrors the equivariant one layer for layer with channel counts
/// multiplied by `N` and rank-4 filter banks.
fn layer_specs(cfg: &BackboneConfig, kind: ModelKind) -> Vec<LayerSpec> {
    let n = cfg.group_order;
    let k = cfg.kernel_size;
    let mut specs = Vec::new();

    let filter = |name: &str, dims: Vec<usize>, fan_in: usize| LayerSpec {
        name: name.to_string(),
        dims,
        fan_in,
        kind: LayerParamKind::Filter,
    };
    let norm = |name: &str, channels: usize, specs: &mut Vec<LayerSpec>| {
        specs.push(LayerSpec {
            name: format!("{name}.gamma"),
            dims: vec![channels],
            fan_in: 0,
            kind: LayerParamKind::Gamma,
        });
        specs.push(LayerSpec {
            name: format!("{name}.beta"),
            dims: vec![channels],
            fan_in: 0,
            kind: LayerParamKind::Beta,
        });
    };

    let stem_w = cfg.stem_width();
    match kind {
        ModelKind::Equivariant => {
            specs.push(filter(
                "stem.base",
                vec![stem_w, cfg.in_channels, k, k],
                cfg.in_channels * k * k,
            ));
            norm("stem.norm", stem_w, &mut specs);
        }
        ModelKind::Plain => {
            specs.push(filter(
                "stem.base",
                vec![stem_w * n, cfg.in_channels, k, k],
                cfg.in_channels * k * k,
            ));
            norm("stem.norm", stem_w * n, &mut specs);
        }
    }

    let mut prev = stem_w;
    for (si, (&width, &blocks)) in cfg
        .stage_widths
        .iter()
        .zip(&cfg.blocks_per_stage)
        .enumerate()
    {
        for b in 0..blocks {
            let in_w = if b == 0 { prev } else { width };
            let prefix = format!("stage{si}.block{b}");
            match kind {
                ModelKind::Equivariant => {
                    specs.push(filter(
                        &format!("{prefix}.conv1.base"),
                        vec![width, in_w, n, k, k],
                        in_w * n * k * k,
                    ));
                    norm(&format!("{prefix}.norm1"), width, &mut specs);
                    specs.push(filter(
                        &format!("{prefix}.conv2.base"),
                        vec![width, width, n, k, k],
                        width * n * k * k,
                    ));
                    norm(&format!("{prefix}.norm2"), width, &mut specs);
                    if in_w != width {
                        specs.push(filter(
                            &format!("{prefix}.proj.base"),
                            vec![width, in_w, n, 1, 1],
                            in_w * n,
                        ));
                    }
                }
                ModelKind::Plain => {
                    specs.push(filter(
                        &format!("{prefix}.conv1.base"),
                        vec![width * n, in_w * n, k, k],
                        in_w * n * k * k,
                    ));
                    norm(&format!("{prefix}.norm1"), width * n, &mut specs);
                    specs.push(filter(
                        &format!("{prefix}.conv2.base"),
                        vec![width * n, width * n, k, k],
                        width * n * k * k,
                    ));
                    norm(&format!("{prefix}.norm2"), width * n, &mut specs);
                    if in_w != width {
                        specs.push(filter(
                            &format!("{prefix}.proj.base"),
                            vec![width * n, in_w * n, 1, 1],
                            in_w * n,
                        ));
                    }
                }
            }
        }
        prev = width;
    }

    if !cfg.stage_widths.is_empty() {
        let f = cfg.fpn_width;
        for (si, &width) in cfg.stage_widths.iter().enumerate() {
            match kind {
                ModelKind::Equivariant => {
                    specs.push(filter(
                        &format!("fpn.lateral{si}.base"),
                        vec![f, width, n, 1, 1],
                        width * n,
                    ));
                    specs.push(filter(
                        &format!("fpn.smooth{si}.base"),
                        vec![f, f, n, k, k],
                        f * n * k * k,
                    ));
                }
                ModelKind::Plain => {
                    specs.push(filter(
                        &format!("fpn.lateral{si}.base"),
                        vec![f * n, width * n, 1, 1],
                        width * n,
                    ));
                    specs.push(filter(
                        &format!("fpn.smooth{si}.base"),
                        vec![f * n, f * n, k, k],
                        f * n * k * k,
                    ));
                }
            }
        }
    }
    specs
}

/// Build and initialize all backbone parameters.
pub fn init_params<T: Scalar>(
    cfg: &BackboneConfig,
    kind: ModelKind,
    seed: u64,
) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut rng = SplitMix64::new(seed);
    let mut params = ParamSet::new();
    for spec in layer_specs(cfg, kind) {
        let count: usize = spec.dims.iter().product();
        let value = match spec.kind {
            LayerParamKind::Filter => {
                let d = &spec.dims;
                let smooth = if kind == ModelKind::Equivariant {
                    Some((d[0], d[d.len() - 1]))
                } else {
                    None
                };
                he_uniform(&mut rng, count, spec.fan_in, smooth)
            }
            LayerParamKind::Gamma => vec![T::one(); count],
            LayerParamKind::Beta => vec![T::zero(); count],
        };
        params.add(&spec.name, spec.dims, value);
    }
    Ok(params)
}

/// Per-layer trainable parameter counts in declaration order.
pub fn param_counts<T: Scalar>(params: &ParamSet<T>) -> Vec<(String, usize)> {
    params
        .iter()
        .map(|e| (e.name.clone(), e.value.len()))
        .collect()
}

/// All pyramid level nodes plus named taps after every recorded layer
/// (used by layer-prefix equivariance measurements).
pub struct BackboneTrace {
    pub levels: Vec<NodeId>,
    pub taps: Vec<(String, NodeId)>,
}

fn tape_gconv<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    base: NodeId,
    n: usize,
    padding: usize,
) -> Result<NodeId> {
    let filters = tape.expand_group(base, n)?;
    let xd = tape.dims(x).to_vec();
    let flat = tape.reshape(x, vec![xd[0] * n, xd[2], xd[3]])?;
    let y = tape.conv2d(flat, filters, 1, padding)?;
    let yd = tape.dims(y).to_vec();
    tape.reshape(y, vec![yd[0] / n, n, yd[1], yd[2]])
}

fn tape_norm<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamSet<T>,
    x: NodeId,
    name: &str,
) -> Result<NodeId> {
    let gamma = tape.param_named(params, &format!("{name}.gamma"))?;
    let beta = tape.param_named(params, &format!("{name}.beta"))?;
    tape.group_norm(x, gamma, beta, NORM_EPS)
}

/// Record the full backbone on the tape: stem, residual stages, pyramid
/// merge. `img` is a `(C_in, H, W)` node with even square spatial dims
/// divisible by `2^(stages-1)`. Returns one level per stage, finest first
/// (stride 1 at level 0).
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamSet<T>,
    cfg: &BackboneConfig,
    kind: ModelKind,
    img: NodeId,
) -> Result<BackboneTrace> {
    cfg.validate()?;
    let n = cfg.group_order;
    let pad = cfg.kernel_size / 2;
    let mut taps = Vec::new();

    let img_dims = tape.dims(img).to_vec();
    if img_dims.len() != 3 || img_dims[0] != cfg.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "expected ({}, H, W) image node, got {:?}",
            cfg.in_channels, img_dims
        )));
    }
    let (h, w) = (img_dims[1], img_dims[2]);
    if h != w {
        return Err(Error::ShapeMismatch("backbone input must be square".into()));
    }
    if h % cfg.side_multiple() != 0 {
        return Err(Error::ShapeMismatch(format!(
            "input side {} not divisible by {}",
            h,
            cfg.side_multiple()
        )));
    }

    // Stem: lift (equivariant) or plain conv, then norm + relu.
    let stem_base = tape.param_named(params, "stem.base")?;
    let mut x = match kind {
        ModelKind::Equivariant => {
            let filters = tape.expand_lift(stem_base, n)?;
            let y = tape.conv2d(img, filters, 1, pad)?;
            let yd = tape.dims(y).to_vec();
            tape.reshape(y, vec![yd[0] / n, n, yd[1], yd[2]])?
        }
        ModelKind::Plain => tape.conv2d(img, stem_base, 1, pad)?,
    };
    x = tape_norm(tape, params, x, "stem.norm")?;
    x = tape.relu(x);
    taps.push(("stem".to_string(), x));

    if cfg.stage_widths.is_empty() {
        return Ok(BackboneTrace {
            levels: vec![x],
            taps,
        });
    }

    let conv = |tape: &mut Tape<T>, params: &ParamSet<T>, x: NodeId, name: &str, padding: usize| {
        let base = tape.param_named(params, name)?;
        match kind {
            ModelKind::Equivariant => tape_gconv(tape, x, base, n, padding),
            ModelKind::Plain => tape.conv2d(x, base, 1, padding),
        }
    };

    let mut stage_outputs = Vec::new();
    let mut prev = cfg.stem_width();
    for (si, (&width, &blocks)) in cfg
        .stage_widths
        .iter()
        .zip(&cfg.blocks_per_stage)
        .enumerate()
    {
        if si > 0 {
            x = tape.avgpool2(x)?;
        }
        for b in 0..blocks {
            let in_w = if b == 0 { prev } else { width };
            let prefix = format!("stage{si}.block{b}");
            let mut y = conv(tape, params, x, &format!("{prefix}.conv1.base"), pad)?;
            y = tape_norm(tape, params, y, &format!("{prefix}.norm1"))?;
            y = tape.relu(y);
            y = conv(tape, params, y, &format!("{prefix}.conv2.base"), pad)?;
            y = tape_norm(tape, params, y, &format!("{prefix}.norm2"))?;
            let identity = if in_w != width {
                conv(tape, params, x, &format!("{prefix}.proj.base"), 0)?
            } else {
                x
            };
            x = tape.add(y, identity)?;
            x = tape.relu(x);
            taps.push((prefix, x));
        }
        stage_outputs.push(x);
        prev = width;
    }

    // Pyramid merge: lateral 1x1, top-down nearest upsample + add, 3x3
    // smoothing.
    let stages = stage_outputs.len();
    let mut laterals = Vec::with_capacity(stages);
    for (si, &s) in stage_outputs.iter().enumerate() {
        laterals.push(conv(tape, params, s, &format!("fpn.lateral{si}.base"), 0)?);
    }
    let mut merged = vec![None; stages];
    merged[stages - 1] = Some(laterals[stages - 1]);
    for si in (0..stages - 1).rev() {
        let coarser = merged[si + 1].unwrap();
        let up = tape.upsample2(coarser)?;
        merged[si] = Some(tape.add(laterals[si], up)?);
    }
    let mut levels = Vec::with_capacity(stages);
    for (si, m) in merged.into_iter().enumerate() {
        let level = conv(tape, params, m.unwrap(), &format!("fpn.smooth{si}.base"), pad)?;
        taps.push((format!("fpn.level{si}"), level));
        levels.push(level);
    }
    Ok(BackboneTrace { levels, taps })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(BackboneConfig::toy(4).validate().is_ok());
        let mut bad = BackboneConfig::toy(4);
        bad.group_order = 0;
        assert!(bad.validate().is_err());
        let mut bad = BackboneConfig::toy(4);
        bad.stage_widths = vec![8];
        assert!(bad.validate().is_err());
        let mut bad = BackboneConfig::toy(4);
        bad.kernel_size = 4;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn stem_only_reduces_to_lift_forward() {
        let cfg = BackboneConfig::stem_only(4, 3);
        let params = init_params::<f64>(&cfg, ModelKind::Equivariant, 7).unwrap();
        let mut rng = SplitMix64::new(8);
        let img: Vec<f64> = (0..100).map(|_| rng.uniform(-1.0, 1.0)).collect();

        let mut tape = Tape::new();
        let img_node = tape.leaf(vec![1, 10, 10], img.clone()).unwrap();
        let trace = forward(&mut tape, &params, &cfg, ModelKind::Equivariant, img_node).unwrap();
        assert_eq!(trace.levels.len(), 1);

        // Reference: lift + shared norm + relu computed with the value-level
        // layer API.
        let base = crate::tensor::Tensor4::from_vec(
            [3, 1, 3, 3],
            params.get("stem.base").unwrap().value.clone(),
        )
        .unwrap();
        let layer = crate::layers::LiftConvLayer::new(
            base,
            1,
            1,
            crate::group::CyclicGroup::new(4).unwrap(),
        )
        .unwrap();
        let img_t = crate::tensor::PlanarTensor::from_vec(1, 10, 10, img).unwrap();
        let lifted = crate::layers::lift_forward(&img_t, &layer).unwrap();
        let gamma = params.get("stem.norm.gamma").unwrap().value.clone();
        let beta = params.get("stem.norm.beta").unwrap().value.clone();
        let normed = crate::layers::gbn_forward(&lifted, &gamma, &beta, NORM_EPS).unwrap();
        let expected = crate::layers::grelu_forward(&normed);

        let got = tape.value(trace.levels[0]);
        assert_eq!(tape.dims(trace.levels[0]), &[3, 4, 10, 10]);
        for (a, b) in got.iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_shapes_and_level_strides() {
        let cfg = BackboneConfig::toy(4);
        for kind in [ModelKind::Equivariant, ModelKind::Plain] {
            let params = init_params::<f64>(&cfg, kind, 3).unwrap();
            let mut tape = Tape::new();
            let mut rng = SplitMix64::new(5);
            let img: Vec<f64> = (0..32 * 32).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let img_node = tape.leaf(vec![1, 32, 32], img).unwrap();
            let trace = forward(&mut tape, &params, &cfg, kind, img_node).unwrap();
            assert_eq!(trace.levels.len(), 2);
            match kind {
                ModelKind::Equivariant => {
                    assert_eq!(tape.dims(trace.levels[0]), &[8, 4, 32, 32]);
                    assert_eq!(tape.dims(trace.levels[1]), &[8, 4, 16, 16]);
                }
                ModelKind::Plain => {
                    assert_eq!(tape.dims(trace.levels[0]), &[32, 32, 32]);
                    assert_eq!(tape.dims(trace.levels[1]), &[32, 16, 16]);
                }
            }
        }
    }

    #[test]
    fn zero_input_gives_zero_levels() {
        // All biases are zero at init and normalization maps zero to zero,
        // so a zero image must produce zero pyramid levels.
        let cfg = BackboneConfig::toy(4);
        let params = init_params::<f64>(&cfg, ModelKind::Equivariant, 11).unwrap();
        let mut tape = Tape::new();
        let img_node = tape.leaf(vec![1, 16, 16], vec![0.0; 256]).unwrap();
        let trace = forward(&mut tape, &params, &cfg, ModelKind::Equivariant, img_node).unwrap();
        for &level in &trace.levels {
            assert!(tape.value(level).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn matched_models_have_one_over_n_parameters_per_filter() {
        for n in [4usize, 8, 16] {
            let cfg = BackboneConfig::toy(n);
            let equi = init_params::<f64>(&cfg, ModelKind::Equivariant, 1).unwrap();
            let plain = init_params::<f64>(&cfg, ModelKind::Plain, 1).unwrap();
            for (e, p) in equi.iter().zip(plain.iter()) {
                assert_eq!(e.name, p.name);
                assert_eq!(p.value.len(), n * e.value.len(), "{}", e.name);
            }
        }
    }

    #[test]
    fn rejects_bad_input_shapes() {
        let cfg = BackboneConfig::toy(4);
        let params = init_params::<f64>(&cfg, ModelKind::Equivariant, 1).unwrap();
        let mut tape = Tape::new();
        let img = tape.leaf(vec![1, 16, 18], vec![0.0; 16 * 18]).unwrap();
        assert!(forward(&mut tape, &params, &cfg, ModelKind::Equivariant, img).is_err());
        let img = tape.leaf(vec![1, 15, 15], vec![0.0; 225]).unwrap();
        assert!(forward(&mut tape, &params, &cfg, ModelKind::Equivariant, img).is_err());
    }
}
