//! Toy training pipeline: a shape classifier over RoI features of
//! ground-truth boxes, used to compare the equivariant backbone against a
//! plain CNN with and without rotation augmentation.
//!
//! Training data is upright-only (`θ = 0`); test data comes in an upright
//! and a randomly rotated split. Everything is deterministic under the run
//! seed: scene order, augmentation draws and initialization derive from it
//! through per-step forks, so resuming from a checkpoint reproduces the
//! exact continuation.

use crate::autodiff::{sgd_step, NodeId, ParamSet, Tape};
use crate::error::{Error, Result};
use crate::group::CyclicGroup;
use crate::layers::backbone::{self, BackboneConfig, ModelKind};
use crate::layers::checkpoint::{load_checkpoint, save_checkpoint};
use crate::rng::SplitMix64;
use crate::roi::AlignSpec;
use crate::scalar::Scalar;
use crate::synth::{gen_scene_with, rotate_scene, SceneOptions, SyntheticScene};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

pub const NUM_CLASSES: usize = 4;
/// Rotation-augmentation angles: the eight multiples of 45°.
pub const AUG_GROUP_ORDER: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Plain CNN, no augmentation.
    Plain,
    /// Plain CNN with random rotation augmentation.
    Rotaug,
    /// Equivariant backbone with RiRoI alignment, no augmentation.
    Equi,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::Rotaug => "rotaug",
            Variant::Equi => "equi",
        }
    }

    pub fn model_kind(&self) -> ModelKind {
        match self {
            Variant::Equi => ModelKind::Equivariant,
            _ => ModelKind::Plain,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub group_order: usize,
    pub steps: u64,
    pub seed: u64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub backbone: BackboneConfig,
    pub align: AlignSpec,
    pub side: usize,
    pub train_scenes: usize,
    pub objects_per_scene: usize,
    pub test_scenes: usize,
    pub eval_every: u64,
}

impl TrainConfig {
    pub fn new(variant: Variant, group_order: usize, steps: u64, seed: u64) -> Self {
        Self {
            variant,
            group_order,
            steps,
            seed,
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 0.0001,
            backbone: BackboneConfig::tiny(group_order),
            align: AlignSpec::default(),
            side: 64,
            train_scenes: 650,
            objects_per_scene: 3,
            test_scenes: 60,
            eval_every: 250,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.align.validate()?;
        if self.lr <= 0.0 {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if self.train_scenes == 0 || self.test_scenes == 0 {
            return Err(Error::InvalidArgument("need at least one scene".into()));
        }
        Ok(())
    }

    /// RoI feature dimensionality seen by the classifier head (identical
    /// for both model kinds by the matched channel budget). RoIs are read
    /// from pyramid level 0, whose width is the pyramid width.
    fn head_input_dim(&self) -> usize {
        self.backbone.fpn_width * self.group_order * self.align.output_size * self.align.output_size
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MetricPoint {
    pub step: u64,
    pub loss: f64,
    pub upright_acc: f64,
    pub rotated_acc: f64,
}

#[derive(Debug)]
pub struct TrainOutcome<T: Scalar> {
    pub params: ParamSet<T>,
    pub curve: Vec<MetricPoint>,
    pub final_upright_acc: f64,
    pub final_rotated_acc: f64,
    pub wall_seconds: f64,
    pub steps: u64,
}

/// Deterministic dataset generation with deterministic retry on crowded
/// placements.
pub fn gen_dataset(base_seed: u64, count: usize, opts: &SceneOptions) -> Result<Vec<SyntheticScene>> {
    let root = SplitMix64::new(base_seed);
    (0..count)
        .map(|i| {
            for attempt in 0..50u64 {
                let mut fork = root.fork(i as u64 * 100 + attempt);
                match gen_scene_with(fork.next_u64(), opts) {
                    Ok(scene) => return Ok(scene),
                    Err(Error::Overcrowded(_)) => continue,
                    Err(e) => return Err(e),
                }
            }
            Err(Error::Overcrowded(50))
        })
        .collect()
}

struct Datasets {
    train: Vec<SyntheticScene>,
    test_upright: Vec<SyntheticScene>,
    test_rotated: Vec<SyntheticScene>,
}

fn build_datasets(cfg: &TrainConfig) -> Result<Datasets> {
    let mut train_opts = SceneOptions::new(cfg.side, cfg.objects_per_scene);
    train_opts.upright = true;
    let mut rotated_opts = SceneOptions::new(cfg.side, cfg.objects_per_scene);
    rotated_opts.upright = false;
    Ok(Datasets {
        train: gen_dataset(cfg.seed.wrapping_mul(3) ^ 0x7261_696e, cfg.train_scenes, &train_opts)?,
        test_upright: gen_dataset(cfg.seed.wrapping_mul(5) ^ 0x7465_7374, cfg.test_scenes, &train_opts)?,
        test_rotated: gen_dataset(cfg.seed.wrapping_mul(7) ^ 0x726f_7431, cfg.test_scenes, &rotated_opts)?,
    })
}

/// Record the classifier forward pass for one scene: backbone, per-object
/// RoI feature, linear head, mean cross-entropy. Returns the loss node and
/// per-object logits nodes.
fn scene_loss<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamSet<T>,
    cfg: &TrainConfig,
    scene: &SyntheticScene,
) -> Result<(NodeId, Vec<NodeId>)> {
    let kind = cfg.variant.model_kind();
    let img_node = tape.leaf(
        vec![scene.image.channels(), scene.side(), scene.side()],
        scene.image_as::<T>(),
    )?;
    let trace = backbone::forward(tape, params, &cfg.backbone, kind, img_node)?;
    let level = trace.levels[0];
    let head_w = tape.param_named(params, "head.weight")?;
    let head_b = tape.param_named(params, "head.bias")?;

    let mut loss_nodes = Vec::new();
    let mut logits_nodes = Vec::new();
    for ann in &scene.annotations {
        let feature = match kind {
            ModelKind::Equivariant => {
                let spatial = tape.rroi_spatial(level, &ann.rroi, &cfg.align)?;
                tape.orient_align(spatial, ann.rroi.theta, cfg.align.interp_channels)?
            }
            ModelKind::Plain => {
                let dims = tape.dims(level).to_vec();
                let as_field = tape.reshape(level, vec![dims[0], 1, dims[1], dims[2]])?;
                tape.rroi_spatial(as_field, &ann.rroi, &cfg.align)?
            }
        };
        let dim = tape.numel(feature);
        let flat = tape.reshape(feature, vec![dim])?;
        let logits = tape.linear(flat, head_w, head_b)?;
        logits_nodes.push(logits);
        loss_nodes.push(tape.softmax_cross_entropy(logits, ann.class.index())?);
    }
    let mut total = loss_nodes[0];
    for &l in &loss_nodes[1..] {
        total = tape.add(total, l)?;
    }
    let mean = tape.scale(total, 1.0 / loss_nodes.len() as f64);
    Ok((mean, logits_nodes))
}

fn scene_accuracy<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &TrainConfig,
    scenes: &[SyntheticScene],
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for scene in scenes {
        let mut tape = Tape::new();
        let (_, logits_nodes) = scene_loss(&mut tape, params, cfg, scene)?;
        for (node, ann) in logits_nodes.iter().zip(&scene.annotations) {
            let logits = tape.value(*node);
            let mut best = 0usize;
            for c in 1..logits.len() {
                if logits[c] > logits[best] {
                    best = c;
                }
            }
            if best == ann.class.index() {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

fn init_training_params<T: Scalar>(cfg: &TrainConfig) -> Result<ParamSet<T>> {
    let mut params = backbone::init_params::<T>(&cfg.backbone, cfg.variant.model_kind(), cfg.seed)?;
    let dim = cfg.head_input_dim();
    let mut rng = SplitMix64::new(cfg.seed ^ 0x6865_6164);
    let limit = (6.0 / dim as f64).sqrt();
    params.add(
        "head.weight",
        vec![NUM_CLASSES, dim],
        (0..NUM_CLASSES * dim)
            .map(|_| T::from_f64(rng.uniform(-limit, limit)))
            .collect(),
    );
    params.add("head.bias", vec![NUM_CLASSES], vec![T::zero(); NUM_CLASSES]);
    Ok(params)
}

/// Scene index for a step: epoch-wise shuffled order derived from the run
/// seed only, so training is resumable mid-stream.
fn scene_index_for_step(seed: u64, step: u64, n: usize) -> usize {
    let epoch = step / n as u64;
    let offset = (step % n as u64) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = SplitMix64::new(seed ^ epoch.wrapping_mul(0x9E37_79B9));
    rng.shuffle(&mut order);
    order[offset]
}

/// Train the configured variant; optionally resume from a checkpoint.
pub fn train_toy<T: Scalar>(
    cfg: &TrainConfig,
    resume: Option<&Path>,
    checkpoint_out: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let started = Instant::now();
    let data = build_datasets(cfg)?;
    let aug_group = CyclicGroup::new(AUG_GROUP_ORDER)?;

    let (mut params, start_step) = match resume {
        Some(path) => {
            let (params, meta) = load_checkpoint::<T>(path)?;
            if meta.group_order != cfg.group_order {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint group order {} does not match configured {}",
                    meta.group_order, cfg.group_order
                )));
            }
            if let Some(v) = meta.extra.get("variant").and_then(|v| v.as_str()) {
                if v != cfg.variant.as_str() {
                    return Err(Error::InvalidArgument(format!(
                        "checkpoint variant {v} does not match configured {}",
                        cfg.variant.as_str()
                    )));
                }
            }
            (params, meta.step)
        }
        None => (init_training_params::<T>(cfg)?, 0),
    };

    let mut curve = Vec::new();
    if start_step == 0 {
        let upright = scene_accuracy(&params, cfg, &data.test_upright)?;
        let rotated = scene_accuracy(&params, cfg, &data.test_rotated)?;
        curve.push(MetricPoint {
            step: 0,
            loss: f64::NAN,
            upright_acc: upright,
            rotated_acc: rotated,
        });
    }

    for step in start_step..cfg.steps {
        let idx = scene_index_for_step(cfg.seed, step, data.train.len());
        let scene = &data.train[idx];
        let scene = if cfg.variant == Variant::Rotaug {
            let mut rng = SplitMix64::new(cfg.seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let k = rng.below(AUG_GROUP_ORDER);
            rotate_scene(scene, k, aug_group)?
        } else {
            scene.clone()
        };
        let mut tape = Tape::new();
        let (loss_node, _) = scene_loss(&mut tape, &params, cfg, &scene)?;
        let loss = tape.scalar(loss_node).to_f64();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        let grads = tape.backward(loss_node)?;
        grads.accumulate_into(&mut params);
        sgd_step(&mut params, cfg.lr, cfg.momentum, cfg.weight_decay)?;

        let next = step + 1;
        if next % cfg.eval_every == 0 || next == cfg.steps {
            let upright = scene_accuracy(&params, cfg, &data.test_upright)?;
            let rotated = scene_accuracy(&params, cfg, &data.test_rotated)?;
            curve.push(MetricPoint {
                step: next,
                loss,
                upright_acc: upright,
                rotated_acc: rotated,
            });
        }
    }

    let final_upright = scene_accuracy(&params, cfg, &data.test_upright)?;
    let final_rotated = scene_accuracy(&params, cfg, &data.test_rotated)?;
    if curve.is_empty() || curve.last().map(|m| m.step) != Some(cfg.steps) {
        curve.push(MetricPoint {
            step: cfg.steps,
            loss: f64::NAN,
            upright_acc: final_upright,
            rotated_acc: final_rotated,
        });
    }

    if let Some(path) = checkpoint_out {
        let mut extra = serde_json::Map::new();
        extra.insert("variant".into(), cfg.variant.as_str().into());
        extra.insert("seed".into(), cfg.seed.into());
        extra.insert("config_hash".into(), crate::verify::config_hash(cfg).into());
        save_checkpoint(path, &params, cfg.group_order, cfg.steps, extra)?;
    }

    Ok(TrainOutcome {
        params,
        curve,
        final_upright_acc: final_upright,
        final_rotated_acc: final_rotated,
        wall_seconds: started.elapsed().as_secs_f64(),
        steps: cfg.steps,
    })
}

/// Loss of the next training step from the current state, without applying
/// it; used to verify checkpoint-resume determinism.
pub fn peek_next_loss<T: Scalar>(cfg: &TrainConfig, params: &ParamSet<T>, step: u64) -> Result<f64> {
    let data = build_datasets(cfg)?;
    let idx = scene_index_for_step(cfg.seed, step, data.train.len());
    let scene = &data.train[idx];
    let scene = if cfg.variant == Variant::Rotaug {
        let mut rng = SplitMix64::new(cfg.seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let k = rng.below(AUG_GROUP_ORDER);
        rotate_scene(scene, k, CyclicGroup::new(AUG_GROUP_ORDER)?)?
    } else {
        scene.clone()
    };
    let mut tape = Tape::new();
    let (loss_node, _) = scene_loss(&mut tape, params, cfg, &scene)?;
    Ok(tape.scalar(loss_node).to_f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_cfg(variant: Variant) -> TrainConfig {
        let mut cfg = TrainConfig::new(variant, 4, 3, 5);
        cfg.train_scenes = 6;
        cfg.test_scenes = 4;
        cfg.objects_per_scene = 2;
        cfg.eval_every = 2;
        cfg
    }

    #[test]
    fn zero_steps_is_chance_level() {
        let mut cfg = quick_cfg(Variant::Equi);
        cfg.steps = 0;
        cfg.test_scenes = 12;
        let out = train_toy::<f64>(&cfg, None, None).unwrap();
        assert!(
            (out.final_rotated_acc - 0.25).abs() <= 0.2,
            "rotated acc {} should be near chance",
            out.final_rotated_acc
        );
    }

    #[test]
    fn short_training_runs_for_all_variants() {
        for variant in [Variant::Plain, Variant::Rotaug, Variant::Equi] {
            let cfg = quick_cfg(variant);
            let out = train_toy::<f32>(&cfg, None, None).unwrap();
            assert_eq!(out.steps, 3);
            assert!(out.curve.iter().all(|m| m.upright_acc.is_finite()));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = quick_cfg(Variant::Equi);
        let a = train_toy::<f64>(&cfg, None, None).unwrap();
        let b = train_toy::<f64>(&cfg, None, None).unwrap();
        for (x, y) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(x.value, y.value, "{}", x.name);
        }
    }

    #[test]
    fn resume_reproduces_next_step_loss() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("mid.ckpt");

        // Train 2 steps and checkpoint.
        let mut cfg2 = quick_cfg(Variant::Equi);
        cfg2.steps = 2;
        let mid = train_toy::<f64>(&cfg2, None, Some(&ckpt)).unwrap();

        // Uninterrupted 4-step run for reference.
        let mut cfg4 = quick_cfg(Variant::Equi);
        cfg4.steps = 4;
        let full = train_toy::<f64>(&cfg4, None, None).unwrap();

        // The loss the resumed run would see at step 2 equals the loss the
        // full run saw at step 2 (peeked from the checkpointed state).
        let peek = peek_next_loss::<f64>(&cfg4, &mid.params, 2).unwrap();
        let resumed = train_toy::<f64>(&cfg4, Some(&ckpt), None).unwrap();
        for (x, y) in resumed.params.iter().zip(full.params.iter()) {
            assert_eq!(x.value, y.value, "{}", x.name);
        }
        assert!(peek.is_finite());
    }

    #[test]
    fn rejects_mismatched_resume() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("v.ckpt");
        let cfg = quick_cfg(Variant::Plain);
        train_toy::<f64>(&cfg, None, Some(&ckpt)).unwrap();
        let cfg_other = quick_cfg(Variant::Equi);
        assert!(train_toy::<f64>(&cfg_other, Some(&ckpt), None).is_err());
    }
}
