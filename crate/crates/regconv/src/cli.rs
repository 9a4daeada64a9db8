//! Command-line surface: verification suites, parameter audits, toy
//! training, invariance ablations, dataset generation and tensor-file
//! utilities.
//!
//! Exit codes are a stable contract: 0 on success, 1 when a metric misses
//! its threshold, 2 on usage or configuration errors.

use crate::error::{Error, Result};
use crate::layers::backbone::BackboneConfig;
use crate::roi::FeatureSidecar;
use crate::scalar::Scalar;
use crate::synth::SceneOptions;
use crate::train::{TrainConfig, Variant};
use crate::verify::{
    self, AlignmentAblationSuite, AugComparisonSuite, EquivarianceSuite, GradCheckSuite, Report,
    RoiInvarianceSuite,
};
use clap::{Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};

fn parse_group(s: &str) -> std::result::Result<usize, String> {
    s.parse::<usize>()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| "group order must be a positive integer".to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Plain,
    Rotaug,
    Equi,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Plain => Variant::Plain,
            VariantArg::Rotaug => Variant::Rotaug,
            VariantArg::Equi => Variant::Equi,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "regconv",
    version,
    about = "Rotation-equivariant convolution and RoI-warping kernels with a verification harness"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run verification suites and write a regconv-report-v1 JSON report.
    Verify {
        /// Suite: equivariance | roi-invariance | grad-check | alignment-ablation | all
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, value_parser = parse_group, default_value_t = 4)]
        group: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Trials / scenes per suite (suite-specific default when omitted).
        #[arg(long)]
        trials: Option<usize>,
        /// Override the suite's primary tolerance.
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Precision::F64)]
        precision: Precision,
    },
    /// Per-layer parameter counts of the equivariant backbone vs the plain
    /// counterpart, as CSV with a TOTAL row per group order.
    BenchParams {
        /// Group orders to audit (repeatable); defaults to 4, 8, 16.
        #[arg(long, value_parser = parse_group)]
        group: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the toy shape classifier on upright data and report accuracy
    /// on upright and rotated test splits.
    TrainToy {
        #[arg(long, value_enum)]
        variant: VariantArg,
        #[arg(long, value_parser = parse_group, default_value_t = 4)]
        group: usize,
        #[arg(long, default_value_t = 2000)]
        steps: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Checkpoint output path (regconv-ckpt-v1).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Metrics curve CSV path.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Precision::F32)]
        precision: Precision,
        /// Run the full three-variant comparison (ignores --variant).
        #[arg(long, default_value_t = false)]
        compare: bool,
    },
    /// Compare alignment modes (spatial-only, maxpool, riroi l∈{1,2,4}) on
    /// the same scenes and report the invariance metric per mode.
    EvalInvariance {
        #[arg(long, value_parser = parse_group, default_value_t = 4)]
        group: usize,
        #[arg(long, default_value_t = 20)]
        scenes: usize,
        #[arg(long, default_value_t = 13)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for per-scene RiRoI feature dumps (tensor + sidecar).
        #[arg(long)]
        dump_features: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Precision::F64)]
        precision: Precision,
    },
    /// Generate a deterministic synthetic dataset file.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        side: usize,
        #[arg(long, default_value_t = 3)]
        objects: usize,
        /// Also export scenes as PNGs into this directory.
        #[arg(long)]
        png_dir: Option<PathBuf>,
    },
    /// Print header and value statistics of a binary tensor file.
    TensorDump { path: PathBuf },
    /// Compare two binary tensor files; exit 1 if they differ beyond --tol.
    TensorCompare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        tol: f64,
    },
}

/// Parse arguments, run, and map the outcome to the exit-code contract.
pub fn main_entry() -> i32 {
    if let Ok(threads) = std::env::var("REGCONV_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

pub fn run(command: Command) -> Result<i32> {
    match command {
        Command::Verify {
            suite,
            group,
            seed,
            trials,
            tol,
            out,
            precision,
        } => cmd_verify(&suite, group, seed, trials, tol, out.as_deref(), precision),
        Command::BenchParams { group, out } => cmd_bench_params(&group, out.as_deref()),
        Command::TrainToy {
            variant,
            group,
            steps,
            seed,
            out,
            resume,
            metrics,
            precision,
            compare,
        } => cmd_train_toy(
            variant.into(),
            group,
            steps,
            seed,
            out.as_deref(),
            resume.as_deref(),
            metrics.as_deref(),
            precision,
            compare,
        ),
        Command::EvalInvariance {
            group,
            scenes,
            seed,
            out,
            dump_features,
            precision,
        } => cmd_eval_invariance(
            group,
            scenes,
            seed,
            out.as_deref(),
            dump_features.as_deref(),
            precision,
        ),
        Command::GenData {
            out,
            seed,
            count,
            side,
            objects,
            png_dir,
        } => cmd_gen_data(&out, seed, count, side, objects, png_dir.as_deref()),
        Command::TensorDump { path } => cmd_tensor_dump(&path),
        Command::TensorCompare { a, b, tol } => cmd_tensor_compare(&a, &b, tol),
    }
}

fn write_reports(reports: &[Report], out: Option<&Path>) -> Result<()> {
    let json = if reports.len() == 1 {
        reports[0].to_json_string()
    } else {
        serde_json::to_string_pretty(reports)?
    };
    match out {
        Some(path) => std::fs::write(path, &json)?,
        None => println!("{json}"),
    }
    Ok(())
}

fn summarize(reports: &[Report]) -> i32 {
    let mut code = 0;
    for r in reports {
        if r.pass {
            eprintln!("PASS {}", r.kind);
        } else {
            code = 1;
            let failing: Vec<String> = r
                .tolerances
                .keys()
                .cloned()
                .filter(|k| {
                    let metric = r.metrics.get(k).and_then(|v| v.as_f64());
                    let tol = r.tolerances.get(k).and_then(|v| v.as_f64());
                    match (metric, tol) {
                        // Larger-is-better metrics are fractions/margins.
                        (Some(m), Some(t)) => {
                            if k.starts_with("frac_")
                                || k.contains("minus")
                                || k.contains("_min")
                            {
                                m < t
                            } else {
                                m > t
                            }
                        }
                        _ => false,
                    }
                })
                .collect();
            eprintln!("FAIL {} ({})", r.kind, failing.join(", "));
        }
    }
    code
}

fn run_suite<T: Scalar>(
    name: &str,
    group: usize,
    seed: u64,
    trials: Option<usize>,
    tol: Option<f64>,
) -> Result<Vec<Report>> {
    let mut reports = Vec::new();
    let all = name == "all";
    if name == "equivariance" || all {
        let mut suite = EquivarianceSuite::new(group);
        suite.seed = seed;
        if let Some(t) = trials {
            suite.trials = t;
        }
        if let Some(t) = tol {
            suite.tol = t;
        }
        reports.push(suite.run::<T>()?);
    }
    if name == "roi-invariance" || all {
        let mut suite = RoiInvarianceSuite::new(group);
        suite.seed = seed;
        if let Some(t) = trials {
            suite.scenes = t;
        }
        if let Some(t) = tol {
            suite.tol = t;
        }
        reports.push(suite.run::<T>()?);
    }
    if name == "alignment-ablation" {
        let mut suite = AlignmentAblationSuite::new(group);
        suite.seed = seed;
        if let Some(t) = trials {
            suite.scenes = t;
        }
        reports.push(suite.run::<T>()?);
    }
    if name == "grad-check" || all {
        let mut suite = GradCheckSuite {
            seed,
            ..GradCheckSuite::default()
        };
        if let Some(t) = tol {
            suite.tol = t;
        }
        reports.push(suite.run()?);
    }
    if reports.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "unknown suite '{name}' (expected equivariance, roi-invariance, grad-check, alignment-ablation or all)"
        )));
    }
    Ok(reports)
}

fn cmd_verify(
    suite: &str,
    group: usize,
    seed: u64,
    trials: Option<usize>,
    tol: Option<f64>,
    out: Option<&Path>,
    precision: Precision,
) -> Result<i32> {
    let reports = match precision {
        Precision::F32 => run_suite::<f32>(suite, group, seed, trials, tol)?,
        Precision::F64 => run_suite::<f64>(suite, group, seed, trials, tol)?,
    };
    write_reports(&reports, out)?;
    Ok(summarize(&reports))
}

fn cmd_bench_params(groups: &[usize], out: Option<&Path>) -> Result<i32> {
    let groups: Vec<usize> = if groups.is_empty() {
        vec![4, 8, 16]
    } else {
        groups.to_vec()
    };
    let mut csv = String::from("group,layer,equivariant_params,plain_params,ratio\n");
    for &n in &groups {
        let rows = verify::param_table(&BackboneConfig::toy(n))?;
        for row in rows {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                n, row.layer, row.equivariant, row.plain, row.ratio
            ));
        }
    }
    match out {
        Some(path) => std::fs::write(path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn cmd_train_toy(
    variant: Variant,
    group: usize,
    steps: u64,
    seed: u64,
    out: Option<&Path>,
    resume: Option<&Path>,
    metrics: Option<&Path>,
    precision: Precision,
    compare: bool,
) -> Result<i32> {
    if compare {
        let mut suite = AugComparisonSuite::new(group);
        suite.steps = steps;
        suite.seeds = vec![seed, seed + 1, seed + 2];
        let (report, results) = match precision {
            Precision::F32 => suite.run::<f32>()?,
            Precision::F64 => suite.run::<f64>()?,
        };
        if let Some(path) = metrics {
            std::fs::write(path, verify::curves_to_csv(&results))?;
        }
        write_reports(&[report.clone()], out)?;
        return Ok(summarize(&[report]));
    }

    let cfg = TrainConfig::new(variant, group, steps, seed);
    fn go<T: Scalar>(
        cfg: &TrainConfig,
        resume: Option<&Path>,
        out: Option<&Path>,
        metrics: Option<&Path>,
    ) -> Result<i32> {
        let outcome = crate::train::train_toy::<T>(cfg, resume, out)?;
        if let Some(path) = metrics {
            let mut csv = String::from("step,loss,upright_acc,rotated_acc\n");
            for m in &outcome.curve {
                csv.push_str(&format!(
                    "{},{},{},{}\n",
                    m.step, m.loss, m.upright_acc, m.rotated_acc
                ));
            }
            std::fs::write(path, csv)?;
        }
        println!(
            "{}",
            serde_json::json!({
                "variant": cfg.variant.as_str(),
                "group_order": cfg.group_order,
                "steps": outcome.steps,
                "seed": cfg.seed,
                "upright_acc": outcome.final_upright_acc,
                "rotated_acc": outcome.final_rotated_acc,
                "wall_seconds": outcome.wall_seconds,
                "config_hash": verify::config_hash(cfg),
                "library_version": crate::VERSION,
            })
        );
        Ok(0)
    }
    match precision {
        Precision::F32 => go::<f32>(&cfg, resume, out, metrics),
        Precision::F64 => go::<f64>(&cfg, resume, out, metrics),
    }
}

fn cmd_eval_invariance(
    group: usize,
    scenes: usize,
    seed: u64,
    out: Option<&Path>,
    dump_features: Option<&Path>,
    precision: Precision,
) -> Result<i32> {
    let mut suite = AlignmentAblationSuite::new(group);
    suite.scenes = scenes;
    suite.seed = seed;
    let report = match precision {
        Precision::F32 => suite.run::<f32>()?,
        Precision::F64 => suite.run::<f64>()?,
    };
    if let Some(dir) = dump_features {
        match precision {
            Precision::F32 => dump_scene_features::<f32>(&suite, dir)?,
            Precision::F64 => dump_scene_features::<f64>(&suite, dir)?,
        }
    }
    write_reports(&[report.clone()], out)?;
    Ok(summarize(&[report]))
}

/// Write, for every scene in the suite, the orientation-aligned RiRoI
/// feature tensor plus its JSON sidecar.
fn dump_scene_features<T: Scalar>(suite: &AlignmentAblationSuite, dir: &Path) -> Result<()> {
    use crate::group::RegularField;
    use crate::layers::backbone::ModelKind;
    use crate::roi::{orientation_align, rroi_align_spatial};
    use crate::verify::ToyModel;

    std::fs::create_dir_all(dir)?;
    let model = ToyModel::<T>::new(ModelKind::Equivariant, suite.backbone.clone(), suite.seed)?;
    let root = crate::rng::SplitMix64::new(suite.seed);
    for i in 0..suite.scenes {
        let scene = trial_scene_for_dump(&root, i, suite.side)?;
        let img = crate::tensor::PlanarTensor::from_vec_unchecked(
            scene.image.channels(),
            scene.side(),
            scene.side(),
            scene.image_as::<T>(),
        );
        let levels = model.forward_levels(&img)?;
        let (dims, values) = &levels[0];
        let field = RegularField::from_vec_unchecked(
            model.group()?,
            dims[0],
            dims[2],
            dims[3],
            values.clone(),
        );
        let b = &scene.annotations[0].rroi;
        let spatial = rroi_align_spatial(&field, b, &suite.align)?;
        let aligned = orientation_align(&spatial, b.theta, &suite.align)?;
        let sidecar = FeatureSidecar {
            k: aligned.base_channels(),
            n: aligned.orientations(),
            s: aligned.size(),
            tag: aligned.tag(),
            theta: aligned.theta(),
        };
        let tensor_path = dir.join(format!("scene{i:03}.rgt"));
        crate::tensor::save_raw_tensor(
            &tensor_path,
            &[
                aligned.base_channels(),
                aligned.orientations(),
                aligned.size(),
                aligned.size(),
            ],
            aligned.data(),
        )?;
        std::fs::write(
            dir.join(format!("scene{i:03}.json")),
            serde_json::to_string_pretty(&sidecar)?,
        )?;
    }
    Ok(())
}

/// Mirrors the deterministic per-trial scene choice used by the suites.
fn trial_scene_for_dump(
    root: &crate::rng::SplitMix64,
    trial: usize,
    side: usize,
) -> Result<crate::synth::SyntheticScene> {
    for attempt in 0..50u64 {
        let mut rng = root.fork(trial as u64 * 1000 + attempt);
        match crate::synth::gen_scene_with(rng.next_u64(), &SceneOptions::new(side, 1)) {
            Ok(scene) => return Ok(scene),
            Err(Error::Overcrowded(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Overcrowded(50))
}

fn cmd_gen_data(
    out: &Path,
    seed: u64,
    count: usize,
    side: usize,
    objects: usize,
    png_dir: Option<&Path>,
) -> Result<i32> {
    let opts = SceneOptions::new(side, objects);
    let scenes = crate::train::gen_dataset(seed, count, &opts)?;
    crate::synth::save_dataset(out, &scenes)?;
    if let Some(dir) = png_dir {
        std::fs::create_dir_all(dir)?;
        for (i, scene) in scenes.iter().enumerate() {
            crate::synth::export_png(scene, &dir.join(format!("scene{i:04}.png")))?;
        }
    }
    eprintln!("wrote {} scenes to {}", scenes.len(), out.display());
    Ok(0)
}

fn cmd_tensor_dump(path: &Path) -> Result<i32> {
    let (dims, data): (Vec<usize>, Vec<f64>) = crate::tensor::load_raw_tensor(path)?;
    let min = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = data.iter().sum::<f64>() / data.len() as f64;
    println!(
        "{}",
        serde_json::json!({
            "path": path.display().to_string(),
            "dims": dims,
            "count": data.len(),
            "min": min,
            "max": max,
            "mean": mean,
        })
    );
    Ok(0)
}

fn cmd_tensor_compare(a: &Path, b: &Path, tol: f64) -> Result<i32> {
    let (dims_a, data_a): (Vec<usize>, Vec<f64>) = crate::tensor::load_raw_tensor(a)?;
    let (dims_b, data_b): (Vec<usize>, Vec<f64>) = crate::tensor::load_raw_tensor(b)?;
    if dims_a != dims_b {
        eprintln!("shape mismatch: {:?} vs {:?}", dims_a, dims_b);
        return Ok(1);
    }
    let max_abs = data_a
        .iter()
        .zip(&data_b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max);
    println!(
        "{}",
        serde_json::json!({ "dims": dims_a, "max_abs_diff": max_abs, "tol": tol })
    );
    Ok(if max_abs <= tol { 0 } else { 1 })
}
