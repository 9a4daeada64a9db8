// Temporary diagnostic: per-prefix equivariance errors at N=8.

use regconv::layers::backbone::{BackboneConfig, ModelKind};
use regconv::verify::{equivariance_prefix_errors, random_smooth_image, ToyModel};

#[test]
#[ignore]
fn probe_prefix_errors_n8() {
    let cfg = BackboneConfig::toy(8);
    let model = ToyModel::<f64>::new(ModelKind::Equivariant, cfg, 9).unwrap();
    let img = random_smooth_image::<f64>(32, 1, 10);
    for k in [1usize, 2, 3, 4] {
        let rows = equivariance_prefix_errors(&model, &img, k).unwrap();
        println!("--- k={k} (angle {} deg)", 45 * k);
        for (name, err) in rows {
            println!("{name:>16}: {err:.5}");
        }
    }
}

#[test]
#[ignore]
fn probe_lift_only_n8() {
    use regconv::group::act_on_field;
    use regconv::layers::{lift_forward, LiftConvLayer};
    use regconv::tensor::{rotate_planar, Tensor4};
    use regconv::verify::masked_rel_l2;

    let side = 33;
    let img = random_smooth_image::<f64>(side, 1, 5);
    let n = 8;
    let group = regconv::group::CyclicGroup::new(n).unwrap();
    let mut rng = regconv::rng::SplitMix64::new(3);

    for (label, window_sigma) in [("raw", None), ("win0.85", Some(0.85)), ("win0.6", Some(0.6))] {
        let mut base = vec![0.0f64; 4 * 9];
        for v in base.iter_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
        if let Some(sigma) = window_sigma {
            for (i, v) in base.iter_mut().enumerate() {
                let p = i % 9;
                let (y, x) = ((p / 3) as f64 - 1.0, (p % 3) as f64 - 1.0);
                *v *= (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();
            }
        }
        let layer = LiftConvLayer::new(
            Tensor4::from_vec([4, 1, 3, 3], base).unwrap(),
            1,
            1,
            group,
        )
        .unwrap();
        let lifted = lift_forward(&img, &layer).unwrap();
        for k in [1usize, 2] {
            let angle = group.angle_of(k).unwrap();
            let lhs = lift_forward(&rotate_planar(&img, angle, None), &layer).unwrap();
            let rhs = act_on_field(&lifted, k).unwrap();
            let err = masked_rel_l2(lhs.data(), rhs.data(), 4 * n, side, side);
            println!("{label} k={k}: {err:.5}");
        }
    }
}

#[test]
#[ignore]
fn probe_isolation() {
    use regconv::group::act_on_field;
    use regconv::layers::{lift_forward, LiftConvLayer};
    use regconv::tensor::{rotate_planar, Tensor4};
    use regconv::verify::masked_rel_l2;

    let side = 33;
    let img = random_smooth_image::<f64>(side, 1, 5);
    let n = 8;
    let group = regconv::group::CyclicGroup::new(n).unwrap();

    // Case A: rotationally symmetric filter -> all slices equal, so the
    // only error is warp/conv commutation on a smooth image.
    let sym = vec![
        0.25, 0.5, 0.25,
        0.5, 2.0, 0.5,
        0.25, 0.5, 0.25,
    ];
    let layer = LiftConvLayer::new(
        Tensor4::from_vec([1, 1, 3, 3], sym).unwrap(),
        1, 1, group,
    ).unwrap();
    let lifted = lift_forward(&img, &layer).unwrap();
    let lhs = lift_forward(&rotate_planar(&img, group.angle_of(1).unwrap(), None), &layer).unwrap();
    let rhs = act_on_field(&lifted, 1).unwrap();
    println!("symmetric filter k=1: {:.5}", masked_rel_l2(lhs.data(), rhs.data(), n, side, side));

    // Case B: asymmetric single filter, per-channel errors.
    let asym = vec![
        0.0, 1.0, 0.0,
        0.0, 0.0, 0.0,
        0.0, 0.0, 0.0,
    ];
    let layer = LiftConvLayer::new(
        Tensor4::from_vec([1, 1, 3, 3], asym).unwrap(),
        1, 1, group,
    ).unwrap();
    let lifted = lift_forward(&img, &layer).unwrap();
    let lhs = lift_forward(&rotate_planar(&img, group.angle_of(1).unwrap(), None), &layer).unwrap();
    let rhs = act_on_field(&lifted, 1).unwrap();
    for r in 0..n {
        let hw = side * side;
        let a = &lhs.data()[r * hw..(r + 1) * hw];
        let b = &rhs.data()[r * hw..(r + 1) * hw];
        println!("asym channel {r}: {:.5}", masked_rel_l2(a, b, 1, side, side));
    }
    // Cross-check: is lhs channel r closer to rhs channel r+something?
    for shift in 0..n {
        let mut total = 0.0;
        for r in 0..n {
            let hw = side * side;
            let a = &lhs.data()[r * hw..(r + 1) * hw];
            let b = &rhs.data()[((r + shift) % n) * hw..(((r + shift) % n) + 1) * hw];
            total += masked_rel_l2(a, b, 1, side, side);
        }
        println!("mean err if rhs shifted by {shift}: {:.5}", total / n as f64);
    }
}

#[test]
#[ignore]
fn probe_stem_decomposition() {
    use regconv::group::{act_on_field, CyclicGroup};
    use regconv::layers::backbone::{init_params, BackboneConfig, ModelKind};
    use regconv::layers::{gbn_forward, grelu_forward, lift_forward, LiftConvLayer};
    use regconv::tensor::{rotate_planar, Tensor4};
    use regconv::verify::masked_rel_l2;

    let side = 33;
    let n = 8;
    let img = random_smooth_image::<f64>(side, 1, 5);
    let group = CyclicGroup::new(n).unwrap();
    let cfg = BackboneConfig::toy(n);
    let params = init_params::<f64>(&cfg, ModelKind::Equivariant, 9).unwrap();
    let stem = params.get("stem.base").unwrap();
    let k_out = stem.dims[0];
    let layer = LiftConvLayer::new(
        Tensor4::from_vec(
            [stem.dims[0], stem.dims[1], stem.dims[2], stem.dims[3]],
            stem.value.clone(),
        )
        .unwrap(),
        1,
        1,
        group,
    )
    .unwrap();
    let gamma = vec![1.0f64; k_out];
    let beta = vec![0.0f64; k_out];

    let rot_img = rotate_planar(&img, group.angle_of(1).unwrap(), None);

    let f_base = lift_forward(&img, &layer).unwrap();
    let f_rot = lift_forward(&rot_img, &layer).unwrap();

    // lift only
    let rhs = act_on_field(&f_base, 1).unwrap();
    println!(
        "lift-only:        {:.5}",
        masked_rel_l2(f_rot.data(), rhs.data(), k_out * n, side, side)
    );
    // lift + norm
    let n_base = gbn_forward(&f_base, &gamma, &beta, 1e-5).unwrap();
    let n_rot = gbn_forward(&f_rot, &gamma, &beta, 1e-5).unwrap();
    let rhs = act_on_field(&n_base, 1).unwrap();
    println!(
        "lift+norm:        {:.5}",
        masked_rel_l2(n_rot.data(), rhs.data(), k_out * n, side, side)
    );
    // lift + norm + relu
    let r_base = grelu_forward(&n_base);
    let r_rot = grelu_forward(&n_rot);
    let rhs = act_on_field(&r_base, 1).unwrap();
    println!(
        "lift+norm+relu:   {:.5}",
        masked_rel_l2(r_rot.data(), rhs.data(), k_out * n, side, side)
    );
    // per-channel diagnostics of the lift
    let hw = side * side;
    let rhs = act_on_field(&f_base, 1).unwrap();
    for co in 0..2 {
        for i in 0..n {
            let idx = (co * n + i) * hw;
            let err = masked_rel_l2(
                &f_rot.data()[idx..idx + hw],
                &rhs.data()[idx..idx + hw],
                1,
                side,
                side,
            );
            println!("  ch (k={co}, i={i}): {err:.5}");
        }
    }
}

#[test]
#[ignore]
fn probe_gconv_local_defect_and_gain() {
    use regconv::group::{act_on_field, CyclicGroup, RegularField};
    use regconv::layers::backbone::{init_params, BackboneConfig, ModelKind};
    use regconv::layers::{gbn_forward, gconv_forward, grelu_forward, lift_forward, GConvLayer, LiftConvLayer};
    use regconv::tensor::{rotate_planar, Tensor4};
    use regconv::verify::masked_rel_l2;

    let side = 32;
    let n = 8;
    let img = random_smooth_image::<f64>(side, 1, 5);
    let group = CyclicGroup::new(n).unwrap();
    let cfg = BackboneConfig::toy(n);
    let params = init_params::<f64>(&cfg, ModelKind::Equivariant, 9).unwrap();

    let stem = params.get("stem.base").unwrap();
    let layer = LiftConvLayer::new(
        Tensor4::from_vec([8, 1, 3, 3], stem.value.clone()).unwrap(),
        1, 1, group,
    ).unwrap();
    let gamma = vec![1.0f64; 8];
    let beta = vec![0.0f64; 8];
    let stem_out = grelu_forward(&gbn_forward(&lift_forward(&img, &layer).unwrap(), &gamma, &beta, 1e-5).unwrap());

    let conv1 = params.get("stage0.block0.conv1.base").unwrap();
    let glayer = GConvLayer::new(conv1.value.clone(), 8, 8, 3, 3, 1, 1, group).unwrap();

    // Local defect: gconv(act(f)) vs act(gconv(f)) on the realistic field.
    let lhs = gconv_forward(&act_on_field(&stem_out, 1).unwrap(), &glayer).unwrap();
    let rhs = act_on_field(&gconv_forward(&stem_out, &glayer).unwrap(), 1).unwrap();
    println!("local gconv defect: {:.5}", masked_rel_l2(lhs.data(), rhs.data(), 64, side, side));

    // Error gain: perturb the input by small noise; how does the output
    // relative error compare to the input relative error?
    let mut rng = regconv::rng::SplitMix64::new(77);
    for label in ["white", "smooth"] {
        let noise: Vec<f64> = match label {
            "white" => (0..stem_out.data().len()).map(|_| rng.uniform(-1.0, 1.0)).collect(),
            _ => {
                // smooth noise: reuse a blob image per channel
                let mut v = Vec::new();
                for c in 0..64 {
                    let b = random_smooth_image::<f64>(side, 1, 1000 + c);
                    v.extend_from_slice(b.data());
                }
                v
            }
        };
        let sig_norm = (stem_out.data().iter().map(|v| v * v).sum::<f64>()).sqrt();
        let noise_norm = (noise.iter().map(|v| v * v).sum::<f64>()).sqrt();
        let eps = 0.01 * sig_norm / noise_norm;
        let perturbed_data: Vec<f64> = stem_out.data().iter().zip(&noise).map(|(a, b)| a + eps * b).collect();
        let perturbed = RegularField::from_vec(group, 8, side, side, perturbed_data).unwrap();
        let base_out = gconv_forward(&stem_out, &glayer).unwrap();
        let pert_out = gconv_forward(&perturbed, &glayer).unwrap();
        let rel_out = regconv::tensor::rel_l2(pert_out.data(), base_out.data());
        println!("gain for {label} 1% perturbation: {:.3}", rel_out / 0.01);

        // and through norm+relu
        let gamma8 = vec![1.0f64; 8];
        let beta8 = vec![0.0f64; 8];
        let a = grelu_forward(&gbn_forward(&base_out, &gamma8, &beta8, 1e-5).unwrap());
        let b = grelu_forward(&gbn_forward(&pert_out, &gamma8, &beta8, 1e-5).unwrap());
        println!("gain incl norm+relu:  {:.3}", regconv::tensor::rel_l2(b.data(), a.data()) / 0.01);
    }
}

#[test]
#[ignore]
fn probe_suite_fast() {
    use regconv::layers::backbone::{BackboneConfig, ModelKind};
    use regconv::verify::{equivariance_error, random_smooth_image, ToyModel};
    use rayon::prelude::*;
    let cfg = BackboneConfig::toy(8);
    let errs: Vec<f64> = (0..8u64)
        .into_par_iter()
        .map(|t| {
            let img = random_smooth_image::<f64>(48, 1, 1000 + t);
            let model = ToyModel::<f64>::new(ModelKind::Equivariant, cfg.clone(), 2000 + t).unwrap();
            [1usize, 3]
                .iter()
                .map(|&k| equivariance_error(&model, &img, k).unwrap())
                .fold(0.0f64, f64::max)
        })
        .collect();
    let max = errs.iter().cloned().fold(0.0, f64::max);
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    println!("FAST max={max:.4} mean={mean:.4} errs={errs:.3?}");
}

#[test]
#[ignore]
fn probe_bad_trial() {
    use regconv::layers::backbone::{BackboneConfig, ModelKind};
    use regconv::verify::{equivariance_prefix_errors, random_smooth_image, ToyModel};
    let cfg = BackboneConfig::toy(8);
    for (ws, is_) in [(2006u64, 1006u64), (2005, 1005)] {
        let img = random_smooth_image::<f64>(48, 1, is_);
        let model = ToyModel::<f64>::new(ModelKind::Equivariant, cfg.clone(), ws).unwrap();
        for k in [1usize, 3] {
            let rows = equivariance_prefix_errors(&model, &img, k).unwrap();
            println!("--- weights {ws} image {is_} k={k}");
            for (name, err) in rows {
                println!("{name:>16}: {err:.4}");
            }
        }
    }
}

#[test]
#[ignore]
fn probe_worst_suite_trial() {
    use regconv::layers::backbone::{BackboneConfig, ModelKind};
    use regconv::rng::SplitMix64;
    use regconv::verify::{equivariance_error, equivariance_prefix_errors, random_smooth_image, ToyModel};
    use rayon::prelude::*;
    let cfg = BackboneConfig::toy(8);
    let root = SplitMix64::new(7);
    let rows: Vec<(usize, u64, u64, f64)> = (0..20usize)
        .into_par_iter()
        .map(|t| {
            let rng = root.fork(t as u64);
            let mut seeder = rng.clone();
            let img_seed = seeder.next_u64();
            let weight_seed = seeder.next_u64();
            let img = random_smooth_image::<f64>(48, 1, img_seed);
            let model = ToyModel::<f64>::new(ModelKind::Equivariant, cfg.clone(), weight_seed).unwrap();
            let worst = (1..8usize)
                .map(|k| equivariance_error(&model, &img, k).unwrap())
                .fold(0.0f64, f64::max);
            (t, img_seed, weight_seed, worst)
        })
        .collect();
    for (t, _, _, e) in &rows {
        println!("trial {t}: {e:.4}");
    }
    let worst = rows.iter().max_by(|a, b| a.3.partial_cmp(&b.3).unwrap()).unwrap();
    println!("worst trial {} err {:.4}", worst.0, worst.3);
    let img = random_smooth_image::<f64>(48, 1, worst.1);
    let model = ToyModel::<f64>::new(ModelKind::Equivariant, cfg, worst.2).unwrap();
    for k in 1..8usize {
        let rows = equivariance_prefix_errors(&model, &img, k).unwrap();
        let line: Vec<String> = rows.iter().map(|(n, e)| format!("{n}={e:.4}")).collect();
        println!("k={k}: {}", line.join(" "));
    }
}
