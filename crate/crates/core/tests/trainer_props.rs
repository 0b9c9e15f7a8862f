use proptest::prelude::*;
use ressqu::archs::{build_res_squ_cnds, ArchConfig};
use ressqu::datasets::synth_generate;
use ressqu::graph::NodeParams;
use ressqu::ops::Mode;
use ressqu::trainer::*;

fn tiny_run(lr: f64, seed: u64) -> (ressqu::graph::ParamStore<f32>, TrainOutcome<f32>) {
    let g = build_res_squ_cnds(&ArchConfig::miniature()).unwrap();
    let data = synth_generate(2, 6, [3, 8, 8], 0.1, seed).unwrap();
    let cfg = TrainConfig {
        batch_train: 4,
        epochs: 2,
        lr_step: 1,
        base_lr: lr,
        seed,
        ..Default::default()
    };
    let init = init_params::<f32>(&g, &cfg.init, seed).unwrap();
    (init, train::<f32>(&g, &cfg, &data, &mut ()).unwrap())
}

#[test]
fn xavier_bound_and_fixed_layers() {
    let g = build_res_squ_cnds(&ArchConfig::reference()).unwrap();
    let p = init_params::<f32>(&g, &InitSpec::default(), 3).unwrap();
    let bound = (3.0f64 / (3 * 3 * 3) as f64).sqrt();
    let Some(NodeParams::Conv { weight, bias }) = p.get("conv1") else {
        panic!("conv1 is a conv");
    };
    assert!(weight.data().iter().all(|&w| (w as f64).abs() <= bound));
    assert!(weight.data().iter().any(|&w| (w as f64).abs() > 0.9 * bound));
    assert!(bias.data().iter().all(|&b| b == 0.0));
    for (id, np) in p.iter() {
        if let NodeParams::Scale { gamma, beta } = np {
            assert!(gamma.data().iter().all(|&v| v == 1.0), "{id}");
            assert!(beta.data().iter().all(|&v| v == 0.0), "{id}");
        }
    }
    for id in ["conv8", "aux/conv4"] {
        assert!(is_output_conv(&g, g.position(id).unwrap()));
        let Some(NodeParams::Conv { weight, .. }) = p.get(id) else { panic!() };
        let n = weight.len() as f64;
        let var = weight.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / n;
        assert!((var.sqrt() - 0.01).abs() < 0.001, "{id}: {}", var.sqrt());
    }
    assert!(!is_output_conv(&g, g.position("conv7").unwrap()));
    assert_eq!(p, init_params::<f32>(&g, &InitSpec::default(), 3).unwrap());
    assert_ne!(p, init_params::<f32>(&g, &InitSpec::default(), 4).unwrap());
}

#[test]
fn lr_schedule_examples() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at(&cfg, 0), 0.01);
    assert_eq!(lr_at(&cfg, 10), 0.005);
    assert_eq!(lr_at(&cfg, 49), 0.000625);
    let drops = (1..cfg.epochs).filter(|&e| lr_at(&cfg, e) < lr_at(&cfg, e - 1)).count();
    assert_eq!(drops, cfg.epochs.div_ceil(cfg.lr_step) - 1);
}

#[test]
fn crop_origins_stay_in_bounds() {
    let prep = Preprocess {
        means: vec![0.0],
        scale: 1.0,
        crop: Some(CropSpec::default()),
    };
    let ramp: Vec<f32> = (0..256 * 256).map(|v| v as f32).collect();
    let mut mirrored = 0;
    for seed in 0..10_000u64 {
        let out: ressqu::Tensor<f32> = prep.apply(&ramp, [1, 256, 256], Mode::Train, seed).unwrap();
        let d = out.data();
        let (a, b) = (d[0] as usize, d[226] as usize);
        let left = a.min(b);
        let (oy, ox) = (left / 256, left % 256);
        assert!(oy <= 29 && ox <= 29, "seed {seed}: origin ({oy}, {ox})");
        assert_eq!(a.abs_diff(b), 226);
        if a > b {
            mirrored += 1;
        }
    }
    assert!((4_500..5_500).contains(&mirrored));

    let centre: ressqu::Tensor<f32> = prep.apply(&ramp, [1, 256, 256], Mode::Infer, 1).unwrap();
    assert_eq!(centre.data()[0] as usize, 14 * 256 + 14);
    assert!(prep.apply::<f32>(&ramp[..100], [1, 10, 10], Mode::Infer, 0).is_err());
}

#[test]
fn zero_mean_constant_image_is_zero_after_preprocess() {
    let prep = Preprocess {
        means: vec![0.25, 0.5, 0.75],
        scale: 20.0,
        crop: Some(CropSpec::default()),
    };
    let img: Vec<f32> = [0.25f32, 0.5, 0.75].iter().flat_map(|&v| vec![v; 256 * 256]).collect();
    let out: ressqu::Tensor<f64> = prep.apply(&img, [3, 256, 256], Mode::Infer, 0).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn zero_lr_leaves_params_bitwise_unchanged() {
    let (init, out) = tiny_run(0.0, 2);
    let a: Vec<u32> = init.flat_values().iter().map(|v| v.to_bits()).collect();
    let b: Vec<u32> = out.params.flat_values().iter().map(|v| v.to_bits()).collect();
    assert_eq!(a, b);
    assert_eq!(out.rows.len(), 2 * 3);
    assert!(out.rows.iter().all(|r| r.total.is_finite()));
}

#[test]
fn seeded_runs_reproduce_metrics_and_params() {
    let (_, a) = tiny_run(0.01, 5);
    let (_, b) = tiny_run(0.01, 5);
    assert_eq!(metrics_csv(&a.rows).unwrap(), metrics_csv(&b.rows).unwrap());
    assert_eq!(a.params, b.params);
    assert_eq!(a.rows.last().unwrap().alpha, 0.15);
    assert_eq!(a.rows.last().unwrap().lr, 0.005);
}

#[test]
fn checkpoint_round_trip() {
    let (_, out) = tiny_run(0.01, 6);
    let dir = tempfile::tempdir().unwrap();
    let g = build_res_squ_cnds(&ArchConfig::miniature()).unwrap();
    write_checkpoint(dir.path(), &g, &out.params).unwrap();
    let (g2, p2) = read_checkpoint::<f32>(dir.path()).unwrap();
    assert_eq!(g2.to_json().unwrap(), g.to_json().unwrap());
    assert_eq!(p2.flat_values(), out.params.flat_values());
}

#[test]
fn evaluation_and_mismatch() {
    let mut arch = ArchConfig::miniature();
    arch.classes = 5;
    let g = build_res_squ_cnds(&arch).unwrap();
    let data = synth_generate(5, 2, [3, 8, 8], 0.1, 0).unwrap();
    let p = init_params::<f32>(&g, &InitSpec::default(), 0).unwrap();
    let prep = Preprocess { means: vec![0.5; 3], scale: 1.0, crop: None };
    let (top1, top5) = evaluate(&g, &p, &data, &prep, 3).unwrap();
    assert!(top1 <= top5);
    assert_eq!(top5, 1.0);

    let wrong = synth_generate(3, 2, [3, 8, 8], 0.1, 0).unwrap();
    let cfg = TrainConfig { batch_train: 2, epochs: 1, ..Default::default() };
    assert!(train::<f32>(&g, &cfg, &wrong, &mut ()).is_err());
    let bad = TrainConfig { input_scale: 0.0, ..cfg };
    assert!(bad.validate().is_err());
}

proptest! {
    #[test]
    fn top1_never_exceeds_top5(logits in prop::collection::vec(-5.0f64..5.0, 1..40), pick in any::<prop::sample::Index>()) {
        let label = pick.index(logits.len());
        let r = rank_of(&logits, label);
        prop_assert!(r < logits.len());
        let higher = logits.iter().enumerate().filter(|&(i, &v)| v > logits[label] || (v == logits[label] && i < label)).count();
        prop_assert_eq!(r, higher);
    }

    #[test]
    fn sgd_unrolls_momentum(g in -2.0f64..2.0, lr in 0.0f64..0.1, w0 in -1.0f64..1.0) {
        // Two steps on a constant gradient move by lr * g * (1 + 1.9).
        let g_ = build_res_squ_cnds(&ArchConfig::miniature()).unwrap();
        let mut p = init_params::<f64>(&g_, &InitSpec::default(), 0).unwrap();
        *p.flat_value_mut(0).unwrap() = w0;
        let mut sgd = Sgd::new(&p);
        for _ in 0..2 {
            p.zero_grads();
            let (_, np) = p.iter_mut().next().unwrap();
            let NodeParams::Conv { weight, .. } = np else { panic!() };
            weight.grad_mut()[0] = g;
            sgd.step(&mut p, lr, 0.9, 0.0);
        }
        let w = p.flat_values()[0];
        prop_assert!((w - (w0 - lr * g * 2.9)).abs() < 1e-12);
    }
}
