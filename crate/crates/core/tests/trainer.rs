use std::collections::BTreeMap;

use pcd_core::model::{BackboneSpec, Checkpoint, HeadConfig, MhsaConfig, ParamStore, StageSpec, Teacher, TeacherHeadMode, TeacherSpec};
use pcd_core::rng::Rng;
use pcd_core::trainer::*;
use pcd_core::{Error, Tensor};

fn scalar_store(path: &str, v: f32) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert(path, Tensor::new(&[1], vec![v]).unwrap()).unwrap();
    s
}

fn grads(path: &str, g: f32) -> BTreeMap<String, Tensor> {
    BTreeMap::from([(path.to_string(), Tensor::new(&[1], vec![g]).unwrap())])
}

fn sgd(momentum: f64, wd: f64) -> LarsConfig {
    LarsConfig {
        momentum,
        weight_decay: wd,
        ..LarsConfig::default()
    }
}

// ---------------------------------------------------------------------------
// LARS

#[test]
fn zero_gradient_leaves_parameter_unchanged() {
    let mut store = scalar_store("w.weight", 0.7);
    let mut state = LarsState::default();
    lars_step(&mut store, &grads("w.weight", 0.0), &mut state, 0.5, &sgd(0.9, 0.0)).unwrap();
    assert_eq!(store.tensor("w.weight").unwrap().data(), &[0.7]);
}

#[test]
fn scalar_weight_uses_trust_ratio() {
    // λ = |w| / |g| = 2, update = λ · lr · g = 0.2
    let mut store = scalar_store("w.weight", 2.0);
    let mut state = LarsState::default();
    lars_step(&mut store, &grads("w.weight", 1.0), &mut state, 0.1, &sgd(0.0, 0.0)).unwrap();
    assert!((store.tensor("w.weight").unwrap().data()[0] - 1.8).abs() < 1e-6);
    assert_eq!(trust_ratio(2.0, 1.0, 0.0, 1.0), 2.0);
    assert_eq!(trust_ratio(0.0, 1.0, 0.0, 1.0), 1.0);
    assert_eq!(trust_ratio(1.0, 0.0, 0.1, 1.0), 1.0);
    assert!((trust_ratio(2.0, 1.0, 0.5, 1.0) - 1.0).abs() < 1e-12);
}

#[test]
fn excluded_bias_is_plain_sgd_with_momentum() {
    let mut store = scalar_store("fc.bias", 2.0);
    let mut state = LarsState::default();
    let cfg = sgd(0.9, 0.1);
    lars_step(&mut store, &grads("fc.bias", 1.0), &mut state, 0.1, &cfg).unwrap();
    let w1 = store.tensor("fc.bias").unwrap().data()[0] as f64;
    assert!((w1 - 1.9).abs() < 1e-6);
    lars_step(&mut store, &grads("fc.bias", 1.0), &mut state, 0.1, &cfg).unwrap();
    // m = 0.9 · 0.1 + 0.1 = 0.19
    let w2 = store.tensor("fc.bias").unwrap().data()[0] as f64;
    assert!((w2 - (1.9 - 0.19)).abs() < 1e-6);
}

#[test]
fn weight_decay_never_touches_biases_or_bn_affine() {
    let mut rng = Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    for p in ["a.weight", "a.bias", "b.gamma", "b.beta"] {
        store.insert(p, Tensor::gaussian_from(&[3, 2], &mut rng, 1.0).unwrap()).unwrap();
    }
    let g: BTreeMap<String, Tensor> = store
        .paths()
        .map(|p| (p.to_string(), Tensor::gaussian_from(&[3, 2], &mut rng, 1.0).unwrap()))
        .collect();
    let run = |wd: f64| {
        let mut s = store.clone();
        lars_step(&mut s, &g, &mut LarsState::default(), 0.05, &sgd(0.9, wd)).unwrap();
        s
    };
    let (plain, decayed) = (run(0.0), run(0.3));
    for p in ["a.bias", "b.gamma", "b.beta"] {
        assert!(plain.tensor(p).unwrap().bit_eq(decayed.tensor(p).unwrap()), "{p}");
    }
    assert!(!plain.tensor("a.weight").unwrap().bit_eq(decayed.tensor("a.weight").unwrap()));
}

#[test]
fn excluded_params_can_opt_into_trust_ratio() {
    let mut store = scalar_store("x.bias", 2.0);
    let cfg = LarsConfig {
        exclude_from_adaptation: false,
        ..sgd(0.0, 0.0)
    };
    lars_step(&mut store, &grads("x.bias", 1.0), &mut LarsState::default(), 0.1, &cfg).unwrap();
    assert!((store.tensor("x.bias").unwrap().data()[0] - 1.8).abs() < 1e-6);
}

#[test]
fn non_finite_gradient_aborts_before_any_update() {
    let mut store = scalar_store("a.weight", 1.0);
    store.insert("b.weight", Tensor::new(&[1], vec![1.0]).unwrap()).unwrap();
    let mut g = grads("a.weight", 0.5);
    g.insert("b.weight".into(), Tensor::new(&[1], vec![f32::NAN]).unwrap());
    let mut state = LarsState { step: 7, ..Default::default() };
    let before = store.clone();
    let err = lars_step(&mut store, &g, &mut state, 0.1, &LarsConfig::default()).unwrap_err();
    match err {
        Error::NonFinite { what, step } => {
            assert!(what.contains("b.weight"));
            assert_eq!(step, 7);
        }
        e => panic!("unexpected {e}"),
    }
    assert_eq!(store, before);
    assert!(state.momentum.is_empty());
}

#[test]
fn running_statistics_are_not_optimized() {
    let mut store = scalar_store("bn.running_mean", 0.0);
    let r = lars_step(&mut store, &grads("bn.running_mean", 1.0), &mut LarsState::default(), 0.1, &LarsConfig::default());
    assert!(r.is_err());
}

// ---------------------------------------------------------------------------
// schedule

#[test]
fn schedule_shape() {
    let (total, warmup, peak) = (300, 50, 2.0);
    assert_eq!(lr_schedule(0, total, warmup, peak).unwrap(), 0.0);
    assert_eq!(lr_schedule(25, total, warmup, peak).unwrap(), 1.0);
    assert_eq!(lr_schedule(warmup, total, warmup, peak).unwrap(), peak);
    assert!((lr_schedule(175, total, warmup, peak).unwrap() - peak / 2.0).abs() < 1e-12);
    let last = lr_schedule(total - 1, total, warmup, peak).unwrap();
    assert!(last < 1e-3 * peak && last > 0.0);
    let mut prev = f64::INFINITY;
    for s in warmup..total {
        let lr = lr_schedule(s, total, warmup, peak).unwrap();
        assert!(lr <= prev);
        prev = lr;
    }
}

#[test]
fn schedule_rejects_bad_ranges() {
    assert!(lr_schedule(0, 10, 10, 1.0).is_err());
    assert!(lr_schedule(10, 10, 2, 1.0).is_err());
    assert!(lr_schedule(0, 10, 0, 1.0).unwrap() == 1.0);
}

#[test]
fn linear_scaling_rule_is_exact() {
    assert_eq!(peak_lr(1.0, 1024), 4.0);
    assert_eq!(peak_lr(0.3, 256), 0.3);
    assert_eq!(peak_lr(0.1, 64), 0.025);
}

#[test]
fn step_plan_from_epochs_and_override() {
    let p = step_plan(2048, 64, 5.0, 0.5, None).unwrap();
    assert_eq!((p.steps_per_epoch, p.total, p.warmup), (32, 160, 16));
    let p = step_plan(512, 16, 5.0, 0.5, Some(200)).unwrap();
    assert_eq!((p.total, p.warmup), (200, 20));
    assert!(matches!(step_plan(0, 16, 5.0, 0.5, None), Err(Error::EmptyDataset)));
    assert!(step_plan(8, 16, 5.0, 0.5, None).is_err());
    assert!(step_plan(64, 16, 5.0, 5.0, None).is_err());
}

// ---------------------------------------------------------------------------
// data and augmentation

#[test]
fn synthetic_data_is_deterministic_and_bounded() {
    let a = synth_dataset(6, 16, 3).unwrap();
    let b = synth_dataset(6, 16, 3).unwrap();
    assert_eq!(a, b);
    for (img, other) in a.images.iter().zip(&b.images) {
        assert!(img.bit_eq(other));
        assert_eq!(img.shape(), &[3, 16, 16]);
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    for m in &a.meta {
        assert!((2..=5).contains(&m.shapes.len()));
    }
    let c = synth_dataset(6, 16, 4).unwrap();
    assert_ne!(a.images, c.images);
    // image i does not depend on how many images are generated
    let longer = synth_dataset(9, 16, 3).unwrap();
    assert_eq!(&longer.images[..6], &a.images[..]);
}

#[test]
fn shapes_are_drawn_where_metadata_says() {
    let d = synth_dataset(4, 32, 11).unwrap();
    for (img, meta) in d.images.iter().zip(&d.meta) {
        let top = meta.shapes.last().unwrap();
        let (x, y) = (top.center[0] as usize, top.center[1] as usize);
        if top.contains(x as f64 + 0.5, y as f64 + 0.5) {
            for c in 0..3 {
                assert_eq!(img.at(&[c, y, x]), top.color[c]);
            }
        }
    }
}

#[test]
fn degenerate_datasets() {
    let empty = synth_dataset(0, 16, 1).unwrap();
    assert!(empty.is_empty());
    assert!(matches!(empty.validate(), Err(Error::EmptyDataset)));
    assert!(synth_dataset(2, 8, 1).is_err());
}

#[test]
fn identity_policy_returns_the_input() {
    let img = synth_dataset(1, 16, 5).unwrap().images.remove(0);
    let (a, b) = two_view(&img, &AugmentPolicy::IDENTITY, 16, &mut Rng::seed_from_u64(0)).unwrap();
    assert!(a.bit_eq(&img));
    assert!(b.bit_eq(&img));
}

#[test]
fn flip_is_an_involution() {
    let img = Tensor::gaussian(&[3, 5, 7], 1, 1.0).unwrap();
    let f = flip_horizontal(&img).unwrap();
    assert!(!f.bit_eq(&img));
    assert_eq!(f.at(&[1, 2, 0]), img.at(&[1, 2, 6]));
    assert!(flip_horizontal(&f).unwrap().bit_eq(&img));
}

#[test]
fn views_are_reproducible_and_in_range() {
    let img = synth_dataset(1, 24, 6).unwrap().images.remove(0);
    let p = AugmentPolicy::default();
    let (a1, b1) = two_view(&img, &p, 16, &mut Rng::seed_from_u64(9)).unwrap();
    let (a2, b2) = two_view(&img, &p, 16, &mut Rng::seed_from_u64(9)).unwrap();
    assert!(a1.bit_eq(&a2) && b1.bit_eq(&b2));
    assert_eq!(a1.shape(), &[3, 16, 16]);
    assert!(a1.data().iter().chain(b1.data()).all(|v| (0.0..=1.0).contains(v)));
    assert!(!a1.bit_eq(&b1));
}

#[test]
fn oversized_crop_is_clamped() {
    let img = synth_dataset(1, 16, 7).unwrap().images.remove(0);
    let dist = ViewDist {
        crop_scale: [2.0, 4.0],
        flip_prob: 0.0,
        brightness: 0.0,
    };
    let v = augment_view(&img, &dist, 16, &mut Rng::seed_from_u64(1)).unwrap();
    assert!(v.bit_eq(&img));
}

#[test]
fn crop_resize_samples_bilinearly() {
    let img = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let up = crop_resize(&img, 0.0, 0.0, 2.0, 4).unwrap();
    // output centers map to source coords -0.25, 0.25, 0.75, 1.25 (clamped)
    assert_eq!(up.data()[..4], [0.0, 0.25, 0.75, 1.0]);
    let down = crop_resize(&img, 0.0, 0.0, 2.0, 1).unwrap();
    assert_eq!(down.data(), &[1.5]);
}

// ---------------------------------------------------------------------------
// loops

fn tiny_config() -> Config {
    let mut c = Config::desk();
    c.data = DataConfig {
        num_images: 8,
        image_size: 16,
        input_size: 16,
    };
    c.teacher = TeacherSpec {
        backbone: BackboneSpec {
            in_channels: 3,
            stem_channels: 4,
            stages: vec![StageSpec { blocks: 1, channels: 8, stride: 2 }, StageSpec { blocks: 1, channels: 8, stride: 2 }],
        },
        head_hidden: 12,
        head_dim: 6,
    };
    c.student.backbone = BackboneSpec {
        in_channels: 3,
        stem_channels: 4,
        stages: vec![StageSpec { blocks: 1, channels: 4, stride: 2 }, StageSpec { blocks: 1, channels: 8, stride: 2 }],
    };
    c.student.head = HeadConfig {
        hidden: 8,
        dim: 6,
        blocks: 2,
    };
    c.student.mhsa = Some(MhsaConfig { heads: 2, head_dim: 3 });
    c.optim.batch_size = 4;
    c.optim.max_steps = Some(6);
    c.pretrain.optim.batch_size = 4;
    c.pretrain.optim.max_steps = Some(3);
    c.queue.capacity = 20;
    c.adapt.trials = 8;
    c
}

fn tiny_teacher(cfg: &Config, data: &Dataset) -> Teacher {
    let pre = pretrain_teacher(cfg, data, &mut |_| {}).unwrap();
    Teacher::assemble(&pre.checkpoint, TeacherHeadMode::Adapted, false, 8, 1e-5, &mut Rng::seed_from_u64(0)).unwrap()
}

fn queue_len(ckpt: &Checkpoint) -> usize {
    ckpt.get("state.queue").map_or(0, |q| q.shape()[0])
}

#[test]
fn pretrain_produces_an_adaptable_vector_checkpoint() {
    let cfg = tiny_config();
    let data = synth_dataset(8, 16, 1).unwrap();
    let mut seen = vec![];
    let pre = pretrain_teacher(&cfg, &data, &mut |m| seen.push(m.step)).unwrap();
    assert_eq!(seen, vec![0, 1, 2]);
    assert!(pre.metrics.iter().all(|m| m.loss.is_finite()));
    let t = Teacher::assemble(&pre.checkpoint, TeacherHeadMode::Adapted, false, 16, 1e-5, &mut Rng::seed_from_u64(2)).unwrap();
    assert!(t.invariance.unwrap().pass);
    assert_eq!(t.head.unwrap().structure(), "Conv-BN-CW-ReLU-Conv-BN");
}

#[test]
fn frozen_random_teacher_skips_training() {
    let mut cfg = tiny_config();
    cfg.pretrain.frozen_random = true;
    let data = synth_dataset(8, 16, 1).unwrap();
    let pre = pretrain_teacher(&cfg, &data, &mut |_| panic!("no steps expected")).unwrap();
    assert!(pre.metrics.is_empty());
    let init = cfg.teacher.init(&mut Rng::stream(cfg.seed, pcd_core::rng::tag::INIT, &[0])).unwrap();
    assert_eq!(pre.checkpoint.to_store().unwrap(), init);
}

#[test]
fn distill_is_deterministic_and_leaves_teacher_untouched() {
    let cfg = tiny_config();
    let data = synth_dataset(8, 16, 1).unwrap();
    let teacher = tiny_teacher(&cfg, &data);
    let before = teacher.fingerprint();
    let a = distill(&cfg, &data, &teacher, DistillOptions::default(), &mut |_| {}).unwrap();
    let b = distill(&cfg, &data, &teacher, DistillOptions::default(), &mut |_| {}).unwrap();
    assert_eq!(teacher.fingerprint(), before);
    assert_eq!(a.raw, b.raw);
    assert_eq!(a.metrics, b.metrics);
    assert!(a.completed);
    let export = a.export.unwrap();
    assert!(export.paths().all(|p| p.starts_with("backbone.")));
    assert_eq!(export.meta.norm_rescale_anchor, Some(0.25));
    let lines: Vec<String> = a.metrics.iter().map(StepMetrics::log_line).collect();
    assert!(lines.iter().all(|l| l.split('\t').count() == 4));
    assert!(lines[0].starts_with("0\t"));
}

#[test]
fn queue_length_tracks_pushes() {
    let mut cfg = tiny_config();
    cfg.queue.prefill = false;
    cfg.queue.capacity = 20;
    let data = synth_dataset(8, 16, 1).unwrap();
    let teacher = tiny_teacher(&cfg, &data);
    for steps in 1..=3u64 {
        let opts = DistillOptions {
            stop_after: Some(steps),
            ..Default::default()
        };
        let out = distill(&cfg, &data, &teacher, opts, &mut |_| {}).unwrap();
        // symmetric, both views enqueued: 2 · batch per step
        assert_eq!(queue_len(&out.raw), (8 * steps as usize).min(20));
        assert!(!out.completed && out.export.is_none());
    }
    cfg.loss.symmetric = false;
    let opts = DistillOptions {
        stop_after: Some(2),
        ..Default::default()
    };
    let out = distill(&cfg, &data, &teacher, opts, &mut |_| {}).unwrap();
    assert_eq!(queue_len(&out.raw), 8);
}

#[test]
fn prefill_fills_queue_before_first_step() {
    let cfg = tiny_config();
    let data = synth_dataset(8, 16, 1).unwrap();
    let teacher = tiny_teacher(&cfg, &data);
    let opts = DistillOptions {
        stop_after: Some(0),
        ..Default::default()
    };
    let out = distill(&cfg, &data, &teacher, opts, &mut |_| {}).unwrap();
    assert_eq!(queue_len(&out.raw), 8);
    let q = out.raw.get("state.queue").unwrap();
    for row in q.data().chunks(6) {
        let n: f64 = row.iter().map(|&v| v as f64 * v as f64).sum();
        assert!((n - 1.0).abs() < 1e-5);
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let cfg = tiny_config();
    let data = synth_dataset(8, 16, 1).unwrap();
    let teacher = tiny_teacher(&cfg, &data);
    let full = distill(&cfg, &data, &teacher, DistillOptions::default(), &mut |_| {}).unwrap();
    let first = distill(
        &cfg,
        &data,
        &teacher,
        DistillOptions {
            stop_after: Some(4),
            ..Default::default()
        },
        &mut |_| {},
    )
    .unwrap();
    assert_eq!(first.raw.meta.train_state.unwrap().step, 4);
    let rest = distill(
        &cfg,
        &data,
        &teacher,
        DistillOptions {
            resume: Some(&first.raw),
            ..Default::default()
        },
        &mut |_| {},
    )
    .unwrap();
    assert_eq!(rest.metrics.first().unwrap().step, 4);
    assert_eq!(rest.raw, full.raw);
    assert_eq!(rest.export, full.export);
    assert_eq!([first.metrics, rest.metrics].concat(), full.metrics);
}

#[test]
fn resume_rejects_a_different_student() {
    let cfg = tiny_config();
    let data = synth_dataset(8, 16, 1).unwrap();
    let teacher = tiny_teacher(&cfg, &data);
    let opts = DistillOptions {
        stop_after: Some(1),
        ..Default::default()
    };
    let first = distill(&cfg, &data, &teacher, opts, &mut |_| {}).unwrap();
    let mut other = cfg.clone();
    other.student.mhsa = None;
    let opts = DistillOptions {
        resume: Some(&first.raw),
        ..Default::default()
    };
    assert!(distill(&other, &data, &teacher, opts, &mut |_| {}).is_err());
}

#[test]
fn distill_rejects_empty_data_and_dim_mismatch() {
    let cfg = tiny_config();
    let data = synth_dataset(8, 16, 1).unwrap();
    let teacher = tiny_teacher(&cfg, &data);
    let empty = synth_dataset(0, 16, 1).unwrap();
    let r = distill(&cfg, &empty, &teacher, DistillOptions::default(), &mut |_| {});
    assert!(matches!(r, Err(Error::EmptyDataset)));
    let mut wide = cfg.clone();
    wide.student.head.dim = 5;
    wide.teacher.head_dim = 5;
    let r = distill(&wide, &data, &teacher, DistillOptions::default(), &mut |_| {});
    assert!(r.is_err());
}

#[test]
fn pixel_cosine_of_identical_maps_is_one() {
    let t = Tensor::gaussian(&[2, 5, 3, 3], 4, 1.0).unwrap();
    assert!((pixel_cosine(&t, &t).unwrap() - 1.0).abs() < 1e-9);
    assert!((pixel_cosine(&t, &t.map(|v| -v)).unwrap() + 1.0).abs() < 1e-9);
}

#[test]
fn config_validation_names_the_field() {
    let mut c = Config::desk();
    c.loss.tau = -1.0;
    match c.validate() {
        Err(Error::Config { path, .. }) => assert_eq!(path, "loss.tau"),
        r => panic!("{r:?}"),
    }
    let mut c = Config::desk();
    c.student.head.dim = 7;
    assert!(c.validate().is_err());
    let mut c = Config::desk();
    c.optim.warmup_epochs = c.optim.epochs;
    assert!(c.validate().is_err());
    Config::desk().validate().unwrap();
    Config::full_scale().validate().unwrap();
}

#[test]
fn full_scale_preset_values() {
    let c = Config::full_scale();
    assert_eq!(c.loss.tau, 0.2);
    assert_eq!(c.queue.capacity, 65536);
    assert_eq!(c.optim.weight_decay, 1e-5);
    assert_eq!(c.optim.momentum, 0.9);
    assert_eq!(peak_lr(c.optim.base_lr, c.optim.batch_size), 4.0);
    assert_eq!(c.student.mhsa.map(|m| (m.heads, m.head_dim)), Some((8, 64)));
    assert!(c.adapt.drop_last_bn);
}
