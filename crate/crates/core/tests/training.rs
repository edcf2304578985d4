use std::path::Path;

use sddgs::decouple::{partition, render_split, PartitionMode};
use sddgs::error::Error;
use sddgs::metrics::{psnr, region_psnr};
use sddgs::render::RenderSettings;
use sddgs::scene::FrameSample;
use sddgs::synth::{generate, support_mask, Dataset, SyntheticSpec};
use sddgs::train::{Checkpoint, TrainConfig, Trainer};

fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_static: 8,
        n_dynamic: 4,
        n_frames: 4,
        width: 32,
        height: 32,
        focal: 40.0,
        seed,
        ..Default::default()
    }
}

fn small_config(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        init_count: 16,
        prune_interval: 10,
        ..Default::default()
    }
}

fn frames(seed: u64) -> Vec<FrameSample> {
    generate(&small_spec(seed)).unwrap().frames
}

fn run(frames: &[FrameSample], cfg: &TrainConfig) -> (Vec<String>, Vec<u8>) {
    let mut log = Vec::new();
    let mut t = Trainer::new(frames, cfg.initial_scene(), cfg.clone()).unwrap();
    t.run(|e| {
        log.push(e.to_json());
        Ok(())
    })
    .unwrap();
    (log, t.checkpoint().to_bytes())
}

#[test]
fn training_is_deterministic() {
    let f = frames(1);
    let cfg = small_config(25);
    let (log_a, ckpt_a) = run(&f, &cfg);
    let (log_b, ckpt_b) = run(&f, &cfg);
    assert_eq!(log_a, log_b);
    assert_eq!(ckpt_a, ckpt_b);
    let other = TrainConfig { seed: 5, ..cfg };
    assert_ne!(run(&f, &other).1, ckpt_a);
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let f = frames(2);
    let full = run(&f, &small_config(30));

    let mut first = Trainer::new(&f, small_config(13).initial_scene(), small_config(13)).unwrap();
    let mut log = Vec::new();
    first.run(|e| {
        log.push(e.to_json());
        Ok(())
    })
    .unwrap();
    let bytes = first.checkpoint().to_bytes();
    let ckpt = Checkpoint::from_bytes(&bytes, Path::new("mem.ckpt")).unwrap();
    assert_eq!(ckpt.to_bytes(), bytes);

    let mut second = Trainer::resume(&f, ckpt, small_config(30)).unwrap();
    second
        .run(|e| {
            log.push(e.to_json());
            Ok(())
        })
        .unwrap();
    assert_eq!(log, full.0);
    // the stored config differs only in `steps`, which both runs end at
    assert_eq!(second.checkpoint().to_bytes(), full.1);
}

#[test]
fn resume_rejects_a_different_config() {
    let f = frames(2);
    let t = Trainer::new(&f, small_config(3).initial_scene(), small_config(3)).unwrap();
    let ckpt = t.checkpoint();
    let changed = TrainConfig {
        lambda_prior: 0.3,
        ..small_config(3)
    };
    assert!(matches!(Trainer::resume(&f, ckpt, changed), Err(Error::Contract(_))));
}

#[test]
fn pruning_removes_exactly_the_transparent_primitives() {
    let f = frames(3);
    let cfg = small_config(0);
    let mut init = cfg.initial_scene();
    let opacities = [0.5, 0.009, 0.01, 0.2, 1e-4, 0.0100001];
    for (p, o) in init.primitives.iter_mut().zip(opacities) {
        p.opacity_logit = sddgs::math::logit(o);
    }
    let kept: Vec<[f64; 3]> = init
        .primitives
        .iter()
        .filter(|p| p.opacity() >= cfg.prune_opacity)
        .map(|p| p.mu0)
        .collect();
    let mut t = Trainer::new(&f, init, cfg).unwrap();
    assert_eq!(t.prune(), 2);
    let after: Vec<[f64; 3]> = t.scene().primitives.iter().map(|p| p.mu0).collect();
    assert_eq!(after, kept);
    // optimizer state shrinks with the scene
    assert_eq!(t.checkpoint().adam.m.len(), after.len() * sddgs::params::param_count(2));
}

#[test]
fn dynamic_logits_are_frozen_without_w() {
    let f = frames(4);
    let cfg = small_config(15).with_ablation(sddgs::train::Ablation::A);
    let init = cfg.initial_scene();
    let mut t = Trainer::new(&f, init.clone(), cfg).unwrap();
    t.run(|_| Ok(())).unwrap();
    // pruning may drop primitives; survivors keep their logit
    for p in &t.scene().primitives {
        let src = init.primitives.iter().find(|q| q.dyn_logit == p.dyn_logit);
        assert!(src.is_some(), "dyn_logit changed to {}", p.dyn_logit);
    }
    assert!(t.scene().primitives.iter().all(|p| p.dyn_logit == 0.0));
}

#[test]
fn loss_breakdown_identity_holds_every_step() {
    let f = frames(5);
    let mut t = Trainer::new(&f, small_config(20).initial_scene(), small_config(20)).unwrap();
    t.run(|e| {
        assert!((e.total - (e.l_recon + e.lambda_bi * e.l_bi + e.l_asg)).abs() <= 1e-7);
        assert_eq!(e.lambda_bi, sddgs::losses::lambda_bi(e.step, 1e-4));
        Ok(())
    })
    .unwrap();
}

#[test]
fn divergence_aborts_with_the_step_and_term() {
    let f = frames(6);
    let mut cfg = small_config(50);
    cfg.lr.color = 1e308;
    let mut t = Trainer::new(&f, cfg.initial_scene(), cfg).unwrap();
    match t.run(|_| Ok(())) {
        Err(Error::NonFinite { step, term }) => {
            assert!(step >= 1);
            assert!(!term.is_empty());
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let f = frames(2);
    let t = Trainer::new(&f, small_config(1).initial_scene(), small_config(1)).unwrap();
    let bytes = t.checkpoint().to_bytes();
    let p = Path::new("x.ckpt");
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], p), Err(Error::Parse { .. })));
    assert!(matches!(Checkpoint::from_bytes(b"SDDCKPTv2\n", p), Err(Error::Parse { .. })));
    let mut bad = bytes.clone();
    bad[20] = b'#';
    assert!(Checkpoint::from_bytes(&bad, p).is_err());
}

#[test]
fn dataset_generation_is_deterministic_and_round_trips() {
    let spec = small_spec(7);
    let a = generate(&spec).unwrap();
    let b = generate(&spec).unwrap();
    assert_eq!(a.truth, b.truth);
    for (x, y) in a.frames.iter().zip(&b.frames) {
        assert_eq!(x.image.data, y.image.data);
        assert_eq!(x.gt_mask, y.gt_mask);
    }
    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset::from_scene(&spec, a);
    ds.save(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.truth, ds.truth);
    assert_eq!(back.labels, ds.labels);
    assert_eq!(back.times, ds.times);
    assert_eq!(back.cameras, ds.cameras);
    for (x, y) in back.frames.iter().zip(&ds.frames) {
        assert_eq!(x.gt_mask, y.gt_mask);
        for (p, q) in x.image.data.iter().zip(&y.image.data) {
            assert!((p - q).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}

#[test]
fn gt_mask_is_the_support_of_the_dynamic_truth_render() {
    let spec = small_spec(8);
    let scene = generate(&spec).unwrap();
    let part = partition(&scene.truth, PartitionMode::Training, 0.5, 0.5).unwrap();
    let settings = RenderSettings {
        background: spec.background,
        ..Default::default()
    };
    let flags = part.dynamic_flags(scene.truth.len());
    let labelled: Vec<bool> = scene.labels.iter().map(|&l| l == 1).collect();
    assert_eq!(flags, labelled);
    for f in &scene.frames {
        let (d, _) = render_split(&scene.truth, &f.camera, f.t, &part, &settings).unwrap();
        assert_eq!(f.gt_mask.as_ref().unwrap(), &support_mask(&d.image, spec.background));
    }
}

#[test]
fn static_scene_frames_repeat_per_camera() {
    let spec = SyntheticSpec {
        n_dynamic: 0,
        ..small_spec(9)
    };
    let scene = generate(&spec).unwrap();
    for c in 0..spec.n_cameras {
        let first = &scene.frames[c * spec.n_frames];
        for k in 1..spec.n_frames {
            let f = &scene.frames[c * spec.n_frames + k];
            assert_eq!(f.image.data, first.image.data);
            assert_eq!(f.gt_mask.as_ref().unwrap().count_ones(), 0);
        }
    }
}

#[test]
fn psnr_is_symmetric_and_region_psnr_brackets_the_full_image() {
    let scene = generate(&small_spec(10)).unwrap();
    let a = &scene.frames[0];
    let b = &scene.frames[3];
    assert_eq!(psnr(&a.image, &b.image).unwrap(), psnr(&b.image, &a.image).unwrap());
    let r = region_psnr(&a.image, &b.image, b.gt_mask.as_ref().unwrap()).unwrap();
    let (lo, hi) = (r.static_db.min(r.dynamic_db), r.static_db.max(r.dynamic_db));
    assert!(lo - 1e-9 <= r.full_db && r.full_db <= hi + 1e-9, "{r:?}");
}
