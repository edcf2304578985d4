mod common;

use common::*;
use proptest::prelude::*;
use rand::RngExt;

use sddgs::decouple::{partition, render_split, PartitionMode};
use sddgs::render::{render_subset, RenderSettings};

fn settings() -> RenderSettings {
    RenderSettings::default()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn blend_weights_and_transmittance_sum_to_one(seed in any::<u64>(), n in 1usize..12, az in -1.0f64..1.0, t in 0.0f64..1.0) {
        let mut r = rng(seed);
        let set = random_scene(&mut r, n, 2);
        let cam = camera(24, 20, 30.0, az);
        let out = render_subset(&set, &cam, t, None, &settings());
        prop_assert!((0..24 * 20).any(|p| out.weight_sum(p) > 0.1), "scene not visible");
        for p in 0..24 * 20 {
            let total = out.weight_sum(p) + out.final_transmittance[p];
            prop_assert!((total - 1.0).abs() <= 1e-5, "pixel {p}: {total}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn subset_render_equals_filtered_copy(seed in any::<u64>(), n in 1usize..10) {
        let mut r = rng(seed);
        let set = random_scene(&mut r, n, 2);
        let keep: Vec<bool> = (0..n).map(|_| r.random::<bool>()).collect();
        let cam = camera(20, 20, 30.0, 0.3);
        let a = render_subset(&set, &cam, 0.6, Some(&keep), &settings());
        let b = render_subset(&set.filtered(&keep), &cam, 0.6, None, &settings());
        prop_assert_eq!(&a.image.data, &b.image.data);
        prop_assert_eq!(&a.final_transmittance, &b.final_transmittance);
    }

    #[test]
    fn render_split_equals_filtered_copies(seed in any::<u64>(), n in 1usize..10, tau_s in 0.0f64..0.5, gap in 0.0f64..0.5) {
        let mut r = rng(seed);
        let set = random_scene(&mut r, n, 2);
        let cam = camera(20, 20, 30.0, -0.2);
        let part = partition(&set, PartitionMode::Inference, tau_s + gap, tau_s).unwrap();
        let (d, s) = render_split(&set, &cam, 0.4, &part, &settings()).unwrap();
        let dd = render_subset(&set.filtered(&part.dynamic_flags(n)), &cam, 0.4, None, &settings());
        let ss = render_subset(&set.filtered(&part.static_flags(n)), &cam, 0.4, None, &settings());
        prop_assert_eq!(&d.image.data, &dd.image.data);
        prop_assert_eq!(&s.image.data, &ss.image.data);
    }

    #[test]
    fn rendering_is_linear_in_color(seed in any::<u64>(), k in 0.1f64..1.0) {
        let mut r = rng(seed);
        let set = random_scene(&mut r, 6, 2);
        let mut scaled = set.clone();
        scaled.primitives.iter_mut().for_each(|p| p.color.iter_mut().for_each(|c| *c *= k));
        let cam = camera(16, 16, 24.0, 0.0);
        let a = render_subset(&set, &cam, 0.5, None, &settings());
        let b = render_subset(&scaled, &cam, 0.5, None, &settings());
        for (x, y) in a.image.data.iter().zip(&b.image.data) {
            prop_assert!((x * k - y).abs() <= 1e-12, "{x} * {k} != {y}");
        }
    }
}

#[test]
fn partitions_are_disjoint_and_exhaustive() {
    let mut r = rng(9);
    let set = random_scene(&mut r, 40, 2);
    for (td, ts) in [(0.85, 0.2), (0.5, 0.5), (1.0, 0.0), (0.6, 0.1)] {
        let p = partition(&set, PartitionMode::Inference, td, ts).unwrap();
        let mut all: Vec<usize> = p
            .dynamic_indices
            .iter()
            .chain(&p.static_indices)
            .chain(&p.unassigned_indices)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..40).collect::<Vec<_>>());
    }
}

#[test]
fn partition_is_monotone_in_thresholds() {
    let mut r = rng(10);
    let set = random_scene(&mut r, 60, 2);
    let mut prev_dyn = usize::MAX;
    for td in [0.3, 0.5, 0.7, 0.9] {
        let p = partition(&set, PartitionMode::Inference, td, 0.2).unwrap();
        assert!(p.dynamic_indices.len() <= prev_dyn);
        prev_dyn = p.dynamic_indices.len();
    }
    let mut prev_static = usize::MAX;
    for ts in [0.45, 0.3, 0.2, 0.05] {
        let p = partition(&set, PartitionMode::Inference, 0.5, ts).unwrap();
        assert!(p.static_indices.len() <= prev_static);
        prev_static = p.static_indices.len();
    }
}

#[test]
fn partition_is_invariant_under_monotone_reparameterization() {
    let mut r = rng(12);
    let set = random_scene(&mut r, 50, 2);
    let a = partition(&set, PartitionMode::Inference, 0.85, 0.2).unwrap();
    // w -> w^2 applied to coefficients and thresholds alike
    let mut squared = set.clone();
    for p in &mut squared.primitives {
        let w = p.dyn_coeff() * p.dyn_coeff();
        p.dyn_logit = sddgs::math::logit(w);
    }
    let b = partition(&squared, PartitionMode::Inference, 0.85 * 0.85, 0.2 * 0.2).unwrap();
    assert_eq!(a.dynamic_indices, b.dynamic_indices);
    assert_eq!(a.static_indices, b.static_indices);
}

#[test]
fn render_is_identical_across_thread_counts() {
    let mut r = rng(4);
    let set = random_scene(&mut r, 30, 2);
    let cam = camera(64, 48, 80.0, 0.2);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| render_subset(&set, &cam, 0.7, None, &settings()))
    };
    let one = run(1);
    let four = run(4);
    assert_eq!(one.image.data, four.image.data);
    assert_eq!(one.final_transmittance, four.final_transmittance);
    let g1 = sddgs::render::render_backward(&set, &one, &one.image).unwrap();
    let g4 = sddgs::render::render_backward(&set, &four, &four.image).unwrap();
    assert_eq!(g1, g4);
}
