use detachlab::autograd::Rng;
use detachlab::autograd::Tensor;
use detachlab::glyph::{downstream_task_batch, probe_dataset, DatasetSpec, GlyphImage};
use detachlab::recon::{
    build_sequence, prepare, probe_splits, rotary_angles, train_probe, AdapterKind, Coord, Probe,
    ProbeConfig,
};
use proptest::prelude::*;

fn matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let n = a.rows();
    (0..n * n)
        .map(|i| {
            (0..n)
                .map(|k| a.data()[(i / n) * n + k] * b.data()[k * n + i % n])
                .sum()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Reordering and resizing the segments never changes a token's phase.
    #[test]
    fn phase_follows_grid_coordinate(
        context in prop::collection::vec((0usize..4, 0usize..4), 0..16),
        target in prop::collection::vec((0usize..4, 0usize..4), 1..8),
        text_len in 0usize..8,
    ) {
        let head_dim = 8;
        let layout = build_sequence(&context, text_len, &target, head_dim).unwrap();
        prop_assert_eq!(layout.len(), context.len() + text_len + target.len());
        let (text_start, target_start) = layout.boundaries();
        let row = |i: usize| layout.angles.row(i).to_vec();
        for (i, &c) in context.iter().enumerate() {
            prop_assert_eq!(row(i), rotary_angles(Some(c), head_dim));
        }
        for i in text_start..target_start {
            prop_assert!(row(i).iter().all(|&a| a == 0.0));
        }
        for (j, &c) in target.iter().enumerate() {
            prop_assert_eq!(row(target_start + j), rotary_angles(Some(c), head_dim));
        }
        let mut shuffled: Vec<Coord> = context.clone();
        shuffled.reverse();
        let other = build_sequence(&shuffled, text_len + 1, &target, head_dim).unwrap();
        let (_, t2) = other.boundaries();
        for j in 0..target.len() {
            prop_assert_eq!(other.angles.row(t2 + j), layout.angles.row(target_start + j));
        }
    }

    #[test]
    fn bottlenecks_nest(small in 1usize..8, extra in 0usize..8) {
        let dim = 16;
        let p = AdapterKind::bottleneck(small).matrix(dim).unwrap();
        let q = AdapterKind::bottleneck(small + extra).matrix(dim).unwrap();
        for (a, b) in matmul(&p, &q).iter().zip(p.data()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn noisy_pixels_stay_in_range(seed: u64, amp in 0.0f64..2.0) {
        let mut img = GlyphImage::blank(8, 8);
        img.pixels.iter_mut().enumerate().for_each(|(i, p)| *p = (i % 3) as f64 / 2.0);
        img.add_noise(amp, &mut Rng::seed_from(seed));
        prop_assert!(img.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
    }
}

#[test]
fn empty_target_rejected() {
    assert!(build_sequence(&[(0, 0)], 2, &[], 8).is_err());
}

#[test]
fn frozen_backbone_is_untouched_by_training() {
    let cfg = ProbeConfig {
        max_steps: 5,
        train_count: 16,
        eval_count: 4,
        ..ProbeConfig::default()
    };
    let (train, eval) = probe_splits(&cfg).unwrap();
    let (tr, ev) = (
        prepare(&train, &cfg, true, false).unwrap(),
        prepare(&eval, &cfg, true, false).unwrap(),
    );
    let kind = AdapterKind::bottleneck(4);
    let before = Probe::new(&cfg, kind.clone(), 0).unwrap().frozen_checksum();
    let (run, probe) = train_probe(&cfg, kind, &tr, &ev, 0, "t").unwrap();
    assert_eq!(probe.frozen_checksum(), before);
    assert_eq!(run.losses.len(), 5);
    assert!(run.final_loss.is_finite());
}

#[test]
fn datasets_are_reproducible() {
    let spec = DatasetSpec {
        count: 8,
        ..DatasetSpec::default()
    };
    assert_eq!(probe_dataset(&spec).unwrap(), probe_dataset(&spec).unwrap());
    assert_eq!(
        downstream_task_batch(&spec, 5, 4).unwrap(),
        downstream_task_batch(&spec, 5, 4).unwrap()
    );
    assert_ne!(
        downstream_task_batch(&spec, 5, 4).unwrap(),
        downstream_task_batch(&spec, 6, 4).unwrap()
    );
}
