use detachlab::autograd::{Rng, Tape};
use detachlab::fusion::{DenseInput, Detach, FusionConfig, FusionModel, LinearChainModel};
use detachlab::glyph::{downstream_task_batch, DatasetSpec};
use detachlab::nn::flatten_grads;
use detachlab::pathwise::{decompose, ParamGroup};
use proptest::prelude::*;

fn small(total_blocks: usize, stride: usize) -> FusionConfig {
    FusionConfig {
        total_blocks,
        stride,
        hidden_dim: 8,
        adapter_hidden: 8,
        skip_scale: 2.0,
        ..FusionConfig::default()
    }
}

fn batch_of(cfg: &FusionConfig, seed: u64, n: usize) -> DenseInput {
    let spec = DatasetSpec {
        seed,
        ..DatasetSpec::default()
    };
    DenseInput::from_batch(&downstream_task_batch(&spec, 0, n).unwrap(), cfg.patch_size).unwrap()
}

fn input(cfg: &FusionConfig, seed: u64) -> DenseInput {
    batch_of(cfg, seed, 2)
}

fn encoder_grads(model: &FusionModel, inp: &DenseInput, detach: Detach) -> Vec<f64> {
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape, |_| true).unwrap();
    let out = model
        .dense_loss(&mut tape, &p, inp, &mut Rng::seed_from(0), detach)
        .unwrap();
    let g = p.grads(&tape.backward(out.loss).unwrap());
    flatten_grads(&g, &model.store, &model.encoder_params())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn output_is_invariant_under_detach(k in 1usize..5, s in 1usize..4, seed in 0u64..1000) {
        prop_assume!(s <= k);
        let cfg = small(k, s);
        let model = FusionModel::new(cfg.clone(), &mut Rng::seed_from(seed)).unwrap();
        let inp = input(&cfg, seed);
        let loss = |d: usize| {
            let mut tape = Tape::new();
            let p = model.store.bind(&mut tape, |_| true).unwrap();
            let out = model.dense_loss(&mut tape, &p, &inp, &mut Rng::seed_from(1), Detach::Count(d)).unwrap();
            tape.value(out.loss).item().to_bits()
        };
        let base = loss(0);
        for d in 1..=cfg.tap_layers().len() {
            prop_assert_eq!(loss(d), base);
        }
    }

    #[test]
    fn full_gradient_is_main_plus_skip(k in 2usize..5, seed in 0u64..1000) {
        let cfg = small(k, 1);
        let model = FusionModel::new(cfg.clone(), &mut Rng::seed_from(seed)).unwrap();
        let inp = input(&cfg, seed);
        let attached = encoder_grads(&model, &inp, Detach::Count(0));
        let detached = encoder_grads(&model, &inp, Detach::All);
        let group = ParamGroup { name: "encoder".into(), ids: model.encoder_params() };
        let dec = decompose(&model, &inp, &group, &mut Rng::seed_from(0), |_| true, 0).unwrap();
        let scale = attached.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
        for ((full, main), skip) in attached.iter().zip(&detached).zip(&dec.snapshot.skip) {
            prop_assert!((full - (main + skip)).abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn attention_scores_in_unit_range(seed in 0u64..1000, layer in 1usize..4) {
        let cfg = small(3, 1);
        let model = FusionModel::new(cfg.clone(), &mut Rng::seed_from(seed)).unwrap();
        let m = model.attention_map(layer, &batch_of(&cfg, seed, 1).patches).unwrap();
        prop_assert!(m.grid.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn reach_shrinks_with_detach(weights in prop::collection::vec(0.2f64..2.0, 4..9), stride in 1usize..3) {
        let taps = weights.len() / stride;
        let gains: Vec<f64> = (0..taps).map(|i| 0.5 + i as f64).collect();
        // No main path, so reach comes only through live taps.
        let chain = LinearChainModel::new(&weights, stride, 0.0, &gains).unwrap();
        let reach = |d: usize| -> Vec<bool> {
            let mut tape = Tape::new();
            let p = chain.store.bind(&mut tape, |_| true).unwrap();
            let out = chain.forward(&mut tape, &p, 1.3, Detach::Count(d)).unwrap();
            let g = p.grads(&tape.backward(out.loss).unwrap());
            flatten_grads(&g, &chain.store, chain.weight_ids()).iter().map(|v| *v != 0.0).collect()
        };
        let mut prev = reach(0);
        for d in 1..=taps {
            let cur = reach(d);
            for (p, c) in prev.iter().zip(&cur) {
                prop_assert!(*p || !*c, "a detached tap opened a path");
            }
            prev = cur;
        }
    }
}

#[test]
fn gains_train_when_every_tap_is_detached() {
    let cfg = small(4, 2);
    let model = FusionModel::new(cfg.clone(), &mut Rng::seed_from(3)).unwrap();
    let inp = input(&cfg, 3);
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape, |_| true).unwrap();
    let out = model
        .dense_loss(&mut tape, &p, &inp, &mut Rng::seed_from(0), Detach::All)
        .unwrap();
    let g = p.grads(&tape.backward(out.loss).unwrap());
    let gains = model.store.with_prefix("adapter.gain");
    assert_eq!(gains.len(), 2);
    for v in flatten_grads(&g, &model.store, &gains) {
        assert!(v != 0.0);
    }
    assert_eq!(model.tap_gains(), vec![2.0, 2.0]);
}

#[test]
fn too_many_detached_layers_rejected() {
    let cfg = FusionConfig {
        detach_count: 5,
        ..small(4, 1)
    };
    assert!(FusionModel::new(cfg, &mut Rng::seed_from(0)).is_err());
}
