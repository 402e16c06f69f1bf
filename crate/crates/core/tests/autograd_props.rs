mod common;

use common::*;
use detachlab::autograd::{gradcheck, Rng, Tape, Tensor};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn op_gradients_match_finite_differences(seed in 100u64..1_000_000) {
        for (name, x, f) in op_instances(seed) {
            let err = gradcheck(&f, &x, FD_STEP).unwrap();
            prop_assert!(err < GRAD_TOL, "{name} seed {seed}: {err:e}");
        }
    }

    #[test]
    fn detached_edge_is_exactly_zero(seed in 100u64..1_000_000) {
        let g = DetachGraph::random(seed);
        let mut t = Tape::new();
        let x = t.param(g.x.clone()).unwrap();
        let (loss, branch, cut) = g.build(&mut t, x, true).unwrap();
        prop_assert_eq!(t.value(cut), t.value(branch));
        let grads = t.backward(loss).unwrap();
        prop_assert!(grads.wrt(branch).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rng_restore_replays_bitwise(seed: u64, skip in 0usize..50, n in 1usize..64) {
        let mut rng = Rng::seed_from(seed);
        for _ in 0..skip {
            rng.uniform();
        }
        let state = rng.save();
        let a: Vec<u64> = (0..n).map(|_| rng.normal().to_bits()).collect();
        rng.restore(&state).unwrap();
        let b: Vec<u64> = (0..n).map(|_| rng.normal().to_bits()).collect();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn frozen_branch_function_passes_gradcheck() {
    let g = DetachGraph::random(1);
    let full = gradcheck(|t, v| Ok(g.build(t, v, true)?.0), &g.x, FD_STEP).unwrap();
    assert!(
        full > 1e-3,
        "finite differences see the detached branch: {full}"
    );
    let live = gradcheck(|t, v| g.live_only(t, v), &g.x, FD_STEP).unwrap();
    assert!(live < GRAD_TOL, "{live}");
}

#[test]
fn shared_subexpression_accumulates() {
    let x = Tensor::randn([3, 4], 1.0, &mut Rng::seed_from(9));
    let err = gradcheck(
        |t, v| {
            let h = t.layer_norm(v)?;
            let sq = t.mul(h, h)?;
            let g = t.gelu(h)?;
            let y = t.add(sq, g)?;
            weighted_sum(t, y, 9)
        },
        &x,
        FD_STEP,
    )
    .unwrap();
    assert!(err < GRAD_TOL, "{err}");
}

#[test]
fn matmul_sum_example() {
    let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = Tensor::identity(2);
    let f = |t: &mut Tape, v| {
        let b = t.constant(b.clone())?;
        let y = t.matmul(v, b)?;
        t.sum(y)
    };
    assert!(gradcheck(f, &a, 1e-5).unwrap() < 1e-6);
    let mut t = Tape::new();
    let v = t.param(a.clone()).unwrap();
    let loss = f(&mut t, v).unwrap();
    assert_eq!(t.backward(loss).unwrap().wrt(v).data(), &[1.0; 4]);
}

#[test]
fn dropout_masks_replay_after_restore() {
    let x = Tensor::full([4, 5], 1.0);
    let mut rng = Rng::seed_from(4);
    let state = rng.save();
    let mut t = Tape::new();
    let v = t.constant(x).unwrap();
    let a = t.dropout(v, 0.4, &mut rng).unwrap();
    rng.restore(&state).unwrap();
    let b = t.dropout(v, 0.4, &mut rng).unwrap();
    assert_eq!(t.value(a), t.value(b));
    assert!(t.dropout(v, 1.0, &mut rng).is_err());
}
