//! Finite-difference check of a two-layer MLP loss, and what stop-gradient
//! does to it.

use detachlab::autograd::{gradcheck, Rng, Tape, Tensor, Var};

fn mlp(t: &mut Tape, x: Var, w1: &Tensor, w2: &Tensor, target: &Tensor) -> detachlab::Result<Var> {
    let w1 = t.constant(w1.clone())?;
    let w2 = t.constant(w2.clone())?;
    let h = t.matmul(x, w1)?;
    let h = t.gelu(h)?;
    let y = t.matmul(h, w2)?;
    t.mse_loss(y, target)
}

fn main() -> detachlab::Result<()> {
    let mut rng = Rng::seed_from(0);
    let x = Tensor::randn([4, 6], 1.0, &mut rng);
    let w1 = Tensor::randn([6, 8], 0.5, &mut rng);
    let w2 = Tensor::randn([8, 3], 0.5, &mut rng);
    let target = Tensor::randn([4, 3], 1.0, &mut rng);

    let err = gradcheck(|t, v| mlp(t, v, &w1, &w2, &target), &x, 1e-5)?;
    println!("mlp loss: max relative error {err:.2e}");

    // Adding a detached copy of the input leaves the analytic gradient alone
    // while the finite differences still see it.
    let err = gradcheck(
        |t, v| {
            let base = mlp(t, v, &w1, &w2, &target)?;
            let cut = t.stop_gradient(v)?;
            let extra = t.mean(cut)?;
            t.add(base, extra)
        },
        &x,
        1e-5,
    )?;
    println!("with a detached term: max relative error {err:.2e} (expected to be large)");
    Ok(())
}
