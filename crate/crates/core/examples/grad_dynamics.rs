//! Track main and skip gradients of the first tapped block during training
//! and draw the four-panel dynamics figure.

use std::path::Path;

use detachlab::emit;
use detachlab::runlab::{dynamics_svg, run_grad_dynamics, ExperimentSpec};

fn main() -> detachlab::Result<()> {
    let spec = ExperimentSpec {
        suite: "dynamics".into(),
        steps: 200,
        ..ExperimentSpec::default()
    };
    let run = run_grad_dynamics(&spec, 0)?;
    let ratios = run.ratios();
    println!(
        "probed from step {}, {} snapshots",
        run.probe_start,
        ratios.len()
    );
    println!(
        "first ratio {:.3}, last ratio {:.3}",
        ratios[0],
        ratios[ratios.len() - 1]
    );
    match run.t_trans_step() {
        Some(t) => println!("skip share drops below main at step {t}"),
        None => println!("no transition within the horizon"),
    }
    if let Some(a) = &run.early {
        println!(
            "early window: c_hat {:?}, rho_hat {:?}, delta {:.3}",
            a.c_hat, a.rho_hat, a.delta_hat
        );
    }
    let path = Path::new("runs/examples/dynamics.svg");
    emit::write_bytes(
        path,
        dynamics_svg(&run, spec.dynamics.smoothing)?.as_bytes(),
    )?;
    println!("figure -> {}", path.display());
    Ok(())
}
