//! Transition step and median alignment across three learning rates.

use detachlab::emit;
use detachlab::runlab::{lr_csv, run_lr_sweep, t_trans_non_increasing, ExperimentSpec};

fn main() -> detachlab::Result<()> {
    let spec = ExperimentSpec {
        suite: "lrsweep".into(),
        steps: 150,
        seeds: vec![0],
        ..ExperimentSpec::default()
    };
    let rows = run_lr_sweep(&spec, &[3e-4, 1e-3, 3e-3])?;
    let (header, body) = lr_csv(&rows);
    print!("{}", emit::csv_string(&header, &body));
    println!("non-increasing in lr: {}", t_trans_non_increasing(&rows));
    Ok(())
}
