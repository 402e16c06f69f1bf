//! Stride × detach-count grid on a short horizon, written as CSV and a
//! bubble chart.

use std::path::Path;

use detachlab::emit;
use detachlab::runlab::{grid_csv, grid_svg, run_ablation_grid, ExperimentSpec};

fn main() -> detachlab::Result<()> {
    let spec = ExperimentSpec {
        suite: "ablate".into(),
        steps: 60,
        seeds: vec![0, 1],
        ..ExperimentSpec::default()
    };
    let report = run_ablation_grid(&spec, &[1, 2, 4], &[0, 1, 2])?;
    for s in &report.skipped {
        println!("skipped S={} D={}: {}", s.stride, s.detach, s.reason);
    }
    let (header, rows) = grid_csv(&report);
    print!("{}", emit::csv_string(&header, &rows));
    let dir = Path::new("runs/examples");
    emit::write_csv(&dir.join("grid.csv"), &header, &rows)?;
    emit::write_bytes(&dir.join("grid.svg"), grid_svg(&report)?.as_bytes())?;
    Ok(())
}
