//! Run every analytic check at full size and print one line per report.

use detachlab::theory::{theory_suite, TheoryConfig};

fn main() -> detachlab::Result<()> {
    let reports = theory_suite(&TheoryConfig::default())?;
    for r in &reports {
        println!(
            "{:<34} pass={:<5} target={:>12.6} estimate={:>12.6} stderr={:.2e}",
            r.check, r.pass, r.target, r.estimate, r.stderr
        );
    }
    let failed = reports.iter().filter(|r| !r.pass).count();
    println!("{} reports, {failed} failed", reports.len());
    Ok(())
}
