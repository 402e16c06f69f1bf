//! Plot two training curves side by side from their metric streams.

use std::path::Path;

use detachlab::emit::{self, Panel, PlotSpec, Series};
use detachlab::fusion::FusionConfig;
use detachlab::runlab::{run_training, ExperimentSpec};

fn main() -> detachlab::Result<()> {
    let mut series = Vec::new();
    for detach in [0, 4] {
        let spec = ExperimentSpec {
            steps: 120,
            fusion: FusionConfig {
                detach_count: detach,
                ..FusionConfig::default()
            },
            ..ExperimentSpec::default()
        };
        let run = run_training(&spec, 0)?;
        let pts = run
            .losses()
            .iter()
            .enumerate()
            .map(|(i, &l)| (i as f64, l))
            .collect();
        series.push(Series::line(format!("D={detach}"), pts));
    }
    let panel = Panel {
        title: "training loss".into(),
        x_label: "step".into(),
        y_label: "loss".into(),
        series,
    };
    let svg = emit::emit_svg_plot(
        &[panel],
        &PlotSpec {
            columns: 1,
            ..PlotSpec::default()
        },
    )?;
    let path = Path::new("runs/examples/loss.svg");
    emit::write_bytes(path, svg.as_bytes())?;
    println!("plot -> {}", path.display());
    Ok(())
}
