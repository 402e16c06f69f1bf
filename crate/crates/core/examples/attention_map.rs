//! Build a fusion model, report its tap partition, and export the class
//! token's attention over patches as a PGM heat map.

use std::path::Path;

use detachlab::autograd::Rng;
use detachlab::fusion::{select_skip_layers, DenseInput, FusionConfig, FusionModel};
use detachlab::glyph::{downstream_task_batch, DatasetSpec};

fn main() -> detachlab::Result<()> {
    let cfg = FusionConfig {
        total_blocks: 8,
        stride: 2,
        detach_count: 2,
        ..FusionConfig::default()
    };
    let (detached, live) = select_skip_layers(&cfg)?;
    println!(
        "taps {:?}: detached {detached:?}, live {live:?}",
        cfg.tap_layers()
    );

    let model = FusionModel::new(cfg.clone(), &mut Rng::seed_from(0))?;
    println!("initial tap gains {:?}", model.tap_gains());
    let batch = downstream_task_batch(&DatasetSpec::default(), 0, 1)?;
    let input = DenseInput::from_batch(&batch, cfg.patch_size)?;

    let dir = Path::new("runs/examples");
    batch.images[0].write_pgm(&dir.join("attention_input.pgm"))?;
    for layer in [1, cfg.total_blocks] {
        let map = model.attention_map(layer, &input.patches)?;
        let path = dir.join(format!("attention_block{layer}.pgm"));
        map.write_pgm(&path, 8)?;
        println!(
            "block {layer}: peak cell {:?} -> {}",
            argmax(&map.grid),
            path.display()
        );
    }
    Ok(())
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len())
        .max_by(|&a, &b| v[a].total_cmp(&v[b]))
        .unwrap_or(0)
}
