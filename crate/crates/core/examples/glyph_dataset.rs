//! Dump a few probe images and a dense-task batch.

use std::path::Path;

use detachlab::glyph::{
    detokenize, downstream_task_batch, dump_dataset, probe_sample, DatasetSpec,
};

fn main() -> detachlab::Result<()> {
    let spec = DatasetSpec {
        count: 6,
        ..DatasetSpec::default()
    };
    let dir = Path::new("runs/examples/glyphs");
    dump_dataset(&spec, dir)?;
    for i in 0..3 {
        let s = probe_sample(&spec, i)?;
        println!(
            "sample {i}: text {:?}, target {:?}",
            detokenize(&s.text)?,
            s.target_rect
        );
    }
    let batch = downstream_task_batch(&spec, 0, 2)?;
    for (i, labels) in batch.labels.iter().enumerate() {
        println!("dense image {i}: cell labels {labels:?}");
    }
    println!("images -> {}", dir.display());
    Ok(())
}
