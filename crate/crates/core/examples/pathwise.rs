//! Split one gradient into its main-path and skip-path parts.

use detachlab::autograd::Rng;
use detachlab::fusion::{DenseInput, FusionConfig, FusionModel};
use detachlab::glyph::{downstream_task_batch, DatasetSpec};
use detachlab::pathwise::{decompose, norm_sq, ParamGroup};

fn main() -> detachlab::Result<()> {
    let cfg = FusionConfig::default();
    let model = FusionModel::new(cfg.clone(), &mut Rng::seed_from(1))?;
    let batch = downstream_task_batch(&DatasetSpec::default(), 0, 8)?;
    let input = DenseInput::from_batch(&batch, cfg.patch_size)?;
    for layer in cfg.tap_layers() {
        let group = ParamGroup::by_prefix(&model.store, &format!("encoder.block{layer}."))?;
        let d = decompose(&model, &input, &group, &mut Rng::seed_from(0), |_| true, 0)?;
        let s = &d.snapshot;
        println!(
            "block {layer}: |g_main| {:.3e}  |g_skip| {:.3e}  ratio {:.3}",
            norm_sq(&s.main).sqrt(),
            norm_sq(&s.skip).sqrt(),
            s.ratio()
        );
    }
    Ok(())
}
