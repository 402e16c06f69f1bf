//! Adapter sensitivity and modality ablation on the glyph probe set.
//! Pass a seed count as the first argument (default 1).

use std::path::Path;

use detachlab::recon::{
    adapter_sensitivity, modality_ablation, prepare, probe_splits, spearman, train_probe,
    write_reconstruction, AdapterKind, ProbeConfig,
};

fn main() -> detachlab::Result<()> {
    let seeds: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1);
    let cfg = ProbeConfig::default();
    let (train, eval) = probe_splits(&cfg)?;
    let widths = [1, 4, 16];
    let mut adapters = vec![AdapterKind::Identity];
    adapters.extend(widths.iter().map(|&w| AdapterKind::bottleneck(w)));
    for seed in 0..seeds {
        let rep = adapter_sensitivity(&train, &eval, &adapters, &cfg, seed)?;
        for (a, r) in rep.adapters.iter().zip(&rep.runs) {
            println!(
                "seed {seed} {:<14} final {:.4} steps {:?}",
                a.label(),
                r.final_loss,
                r.steps_to_threshold
            );
        }
        let losses: Vec<f64> = rep.runs[1..].iter().map(|r| r.final_loss).collect();
        let ws: Vec<f64> = widths.iter().map(|&w| w as f64).collect();
        println!(
            "seed {seed} width/loss spearman {:.3}",
            spearman(&ws, &losses)?
        );
        for row in modality_ablation(&train, &eval, &cfg, seed)? {
            println!(
                "seed {seed} masked={} no_text={} final {:.4}",
                row.mask_image, row.drop_text, row.run.final_loss
            );
        }
    }

    let tr = prepare(&train, &cfg, true, false)?;
    let ev = prepare(&eval, &cfg, true, false)?;
    let (_, probe) = train_probe(&cfg, AdapterKind::Identity, &tr, &ev, 0, "masked")?;
    let dir = Path::new("runs/examples");
    write_reconstruction(&probe, &ev[0], dir, "masked0")?;
    println!("reconstruction -> {}", dir.display());
    Ok(())
}
