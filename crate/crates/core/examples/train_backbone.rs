//! Trains the dual-branch backbone on synthetic windows and prints the
//! loss/validation curve.
//!
//! Run with: `cargo run --release --example train_backbone`

use tickertalk::backbone::{Backbone, BackboneConfig, BackboneExample, EmbeddingMatrix};
use tickertalk::market::{make_windows, split_chronological, synth_market, Regime};

fn main() -> tickertalk::Result<()> {
    let seed = 13;
    let bars = synth_market(seed, 240, &Regime::default())?;
    let windows = make_windows("SYN0", &bars, 10, 10, 1)?;
    let split = split_chronological(windows.pairs, 0.7, 0.15)?;
    let train: Vec<BackboneExample> = split.train.iter().map(BackboneExample::from_pair).collect();
    let validation: Vec<BackboneExample> =
        split.validation.iter().map(BackboneExample::from_pair).collect();

    let cfg = BackboneConfig {
        d_model: 16,
        heads: 2,
        n_blocks: 2,
        pca_k: 4,
        hidden: 16,
        vocab_rows: 32,
        seed,
        ..BackboneConfig::default()
    };
    let embedding = EmbeddingMatrix::synth(seed, cfg.vocab_rows, cfg.d_model);
    let mut backbone = Backbone::new(cfg, &embedding)?;
    println!("parameters: {}", backbone.params.param_count());

    let untrained = backbone.validation_mse(&validation)?;
    let curves = backbone.train(&train, &validation, 20, 0.02)?;
    for c in curves.iter().step_by(4) {
        println!(
            "epoch {:>3}: train loss {:.5}, validation MSE {:.5}",
            c.epoch, c.train_loss, c.val_mse
        );
    }
    println!(
        "validation MSE: untrained {:.5} -> trained {:.5}",
        untrained,
        curves.last().unwrap().val_mse
    );
    Ok(())
}
