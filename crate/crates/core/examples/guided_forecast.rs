//! Blends the backbone forecast with a reasoner-conditioned head via
//! classifier-free guidance and prints all three paths.
//!
//! Run with: `cargo run --release --example guided_forecast`

use tickertalk::backbone::{Backbone, BackboneConfig, BackboneExample, EmbeddingMatrix};
use tickertalk::guidance::{
    extract_attributes, guided_forecast, train_joint, ConditionalHead, GuidanceConfig,
    JointExample,
};
use tickertalk::market::{make_windows, split_chronological, synth_market, Regime};

fn main() -> tickertalk::Result<()> {
    let seed = 17;
    let bars = synth_market(seed, 220, &Regime::default())?;
    let windows = make_windows("SYN0", &bars, 10, 10, 1)?;
    let split = split_chronological(windows.pairs, 0.7, 0.15)?;

    let cfg = BackboneConfig {
        d_model: 16,
        heads: 2,
        n_blocks: 1,
        pca_k: 4,
        hidden: 16,
        vocab_rows: 32,
        seed,
        ..BackboneConfig::default()
    };
    let embedding = EmbeddingMatrix::synth(seed, cfg.vocab_rows, cfg.d_model);
    let mut backbone = Backbone::new(cfg, &embedding)?;
    let train: Vec<BackboneExample> = split.train.iter().map(BackboneExample::from_pair).collect();
    backbone.train(&train, &[], 10, 0.02)?;

    // condition each window on (oracle) attributes of its own target, as a
    // stand-in for reasoner output
    let joint: Vec<JointExample> = split
        .train
        .iter()
        .map(|pair| {
            let example = BackboneExample::from_pair(pair);
            let condition = extract_attributes(Some(&example.target_norm));
            JointExample { example, condition }
        })
        .collect();
    let mut head = ConditionalHead::new(10, seed);
    let gcfg = GuidanceConfig {
        epochs: 20,
        seed,
        ..GuidanceConfig::default()
    };
    train_joint(&backbone, &mut head, &joint, &joint, &gcfg)?;

    let probe = BackboneExample::from_pair(&split.validation[0]);
    let y_uncond = backbone.forecast_uncond(&probe.features)?;
    let condition = extract_attributes(Some(&probe.target_norm));
    let y_cond = head.conditional_forward(&y_uncond, &condition)?;
    let guided = guided_forecast(&y_uncond, &y_cond, gcfg.s)?;

    println!("condition: {condition:?}");
    println!("unconditional: {:?}", round(&guided.y_uncond));
    println!("conditional:   {:?}", round(&guided.y_cond));
    println!("guided (s = {}): {:?}", guided.scale_used, round(&guided.y_final));
    println!("target:        {:?}", round(&probe.target_norm));
    Ok(())
}

fn round(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1000.0).round() / 1000.0).collect()
}
