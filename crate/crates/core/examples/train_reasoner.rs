//! Trains the verbal reasoner end to end: cold-start RL, rejection-sampled
//! SFT, and a final RL stage, printing validation MSE after each stage.
//!
//! Run with: `cargo run --release --example train_reasoner`

use std::collections::BTreeMap;

use tickertalk::annotate::TemplateRegistry;
use tickertalk::grpo::{prepare_examples, run_pipeline, PipelineConfig};
use tickertalk::indicators::IndicatorConfig;
use tickertalk::market::{make_windows, split_chronological, synth_market, Regime};
use tickertalk::policy::{PolicyCheckpoint, ToyPolicy, ToyPolicySpec};

fn main() -> tickertalk::Result<()> {
    let seed = 5;
    let bars = synth_market(seed, 200, &Regime::default())?;
    let mut by_symbol = BTreeMap::new();
    by_symbol.insert("SYN0".to_string(), bars.clone());
    let windows = make_windows("SYN0", &bars, 10, 10, 2)?;
    let split = split_chronological(windows.pairs, 0.7, 0.15)?;

    let registry = TemplateRegistry::default();
    let indicators = IndicatorConfig::default();
    let train = prepare_examples(&split.train, &by_symbol, &indicators, &registry, "default")?;
    let validation =
        prepare_examples(&split.validation, &by_symbol, &indicators, &registry, "default")?;
    println!("{} train / {} validation prompts", train.len(), validation.len());

    let base = ToyPolicy::from_checkpoint(&PolicyCheckpoint::zeros(
        ToyPolicySpec::default(),
        seed,
    ))?;
    let cfg = PipelineConfig {
        stage1_steps: 25,
        stage3_steps: 25,
        sft_epochs: 10,
        ..PipelineConfig::default()
    };
    let report = run_pipeline(&base, &train, &validation, &cfg, seed)?;

    println!("kept {} rollouts after rejection sampling", report.kept_samples);
    if let Some(sft) = &report.sft {
        println!("SFT NLL: {:.4} -> {:.4}", sft.initial_nll, sft.final_nll);
    }
    for stage in &report.stage_metrics {
        println!("{:>20}: validation MSE {:.6}", stage.stage, stage.validation_mse);
    }
    Ok(())
}
