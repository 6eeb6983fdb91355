//! Computes the full ten-indicator panel over a synthetic history and
//! prints the last few rows.
//!
//! Run with: `cargo run --example indicator_panel`

use tickertalk::indicators::{compute_panel, IndicatorConfig};
use tickertalk::market::{synth_market, Regime};

fn main() -> tickertalk::Result<()> {
    let bars = synth_market(7, 60, &Regime::default())?;
    let panel = compute_panel(&bars, &IndicatorConfig::default())?;

    println!("indicators: {}", panel
        .series
        .iter()
        .map(|(name, _)| name.as_str())
        .collect::<Vec<_>>()
        .join(", "));

    for (name, value) in panel.tail() {
        match value {
            Some(v) => println!("{name:>12}: {v:.4}"),
            None => println!("{name:>12}: unavailable"),
        }
    }

    let csv = panel.to_csv();
    println!("\nlast CSV row:\n{}", csv.lines().last().unwrap());
    Ok(())
}
