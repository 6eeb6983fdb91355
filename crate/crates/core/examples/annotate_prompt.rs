//! Annotates the latest price window with summary statistics and indicator
//! readings, then assembles the reasoner prompt.
//!
//! Run with: `cargo run --example annotate_prompt`

use tickertalk::annotate::{annotate, build_prompt, TemplateRegistry};
use tickertalk::indicators::IndicatorConfig;
use tickertalk::market::{synth_market, PriceWindow, Regime};

fn main() -> tickertalk::Result<()> {
    let bars = synth_market(21, 80, &Regime::default())?;
    let window = PriceWindow::new("SYN0", bars[bars.len() - 10..].to_vec())?;

    let report = annotate(&window, &bars, &IndicatorConfig::default())?;
    println!("--- annotation ---\n{}\n", report.text);

    let registry = TemplateRegistry::default();
    let prompt = build_prompt(&window, &report, 10, "default", &registry)?;
    println!("--- prompt ({} chars) ---\n{}", prompt.text.len(), prompt.text);
    Ok(())
}
