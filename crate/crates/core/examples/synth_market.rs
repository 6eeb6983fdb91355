//! Generates a seeded synthetic market, slices it into forecasting windows,
//! and prints the chronological split.
//!
//! Run with: `cargo run --example synth_market`

use tickertalk::market::{make_windows, split_chronological, synth_market, Regime};

fn main() -> tickertalk::Result<()> {
    let regime = Regime {
        drift: 0.0008,
        volatility: 0.015,
        start_price: 100.0,
    };
    let bars = synth_market(42, 220, &regime)?;
    println!(
        "generated {} bars from {} to {}",
        bars.len(),
        bars.first().unwrap().date,
        bars.last().unwrap().date
    );
    println!(
        "last bar: close {:.2}, adjusted close {:.2}, volume {}",
        bars.last().unwrap().close,
        bars.last().unwrap().adj_close,
        bars.last().unwrap().volume
    );

    let windows = make_windows("SYN0", &bars, 10, 10, 1)?;
    println!("built {} window/target pairs", windows.pairs.len());
    let split = split_chronological(windows.pairs, 0.7, 0.15)?;
    split.check_no_leakage()?;
    println!(
        "split: {} train / {} validation / {} test (no leakage)",
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );
    Ok(())
}
