//! Runs the daily-rebalanced Markowitz backtest over a three-asset
//! synthetic panel using trailing-momentum expected returns, then prints
//! the summary metrics and an SVG equity curve.
//!
//! Run with: `cargo run --release --example backtest_markowitz`

use std::collections::BTreeMap;

use tickertalk::market::{synth_market, Regime};
use tickertalk::plot::equity_svg;
use tickertalk::portfolio::{align_panel, backtest, BacktestConfig};

fn main() -> tickertalk::Result<()> {
    let mut bars = BTreeMap::new();
    for (i, symbol) in ["SYN0", "SYN1", "SYN2"].iter().enumerate() {
        let regime = Regime {
            drift: 0.0004 * (i + 1) as f64,
            volatility: 0.01 + 0.004 * i as f64,
            start_price: 100.0,
        };
        bars.insert(symbol.to_string(), synth_market(30 + i as u64, 140, &regime)?);
    }
    let panel = align_panel(&bars)?;
    println!(
        "panel: {} symbols x {} dates",
        panel.symbols.len(),
        panel.dates.len()
    );

    let cfg = BacktestConfig::default();
    // expected returns: trailing 10-day mean as a simple momentum signal
    let result = backtest(&panel, &cfg, |t, panel| {
        let returns = panel.daily_returns();
        let lb = 10.min(t);
        let mu = (0..panel.symbols.len())
            .map(|j| (t - lb..t).map(|i| returns[[i, j]]).sum::<f64>() / lb as f64)
            .collect();
        Ok(mu)
    })?;

    println!("first weights: {:?}", result.rows[0].weights);
    let m = &result.metrics;
    println!(
        "total return {:.4} | vol {:.4} | max drawdown {:.4} | Sharpe {:.3} | {} days",
        m.total_return, m.annualized_vol, m.max_drawdown, m.sharpe, m.days
    );

    let equities: Vec<f64> = result.rows.iter().map(|r| r.equity).collect();
    let path = std::env::temp_dir().join("tickertalk_equity.svg");
    std::fs::write(&path, equity_svg(&equities)?)?;
    println!("equity curve written to {}", path.display());
    Ok(())
}
