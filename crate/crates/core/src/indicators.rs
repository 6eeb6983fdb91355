//! The ten classic technical indicators plus window statistics.
//!
//! Every operation returns a series aligned to its input, with `None` at
//! positions where the lookback is not yet satisfied. Guards for degenerate
//! inputs (flat ranges, zero deviations) produce fixed finite values so
//! downstream annotation is total.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::OhlcvBar;

/// A date-aligned indicator series; `None` marks an unmet lookback.
pub type Series = Vec<Option<f64>>;

/// Periods and band width for the indicator set.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndicatorConfig {
    pub sma_n: usize,
    pub ema_n: usize,
    pub momentum_n: usize,
    pub rsi_n: usize,
    pub macd_fast: usize,
    pub macd_slow: usize,
    pub willr_n: usize,
    pub cci_n: usize,
    pub adx_n: usize,
    pub boll_n: usize,
    pub boll_k: f64,
    pub stoch_n: usize,
}

impl Default for IndicatorConfig {
    fn default() -> Self {
        Self {
            sma_n: 10,
            ema_n: 10,
            momentum_n: 10,
            rsi_n: 14,
            macd_fast: 12,
            macd_slow: 26,
            willr_n: 10,
            cci_n: 10,
            adx_n: 10,
            boll_n: 20,
            boll_k: 2.0,
            stoch_n: 10,
        }
    }
}

impl IndicatorConfig {
    pub fn validate(&self) -> Result<()> {
        let periods = [
            self.sma_n,
            self.ema_n,
            self.momentum_n,
            self.rsi_n,
            self.macd_fast,
            self.macd_slow,
            self.willr_n,
            self.cci_n,
            self.adx_n,
            self.boll_n,
            self.stoch_n,
        ];
        if periods.iter().any(|&n| n == 0) {
            return Err(Error::Parameter("all indicator periods must be >= 1".into()));
        }
        if self.macd_fast >= self.macd_slow {
            return Err(Error::Parameter(format!(
                "macd_fast {} must be < macd_slow {}",
                self.macd_fast, self.macd_slow
            )));
        }
        if self.boll_k <= 0.0 {
            return Err(Error::Parameter("boll_k must be > 0".into()));
        }
        Ok(())
    }
}

/// Simple moving average over the last `n` prices.
pub fn sma(prices: &[f64], n: usize) -> Series {
    let mut out = vec![None; prices.len()];
    if n == 0 {
        return out;
    }
    for t in (n - 1)..prices.len() {
        let window = &prices[t + 1 - n..=t];
        out[t] = Some(window.iter().sum::<f64>() / n as f64);
    }
    out
}

/// Exponential moving average with α = 2/(n+1), seeded by the first-n SMA.
pub fn ema(prices: &[f64], n: usize) -> Series {
    let mut out = vec![None; prices.len()];
    if n == 0 || prices.len() < n {
        return out;
    }
    let alpha = 2.0 / (n as f64 + 1.0);
    let seed = prices[..n].iter().sum::<f64>() / n as f64;
    out[n - 1] = Some(seed);
    let mut prev = seed;
    for t in n..prices.len() {
        let value = prices[t] * alpha + prev * (1.0 - alpha);
        out[t] = Some(value);
        prev = value;
    }
    out
}

/// `close_t - close_{t-n}`.
pub fn momentum(closes: &[f64], n: usize) -> Series {
    let mut out = vec![None; closes.len()];
    for t in n..closes.len() {
        out[t] = Some(closes[t] - closes[t - n]);
    }
    out
}

/// Relative strength index over simple per-window gain/loss means.
/// Zero average loss maps to 100.
pub fn rsi(closes: &[f64], n: usize) -> Series {
    let mut out = vec![None; closes.len()];
    if n == 0 || closes.len() < n + 1 {
        return out;
    }
    for t in n..closes.len() {
        let mut gain = 0.0;
        let mut loss = 0.0;
        for i in (t - n + 1)..=t {
            let change = closes[i] - closes[i - 1];
            if change > 0.0 {
                gain += change;
            } else {
                loss += -change;
            }
        }
        let avg_gain = gain / n as f64;
        let avg_loss = loss / n as f64;
        out[t] = Some(if avg_loss == 0.0 {
            100.0
        } else {
            100.0 - 100.0 / (1.0 + avg_gain / avg_loss)
        });
    }
    out
}

/// Fast EMA minus slow EMA, defined where both are.
pub fn macd_line(closes: &[f64], fast: usize, slow: usize) -> Result<Series> {
    if fast >= slow {
        return Err(Error::Parameter(format!(
            "macd fast period {fast} must be < slow period {slow}"
        )));
    }
    let fast_ema = ema(closes, fast);
    let slow_ema = ema(closes, slow);
    Ok(fast_ema
        .iter()
        .zip(slow_ema.iter())
        .map(|(f, s)| match (f, s) {
            (Some(f), Some(s)) => Some(f - s),
            _ => None,
        })
        .collect())
}

/// Williams %R in [-100, 0]; a flat high/low range maps to -50.
pub fn williams_r(bars: &[OhlcvBar], n: usize) -> Series {
    let mut out = vec![None; bars.len()];
    if n == 0 {
        return out;
    }
    for t in (n - 1)..bars.len() {
        let window = &bars[t + 1 - n..=t];
        let hh = window.iter().map(|b| b.high).fold(f64::NEG_INFINITY, f64::max);
        let ll = window.iter().map(|b| b.low).fold(f64::INFINITY, f64::min);
        out[t] = Some(if hh == ll {
            -50.0
        } else {
            (hh - bars[t].close) / (hh - ll) * -100.0
        });
    }
    out
}

fn typical_price(bar: &OhlcvBar) -> f64 {
    (bar.high + bar.low + bar.close) / 3.0
}

/// Commodity channel index over typical prices; zero mean deviation maps to 0.
pub fn cci(bars: &[OhlcvBar], n: usize) -> Series {
    let mut out = vec![None; bars.len()];
    if n == 0 {
        return out;
    }
    let tp: Vec<f64> = bars.iter().map(typical_price).collect();
    for t in (n - 1)..bars.len() {
        let window = &tp[t + 1 - n..=t];
        let ma = window.iter().sum::<f64>() / n as f64;
        let mean_dev = window.iter().map(|x| (x - ma).abs()).sum::<f64>() / n as f64;
        out[t] = Some(if mean_dev == 0.0 {
            0.0
        } else {
            (tp[t] - ma) / (0.015 * mean_dev)
        });
    }
    out
}

/// Average directional index using Wilder directional movement and the
/// single-EMA ratio form; a zero DM sum maps to 0.
pub fn adx(bars: &[OhlcvBar], n: usize) -> Series {
    let mut out = vec![None; bars.len()];
    if n == 0 || bars.len() < n + 1 {
        return out;
    }
    let mut dm_plus = Vec::with_capacity(bars.len() - 1);
    let mut dm_minus = Vec::with_capacity(bars.len() - 1);
    for t in 1..bars.len() {
        let up = bars[t].high - bars[t - 1].high;
        let down = bars[t - 1].low - bars[t].low;
        dm_plus.push(if up > down && up > 0.0 { up } else { 0.0 });
        dm_minus.push(if down > up && down > 0.0 { down } else { 0.0 });
    }
    let spread: Vec<f64> = dm_plus
        .iter()
        .zip(dm_minus.iter())
        .map(|(p, m)| (p - m).abs())
        .collect();
    let smoothed = ema(&spread, n);
    for (i, value) in smoothed.iter().enumerate() {
        if let Some(value) = value {
            let t = i + 1; // dm series starts at bar index 1
            let denom = dm_plus[i] + dm_minus[i];
            out[t] = Some(if denom == 0.0 { 0.0 } else { 100.0 * value / denom });
        }
    }
    out
}

/// Bollinger bands `MA ± k·σ` with population standard deviation.
pub fn bollinger(closes: &[f64], n: usize, k: f64) -> Result<(Series, Series)> {
    if k <= 0.0 {
        return Err(Error::Parameter("bollinger k must be > 0".into()));
    }
    if n == 0 {
        return Err(Error::Parameter("bollinger period must be >= 1".into()));
    }
    let mut upper = vec![None; closes.len()];
    let mut lower = vec![None; closes.len()];
    for t in (n - 1)..closes.len() {
        let window = &closes[t + 1 - n..=t];
        let ma = window.iter().sum::<f64>() / n as f64;
        let var = window.iter().map(|x| (x - ma) * (x - ma)).sum::<f64>() / n as f64;
        let sigma = var.sqrt();
        upper[t] = Some(ma + k * sigma);
        lower[t] = Some(ma - k * sigma);
    }
    Ok((upper, lower))
}

/// Stochastic %K in [0, 100]; a flat range maps to 50.
pub fn stochastic_k(bars: &[OhlcvBar], n: usize) -> Series {
    let mut out = vec![None; bars.len()];
    if n == 0 {
        return out;
    }
    for t in (n - 1)..bars.len() {
        let window = &bars[t + 1 - n..=t];
        let hh = window.iter().map(|b| b.high).fold(f64::NEG_INFINITY, f64::max);
        let ll = window.iter().map(|b| b.low).fold(f64::INFINITY, f64::min);
        out[t] = Some(if hh == ll {
            50.0
        } else {
            (bars[t].close - ll) / (hh - ll) * 100.0
        });
    }
    out
}

/// Exact order statistics and mean of a non-empty series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub first: f64,
    pub last: f64,
}

pub fn window_stats(prices: &[f64]) -> Result<WindowStats> {
    if prices.is_empty() {
        return Err(Error::Parameter("window_stats needs a non-empty series".into()));
    }
    Ok(WindowStats {
        mean: prices.iter().sum::<f64>() / prices.len() as f64,
        min: prices.iter().cloned().fold(f64::INFINITY, f64::min),
        max: prices.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        first: prices[0],
        last: *prices.last().unwrap(),
    })
}

/// All indicator series for one bar history, date-aligned.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndicatorPanel {
    pub dates: Vec<NaiveDate>,
    /// Insertion-ordered (name, series) pairs.
    pub series: Vec<(String, Series)>,
}

impl IndicatorPanel {
    pub fn get(&self, name: &str) -> Option<&Series> {
        self.series.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }

    /// Latest defined value of each indicator, in panel order.
    pub fn tail(&self) -> Vec<(String, Option<f64>)> {
        self.series
            .iter()
            .map(|(name, series)| {
                let last = series.iter().rev().find_map(|v| *v);
                (name.clone(), last)
            })
            .collect()
    }

    /// One column per indicator, date-indexed; undefined entries are empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("date");
        for (name, _) in &self.series {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (i, date) in self.dates.iter().enumerate() {
            out.push_str(&date.to_string());
            for (_, series) in &self.series {
                out.push(',');
                if let Some(v) = series[i] {
                    out.push_str(&format!("{v}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Computes the full panel over a bar history. Close-based indicators use
/// the adjusted close, matching the forecast target.
pub fn compute_panel(bars: &[OhlcvBar], config: &IndicatorConfig) -> Result<IndicatorPanel> {
    config.validate()?;
    let closes: Vec<f64> = bars.iter().map(|b| b.adj_close).collect();
    let (boll_upper, boll_lower) = bollinger(&closes, config.boll_n, config.boll_k)?;
    let series = vec![
        ("sma".to_string(), sma(&closes, config.sma_n)),
        ("ema".to_string(), ema(&closes, config.ema_n)),
        ("momentum".to_string(), momentum(&closes, config.momentum_n)),
        ("rsi".to_string(), rsi(&closes, config.rsi_n)),
        (
            "macd".to_string(),
            macd_line(&closes, config.macd_fast, config.macd_slow)?,
        ),
        ("williams_r".to_string(), williams_r(bars, config.willr_n)),
        ("cci".to_string(), cci(bars, config.cci_n)),
        ("adx".to_string(), adx(bars, config.adx_n)),
        ("boll_upper".to_string(), boll_upper),
        ("boll_lower".to_string(), boll_lower),
        ("stoch_k".to_string(), stochastic_k(bars, config.stoch_n)),
    ];
    Ok(IndicatorPanel {
        dates: bars.iter().map(|b| b.date).collect(),
        series,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{synth_market, Regime};

    fn bars_from_closes(closes: &[f64]) -> Vec<OhlcvBar> {
        let mut date = NaiveDate::from_ymd_opt(2021, 1, 1).unwrap();
        closes
            .iter()
            .map(|&c| {
                date = date.succ_opt().unwrap();
                OhlcvBar {
                    date,
                    open: c,
                    high: c * 1.05,
                    low: c * 0.95,
                    close: c,
                    adj_close: c,
                    volume: 100,
                }
            })
            .collect()
    }

    #[test]
    fn sma_examples() {
        assert_eq!(sma(&[1.0, 2.0, 3.0, 4.0, 5.0], 5), vec![None, None, None, None, Some(3.0)]);
        assert_eq!(sma(&[7.0; 4], 4)[3], Some(7.0));
        assert_eq!(sma(&[2.0, 4.0, 6.0], 2), vec![None, Some(3.0), Some(5.0)]);
        assert!(sma(&[1.0, 2.0], 5).iter().all(|v| v.is_none()));
    }

    #[test]
    fn ema_examples() {
        let constant = ema(&[3.0; 6], 4);
        for v in constant.iter().flatten() {
            assert!((v - 3.0).abs() < 1e-12);
        }
        assert_eq!(ema(&[2.0, 4.0], 1), vec![Some(2.0), Some(4.0)]);
        // n=3: alpha=0.5, seed = sma([1,2,3]) = 2, ema_3 = 4*0.5 + 2*0.5
        let series = ema(&[1.0, 2.0, 3.0, 4.0], 3);
        assert_eq!(series[2], Some(2.0));
        assert_eq!(series[3], Some(3.0));
        assert!(ema(&[1.0], 3).iter().all(|v| v.is_none()));
    }

    #[test]
    fn momentum_examples() {
        let constant = momentum(&[5.0; 8], 3);
        for v in constant.iter().flatten() {
            assert_eq!(*v, 0.0);
        }
        let closes = [10.0, 11.0, 12.0, 13.0, 14.0, 15.0];
        assert_eq!(momentum(&closes, 5)[5], Some(5.0));
        // linear closes with step d give n*d everywhere defined
        let linear: Vec<f64> = (0..20).map(|i| 3.0 + 0.5 * i as f64).collect();
        for v in momentum(&linear, 4).iter().flatten() {
            assert!((v - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rsi_examples() {
        let increasing: Vec<f64> = (0..20).map(|i| 1.0 + i as f64).collect();
        for v in rsi(&increasing, 5).iter().flatten() {
            assert_eq!(*v, 100.0);
        }
        let decreasing: Vec<f64> = (0..20).map(|i| 100.0 - i as f64).collect();
        for v in rsi(&decreasing, 5).iter().flatten() {
            assert_eq!(*v, 0.0);
        }
        // alternating +1/-1 changes
        let alternating: Vec<f64> = (0..21).map(|i| if i % 2 == 0 { 10.0 } else { 11.0 }).collect();
        for v in rsi(&alternating, 4).iter().flatten() {
            assert!((v - 50.0).abs() < 1e-9);
        }
    }

    #[test]
    fn macd_examples() {
        let constant = macd_line(&[4.0; 40], 12, 26).unwrap();
        for v in constant.iter().flatten() {
            assert!(v.abs() < 1e-12);
        }
        assert!(macd_line(&[1.0; 40], 12, 12).is_err());
        let ramp: Vec<f64> = (0..60).map(|i| 1.0 + i as f64).collect();
        let line = macd_line(&ramp, 12, 26).unwrap();
        let last = line.last().unwrap().unwrap();
        assert!(last > 0.0, "fast EMA should lead on a ramp, got {last}");
    }

    #[test]
    fn williams_r_examples() {
        let bars = bars_from_closes(&[10.0, 11.0, 12.0, 13.0]);
        // close at highest high
        let mut top = bars.clone();
        top[3].high = top[3].close;
        for b in top.iter_mut().take(3) {
            b.high = b.high.min(13.0);
        }
        let wr = williams_r(&top, 4)[3].unwrap();
        assert!(wr <= 0.0 && wr >= -100.0);

        // exact endpoint cases with hand-built bars
        let mut flat = bars_from_closes(&[10.0; 5]);
        for b in &mut flat {
            b.high = 10.0;
            b.low = 10.0;
        }
        assert_eq!(williams_r(&flat, 5)[4], Some(-50.0));

        let mut mid = bars_from_closes(&[10.0; 5]);
        for b in &mut mid {
            b.high = 12.0;
            b.low = 8.0;
        }
        assert_eq!(williams_r(&mid, 5)[4], Some(-50.0));
        mid[4].close = 12.0;
        assert_eq!(williams_r(&mid, 5)[4], Some(0.0));
        mid[4].close = 8.0;
        assert_eq!(williams_r(&mid, 5)[4], Some(-100.0));
    }

    #[test]
    fn cci_examples() {
        let mut flat = bars_from_closes(&[10.0; 6]);
        for b in &mut flat {
            b.high = 10.0;
            b.low = 10.0;
        }
        assert_eq!(cci(&flat, 4)[5], Some(0.0));

        // typical prices [1,2,3]: MA = 2, mean dev = 2/3, CCI = 1/(0.015*2/3) = 100
        let mut bars = bars_from_closes(&[1.0, 2.0, 3.0]);
        for (i, b) in bars.iter_mut().enumerate() {
            let tp = (i + 1) as f64;
            b.high = tp;
            b.low = tp;
            b.close = tp;
        }
        let value = cci(&bars, 3)[2].unwrap();
        assert!((value - 100.0).abs() < 1e-9, "got {value}");
    }

    #[test]
    fn adx_examples() {
        let mut flat = bars_from_closes(&[10.0; 12]);
        for b in &mut flat {
            b.high = 10.0;
            b.low = 10.0;
        }
        for v in adx(&flat, 4).iter().flatten() {
            assert_eq!(*v, 0.0);
        }

        // highs rising by a constant, lows flat -> ADX = 100
        let mut trending = bars_from_closes(&[10.0; 12]);
        for (i, b) in trending.iter_mut().enumerate() {
            b.high = 10.0 + i as f64;
            b.low = 5.0;
            b.close = 9.0;
            b.open = 9.0;
        }
        let series = adx(&trending, 4);
        let last = series.last().unwrap().unwrap();
        assert!((last - 100.0).abs() < 1e-9, "got {last}");

        assert!(adx(&bars_from_closes(&[10.0]), 4).iter().all(|v| v.is_none()));
    }

    #[test]
    fn bollinger_examples() {
        let (upper, lower) = bollinger(&[6.0; 8], 4, 2.0).unwrap();
        assert_eq!(upper[7], Some(6.0));
        assert_eq!(lower[7], Some(6.0));

        // [1,2,3], n=3, k=2: MA = 2, population sigma = sqrt(2/3)
        let (upper, _) = bollinger(&[1.0, 2.0, 3.0], 3, 2.0).unwrap();
        let expect = 2.0 + 2.0 * (2.0f64 / 3.0).sqrt();
        assert!((upper[2].unwrap() - expect).abs() < 1e-9);
        assert!((upper[2].unwrap() - 3.63299).abs() < 1e-5);

        assert!(bollinger(&[1.0, 2.0], 2, 0.0).is_err());
    }

    #[test]
    fn stochastic_examples() {
        let mut bars = bars_from_closes(&[10.0; 5]);
        for b in &mut bars {
            b.high = 12.0;
            b.low = 8.0;
        }
        bars[4].close = 8.0;
        assert_eq!(stochastic_k(&bars, 5)[4], Some(0.0));
        bars[4].close = 12.0;
        assert_eq!(stochastic_k(&bars, 5)[4], Some(100.0));
        bars[4].close = 10.0;
        assert_eq!(stochastic_k(&bars, 5)[4], Some(50.0));

        let mut flat = bars_from_closes(&[10.0; 5]);
        for b in &mut flat {
            b.high = 10.0;
            b.low = 10.0;
        }
        assert_eq!(stochastic_k(&flat, 5)[4], Some(50.0));
    }

    #[test]
    fn window_stats_examples() {
        let s = window_stats(&[1.0, 3.0, 2.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.min, 1.0);
        assert_eq!(s.max, 3.0);
        assert_eq!(s.first, 1.0);
        assert_eq!(s.last, 2.0);

        let single = window_stats(&[5.0]).unwrap();
        assert_eq!(
            (single.mean, single.min, single.max, single.first, single.last),
            (5.0, 5.0, 5.0, 5.0, 5.0)
        );
        assert!(window_stats(&[]).is_err());
    }

    #[test]
    fn bounded_indicators_stay_in_range() {
        let bars = synth_market(99, 300, &Regime::default()).unwrap();
        let closes: Vec<f64> = bars.iter().map(|b| b.adj_close).collect();
        for v in rsi(&closes, 14).iter().flatten() {
            assert!((0.0..=100.0).contains(v));
        }
        for v in stochastic_k(&bars, 10).iter().flatten() {
            assert!((0.0..=100.0).contains(v));
        }
        for v in williams_r(&bars, 10).iter().flatten() {
            assert!((-100.0..=0.0).contains(v));
        }
    }

    #[test]
    fn translation_invariance_and_equivariance() {
        let bars = synth_market(17, 120, &Regime::default()).unwrap();
        let closes: Vec<f64> = bars.iter().map(|b| b.adj_close).collect();
        let shifted_bars: Vec<OhlcvBar> = bars
            .iter()
            .map(|b| OhlcvBar {
                open: b.open + 50.0,
                high: b.high + 50.0,
                low: b.low + 50.0,
                close: b.close + 50.0,
                adj_close: b.adj_close + 50.0,
                ..b.clone()
            })
            .collect();
        let shifted: Vec<f64> = closes.iter().map(|c| c + 50.0).collect();

        for (a, b) in rsi(&closes, 14).iter().zip(rsi(&shifted, 14).iter()) {
            match (a, b) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-7),
                _ => assert_eq!(a.is_none(), b.is_none()),
            }
        }
        for (a, b) in williams_r(&bars, 10).iter().zip(williams_r(&shifted_bars, 10).iter()) {
            if let (Some(a), Some(b)) = (a, b) {
                assert!((a - b).abs() < 1e-7);
            }
        }
        for (a, b) in sma(&closes, 10).iter().zip(sma(&shifted, 10).iter()) {
            if let (Some(a), Some(b)) = (a, b) {
                assert!((a + 50.0 - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn shift_equivariance() {
        let bars = synth_market(23, 200, &Regime::default()).unwrap();
        let closes: Vec<f64> = bars.iter().map(|b| b.adj_close).collect();
        let full = sma(&closes, 10);
        let sub = sma(&closes[37..], 10);
        for (i, v) in sub.iter().enumerate() {
            if let (Some(a), Some(b)) = (v, &full[i + 37]) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn panel_has_all_indicators_and_serializes() {
        let bars = synth_market(1, 60, &Regime::default()).unwrap();
        let panel = compute_panel(&bars, &IndicatorConfig::default()).unwrap();
        assert_eq!(panel.series.len(), 11);
        assert_eq!(panel.dates.len(), 60);
        let csv = panel.to_csv();
        assert!(csv.starts_with("date,sma,ema,"));
        assert_eq!(csv.lines().count(), 61);
        let json = serde_json::to_string(&panel).unwrap();
        let back: IndicatorPanel = serde_json::from_str(&json).unwrap();
        assert_eq!(back.series.len(), 11);
    }
}
