//! OHLCV ingestion, window slicing, and seeded synthetic markets.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{Datelike, NaiveDate, Weekday};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One daily trading bar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OhlcvBar {
    pub date: NaiveDate,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub adj_close: f64,
    pub volume: u64,
}

impl OhlcvBar {
    /// Checks the bar invariants: positive finite prices, low ≤ open/close ≤ high.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let prices = [
            ("open", self.open),
            ("high", self.high),
            ("low", self.low),
            ("close", self.close),
            ("adj_close", self.adj_close),
        ];
        for (name, p) in prices {
            if !p.is_finite() || p <= 0.0 {
                return Err(format!("{name} must be finite and > 0, got {p}"));
            }
        }
        if self.low > self.high {
            return Err(format!("low {} > high {}", self.low, self.high));
        }
        if self.open < self.low || self.open > self.high {
            return Err(format!("open {} outside [low, high]", self.open));
        }
        if self.close < self.low || self.close > self.high {
            return Err(format!("close {} outside [low, high]", self.close));
        }
        Ok(())
    }
}

/// Per-window affine price transform: `norm = (x - min) / scale`.
///
/// Degenerate (constant) windows use scale 1 so the map stays invertible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormTransform {
    pub min: f64,
    pub scale: f64,
}

impl NormTransform {
    pub fn fit(values: &[f64]) -> Self {
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let scale = if max > min { max - min } else { 1.0 };
        Self { min, scale }
    }

    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.min) / self.scale
    }

    pub fn denormalize(&self, x: f64) -> f64 {
        x * self.scale + self.min
    }
}

/// A length-T slice of bars ending at the forecast anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceWindow {
    pub symbol: String,
    pub bars: Vec<OhlcvBar>,
}

impl PriceWindow {
    pub fn new(symbol: impl Into<String>, bars: Vec<OhlcvBar>) -> Result<Self> {
        if bars.is_empty() {
            return Err(Error::Parameter("price window must be non-empty".into()));
        }
        if !bars.windows(2).all(|w| w[0].date < w[1].date) {
            return Err(Error::Parameter(
                "price window bars must be strictly increasing by date".into(),
            ));
        }
        Ok(Self {
            symbol: symbol.into(),
            bars,
        })
    }

    /// Date of the last bar (time t).
    pub fn anchor(&self) -> NaiveDate {
        self.bars.last().expect("non-empty").date
    }

    pub fn len(&self) -> usize {
        self.bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bars.is_empty()
    }

    pub fn adj_closes(&self) -> Vec<f64> {
        self.bars.iter().map(|b| b.adj_close).collect()
    }

    /// Min-max transform fitted on the window's adjusted closes.
    pub fn norm_transform(&self) -> NormTransform {
        NormTransform::fit(&self.adj_closes())
    }

    /// Adjusted closes mapped through the window's own transform.
    pub fn normalized_adj(&self) -> Vec<f64> {
        let t = self.norm_transform();
        self.adj_closes().iter().map(|&x| t.normalize(x)).collect()
    }

    /// Per-bar feature rows `[o, h, l, c, p, v]`: price fields share the
    /// window price transform, volume gets its own min-max.
    pub fn feature_rows(&self) -> Vec<[f64; 6]> {
        let t = self.norm_transform();
        let volumes: Vec<f64> = self.bars.iter().map(|b| b.volume as f64).collect();
        let vt = NormTransform::fit(&volumes);
        self.bars
            .iter()
            .map(|b| {
                [
                    t.normalize(b.open),
                    t.normalize(b.high),
                    t.normalize(b.low),
                    t.normalize(b.close),
                    t.normalize(b.adj_close),
                    vt.normalize(b.volume as f64),
                ]
            })
            .collect()
    }
}

/// The next-T′ adjusted-close trajectory a window forecasts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSeries {
    pub values: Vec<f64>,
    pub dates: Vec<NaiveDate>,
}

impl TargetSeries {
    /// Target values in the window's normalized price space.
    pub fn normalized(&self, t: &NormTransform) -> Vec<f64> {
        self.values.iter().map(|&x| t.normalize(x)).collect()
    }
}

/// An aligned (input window, forecast target) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowPair {
    pub window: PriceWindow,
    pub target: TargetSeries,
}

impl WindowPair {
    pub fn first_target_date(&self) -> NaiveDate {
        self.target.dates[0]
    }

    pub fn last_target_date(&self) -> NaiveDate {
        *self.target.dates.last().expect("non-empty target")
    }

    pub fn first_window_date(&self) -> NaiveDate {
        self.window.bars[0].date
    }
}

/// Chronologically disjoint train/validation/test collections.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<WindowPair>,
    pub validation: Vec<WindowPair>,
    pub test: Vec<WindowPair>,
}

impl DatasetSplit {
    /// Verifies the no-leakage ordering between consecutive splits.
    pub fn check_no_leakage(&self) -> Result<()> {
        let max_span_end = |pairs: &[WindowPair]| pairs.iter().map(|p| p.last_target_date()).max();
        let min_span_start = |pairs: &[WindowPair]| pairs.iter().map(|p| p.first_window_date()).min();
        for (a, b, label) in [
            (&self.train, &self.validation, "train/validation"),
            (&self.validation, &self.test, "validation/test"),
            (&self.train, &self.test, "train/test"),
        ] {
            if let (Some(end), Some(start)) = (max_span_end(a), min_span_start(b)) {
                if end >= start {
                    return Err(Error::Domain(format!(
                        "temporal leakage across {label}: {end} >= {start}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A rejected ingest row with the reason it was dropped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RowDiagnostic {
    pub row: usize,
    pub message: String,
}

/// Maps logical bar fields to CSV column names.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub date: String,
    pub open: String,
    pub high: String,
    pub low: String,
    pub close: String,
    pub adj_close: String,
    pub volume: String,
    /// Optional symbol column; absent means single-symbol files.
    pub symbol: Option<String>,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        Self {
            date: "date".into(),
            open: "open".into(),
            high: "high".into(),
            low: "low".into(),
            close: "close".into(),
            adj_close: "adj_close".into(),
            volume: "volume".into(),
            symbol: None,
        }
    }
}

/// Result of a CSV ingest: valid bars per symbol plus row-level rejects.
#[derive(Debug, Clone, Default)]
pub struct IngestResult {
    pub bars_by_symbol: BTreeMap<String, Vec<OhlcvBar>>,
    pub rejected: Vec<RowDiagnostic>,
}

/// Reads bars from a CSV file, sorting per symbol and rejecting rows that
/// violate bar invariants. Duplicate dates within a symbol are a hard error.
pub fn ingest_csv(path: &Path, schema: &ColumnSchema) -> Result<IngestResult> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column '{name}'")))
    };
    let date_i = col(&schema.date)?;
    let open_i = col(&schema.open)?;
    let high_i = col(&schema.high)?;
    let low_i = col(&schema.low)?;
    let close_i = col(&schema.close)?;
    let adj_i = col(&schema.adj_close)?;
    let vol_i = col(&schema.volume)?;
    let sym_i = match &schema.symbol {
        Some(name) => Some(col(name)?),
        None => None,
    };
    let default_symbol = path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "UNKNOWN".into());

    let mut result = IngestResult::default();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1; // 1-based data row index
        let record = record?;
        let parse_price = |idx: usize, name: &str| -> std::result::Result<f64, String> {
            record
                .get(idx)
                .ok_or_else(|| format!("short row, no {name}"))?
                .trim()
                .parse::<f64>()
                .map_err(|e| format!("bad {name}: {e}"))
        };
        let parsed: std::result::Result<OhlcvBar, String> = (|| {
            let date = record
                .get(date_i)
                .ok_or_else(|| "short row, no date".to_string())?
                .trim()
                .parse::<NaiveDate>()
                .map_err(|e| format!("bad date: {e}"))?;
            let bar = OhlcvBar {
                date,
                open: parse_price(open_i, "open")?,
                high: parse_price(high_i, "high")?,
                low: parse_price(low_i, "low")?,
                close: parse_price(close_i, "close")?,
                adj_close: parse_price(adj_i, "adj_close")?,
                volume: record
                    .get(vol_i)
                    .ok_or_else(|| "short row, no volume".to_string())?
                    .trim()
                    .parse::<u64>()
                    .map_err(|e| format!("bad volume: {e}"))?,
            };
            bar.validate()?;
            Ok(bar)
        })();
        match parsed {
            Ok(bar) => {
                let symbol = match sym_i {
                    Some(idx) => record.get(idx).unwrap_or("UNKNOWN").trim().to_string(),
                    None => default_symbol.clone(),
                };
                result.bars_by_symbol.entry(symbol).or_default().push(bar);
            }
            Err(message) => result.rejected.push(RowDiagnostic { row, message }),
        }
    }

    for (symbol, bars) in result.bars_by_symbol.iter_mut() {
        bars.sort_by_key(|b| b.date);
        for pair in bars.windows(2) {
            if pair[0].date == pair[1].date {
                return Err(Error::Ingestion {
                    row: 0,
                    message: format!("duplicate date {} for symbol {symbol}", pair[0].date),
                });
            }
        }
    }
    Ok(result)
}

/// Writes bars in the canonical CSV layout (round-trips through
/// [`ingest_csv`] bit-identically for finite decimal inputs).
pub fn write_csv(bars: &[OhlcvBar], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["date", "open", "high", "low", "close", "adj_close", "volume"])?;
    for bar in bars {
        writer.write_record([
            bar.date.to_string(),
            bar.open.to_string(),
            bar.high.to_string(),
            bar.low.to_string(),
            bar.close.to_string(),
            bar.adj_close.to_string(),
            bar.volume.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Outcome of windowing a bar sequence.
#[derive(Debug, Clone)]
pub struct WindowingResult {
    pub pairs: Vec<WindowPair>,
    /// Present when the sequence was too short to emit any pair.
    pub warning: Option<String>,
}

/// Slices a sorted bar sequence into aligned (window, target) pairs.
///
/// The target starts the bar after the window anchor; count is
/// `floor((len - T - T') / stride) + 1` when the sequence is long enough.
pub fn make_windows(
    symbol: &str,
    bars: &[OhlcvBar],
    t: usize,
    horizon: usize,
    stride: usize,
) -> Result<WindowingResult> {
    if t == 0 || horizon == 0 || stride == 0 {
        return Err(Error::Parameter("T, T' and stride must all be >= 1".into()));
    }
    if bars.len() < t + horizon {
        return Ok(WindowingResult {
            pairs: Vec::new(),
            warning: Some(format!(
                "symbol {symbol}: {} bars < T + T' = {}; no windows emitted",
                bars.len(),
                t + horizon
            )),
        });
    }
    let mut pairs = Vec::new();
    let mut start = 0;
    while start + t + horizon <= bars.len() {
        let window = PriceWindow::new(symbol, bars[start..start + t].to_vec())?;
        let target_bars = &bars[start + t..start + t + horizon];
        let target = TargetSeries {
            values: target_bars.iter().map(|b| b.adj_close).collect(),
            dates: target_bars.iter().map(|b| b.date).collect(),
        };
        pairs.push(WindowPair { window, target });
        start += stride;
    }
    Ok(WindowingResult {
        pairs,
        warning: None,
    })
}

/// Drift/volatility parameters for the synthetic geometric random walk.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Regime {
    /// Mean daily log return.
    pub drift: f64,
    /// Daily log-return standard deviation.
    pub volatility: f64,
    pub start_price: f64,
}

impl Default for Regime {
    fn default() -> Self {
        Self {
            drift: 0.0005,
            volatility: 0.02,
            start_price: 100.0,
        }
    }
}

fn next_weekday(mut date: NaiveDate) -> NaiveDate {
    loop {
        date = date.succ_opt().expect("date overflow");
        if !matches!(date.weekday(), Weekday::Sat | Weekday::Sun) {
            return date;
        }
    }
}

/// Generates a seeded geometric-random-walk bar sequence with a consistent
/// OHLC envelope. Deterministic per seed.
pub fn synth_market(seed: u64, days: usize, regime: &Regime) -> Result<Vec<OhlcvBar>> {
    if days == 0 {
        return Err(Error::Parameter("days must be >= 1".into()));
    }
    if regime.volatility < 0.0 {
        return Err(Error::Parameter("volatility must be >= 0".into()));
    }
    if !(regime.start_price.is_finite() && regime.start_price > 0.0) {
        return Err(Error::Parameter("start_price must be finite and > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).map_err(|e| Error::Parameter(e.to_string()))?;

    let mut bars = Vec::with_capacity(days);
    let mut date = NaiveDate::from_ymd_opt(2020, 1, 1).expect("valid date");
    if matches!(date.weekday(), Weekday::Sat | Weekday::Sun) {
        date = next_weekday(date);
    }
    let mut prev_close = regime.start_price;
    for _ in 0..days {
        let z: f64 = unit.sample(&mut rng);
        let close = prev_close * (regime.drift + regime.volatility * z).exp();
        let open = prev_close;
        // intrabar range scaled by volatility so a zero-vol walk is flat
        let up: f64 = unit.sample(&mut rng).abs();
        let down: f64 = unit.sample(&mut rng).abs();
        let high = open.max(close) * (1.0 + 0.5 * regime.volatility * up);
        let low = (open.min(close) * (1.0 - 0.5 * regime.volatility * down)).max(f64::MIN_POSITIVE);
        let volume = 1_000_000.0 * (0.25 * unit.sample(&mut rng)).exp();
        let bar = OhlcvBar {
            date,
            open,
            high,
            low,
            close,
            adj_close: close,
            volume: volume as u64,
        };
        debug_assert!(bar.validate().is_ok(), "synthetic bar invariant violated");
        bars.push(bar);
        prev_close = close;
        date = next_weekday(date);
    }
    Ok(bars)
}

/// Splits pairs chronologically with purging so no pair's span crosses a
/// boundary. Fractions apply to the anchor-sorted pair list.
pub fn split_chronological(
    mut pairs: Vec<WindowPair>,
    train_frac: f64,
    val_frac: f64,
) -> Result<DatasetSplit> {
    if !(0.0..=1.0).contains(&train_frac)
        || !(0.0..=1.0).contains(&val_frac)
        || train_frac + val_frac > 1.0
    {
        return Err(Error::Parameter("invalid split fractions".into()));
    }
    pairs.sort_by(|a, b| {
        a.window
            .anchor()
            .cmp(&b.window.anchor())
            .then(a.window.symbol.cmp(&b.window.symbol))
    });
    if pairs.is_empty() {
        return Ok(DatasetSplit::default());
    }
    let n = pairs.len();
    let train_end = ((n as f64) * train_frac).floor() as usize;
    let val_end = ((n as f64) * (train_frac + val_frac)).floor() as usize;
    let val_boundary = pairs
        .get(train_end.min(n - 1))
        .map(|p| p.first_window_date())
        .unwrap();
    let test_boundary = pairs
        .get(val_end.min(n - 1))
        .map(|p| p.first_window_date())
        .unwrap();

    let mut split = DatasetSplit::default();
    for pair in pairs {
        if pair.last_target_date() < val_boundary {
            split.train.push(pair);
        } else if pair.first_window_date() >= val_boundary && pair.last_target_date() < test_boundary
        {
            split.validation.push(pair);
        } else if pair.first_window_date() >= test_boundary {
            split.test.push(pair);
        }
        // pairs straddling a boundary are purged
    }
    split.check_no_leakage()?;
    Ok(split)
}

/// JSON dataset manifest: symbols, date ranges, and split boundaries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub symbols: Vec<String>,
    pub first_date: NaiveDate,
    pub last_date: NaiveDate,
    pub t: usize,
    pub horizon: usize,
    pub train_pairs: usize,
    pub validation_pairs: usize,
    pub test_pairs: usize,
    pub seed: u64,
}
