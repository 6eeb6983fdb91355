//! Markowitz allocation over forecast-implied expected returns, and a
//! daily-rebalanced backtest with turnover costs.
//!
//! The mean-variance program `max_w μᵀw − (κ/2)·wᵀΣw` is solved on the
//! probability simplex (long-only, fully invested) by projected gradient
//! ascent with a sort-based Euclidean projection.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::OhlcvBar;

/// Diagonal loading applied to every covariance before optimization.
pub const COV_RIDGE: f64 = 1e-6;

/// Euclidean projection of `v` onto the probability simplex
/// `{w : w_i >= 0, Σw_i = 1}` (sort-based algorithm).
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - 1.0) / (i + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

fn symmetrize_with_ridge(sigma: &Array2<f64>) -> Array2<f64> {
    let mut sym = (sigma + &sigma.t()) * 0.5;
    for i in 0..sym.nrows() {
        sym[[i, i]] += COV_RIDGE;
    }
    sym
}

/// Long-only Markowitz weights: `argmax_w μᵀw − (κ/2)·wᵀΣw` on the simplex.
/// The input covariance is symmetrized and ridge-loaded before solving.
pub fn markowitz(mu: &[f64], sigma: &Array2<f64>, kappa: f64) -> Result<Vec<f64>> {
    let n = mu.len();
    if n == 0 {
        return Err(Error::Parameter("markowitz needs at least one asset".into()));
    }
    if sigma.dim() != (n, n) {
        return Err(Error::Parameter(format!(
            "covariance must be {n} x {n}, got {:?}",
            sigma.dim()
        )));
    }
    if kappa <= 0.0 || !kappa.is_finite() {
        return Err(Error::Parameter("kappa must be positive and finite".into()));
    }
    if mu.iter().any(|v| !v.is_finite()) || sigma.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parameter("moments must be finite".into()));
    }
    let sym = symmetrize_with_ridge(sigma);

    // Step size from the gradient Lipschitz constant κ·‖Σ‖_∞.
    let row_norm = (0..n)
        .map(|i| (0..n).map(|j| sym[[i, j]].abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let lr = 1.0 / (kappa * row_norm).max(1e-12).max(1.0);

    let mut w = vec![1.0 / n as f64; n];
    for _ in 0..5_000 {
        let mut grad = vec![0.0; n];
        for i in 0..n {
            let sw: f64 = (0..n).map(|j| sym[[i, j]] * w[j]).sum();
            grad[i] = mu[i] - kappa * sw;
        }
        let stepped: Vec<f64> = w.iter().zip(&grad).map(|(wi, g)| wi + lr * g).collect();
        let next = project_simplex(&stepped);
        let delta: f64 = next
            .iter()
            .zip(&w)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        w = next;
        if delta < 1e-12 {
            break;
        }
    }
    Ok(w)
}

/// Mean-variance objective value for diagnostics and oracle tests.
pub fn markowitz_objective(mu: &[f64], sigma: &Array2<f64>, kappa: f64, w: &[f64]) -> f64 {
    let sym = symmetrize_with_ridge(sigma);
    let n = mu.len();
    let lin: f64 = mu.iter().zip(w).map(|(m, wi)| m * wi).sum();
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            quad += w[i] * sym[[i, j]] * w[j];
        }
    }
    lin - 0.5 * kappa * quad
}

/// Mean vector and population covariance (ridge-loaded) of a returns panel
/// shaped days × assets. Requires at least two days.
pub fn panel_moments(returns: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
    let (days, assets) = returns.dim();
    if days < 2 {
        return Err(Error::Parameter(format!(
            "need at least 2 days of returns for moments, got {days}"
        )));
    }
    let mu: Vec<f64> = (0..assets)
        .map(|j| (0..days).map(|i| returns[[i, j]]).sum::<f64>() / days as f64)
        .collect();
    let mut cov = Array2::zeros((assets, assets));
    for a in 0..assets {
        for b in 0..assets {
            let mut acc = 0.0;
            for i in 0..days {
                acc += (returns[[i, a]] - mu[a]) * (returns[[i, b]] - mu[b]);
            }
            cov[[a, b]] = acc / days as f64;
        }
    }
    for i in 0..assets {
        cov[[i, i]] += COV_RIDGE;
    }
    Ok((mu, cov))
}

/// A date-aligned adjusted-close panel (dates × assets).
#[derive(Debug, Clone)]
pub struct PricePanel {
    pub symbols: Vec<String>,
    pub dates: Vec<NaiveDate>,
    pub adj_close: Array2<f64>,
    pub warnings: Vec<String>,
}

/// Aligns per-symbol bars on their common dates. Dates missing any symbol
/// are skipped and reported as warnings.
pub fn align_panel(bars_by_symbol: &BTreeMap<String, Vec<OhlcvBar>>) -> Result<PricePanel> {
    if bars_by_symbol.is_empty() {
        return Err(Error::Parameter("panel needs at least one symbol".into()));
    }
    let symbols: Vec<String> = bars_by_symbol.keys().cloned().collect();
    let maps: Vec<BTreeMap<NaiveDate, f64>> = symbols
        .iter()
        .map(|s| {
            bars_by_symbol[s]
                .iter()
                .map(|b| (b.date, b.adj_close))
                .collect()
        })
        .collect();
    let mut all_dates: Vec<NaiveDate> = maps
        .iter()
        .flat_map(|m| m.keys().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    all_dates.sort();
    let mut dates = Vec::new();
    let mut warnings = Vec::new();
    for date in all_dates {
        if maps.iter().all(|m| m.contains_key(&date)) {
            dates.push(date);
        } else {
            let missing: Vec<&str> = symbols
                .iter()
                .zip(&maps)
                .filter(|(_, m)| !m.contains_key(&date))
                .map(|(s, _)| s.as_str())
                .collect();
            warnings.push(format!(
                "skipping {date}: missing symbols {}",
                missing.join(", ")
            ));
        }
    }
    if dates.len() < 3 {
        return Err(Error::Parameter(format!(
            "panel has only {} common dates; need at least 3",
            dates.len()
        )));
    }
    let mut adj_close = Array2::zeros((dates.len(), symbols.len()));
    for (i, date) in dates.iter().enumerate() {
        for (j, m) in maps.iter().enumerate() {
            adj_close[[i, j]] = m[date];
        }
    }
    Ok(PricePanel {
        symbols,
        dates,
        adj_close,
        warnings,
    })
}

impl PricePanel {
    /// Simple daily returns, shaped (dates - 1) × assets; row i is the
    /// return from dates[i] to dates[i + 1].
    pub fn daily_returns(&self) -> Array2<f64> {
        let (days, assets) = self.adj_close.dim();
        let mut out = Array2::zeros((days - 1, assets));
        for i in 0..days - 1 {
            for j in 0..assets {
                out[[i, j]] = self.adj_close[[i + 1, j]] / self.adj_close[[i, j]] - 1.0;
            }
        }
        out
    }
}

/// Backtest hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestConfig {
    /// Risk aversion κ.
    pub kappa: f64,
    /// One-way transaction cost in basis points applied to turnover.
    pub cost_bps: f64,
    /// Trailing days used for the covariance estimate.
    pub lookback: usize,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            kappa: 5.0,
            cost_bps: 5.0,
            lookback: 20,
        }
    }
}

impl BacktestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kappa <= 0.0 {
            return Err(Error::Parameter("kappa must be positive".into()));
        }
        if self.cost_bps < 0.0 {
            return Err(Error::Parameter("cost_bps must be non-negative".into()));
        }
        if self.lookback < 2 {
            return Err(Error::Parameter("lookback must be at least 2".into()));
        }
        Ok(())
    }
}

/// One rebalance day of the ledger.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LedgerRow {
    pub date: NaiveDate,
    pub weights: Vec<f64>,
    pub realized_return: f64,
    pub equity: f64,
}

/// Full backtest output: the daily ledger plus summary metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BacktestResult {
    pub symbols: Vec<String>,
    pub rows: Vec<LedgerRow>,
    pub metrics: PortfolioMetrics,
    pub warnings: Vec<String>,
}

/// Daily rebalance: at each date t (after the covariance lookback) the
/// caller supplies expected daily returns from fresh forecasts, weights are
/// solved by `markowitz`, and the position earns the next day's realized
/// return minus `cost_bps` on turnover.
pub fn backtest(
    panel: &PricePanel,
    cfg: &BacktestConfig,
    mut expected_returns: impl FnMut(usize, &PricePanel) -> Result<Vec<f64>>,
) -> Result<BacktestResult> {
    cfg.validate()?;
    let returns = panel.daily_returns();
    let assets = panel.symbols.len();
    if returns.nrows() <= cfg.lookback {
        return Err(Error::Parameter(format!(
            "panel too short: {} return days for lookback {}",
            returns.nrows(),
            cfg.lookback
        )));
    }
    let mut rows = Vec::new();
    let mut equity = 1.0;
    let mut prev_weights = vec![0.0; assets];
    // return row t is the move from date t to t + 1; we decide weights at
    // date t using information up to t and earn return row t.
    for t in cfg.lookback..returns.nrows() {
        let window = returns
            .slice(ndarray::s![t - cfg.lookback..t, ..])
            .to_owned();
        let (_, sigma) = panel_moments(&window)?;
        let mu = expected_returns(t, panel)?;
        if mu.len() != assets {
            return Err(Error::Parameter(format!(
                "expected-return vector has {} entries for {} assets",
                mu.len(),
                assets
            )));
        }
        let weights = markowitz(&mu, &sigma, cfg.kappa)?;
        let turnover: f64 = weights
            .iter()
            .zip(&prev_weights)
            .map(|(a, b)| (a - b).abs())
            .sum();
        let gross: f64 = weights
            .iter()
            .enumerate()
            .map(|(j, w)| w * returns[[t, j]])
            .sum();
        let realized = gross - turnover * cfg.cost_bps / 10_000.0;
        equity *= 1.0 + realized;
        rows.push(LedgerRow {
            date: panel.dates[t + 1],
            weights: weights.clone(),
            realized_return: realized,
            equity,
        });
        prev_weights = weights;
    }
    let metrics = metrics(&rows)?;
    Ok(BacktestResult {
        symbols: panel.symbols.clone(),
        rows,
        metrics,
        warnings: panel.warnings.clone(),
    })
}

/// Annualized summary statistics of a daily ledger.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PortfolioMetrics {
    pub total_return: f64,
    /// Population std of daily returns × √252.
    pub annualized_vol: f64,
    /// `min(equity / running-peak − 1)`, a non-positive number.
    pub max_drawdown: f64,
    /// `mean(daily) · 252 / (std(daily) · √252)` with zero risk-free rate.
    pub sharpe: f64,
    pub days: usize,
}

/// Computes metrics from ledger rows; errors on an empty ledger or a
/// zero-variance return stream (Sharpe undefined).
pub fn metrics(rows: &[LedgerRow]) -> Result<PortfolioMetrics> {
    if rows.is_empty() {
        return Err(Error::Parameter("ledger is empty".into()));
    }
    let daily: Vec<f64> = rows.iter().map(|r| r.realized_return).collect();
    let n = daily.len() as f64;
    let mean = daily.iter().sum::<f64>() / n;
    let var = daily.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 {
        return Err(Error::Domain(
            "daily returns have zero variance; Sharpe is undefined".into(),
        ));
    }
    let mut peak = f64::NEG_INFINITY;
    let mut max_drawdown: f64 = 0.0;
    for row in rows {
        peak = peak.max(row.equity);
        max_drawdown = max_drawdown.min(row.equity / peak - 1.0);
    }
    Ok(PortfolioMetrics {
        total_return: rows.last().unwrap().equity - 1.0,
        annualized_vol: std * (252.0f64).sqrt(),
        max_drawdown,
        sharpe: mean * 252.0 / (std * (252.0f64).sqrt()),
        days: rows.len(),
    })
}

/// Ledger CSV: `date,w_<symbol>...,realized_return,equity`.
pub fn ledger_to_csv(result: &BacktestResult) -> String {
    let mut out = String::from("date");
    for s in &result.symbols {
        out.push_str(&format!(",w_{s}"));
    }
    out.push_str(",realized_return,equity\n");
    for row in &result.rows {
        out.push_str(&row.date.to_string());
        for w in &row.weights {
            out.push_str(&format!(",{w}"));
        }
        out.push_str(&format!(",{},{}\n", row.realized_return, row.equity));
    }
    out
}
