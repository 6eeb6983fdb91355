//! Deterministic textual annotation of price windows and prompt assembly.
//!
//! Numbers are rendered to exactly 4 decimals in a fixed field order, so
//! identical inputs always produce byte-identical annotations and prompts.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::indicators::{compute_panel, window_stats, IndicatorConfig, WindowStats};
use crate::market::{OhlcvBar, PriceWindow};

/// Display labels for the panel tail, in rendering order.
const TAIL_LABELS: [(&str, &str); 11] = [
    ("sma", "SMA"),
    ("ema", "EMA"),
    ("momentum", "Momentum"),
    ("rsi", "RSI"),
    ("macd", "MACD"),
    ("williams_r", "WilliamsR"),
    ("cci", "CCI"),
    ("adx", "ADX"),
    ("boll_upper", "BollUpper"),
    ("boll_lower", "BollLower"),
    ("stoch_k", "StochK"),
];

/// Window statistics plus the latest defined indicator values and their
/// fixed-format textual rendering.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationReport {
    pub stats: WindowStats,
    /// `(label, latest defined value)` per indicator; `None` = lookback unmet.
    pub panel_tail: Vec<(String, Option<f64>)>,
    pub text: String,
}

fn fmt4(x: f64) -> String {
    format!("{x:.4}")
}

/// Renders statistics and indicator tails into the annotation text.
///
/// `history` must end at the window anchor; long-lookback indicators are
/// computed over the whole history rather than just the T-bar window.
pub fn annotate(
    window: &PriceWindow,
    history: &[OhlcvBar],
    config: &IndicatorConfig,
) -> Result<AnnotationReport> {
    if window.is_empty() {
        return Err(Error::Parameter("cannot annotate an empty window".into()));
    }
    let history = if history.is_empty() { &window.bars } else { history };
    if history.last().map(|b| b.date) != Some(window.anchor()) {
        return Err(Error::Parameter(
            "annotation history must end at the window anchor".into(),
        ));
    }
    let stats = window_stats(&window.adj_closes())?;
    let panel = compute_panel(history, config)?;
    let tail = panel.tail();

    let mut panel_tail = Vec::with_capacity(TAIL_LABELS.len());
    let mut text = format!(
        "stats: mean={} min={} max={} first={} last={}",
        fmt4(stats.mean),
        fmt4(stats.min),
        fmt4(stats.max),
        fmt4(stats.first),
        fmt4(stats.last),
    );
    text.push_str("\nindicators:");
    for (key, label) in TAIL_LABELS {
        let value = tail
            .iter()
            .find(|(name, _)| name == key)
            .and_then(|(_, v)| *v);
        text.push_str(&format!(
            " {label}={}",
            value.map(fmt4).unwrap_or_else(|| "unavailable".into())
        ));
        panel_tail.push((label.to_string(), value));
    }
    Ok(AnnotationReport {
        stats,
        panel_tail,
        text,
    })
}

/// Extracts every `name=number` value from annotation text, for round-trip
/// checks against the source values.
pub fn extract_numbers(text: &str) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for token in text.split_whitespace() {
        if let Some((name, value)) = token.split_once('=') {
            if let Ok(v) = value.parse::<f64>() {
                out.push((name.to_string(), v));
            }
        }
    }
    out
}

/// An assembled forecasting prompt.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prompt {
    /// The T normalized adjusted closes rendered to 4 decimals.
    pub raw_series_text: String,
    pub annotation_text: String,
    pub instruction: String,
    /// Full rendered prompt fed to the policy.
    pub text: String,
    /// The normalized series itself, kept for policies that condition on it.
    pub series: Vec<f64>,
    pub horizon: usize,
}

const DEFAULT_TEMPLATE: &str = "\
You are analyzing a normalized daily price series.
Series ({t} values): {series}
{annotations}
{instruction}
";

fn default_instruction(horizon: usize) -> String {
    format!(
        "Reason inside exactly one <think>...</think> block, then finish with a line \
         'FORECAST: v1, v2, ..., v{horizon}' containing exactly {horizon} comma-separated values."
    )
}

/// Named prompt templates with `{series}`, `{annotations}`, `{horizon}`,
/// `{t}` and `{instruction}` placeholders.
pub struct TemplateRegistry {
    templates: HashMap<String, String>,
    /// Upper bound on rendered prompt length, in bytes.
    pub budget: usize,
}

impl Default for TemplateRegistry {
    fn default() -> Self {
        let mut templates = HashMap::new();
        templates.insert("default".to_string(), DEFAULT_TEMPLATE.to_string());
        Self {
            templates,
            budget: 8192,
        }
    }
}

impl TemplateRegistry {
    pub fn register(&mut self, name: impl Into<String>, template: impl Into<String>) {
        self.templates.insert(name.into(), template.into());
    }

    pub fn register_file(&mut self, name: impl Into<String>, path: &Path) -> Result<()> {
        let body = std::fs::read_to_string(path)?;
        self.templates.insert(name.into(), body);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.templates.get(name).map(String::as_str)
    }
}

/// Assembles the prompt from the normalized window series and its
/// annotation report. Deterministic string assembly.
pub fn build_prompt(
    window: &PriceWindow,
    report: &AnnotationReport,
    horizon: usize,
    template: &str,
    registry: &TemplateRegistry,
) -> Result<Prompt> {
    let body = registry
        .get(template)
        .ok_or_else(|| Error::Parameter(format!("unknown prompt template '{template}'")))?;
    let series = window.normalized_adj();
    let raw_series_text = series.iter().map(|&v| fmt4(v)).collect::<Vec<_>>().join(", ");
    let instruction = default_instruction(horizon);
    let text = body
        .replace("{t}", &series.len().to_string())
        .replace("{series}", &raw_series_text)
        .replace("{annotations}", &report.text)
        .replace("{horizon}", &horizon.to_string())
        .replace("{instruction}", &instruction);
    if text.len() > registry.budget {
        return Err(Error::Parameter(format!(
            "rendered prompt length {} exceeds budget {}",
            text.len(),
            registry.budget
        )));
    }
    Ok(Prompt {
        raw_series_text,
        annotation_text: report.text.clone(),
        instruction,
        text,
        series,
        horizon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{make_windows, synth_market, Regime};

    fn window_and_history() -> (PriceWindow, Vec<OhlcvBar>) {
        let bars = synth_market(8, 80, &Regime::default()).unwrap();
        let pairs = make_windows("S", &bars, 10, 10, 1).unwrap().pairs;
        let pair = pairs.last().unwrap().clone();
        let anchor = pair.window.anchor();
        let history: Vec<OhlcvBar> = bars.iter().filter(|b| b.date <= anchor).cloned().collect();
        (pair.window, history)
    }

    fn constant_window(n: usize) -> PriceWindow {
        let bars: Vec<OhlcvBar> = synth_market(
            1,
            n,
            &Regime {
                drift: 0.0,
                volatility: 0.0,
                start_price: 1.0,
            },
        )
        .unwrap();
        PriceWindow::new("C", bars).unwrap()
    }

    #[test]
    fn constant_window_annotation() {
        let window = constant_window(10);
        let history = window.bars.clone();
        let report = annotate(&window, &history, &IndicatorConfig::default()).unwrap();
        assert!(report.text.contains("mean=1.0000"));
        // rsi_n = 14 > 9 available changes, so RSI lookback is unmet
        assert!(report.text.contains("RSI=unavailable"));
        // bollinger needs 20 bars
        assert!(report.text.contains("BollUpper=unavailable"));
        // sma_n = 10 is satisfied
        assert!(report.text.contains("SMA=1.0000"));
    }

    #[test]
    fn constant_window_bollinger_bands_collapse() {
        let window = constant_window(25);
        let history = window.bars.clone();
        let report = annotate(&window, &history, &IndicatorConfig::default()).unwrap();
        let upper = report.panel_tail.iter().find(|(n, _)| n == "BollUpper").unwrap();
        let lower = report.panel_tail.iter().find(|(n, _)| n == "BollLower").unwrap();
        assert_eq!(upper.1, lower.1);
    }

    #[test]
    fn annotation_is_deterministic() {
        let (window, history) = window_and_history();
        let a = annotate(&window, &history, &IndicatorConfig::default()).unwrap();
        let b = annotate(&window, &history, &IndicatorConfig::default()).unwrap();
        assert_eq!(a.text, b.text);
    }

    #[test]
    fn annotation_numbers_round_trip_against_indicators() {
        let (window, history) = window_and_history();
        let config = IndicatorConfig::default();
        let report = annotate(&window, &history, &config).unwrap();
        let numbers = extract_numbers(&report.text);
        assert!(!numbers.is_empty());

        let panel = compute_panel(&history, &config).unwrap();
        let tail = panel.tail();
        let stats = window_stats(&window.adj_closes()).unwrap();
        for (name, value) in numbers {
            let source = match name.as_str() {
                "mean" => stats.mean,
                "min" => stats.min,
                "max" => stats.max,
                "first" => stats.first,
                "last" => stats.last,
                "SMA" => tail.iter().find(|(n, _)| n == "sma").unwrap().1.unwrap(),
                "EMA" => tail.iter().find(|(n, _)| n == "ema").unwrap().1.unwrap(),
                "Momentum" => tail.iter().find(|(n, _)| n == "momentum").unwrap().1.unwrap(),
                "RSI" => tail.iter().find(|(n, _)| n == "rsi").unwrap().1.unwrap(),
                "MACD" => tail.iter().find(|(n, _)| n == "macd").unwrap().1.unwrap(),
                "WilliamsR" => tail.iter().find(|(n, _)| n == "williams_r").unwrap().1.unwrap(),
                "CCI" => tail.iter().find(|(n, _)| n == "cci").unwrap().1.unwrap(),
                "ADX" => tail.iter().find(|(n, _)| n == "adx").unwrap().1.unwrap(),
                "BollUpper" => tail.iter().find(|(n, _)| n == "boll_upper").unwrap().1.unwrap(),
                "BollLower" => tail.iter().find(|(n, _)| n == "boll_lower").unwrap().1.unwrap(),
                "StochK" => tail.iter().find(|(n, _)| n == "stoch_k").unwrap().1.unwrap(),
                other => panic!("unexpected field {other}"),
            };
            assert!(
                (value - source).abs() <= 5e-5,
                "{name}: text {value} vs source {source}"
            );
        }
    }

    #[test]
    fn empty_window_is_an_error() {
        let window = constant_window(10);
        let mut empty = window.clone();
        empty.bars.clear();
        assert!(annotate(&empty, &window.bars, &IndicatorConfig::default()).is_err());
    }

    #[test]
    fn prompt_contains_exactly_t_values_and_is_deterministic() {
        let (window, history) = window_and_history();
        let report = annotate(&window, &history, &IndicatorConfig::default()).unwrap();
        let registry = TemplateRegistry::default();
        let p1 = build_prompt(&window, &report, 10, "default", &registry).unwrap();
        let p2 = build_prompt(&window, &report, 10, "default", &registry).unwrap();
        assert_eq!(p1.text, p2.text);
        assert_eq!(p1.raw_series_text.split(", ").count(), 10);
        assert_eq!(p1.text.matches("<think>").count(), 1);
    }

    #[test]
    fn distinct_windows_give_distinct_prompts() {
        let bars = synth_market(8, 80, &Regime::default()).unwrap();
        let pairs = make_windows("S", &bars, 10, 10, 1).unwrap().pairs;
        let registry = TemplateRegistry::default();
        let config = IndicatorConfig::default();
        let prompt_for = |pair: &crate::market::WindowPair| {
            let anchor = pair.window.anchor();
            let history: Vec<OhlcvBar> = bars.iter().filter(|b| b.date <= anchor).cloned().collect();
            let report = annotate(&pair.window, &history, &config).unwrap();
            build_prompt(&pair.window, &report, 10, "default", &registry).unwrap()
        };
        let a = prompt_for(&pairs[0]);
        let b = prompt_for(&pairs[1]);
        assert_ne!(a.text, b.text);
    }

    #[test]
    fn unknown_template_is_an_error() {
        let (window, history) = window_and_history();
        let report = annotate(&window, &history, &IndicatorConfig::default()).unwrap();
        let registry = TemplateRegistry::default();
        assert!(build_prompt(&window, &report, 10, "nope", &registry).is_err());
    }

    #[test]
    fn template_files_are_loadable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tpl.txt");
        std::fs::write(&path, "S: {series}\nA: {annotations}\nH: {horizon}\n{instruction}").unwrap();
        let mut registry = TemplateRegistry::default();
        registry.register_file("custom", &path).unwrap();
        let (window, history) = window_and_history();
        let report = annotate(&window, &history, &IndicatorConfig::default()).unwrap();
        let prompt = build_prompt(&window, &report, 10, "custom", &registry).unwrap();
        assert!(prompt.text.starts_with("S: "));
        assert!(prompt.text.contains("H: 10"));
    }
}
