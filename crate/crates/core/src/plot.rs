//! Static SVG plots for run reports: equity curves and forecast overlays.
//!
//! The renderer is deliberately tiny — polylines on a fixed canvas with a
//! light axis box — so reports stay dependency-free and diff-friendly.

use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 40.0;

/// One named series to draw.
#[derive(Debug, Clone)]
pub struct PlotSeries {
    pub label: String,
    pub color: String,
    /// (x, y) points in data coordinates.
    pub points: Vec<(f64, f64)>,
}

fn data_bounds(series: &[PlotSeries]) -> Result<(f64, f64, f64, f64)> {
    let mut x_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for s in series {
        for &(x, y) in &s.points {
            if !x.is_finite() || !y.is_finite() {
                return Err(Error::Parameter(format!(
                    "non-finite point in series '{}'",
                    s.label
                )));
            }
            x_min = x_min.min(x);
            x_max = x_max.max(x);
            y_min = y_min.min(y);
            y_max = y_max.max(y);
        }
    }
    if !x_min.is_finite() {
        return Err(Error::Parameter("nothing to plot".into()));
    }
    if (x_max - x_min).abs() < f64::EPSILON {
        x_max = x_min + 1.0;
    }
    if (y_max - y_min).abs() < f64::EPSILON {
        y_max = y_min + 1.0;
        y_min -= 1.0;
    }
    Ok((x_min, x_max, y_min, y_max))
}

/// Renders the series into a complete SVG document.
pub fn render_svg(title: &str, series: &[PlotSeries]) -> Result<String> {
    let (x_min, x_max, y_min, y_max) = data_bounds(series)?;
    let sx = |x: f64| MARGIN + (x - x_min) / (x_max - x_min) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y_min) / (y_max - y_min) * (HEIGHT - 2.0 * MARGIN);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{}\" height=\"{}\" \
         fill=\"none\" stroke=\"#ccc\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"14\">{}</text>\n",
        WIDTH - 2.0 * MARGIN,
        HEIGHT - 2.0 * MARGIN,
        WIDTH / 2.0,
        xml_escape(title),
    );
    // y-axis extremes
    svg.push_str(&format!(
        "<text x=\"4\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\">{y_max:.4}</text>\n\
         <text x=\"4\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\">{y_min:.4}</text>\n",
        MARGIN + 4.0,
        HEIGHT - MARGIN,
    ));
    for (i, s) in series.iter().enumerate() {
        if s.points.is_empty() {
            continue;
        }
        let path: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            s.color,
            path.join(" ")
        ));
        let ly = MARGIN + 16.0 * i as f64 + 12.0;
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{ly}\" font-family=\"sans-serif\" font-size=\"11\" \
             fill=\"{}\">{}</text>\n",
            WIDTH - MARGIN - 130.0,
            s.color,
            xml_escape(&s.label)
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn xml_escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Equity-curve plot from ledger equities indexed by day.
pub fn equity_svg(equities: &[f64]) -> Result<String> {
    let points = equities
        .iter()
        .enumerate()
        .map(|(i, &e)| (i as f64, e))
        .collect();
    render_svg(
        "Backtest equity",
        &[PlotSeries {
            label: "equity".into(),
            color: "#1f77b4".into(),
            points,
        }],
    )
}

/// History plus unconditional and guided forecast paths; the forecasts are
/// drawn after the history on the shared step axis.
pub fn forecast_svg(history: &[f64], y_uncond: &[f64], y_final: &[f64]) -> Result<String> {
    let h = history.len();
    let to_points = |offset: usize, values: &[f64]| -> Vec<(f64, f64)> {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| ((offset + i) as f64, v))
            .collect()
    };
    render_svg(
        "Forecast",
        &[
            PlotSeries {
                label: "history".into(),
                color: "#333333".into(),
                points: to_points(0, history),
            },
            PlotSeries {
                label: "unconditional".into(),
                color: "#1f77b4".into(),
                points: to_points(h, y_uncond),
            },
            PlotSeries {
                label: "guided".into(),
                color: "#d62728".into(),
                points: to_points(h, y_final),
            },
        ],
    )
}
