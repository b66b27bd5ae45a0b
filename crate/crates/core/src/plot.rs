//! Self-contained SVG line plots of sweep reports.
//!
//! One polyline per (model, attack kind) series, plus one dashed horizontal
//! line per model baseline. ISR in dB on the x axis, NMSE in dB on the y
//! axis, ranges padded by 5% around the data. Output bytes are a pure
//! function of the input reports.

use crate::eval::{gamma_label, AttackKind, EvalError, EvalPoint, SweepReport};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

const WIDTH: f64 = 860.0;
const HEIGHT: f64 = 540.0;
const MARGIN_LEFT: f64 = 72.0;
const MARGIN_RIGHT: f64 = 230.0;
const MARGIN_TOP: f64 = 42.0;
const MARGIN_BOTTOM: f64 = 58.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

/// Pads `[lo, hi]` by 5% of the span on both sides (or by one unit for a
/// degenerate span).
pub(crate) fn padded_range(lo: f64, hi: f64) -> (f64, f64) {
    let span = hi - lo;
    let pad = if span > 0.0 { 0.05 * span } else { 1.0 };
    (lo - pad, hi + pad)
}

struct Series<'a> {
    label: String,
    kind: AttackKind,
    points: Vec<&'a EvalPoint>,
}

fn collect_series(reports: &[SweepReport]) -> Vec<Series<'_>> {
    let mut series: Vec<Series> = Vec::new();
    for report in reports {
        for p in &report.points {
            if p.kind == AttackKind::None || p.isr_db.is_none() {
                continue;
            }
            let label = format!("{} {}", p.model.label(), p.kind);
            match series
                .iter_mut()
                .find(|s| s.label == label)
            {
                Some(s) => s.points.push(p),
                None => series.push(Series {
                    label,
                    kind: p.kind,
                    points: vec![p],
                }),
            }
        }
    }
    series
}

/// Renders reports to a standalone SVG file with no external references.
pub fn render_plot(reports: &[SweepReport], path: &Path) -> Result<(), EvalError> {
    let svg = render_svg(reports)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(svg.as_bytes())?;
    Ok(())
}

pub fn render_svg(reports: &[SweepReport]) -> Result<String, EvalError> {
    if reports.is_empty() || reports.iter().all(|r| r.points.is_empty()) {
        return Err(EvalError::EmptyReport);
    }
    let series = collect_series(reports);

    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for s in &series {
        for p in &s.points {
            xs.push(p.isr_db.unwrap() as f64);
            if p.nmse_db.is_finite() {
                ys.push(p.nmse_db);
            }
        }
    }
    for r in reports {
        if r.baseline.nmse_db.is_finite() {
            ys.push(r.baseline.nmse_db);
        }
    }
    if xs.is_empty() || ys.is_empty() {
        return Err(EvalError::EmptyReport);
    }
    let (x_lo, x_hi) = padded_range(
        xs.iter().cloned().fold(f64::INFINITY, f64::min),
        xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    let (y_lo, y_hi) = padded_range(
        ys.iter().cloned().fold(f64::INFINITY, f64::min),
        ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );

    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = move |v: f64| MARGIN_LEFT + (v - x_lo) / (x_hi - x_lo) * plot_w;
    let sy = move |v: f64| {
        let v = v.clamp(y_lo, y_hi);
        MARGIN_TOP + (y_hi - v) / (y_hi - y_lo) * plot_h
    };

    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    let _ = writeln!(
        out,
        "<rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>"
    );

    // Axes.
    let _ = writeln!(
        out,
        "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"none\" stroke=\"black\"/>",
        MARGIN_LEFT, MARGIN_TOP, plot_w, plot_h
    );
    for i in 0..=5 {
        let fx = x_lo + (x_hi - x_lo) * i as f64 / 5.0;
        let px = sx(fx);
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"middle\">{:.1}</text>",
            px,
            HEIGHT - MARGIN_BOTTOM + 18.0,
            fx
        );
        let fy = y_lo + (y_hi - y_lo) * i as f64 / 5.0;
        let py = sy(fy);
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"end\">{:.1}</text>",
            MARGIN_LEFT - 6.0,
            py + 4.0,
            fy
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"14\" text-anchor=\"middle\">ISR (dB)</text>",
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 14.0
    );
    let _ = writeln!(
        out,
        "<text x=\"18\" y=\"{:.2}\" font-size=\"14\" text-anchor=\"middle\" transform=\"rotate(-90 18 {:.2})\">NMSE (dB)</text>",
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0
    );

    // Baselines: one dashed horizontal line per report.
    for (ri, r) in reports.iter().enumerate() {
        let y = sy(r.baseline.nmse_db);
        let color = PALETTE[ri % PALETTE.len()];
        let _ = writeln!(
            out,
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"{}\" stroke-dasharray=\"8 5\"/>",
            MARGIN_LEFT,
            y,
            MARGIN_LEFT + plot_w,
            y,
            color
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" fill=\"{}\">baseline {} g={}</text>",
            WIDTH - MARGIN_RIGHT + 8.0,
            y + 4.0,
            color,
            r.baseline.model.scenario,
            gamma_label(r.baseline.model.gamma),
        );
    }

    // Series polylines and legend.
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let marker = match s.kind {
            AttackKind::Adversarial => "square",
            _ => "circle",
        };
        let mut pts = String::new();
        for p in &s.points {
            let _ = write!(
                pts,
                "{:.2},{:.2} ",
                sx(p.isr_db.unwrap() as f64),
                sy(p.nmse_db)
            );
        }
        let _ = writeln!(
            out,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.8\"/>",
            pts.trim_end(),
            color
        );
        for p in &s.points {
            let (px, py) = (sx(p.isr_db.unwrap() as f64), sy(p.nmse_db));
            if marker == "square" {
                let _ = writeln!(
                    out,
                    "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"6\" height=\"6\" fill=\"{}\"/>",
                    px - 3.0,
                    py - 3.0,
                    color
                );
            } else {
                let _ = writeln!(
                    out,
                    "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{}\"/>",
                    px, py, color
                );
            }
        }
        let ly = MARGIN_TOP + 14.0 + si as f64 * 18.0;
        let _ = writeln!(
            out,
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"{}\" stroke-width=\"1.8\"/>",
            WIDTH - MARGIN_RIGHT + 8.0,
            ly - 4.0,
            WIDTH - MARGIN_RIGHT + 28.0,
            ly - 4.0,
            color
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\">{}</text>",
            WIDTH - MARGIN_RIGHT + 34.0,
            ly,
            s.label
        );
    }

    out.push_str("</svg>\n");
    Ok(out)
}
