//! Static figures and a summary table for evaluation reports.
//!
//! Figures are plain SVG written by hand; no plotting backend is needed.
//! Summary values are copied from the report fields and never recomputed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::EvalReport;

/// Accuracy splits in display order.
pub const SPLITS: [&str; 5] = ["overall", "hard", "easy", "rn>=2", "rn<=1"];

const PALETTE: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];
const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 48.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub split: String,
    /// `None` for an empty split.
    pub accuracy: Option<f64>,
    pub count: usize,
}

fn split_values(r: &EvalReport) -> [(Option<f64>, usize); 5] {
    [
        (Some(r.overall_acc), r.count),
        (r.hard_acc, r.hard_count),
        (r.easy_acc, r.easy_count),
        (r.rn_ge2_acc, r.rn_ge2_count),
        (r.rn_le1_acc, r.rn_le1_count),
    ]
}

pub fn summary_rows(reports: &[EvalReport]) -> Vec<SummaryRow> {
    reports
        .iter()
        .flat_map(|r| {
            SPLITS.iter().zip(split_values(r)).map(|(split, (accuracy, count))| SummaryRow {
                label: r.label.clone(),
                split: split.to_string(),
                accuracy,
                count,
            })
        })
        .collect()
}

/// CSV with a header row. Floats use the shortest exact decimal form, so
/// parsing a cell gives back the report value bit for bit.
pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("label,split,accuracy,count\n");
    for r in rows {
        let acc = r.accuracy.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{}", csv_field(&r.label), r.split, acc, r.count);
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Svg(String);

impl Svg {
    fn new(title: &str) -> Self {
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"11\">\n"
        );
        let _ = writeln!(s, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
        let _ = writeln!(s, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>", WIDTH / 2.0, escape(title));
        Self(s)
    }

    fn axes(&mut self, y_label: &str, y_max: f64) {
        let (x0, y0, y1) = (MARGIN, HEIGHT - MARGIN, MARGIN);
        let _ = writeln!(self.0, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{}\" y2=\"{y0}\" stroke=\"black\"/>", WIDTH - MARGIN);
        let _ = writeln!(self.0, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>");
        for k in 0..=4 {
            let v = y_max * k as f64 / 4.0;
            let y = y0 - (y0 - y1) * k as f64 / 4.0;
            let _ = writeln!(self.0, "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{:.2}</text>", x0 - 4.0, y + 4.0, v);
        }
        let _ = writeln!(
            self.0,
            "<text x=\"14\" y=\"{}\" transform=\"rotate(-90 14 {})\" text-anchor=\"middle\">{}</text>",
            HEIGHT / 2.0,
            HEIGHT / 2.0,
            escape(y_label)
        );
    }

    fn finish(mut self) -> String {
        self.0.push_str("</svg>\n");
        self.0
    }
}

fn plot_height() -> f64 {
    HEIGHT - 2.0 * MARGIN
}

/// Grouped accuracy bars: one group per split, one bar per report. Empty
/// splits get a zero-height bar marked `n/a`.
pub fn accuracy_bars_svg(reports: &[EvalReport], title: &str) -> String {
    let mut svg = Svg::new(title);
    svg.axes("accuracy", 1.0);
    let group_w = (WIDTH - 2.0 * MARGIN) / SPLITS.len() as f64;
    let bar_w = group_w * 0.8 / reports.len().max(1) as f64;
    let base = HEIGHT - MARGIN;
    for (g, split) in SPLITS.iter().enumerate() {
        let gx = MARGIN + g as f64 * group_w + group_w * 0.1;
        for (k, r) in reports.iter().enumerate() {
            let (acc, count) = split_values(r)[g];
            let h = acc.unwrap_or(0.0) * plot_height();
            let x = gx + k as f64 * bar_w;
            let _ = writeln!(
                svg.0,
                "<rect class=\"bar\" data-label=\"{}\" data-split=\"{}\" data-count=\"{count}\" x=\"{x:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{h:.2}\" fill=\"{}\"/>",
                escape(&r.label),
                escape(split),
                base - h,
                bar_w * 0.95,
                PALETTE[k % PALETTE.len()]
            );
            let tag = acc.map_or("n/a".to_string(), |a| format!("{:.1}", 100.0 * a));
            let _ = writeln!(
                svg.0,
                "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"9\">{tag}</text>",
                x + bar_w * 0.475,
                base - h - 3.0
            );
        }
        let _ = writeln!(
            svg.0,
            "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            gx + group_w * 0.4,
            base + 16.0,
            escape(split)
        );
    }
    for (k, r) in reports.iter().enumerate() {
        let y = MARGIN + 14.0 * k as f64;
        let x = WIDTH - MARGIN - 120.0;
        let _ = writeln!(svg.0, "<rect x=\"{x}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/>", y - 9.0, PALETTE[k % PALETTE.len()]);
        let _ = writeln!(svg.0, "<text class=\"legend\" x=\"{}\" y=\"{y}\">{}</text>", x + 14.0, escape(&r.label));
    }
    svg.finish()
}

/// Training loss (left scale) and accuracy curves of one report's history.
pub fn loss_curve_svg(report: &EvalReport) -> String {
    let mut svg = Svg::new(&format!("{} training curves", report.label));
    let h = &report.history;
    let max_loss = h.iter().map(|s| s.loss.total).fold(0.0f64, f64::max).max(1e-12);
    svg.axes("loss (scaled to max)", max_loss);
    let span = (h.len().max(2) - 1) as f64;
    let x_of = |i: usize| MARGIN + (WIDTH - 2.0 * MARGIN) * i as f64 / span;
    let y_of = |v: f64, top: f64| HEIGHT - MARGIN - plot_height() * (v / top);
    let mut line = |name: &str, color: &str, values: Vec<Option<f64>>, top: f64| {
        let pts: Vec<String> = values
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| format!("{:.2},{:.2}", x_of(i), y_of(v, top))))
            .collect();
        if !pts.is_empty() {
            let _ = writeln!(
                svg.0,
                "<polyline class=\"curve\" data-name=\"{name}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
                pts.join(" ")
            );
        }
    };
    line("loss", PALETTE[0], h.iter().map(|s| Some(s.loss.total)).collect(), max_loss);
    line("train_acc", PALETTE[1], h.iter().map(|s| Some(s.train_acc)).collect(), 1.0);
    line("val_acc", PALETTE[2], h.iter().map(|s| s.val_acc).collect(), 1.0);
    for (k, name) in ["loss", "train_acc", "val_acc (right scale 0..1)"].iter().enumerate() {
        let y = MARGIN + 14.0 * k as f64;
        let _ = writeln!(svg.0, "<text x=\"{}\" y=\"{y}\" fill=\"{}\">{name}</text>", WIDTH - MARGIN - 150.0, PALETTE[k]);
    }
    let _ = writeln!(svg.0, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">epoch</text>", WIDTH / 2.0, HEIGHT - 12.0);
    svg.finish()
}

#[derive(Clone, Debug, Default)]
pub struct PlotOutputs {
    pub files: Vec<PathBuf>,
}

/// Writes per-report accuracy bars and loss curves, a grouped comparison when
/// there are several reports, and `summary.csv` / `summary.json`.
pub fn plot_reports(reports: &[EvalReport], out_dir: impl AsRef<Path>) -> Result<PlotOutputs> {
    if reports.is_empty() {
        return Err(Error::Input("at least one report is needed".into()));
    }
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut out = PlotOutputs::default();
    let mut write = |name: String, body: &str| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, body)?;
        out.files.push(path);
        Ok(())
    };
    for (k, r) in reports.iter().enumerate() {
        let stem = format!("{k:02}_{}", file_stem(&r.label));
        write(format!("{stem}_accuracy.svg"), &accuracy_bars_svg(std::slice::from_ref(r), &r.label))?;
        if !r.history.is_empty() {
            write(format!("{stem}_curves.svg"), &loss_curve_svg(r))?;
        }
    }
    if reports.len() > 1 {
        write("comparison.svg".into(), &accuracy_bars_svg(reports, "accuracy by split"))?;
    }
    let rows = summary_rows(reports);
    write("summary.csv".into(), &summary_csv(&rows))?;
    write("summary.json".into(), &serde_json::to_string_pretty(&rows)?)?;
    Ok(out)
}

fn file_stem(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}
