//! Report emission: evaluation CSVs, throughput CSVs, and grouped-bar SVG
//! charts.
//!
//! The evaluation CSV header is fixed:
//! `testset,iou_threshold,tp,fp,fn,precision,recall,f1,ap,mean_iou`.
//! Real values carry six decimal places; metrics with an empty denominator
//! are written as the literal token `undefined` and survive a round trip as
//! `None`.
//!
//! Charts are static SVG with one group per IoU threshold and one bar per
//! metric per model, the same layout as grouped-bar evaluation figures.
//! Output is byte-deterministic for identical inputs: no timestamps, no
//! randomness. Undefined metrics render as hatched zero-height markers at
//! the baseline instead of bars.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::bench::{ComparisonRow, ThroughputReport};
use crate::metrics::{ConfusionCounts, EvalReport};

pub const EVAL_CSV_HEADER: &str = "testset,iou_threshold,tp,fp,fn,precision,recall,f1,ap,mean_iou";
pub const THROUGHPUT_CSV_HEADER: &str = "model,hardware,image_count,warmup,mean_fps";
pub const LATENCY_CSV_HEADER: &str = "index,latency_ms";

/// Vertical extent of the chart's plot area in SVG units; a metric value of
/// 1.0 maps to exactly this bar height.
pub const PLOT_HEIGHT: f64 = 200.0;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} has header {got:?}, expected {expected:?}")]
    HeaderMismatch {
        path: PathBuf,
        expected: String,
        got: String,
    },
    #[error("{path}:{line}: bad value in column `{column}`: {value:?}")]
    BadValue {
        path: PathBuf,
        line: usize,
        column: &'static str,
        value: String,
    },
    #[error("{path} contains no data rows")]
    EmptyCsv { path: PathBuf },
    #[error("nothing to chart")]
    NoInput,
    #[error("report row not traceable: {0}")]
    Untraceable(String),
}

fn fmt_metric(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{v:.6}"),
        None => "undefined".to_string(),
    }
}

fn eval_row(r: &EvalReport) -> String {
    format!(
        "{},{:.6},{},{},{},{},{},{},{},{}",
        r.testset_name,
        r.iou_threshold,
        r.counts.true_positives,
        r.counts.false_positives,
        r.counts.false_negatives,
        fmt_metric(r.precision),
        fmt_metric(r.recall),
        fmt_metric(r.f1),
        fmt_metric(r.ap),
        fmt_metric(r.mean_iou),
    )
}

/// Serialize evaluation reports to the fixed CSV format.
pub fn eval_csv_string(reports: &[EvalReport]) -> String {
    let mut out = String::from(EVAL_CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&eval_row(r));
        out.push('\n');
    }
    out
}

pub fn write_eval_csv(reports: &[EvalReport], path: &Path) -> Result<(), ReportError> {
    std::fs::write(path, eval_csv_string(reports)).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_metric(
    field: &str,
    path: &Path,
    line: usize,
    column: &'static str,
) -> Result<Option<f64>, ReportError> {
    if field == "undefined" {
        return Ok(None);
    }
    field
        .parse::<f64>()
        .map(Some)
        .map_err(|_| ReportError::BadValue {
            path: path.to_path_buf(),
            line,
            column,
            value: field.to_string(),
        })
}

/// Read an evaluation CSV produced by [`write_eval_csv`] (or shipped as a
/// reference fixture). The header must match exactly.
pub fn read_eval_csv(path: &Path) -> Result<Vec<EvalReport>, ReportError> {
    let text = std::fs::read_to_string(path).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| ReportError::EmptyCsv {
        path: path.to_path_buf(),
    })?;
    if header.trim() != EVAL_CSV_HEADER {
        return Err(ReportError::HeaderMismatch {
            path: path.to_path_buf(),
            expected: EVAL_CSV_HEADER.to_string(),
            got: header.to_string(),
        });
    }

    let mut reports = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(ReportError::BadValue {
                path: path.to_path_buf(),
                line: line_no,
                column: "row",
                value: line.to_string(),
            });
        }
        let parse_usize = |field: &str, column: &'static str| {
            field.parse::<usize>().map_err(|_| ReportError::BadValue {
                path: path.to_path_buf(),
                line: line_no,
                column,
                value: field.to_string(),
            })
        };
        let iou_threshold = parse_metric(fields[1], path, line_no, "iou_threshold")?
            .ok_or_else(|| ReportError::BadValue {
                path: path.to_path_buf(),
                line: line_no,
                column: "iou_threshold",
                value: fields[1].to_string(),
            })?;
        reports.push(EvalReport {
            testset_name: fields[0].to_string(),
            iou_threshold,
            counts: ConfusionCounts::new(
                parse_usize(fields[2], "tp")?,
                parse_usize(fields[3], "fp")?,
                parse_usize(fields[4], "fn")?,
            ),
            precision: parse_metric(fields[5], path, line_no, "precision")?,
            recall: parse_metric(fields[6], path, line_no, "recall")?,
            f1: parse_metric(fields[7], path, line_no, "f1")?,
            ap: parse_metric(fields[8], path, line_no, "ap")?,
            mean_iou: parse_metric(fields[9], path, line_no, "mean_iou")?,
        });
    }
    if reports.is_empty() {
        return Err(ReportError::EmptyCsv {
            path: path.to_path_buf(),
        });
    }
    Ok(reports)
}

/// Write throughput summaries plus the per-image latency sidecar.
pub fn write_throughput_csv(reports: &[ThroughputReport], path: &Path) -> Result<(), ReportError> {
    let mut out = String::from(THROUGHPUT_CSV_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6}",
            r.model_name, r.hardware_label, r.image_count, r.warmup_count, r.mean_fps
        );
    }
    std::fs::write(path, out).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_latency_csv(report: &ThroughputReport, path: &Path) -> Result<(), ReportError> {
    let mut out = String::from(LATENCY_CSV_HEADER);
    out.push('\n');
    for (i, ms) in report.per_image_ms.iter().enumerate() {
        let _ = writeln!(out, "{i},{ms:.6}");
    }
    std::fs::write(path, out).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Human-readable comparison block for measured-versus-reference FPS.
pub fn comparison_text(rows: &[ComparisonRow]) -> String {
    let mut out = String::from("model,hardware,measured_fps,reference_fps,ratio\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6}",
            r.model, r.hardware, r.measured_fps, r.reference_fps, r.ratio
        );
    }
    out
}

/// The evaluation rows of one model, as charted.
#[derive(Debug, Clone)]
pub struct ModelSeries {
    pub model: String,
    pub rows: Vec<EvalReport>,
}

/// Everything one reporting run carries: evaluation series, throughput rows,
/// and metadata recording which tool version and seeds produced them.
#[derive(Debug, Clone)]
pub struct ReportBundle {
    pub eval: Vec<ModelSeries>,
    pub bench: Vec<ThroughputReport>,
    pub metadata: BundleMetadata,
}

#[derive(Debug, Clone)]
pub struct BundleMetadata {
    pub tool_version: String,
    pub seeds: Vec<u64>,
}

impl ReportBundle {
    /// Assemble a bundle, rejecting rows that cannot be traced to a named
    /// model and test set.
    pub fn new(
        eval: Vec<ModelSeries>,
        bench: Vec<ThroughputReport>,
        seeds: Vec<u64>,
    ) -> Result<Self, ReportError> {
        for series in &eval {
            if series.model.is_empty() {
                return Err(ReportError::Untraceable("evaluation series without a model name".into()));
            }
            if let Some(row) = series.rows.iter().find(|r| r.testset_name.is_empty()) {
                return Err(ReportError::Untraceable(format!(
                    "row of model `{}` at IoU {} has no testset name",
                    series.model, row.iou_threshold
                )));
            }
        }
        if let Some(r) = bench.iter().find(|r| r.model_name.is_empty()) {
            return Err(ReportError::Untraceable(format!(
                "throughput row on `{}` has no model name",
                r.hardware_label
            )));
        }
        Ok(Self {
            eval,
            bench,
            metadata: BundleMetadata {
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                seeds,
            },
        })
    }

    pub fn render_chart(&self, title: &str) -> Result<String, ReportError> {
        render_bar_chart(&self.eval, title)
    }
}

type MetricExtractor = fn(&EvalReport) -> Option<f64>;

const METRICS: [(&str, MetricExtractor); 5] = [
    ("precision", |r| r.precision),
    ("recall", |r| r.recall),
    ("f1", |r| r.f1),
    ("ap", |r| r.ap),
    ("mean_iou", |r| r.mean_iou),
];

const PALETTE: [&str; 6] = ["#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#b07aa1", "#76b7b2"];

const MARGIN_LEFT: f64 = 52.0;
const MARGIN_TOP: f64 = 48.0;
const BAR_WIDTH: f64 = 13.0;
const METRIC_GAP: f64 = 12.0;
const GROUP_GAP: f64 = 34.0;

fn fmt_coord(v: f64) -> String {
    format!("{v:.4}")
}

/// Render a grouped-bar chart: one group per IoU threshold, one bar per
/// metric per model. A metric value of `v` yields a bar of height exactly
/// `v * PLOT_HEIGHT` SVG units; undefined metrics get a hatched baseline
/// marker instead.
pub fn render_bar_chart(series: &[ModelSeries], title: &str) -> Result<String, ReportError> {
    if series.is_empty() || series.iter().all(|s| s.rows.is_empty()) {
        return Err(ReportError::NoInput);
    }

    let mut thresholds: Vec<f64> = series
        .iter()
        .flat_map(|s| s.rows.iter().map(|r| r.iou_threshold))
        .collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).expect("thresholds are finite"));
    thresholds.dedup();

    let n_models = series.len();
    let metric_width = n_models as f64 * BAR_WIDTH;
    let group_width =
        METRICS.len() as f64 * metric_width + (METRICS.len() - 1) as f64 * METRIC_GAP;
    let chart_width =
        MARGIN_LEFT + thresholds.len() as f64 * (group_width + GROUP_GAP) + 16.0;
    let legend_height = 18.0 * n_models as f64;
    let chart_height = MARGIN_TOP + PLOT_HEIGHT + 64.0 + legend_height;
    let baseline = MARGIN_TOP + PLOT_HEIGHT;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\">",
        w = fmt_coord(chart_width),
        h = fmt_coord(chart_height),
    );
    svg.push_str(
        "  <defs>\n    <pattern id=\"hatch\" width=\"4\" height=\"4\" \
         patternUnits=\"userSpaceOnUse\" patternTransform=\"rotate(45)\">\n      \
         <rect width=\"4\" height=\"4\" fill=\"#ffffff\"/>\n      \
         <line x1=\"0\" y1=\"0\" x2=\"0\" y2=\"4\" stroke=\"#888888\" stroke-width=\"1.5\"/>\n    \
         </pattern>\n  </defs>\n",
    );
    let _ = writeln!(
        svg,
        "  <text x=\"{}\" y=\"20\" font-size=\"14\" font-weight=\"bold\">{}</text>",
        fmt_coord(MARGIN_LEFT),
        xml_escape(title)
    );

    // Y axis with gridlines every 0.25.
    for step in 0..=4 {
        let value = f64::from(step) * 0.25;
        let y = baseline - value * PLOT_HEIGHT;
        let _ = writeln!(
            svg,
            "  <line x1=\"{x1}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"#dddddd\"/>\n  \
             <text x=\"{tx}\" y=\"{ty}\" font-size=\"10\" text-anchor=\"end\">{value:.2}</text>",
            x1 = fmt_coord(MARGIN_LEFT),
            x2 = fmt_coord(chart_width - 8.0),
            y = fmt_coord(y),
            tx = fmt_coord(MARGIN_LEFT - 6.0),
            ty = fmt_coord(y + 3.0),
        );
    }

    for (g, threshold) in thresholds.iter().enumerate() {
        let group_x = MARGIN_LEFT + GROUP_GAP / 2.0 + g as f64 * (group_width + GROUP_GAP);
        for (m, (metric_name, extract)) in METRICS.iter().enumerate() {
            let metric_x = group_x + m as f64 * (metric_width + METRIC_GAP);
            for (k, s) in series.iter().enumerate() {
                let x = metric_x + k as f64 * BAR_WIDTH;
                let color = PALETTE[k % PALETTE.len()];
                let row = s
                    .rows
                    .iter()
                    .find(|r| r.iou_threshold == *threshold)
                    .and_then(|r| extract(r).map(|v| (r, v)));
                match row {
                    Some((_, value)) => {
                        let height = value * PLOT_HEIGHT;
                        let _ = writeln!(
                            svg,
                            "  <rect class=\"bar\" data-model=\"{model}\" data-metric=\"{metric}\" \
                             data-threshold=\"{thr:.2}\" data-value=\"{value:.6}\" \
                             x=\"{x}\" y=\"{y}\" width=\"{bw}\" height=\"{h}\" fill=\"{color}\"/>",
                            model = xml_escape(&s.model),
                            metric = metric_name,
                            thr = threshold,
                            x = fmt_coord(x),
                            y = fmt_coord(baseline - height),
                            bw = fmt_coord(BAR_WIDTH - 2.0),
                            h = fmt_coord(height),
                        );
                    }
                    None => {
                        // Undefined (or missing) value: hatched baseline marker.
                        let _ = writeln!(
                            svg,
                            "  <rect class=\"bar undefined\" data-model=\"{model}\" \
                             data-metric=\"{metric}\" data-threshold=\"{thr:.2}\" \
                             data-value=\"undefined\" x=\"{x}\" y=\"{y}\" width=\"{bw}\" \
                             height=\"6\" fill=\"url(#hatch)\" stroke=\"{color}\" \
                             stroke-width=\"0.8\"/>",
                            model = xml_escape(&s.model),
                            metric = metric_name,
                            thr = threshold,
                            x = fmt_coord(x),
                            y = fmt_coord(baseline - 6.0),
                            bw = fmt_coord(BAR_WIDTH - 2.0),
                        );
                    }
                }
            }
            let _ = writeln!(
                svg,
                "  <text x=\"{x}\" y=\"{y}\" font-size=\"9\" text-anchor=\"middle\">{name}</text>",
                x = fmt_coord(metric_x + metric_width / 2.0),
                y = fmt_coord(baseline + 14.0),
                name = metric_name,
            );
        }
        let _ = writeln!(
            svg,
            "  <text x=\"{x}\" y=\"{y}\" font-size=\"11\" text-anchor=\"middle\">IoU {thr:.2}</text>",
            x = fmt_coord(group_x + group_width / 2.0),
            y = fmt_coord(baseline + 32.0),
            thr = threshold,
        );
    }

    // Axis line and legend.
    let _ = writeln!(
        svg,
        "  <line x1=\"{x1}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"#444444\"/>",
        x1 = fmt_coord(MARGIN_LEFT),
        x2 = fmt_coord(chart_width - 8.0),
        y = fmt_coord(baseline),
    );
    for (k, s) in series.iter().enumerate() {
        let y = baseline + 48.0 + k as f64 * 18.0;
        let _ = writeln!(
            svg,
            "  <rect x=\"{x}\" y=\"{ry}\" width=\"12\" height=\"12\" fill=\"{color}\"/>\n  \
             <text x=\"{tx}\" y=\"{ty}\" font-size=\"11\">{model}</text>",
            x = fmt_coord(MARGIN_LEFT),
            ry = fmt_coord(y - 10.0),
            color = PALETTE[k % PALETTE.len()],
            tx = fmt_coord(MARGIN_LEFT + 18.0),
            ty = fmt_coord(y),
            model = xml_escape(&s.model),
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}
