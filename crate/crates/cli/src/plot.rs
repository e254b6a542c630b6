//! Static plot emission: relative-improvement curves, the FLOPs-versus-
//! quality scatter, and the error-reduction table.
//!
//! Output is plain SVG assembled with fixed-precision formatting, so
//! regenerating plots from an unchanged report is byte-identical.

use std::fmt::Write as _;

use driftsel_core::protocol::{error_reduction, ArmMode, ArmReport, ProtocolReport};
use driftsel_core::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 170.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;

/// Fixed arm palette, cycled by arm index.
const COLORS: [&str; 8] =
    ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"];

/// One metric column readable off a report row.
#[derive(Clone, Copy)]
pub enum Metric {
    Ndcg(usize),
    Hr(usize),
    Mrr,
}

impl Metric {
    pub fn label(&self) -> String {
        match self {
            Metric::Ndcg(k) => format!("ndcg_at_{k}"),
            Metric::Hr(k) => format!("hr_at_{k}"),
            Metric::Mrr => "mrr".into(),
        }
    }

    fn read(&self, m: &driftsel_core::metrics::MetricsReport) -> f64 {
        match self {
            Metric::Ndcg(k) => m.ndcg_at(*k),
            Metric::Hr(k) => m.hr_at(*k),
            Metric::Mrr => m.mrr,
        }
    }
}

/// All metric columns present in a report.
pub fn metrics_of(report: &ProtocolReport) -> Vec<Metric> {
    let mut out: Vec<Metric> = Vec::new();
    for &k in &report.eval_k {
        out.push(Metric::Ndcg(k));
    }
    for &k in &report.eval_k {
        out.push(Metric::Hr(k));
    }
    out.push(Metric::Mrr);
    out
}

fn fmt(v: f64) -> String {
    format!("{v:.3}")
}

/// Maps data coordinates into the plot rectangle.
struct Scale {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Scale {
    fn x(&self, v: f64) -> f64 {
        let span = (self.x1 - self.x0).max(1e-12);
        MARGIN_L + (v - self.x0) / span * (WIDTH - MARGIN_L - MARGIN_R)
    }
    fn y(&self, v: f64) -> f64 {
        let span = (self.y1 - self.y0).max(1e-12);
        HEIGHT - MARGIN_B - (v - self.y0) / span * (HEIGHT - MARGIN_T - MARGIN_B)
    }
}

fn svg_header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"monospace\" font-size=\"12\">"
    );
    let _ = writeln!(s, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{title}</text>",
        MARGIN_L + (WIDTH - MARGIN_L - MARGIN_R) / 2.0
    );
    s
}

fn axes(s: &mut String, scale: &Scale, x_label: &str, y_label: &str) {
    let (px0, px1) = (MARGIN_L, WIDTH - MARGIN_R);
    let (py0, py1) = (HEIGHT - MARGIN_B, MARGIN_T);
    let _ = writeln!(
        s,
        "<line x1=\"{px0:.1}\" y1=\"{py0:.1}\" x2=\"{px1:.1}\" y2=\"{py0:.1}\" stroke=\"black\"/>"
    );
    let _ = writeln!(
        s,
        "<line x1=\"{px0:.1}\" y1=\"{py0:.1}\" x2=\"{px0:.1}\" y2=\"{py1:.1}\" stroke=\"black\"/>"
    );
    for i in 0..=4 {
        let fy = scale.y0 + (scale.y1 - scale.y0) * i as f64 / 4.0;
        let py = scale.y(fy);
        let _ = writeln!(
            s,
            "<line x1=\"{:.1}\" y1=\"{py:.1}\" x2=\"{px0:.1}\" y2=\"{py:.1}\" stroke=\"black\"/>",
            px0 - 4.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            px0 - 8.0,
            py + 4.0,
            fmt(fy)
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{x_label}</text>",
        (px0 + px1) / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        s,
        "<text x=\"16\" y=\"{:.1}\" transform=\"rotate(-90 16 {:.1})\" text-anchor=\"middle\">{y_label}</text>",
        (py0 + py1) / 2.0,
        (py0 + py1) / 2.0
    );
}

fn legend(s: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = MARGIN_T + 16.0 * i as f64;
        let x = WIDTH - MARGIN_R + 12.0;
        let color = COLORS[i % COLORS.len()];
        let _ = writeln!(
            s,
            "<line x1=\"{x:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>",
            x + 18.0
        );
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\">{name}</text>", x + 24.0, y + 4.0);
    }
}

/// The no-retrain arm, when present: the normalizer of the curve plots.
fn baseline_arm(report: &ProtocolReport) -> Option<&ArmReport> {
    report.arms.iter().find(|a| a.mode == ArmMode::None)
}

fn full_arm(report: &ProtocolReport) -> Option<&ArmReport> {
    report.arms.iter().find(|a| a.mode == ArmMode::Full)
}

/// Per-arm series of `metric` over intervals; index 0 is the pre-update
/// evaluation shared by every arm.
fn series(arm: &ArmReport, metric: Metric) -> Vec<f64> {
    let mut v = vec![metric.read(&arm.initial)];
    v.extend(arm.intervals.iter().map(|row| metric.read(&row.metrics)));
    v
}

/// Relative-improvement (or raw, without a baseline arm) curves for one
/// metric, every arm overlaid.
pub fn curves_svg(report: &ProtocolReport, metric: Metric) -> String {
    let baseline = baseline_arm(report).map(|a| series(a, metric));
    let all: Vec<(&str, Vec<f64>)> = report
        .arms
        .iter()
        .map(|arm| {
            let mut v = series(arm, metric);
            if let Some(base) = &baseline {
                for (x, b) in v.iter_mut().zip(base) {
                    *x = if b.abs() > 1e-12 { *x / b - 1.0 } else { 0.0 };
                }
            }
            (arm.name.as_str(), v)
        })
        .collect();

    let y_label = if baseline.is_some() {
        format!("{} vs no-retrain", metric.label())
    } else {
        metric.label()
    };
    let steps = all[0].1.len();
    let lo = all.iter().flat_map(|(_, v)| v).copied().fold(f64::INFINITY, f64::min);
    let hi = all.iter().flat_map(|(_, v)| v).copied().fold(f64::NEG_INFINITY, f64::max);
    let pad = ((hi - lo) * 0.08).max(1e-3);
    let scale = Scale { x0: 0.0, x1: (steps - 1).max(1) as f64, y0: lo - pad, y1: hi + pad };

    let mut s = svg_header(&y_label);
    axes(&mut s, &scale, "update step", &y_label);
    for (i, (_, v)) in all.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = v
            .iter()
            .enumerate()
            .map(|(t, &y)| format!("{:.1},{:.1}", scale.x(t as f64), scale.y(y)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>",
            pts.join(" ")
        );
        for p in &pts {
            let (x, y) = p.split_once(',').expect("point format");
            let _ = writeln!(s, "<circle cx=\"{x}\" cy=\"{y}\" r=\"2.5\" fill=\"{color}\"/>");
        }
    }
    legend(&mut s, &all.iter().map(|(n, _)| *n).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// Total FLOPs (selection + training, summed over intervals) against the
/// mean primary-cutoff NDCG, one point per arm.
pub fn flops_scatter_svg(report: &ProtocolReport) -> String {
    let k = report.primary_k;
    let points: Vec<(&str, f64, f64)> = report
        .arms
        .iter()
        .map(|arm| {
            let flops: f64 = arm.intervals.iter().map(|r| r.flops.total).sum();
            let steps = arm.intervals.len().max(1) as f64;
            let ndcg: f64 =
                arm.intervals.iter().map(|r| r.metrics.ndcg_at(k)).sum::<f64>() / steps;
            (arm.name.as_str(), flops, ndcg)
        })
        .collect();

    let fmax = points.iter().map(|p| p.1).fold(0.0f64, f64::max).max(1.0);
    let ylo = points.iter().map(|p| p.2).fold(f64::INFINITY, f64::min);
    let yhi = points.iter().map(|p| p.2).fold(f64::NEG_INFINITY, f64::max);
    let pad = ((yhi - ylo) * 0.1).max(1e-3);
    let scale = Scale { x0: 0.0, x1: fmax * 1.05, y0: ylo - pad, y1: yhi + pad };

    let mut s = svg_header(&format!("total FLOPs vs ndcg_at_{k}"));
    axes(&mut s, &scale, "total FLOPs (select + train)", &format!("mean ndcg_at_{k}"));
    for (i, (_, f, m)) in points.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let _ = writeln!(
            s,
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"5\" fill=\"{color}\"/>",
            scale.x(*f),
            scale.y(*m)
        );
    }
    legend(&mut s, &points.iter().map(|p| p.0).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// CSV of per-interval error reduction for every selection arm, relative to
/// the no-retrain and full-data arms at the primary cutoff.
///
/// Requires both reference arms; the caller decides what a missing arm means.
pub fn error_reduction_csv(report: &ProtocolReport) -> Result<String> {
    let base = baseline_arm(report)
        .ok_or_else(|| Error::data("error-reduction table needs a no-retrain arm"))?;
    let full = full_arm(report)
        .ok_or_else(|| Error::data("error-reduction table needs a full-data arm"))?;
    let k = report.primary_k;

    let mut out = String::from("arm");
    for t in 0..report.horizon {
        let _ = write!(out, ",interval_{t}");
    }
    out.push_str(",mean\n");
    for arm in &report.arms {
        if matches!(arm.mode, ArmMode::None | ArmMode::Full) {
            continue;
        }
        let _ = write!(out, "{}", arm.name);
        let mut vals = Vec::new();
        for (row, (b, f)) in
            arm.intervals.iter().zip(base.intervals.iter().zip(&full.intervals))
        {
            match error_reduction(&row.metrics, &b.metrics, &f.metrics, k) {
                Some(er) => {
                    let _ = write!(out, ",{er:.4}");
                    vals.push(er);
                }
                None => out.push_str(",nan"),
            }
        }
        if vals.is_empty() {
            out.push_str(",nan\n");
        } else {
            let _ = writeln!(out, ",{:.4}", vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }
    Ok(out)
}
