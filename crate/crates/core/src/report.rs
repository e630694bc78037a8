//! Plain-text tables and SVG charts.

use std::fmt::Write as _;

use crate::eval::RegionReport;
use crate::experiment::ExperimentResult;
use crate::scene::ObjectClass;
use crate::train::{EpochLog, ModelEval};

fn pct(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{:6.2}", 100.0 * x),
        None => format!("{:>6}", "n/a"),
    }
}

fn region_cells(r: &RegionReport) -> String {
    let mut s = String::new();
    for c in ObjectClass::ALL {
        s.push_str(&pct(r.ap(c)));
        s.push(' ');
    }
    s.push_str(&pct(r.map));
    s
}

const REGION_HEADER: &str = "   Car    Ped    Cyc    mAP";

fn mark(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        " - "
    }
}

/// AP table of the ablation grid, in percent.
pub fn ablation_table(r: &ExperimentResult) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Ablation  seed {}  config {}", r.seed, r.base_config_hash);
    let _ = writeln!(s, "DMAE  X-UA | Entire area                 | Driving corridor");
    let _ = writeln!(s, "           | {REGION_HEADER} | {REGION_HEADER}");
    let _ = writeln!(s, "{}", "-".repeat(11 + 3 + 27 + 3 + 27));
    for c in &r.cells {
        let _ = writeln!(
            s,
            "{}   {}  | {} | {}",
            mark(c.dmae),
            mark(c.xua),
            region_cells(&c.eval.report.all),
            region_cells(&c.eval.report.corridor)
        );
    }
    s
}

/// AP table of the λ sweep, in percent.
pub fn sweep_table(r: &ExperimentResult) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Lambda sweep  seed {}  config {}", r.seed, r.base_config_hash);
    let _ = writeln!(s, "  lambda | Entire area                 | Driving corridor");
    let _ = writeln!(s, "         | {REGION_HEADER} | {REGION_HEADER}");
    let _ = writeln!(s, "{}", "-".repeat(9 + 3 + 27 + 3 + 27));
    for c in &r.cells {
        let _ = writeln!(
            s,
            "{:>8} | {} | {}",
            c.lambda,
            region_cells(&c.eval.report.all),
            region_cells(&c.eval.report.corridor)
        );
    }
    s
}

pub fn eval_table(e: &ModelEval) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "Evaluation  seed {}  config {}  frames {}",
        e.report.seed, e.report.config_hash, e.report.num_frames
    );
    let _ = writeln!(s, "Region    | {REGION_HEADER}");
    for r in [&e.report.all, &e.report.corridor] {
        let name = match r.region {
            crate::eval::Region::All => "entire",
            crate::eval::Region::Corridor => "corridor",
        };
        let _ = writeln!(s, "{name:<9} | {}", region_cells(r));
    }
    for r in [&e.report.all, &e.report.corridor] {
        for c in &r.classes {
            if let Some(a) = c.result {
                let _ = writeln!(
                    s,
                    "  {:?} {:<10} gt {:4}  tp {:4}  fp {:5}  fn {:4}",
                    r.region, c.class, a.num_gt, a.tp, a.fp, a.fn_
                );
            }
        }
    }
    if let Some(m) = &e.motion {
        let _ = writeln!(
            s,
            "Point motion accuracy: learned {:.4}  threshold (same keypoints) {:.4}  threshold (all radar points) {:.4}",
            m.dmae_accuracy, m.threshold_accuracy_keypoints, m.threshold_accuracy_cloud
        );
    }
    s
}

pub fn history_table(h: &[EpochLog]) -> String {
    let mut s = String::from("epoch      total      lidar      radar     motion  matched  grad_norm\n");
    for e in h {
        let motion = e.motion.map_or_else(|| format!("{:>10}", "-"), |m| format!("{m:10.5}"));
        let _ = writeln!(
            s,
            "{:5} {:10.5} {:10.5} {:10.5} {} {:8.2} {:10.3}",
            e.epoch, e.total, e.lidar, e.radar, motion, e.matched, e.max_grad_norm
        );
    }
    s
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 56.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn svg_open(title: &str) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>",
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        "<line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/><line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>",
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD
    );
    s
}

fn y_ticks(s: &mut String, lo: f64, hi: f64) {
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let y = H - PAD - (H - 2.0 * PAD) * i as f64 / 4.0;
        let _ = writeln!(s, "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{v:.3}</text>", PAD - 6.0, y + 4.0);
    }
}

/// One polyline per series over a shared linear scale.
pub fn line_chart_svg(title: &str, x_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let pts = series.iter().flat_map(|(_, p)| p.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut s = svg_open(title);
    y_ticks(&mut s, y0, y1);
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", W / 2.0, H - 16.0, escape(x_label));
    for (i, (name, p)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = p
            .iter()
            .filter(|q| q.0.is_finite() && q.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            path.join(" ")
        );
        let ly = PAD + 16.0 * i as f64;
        let _ = writeln!(
            s,
            "<rect x=\"{}\" y=\"{}\" width=\"12\" height=\"3\" fill=\"{color}\"/><text x=\"{}\" y=\"{}\">{}</text>",
            W - PAD - 130.0,
            ly - 4.0,
            W - PAD - 112.0,
            ly,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Vertical bars on a [0, 1] scale.
pub fn bar_chart_svg(title: &str, bars: &[(String, f64)]) -> String {
    let mut s = svg_open(title);
    y_ticks(&mut s, 0.0, 1.0);
    let n = bars.len().max(1) as f64;
    let slot = (W - 2.0 * PAD) / n;
    for (i, (name, v)) in bars.iter().enumerate() {
        let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        let h = v * (H - 2.0 * PAD);
        let x = PAD + slot * i as f64 + slot * 0.15;
        let _ = writeln!(
            s,
            "<rect x=\"{x:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{h:.2}\" fill=\"{}\"/>",
            H - PAD - h,
            slot * 0.7,
            PALETTE[i % PALETTE.len()]
        );
        let cx = x + slot * 0.35;
        let _ = writeln!(
            s,
            "<text x=\"{cx:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
            H - PAD + 16.0,
            escape(name)
        );
        let _ =
            writeln!(s, "<text x=\"{cx:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{:.3}</text>", H - PAD - h - 4.0, v);
    }
    s.push_str("</svg>\n");
    s
}

pub fn loss_series(name: &str, h: &[EpochLog]) -> (String, Vec<(f64, f64)>) {
    (name.to_string(), h.iter().map(|e| (e.epoch as f64, e.total)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_is_well_formed_enough() {
        let s = line_chart_svg("loss <total>", "epoch", &[("a".into(), vec![(1.0, 2.0), (2.0, 1.0)])]);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("&lt;total&gt;"));
        assert!(s.contains("<polyline"));
        let b = bar_chart_svg("mAP", &[("x".into(), 0.5), ("y".into(), f64::NAN)]);
        assert_eq!(b.matches("<rect").count(), 3);
        let empty = line_chart_svg("t", "x", &[]);
        assert!(empty.contains("</svg>"));
    }

    #[test]
    fn percent_cells() {
        assert_eq!(pct(Some(0.5)), " 50.00");
        assert_eq!(pct(None), "   n/a");
    }
}
