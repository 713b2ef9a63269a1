use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::pipeline::PatchRow;
use super::report::CellRow;
use super::stats::median;

pub const DISTRIBUTION_FILE: &str = "pixel_f1_distribution.svg";
pub const SCATTER_FILE: &str = "dsm_vs_pixel_f1.svg";

const W: f64 = 480.0;
const H: f64 = 320.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 7] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"];

fn header(title: &str) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(s, "<text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">{title}</text>", W / 2.0);
    let _ = writeln!(
        s,
        "<line x1=\"{MARGIN}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n<line x1=\"{MARGIN}\" y1=\"{MARGIN}\" x2=\"{MARGIN}\" y2=\"{b}\" stroke=\"black\"/>",
        b = H - MARGIN,
        r = W - MARGIN / 2.0
    );
    s
}

fn y_of(v: f64, lo: f64, hi: f64) -> f64 {
    let span = if hi > lo { hi - lo } else { 1.0 };
    H - MARGIN - (v - lo) / span * (H - 2.0 * MARGIN)
}

fn x_of(v: f64, lo: f64, hi: f64) -> f64 {
    let span = if hi > lo { hi - lo } else { 1.0 };
    MARGIN + (v - lo) / span * (W - 1.5 * MARGIN)
}

/// Strip plot of per-patch pixel F1 for each variant with a median bar.
pub fn f1_distribution(rows: &[PatchRow]) -> String {
    let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups.entry(r.variant.as_str()).or_default().push(r.pixel_f1);
    }
    let mut s = header("pixel F1 per patch");
    let slot = (W - 1.5 * MARGIN) / groups.len().max(1) as f64;
    for (g, (variant, values)) in groups.iter().enumerate() {
        let cx = MARGIN + slot * (g as f64 + 0.5);
        let colour = PALETTE[g % PALETTE.len()];
        for (i, v) in values.iter().enumerate() {
            let jitter = ((i * 7919) % 101) as f64 / 100.0 - 0.5;
            let _ = writeln!(
                s,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"1.6\" fill=\"{colour}\" fill-opacity=\"0.4\"/>",
                cx + jitter * slot * 0.5,
                y_of(*v, 0.0, 1.0)
            );
        }
        let my = y_of(median(values), 0.0, 1.0);
        let _ = writeln!(
            s,
            "<line x1=\"{:.2}\" y1=\"{my:.2}\" x2=\"{:.2}\" y2=\"{my:.2}\" stroke=\"black\" stroke-width=\"2\"/>",
            cx - slot * 0.3,
            cx + slot * 0.3
        );
        let _ = writeln!(s, "<text x=\"{cx:.2}\" y=\"{}\" text-anchor=\"middle\">{variant}</text>", H - MARGIN + 16.0);
    }
    for tick in [0.0, 0.5, 1.0] {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\">{tick:.1}</text>",
            MARGIN - 4.0,
            y_of(tick, 0.0, 1.0) + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// One point per (variant, seed) cell: metric to source against pixel F1.
pub fn dsm_f1_scatter(cells: &[CellRow]) -> String {
    let mut s = header("DSM to source vs pixel F1");
    if cells.is_empty() {
        s.push_str("</svg>\n");
        return s;
    }
    let lo_x = cells.iter().map(|c| c.dsm_to_source).fold(f64::INFINITY, f64::min);
    let hi_x = cells.iter().map(|c| c.dsm_to_source).fold(f64::NEG_INFINITY, f64::max);
    let lo_y = cells.iter().map(|c| c.pixel_f1).fold(f64::INFINITY, f64::min);
    let hi_y = cells.iter().map(|c| c.pixel_f1).fold(f64::NEG_INFINITY, f64::max);
    let mut variants: Vec<&str> = cells.iter().map(|c| c.variant.as_str()).collect();
    variants.dedup();
    for c in cells {
        let g = variants.iter().position(|v| *v == c.variant).unwrap_or(0);
        let _ = writeln!(
            s,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"{}\"><title>{} seed {}</title></circle>",
            x_of(c.dsm_to_source, lo_x, hi_x),
            y_of(c.pixel_f1, lo_y, hi_y),
            PALETTE[g % PALETTE.len()],
            c.variant,
            c.seed
        );
    }
    for (g, v) in variants.iter().enumerate() {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" fill=\"{}\">{v}</text>",
            W - 140.0,
            MARGIN + 14.0 * g as f64,
            PALETTE[g % PALETTE.len()]
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">DSM to source ({lo_x:.3} .. {hi_x:.3})</text>",
        W / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{}\" transform=\"rotate(-90 14 {})\" text-anchor=\"middle\">pixel F1 ({lo_y:.3} .. {hi_y:.3})</text>",
        H / 2.0,
        H / 2.0
    );
    s.push_str("</svg>\n");
    s
}
