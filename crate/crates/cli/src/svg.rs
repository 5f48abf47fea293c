//! Minimal SVG plot of the three locality histograms.

use conceptscope_core::geometry::{DistanceHistogram, LocalityReport};

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 40.0;

fn density(h: &DistanceHistogram) -> Vec<f64> {
    let total = h.bins.iter().sum::<u64>().max(1) as f64;
    h.bins.iter().map(|&c| c as f64 / total).collect()
}

fn step_path(values: &[f64], ymax: f64) -> String {
    let bw = (W - 2.0 * PAD) / values.len() as f64;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * v / ymax;
    let mut d = format!("M{:.2},{:.2}", PAD, H - PAD);
    for (i, &v) in values.iter().enumerate() {
        let x0 = PAD + i as f64 * bw;
        d.push_str(&format!(" L{:.2},{:.2} L{:.2},{:.2}", x0, y(v), x0 + bw, y(v)));
    }
    d.push_str(&format!(" L{:.2},{:.2}", W - PAD, H - PAD));
    d
}

pub fn locality_plot(report: &LocalityReport) -> String {
    let sets = [
        ("nearest", "#1f77b4", density(&report.h_nearest)),
        ("top", "#d62728", density(&report.h_top)),
        ("random", "#7f7f7f", density(&report.h_random)),
    ];
    let ymax = sets
        .iter()
        .flat_map(|(_, _, v)| v.iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    );
    out.push_str(&format!(
        "<text x=\"{PAD}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">{} on {}: L = {:.4}</text>\n",
        report.direction.kind, report.dataset, report.locality
    ));
    out.push_str(&format!(
        "<line x1=\"{PAD}\" y1=\"{y}\" x2=\"{x}\" y2=\"{y}\" stroke=\"black\"/>\n",
        y = H - PAD,
        x = W - PAD
    ));
    out.push_str(&format!(
        "<text x=\"{PAD}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{:.3}</text>\n",
        H - PAD + 16.0,
        report.h_top.lo
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{:.3}</text>\n",
        W - PAD,
        H - PAD + 16.0,
        report.h_top.hi
    ));
    for (i, (name, colour, values)) in sets.iter().enumerate() {
        out.push_str(&format!(
            "<path d=\"{}\" fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.5\"/>\n",
            step_path(values, ymax)
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"{colour}\">{name}</text>\n",
            W - PAD - 70.0,
            PAD + 14.0 * i as f64
        ));
    }
    out.push_str("</svg>\n");
    out
}
