//! Hand-rolled SVG bar charts comparing target and rollout histograms.

use super::CategoricalDistribution;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 46.0;

/// Overlaid histogram comparison for one feature dimension: target in blue,
/// rollout in red.
pub fn histogram_svg(
    target: &CategoricalDistribution,
    rollout: &CategoricalDistribution,
    dim: usize,
    title: &str,
) -> String {
    let t = &target.weights[dim];
    let r = &rollout.weights[dim];
    let support = target.support(dim);
    let max_w = t
        .iter()
        .chain(r.iter())
        .cloned()
        .fold(1e-9f64, f64::max);
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let bar_w = plot_w / t.len() as f64;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n",
        WIDTH / 2.0,
        xml_escape(title)
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n<line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN,
        t = MARGIN
    ));
    let mut bars = |weights: &[f64], color: &str, inset: f64| {
        for (i, &w) in weights.iter().enumerate() {
            let h = (w / max_w) * plot_h;
            let x = MARGIN + i as f64 * bar_w + inset;
            let y = HEIGHT - MARGIN - h;
            svg.push_str(&format!(
                "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{w_px:.2}\" height=\"{h:.2}\" fill=\"{color}\" fill-opacity=\"0.55\"/>\n",
                w_px = (bar_w - 2.0 * inset).max(1.0),
            ));
        }
    };
    bars(t, "#4477cc", 1.0);
    bars(r, "#cc4444", 3.0);
    // sparse x labels
    let n_labels = support.len().min(7).max(2);
    for k in 0..n_labels {
        let i = k * (support.len() - 1) / (n_labels - 1);
        let x = MARGIN + (i as f64 + 0.5) * bar_w;
        svg.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{y:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">{v:.2}</text>\n",
            y = HEIGHT - MARGIN + 16.0,
            v = support[i]
        ));
    }
    // legend
    svg.push_str(&format!(
        "<rect x=\"{x}\" y=\"40\" width=\"12\" height=\"12\" fill=\"#4477cc\" fill-opacity=\"0.55\"/><text x=\"{tx}\" y=\"50\" font-family=\"sans-serif\" font-size=\"11\">target</text>\n",
        x = WIDTH - 150.0,
        tx = WIDTH - 132.0
    ));
    svg.push_str(&format!(
        "<rect x=\"{x}\" y=\"58\" width=\"12\" height=\"12\" fill=\"#cc4444\" fill-opacity=\"0.55\"/><text x=\"{tx}\" y=\"68\" font-family=\"sans-serif\" font-size=\"11\">rollout</text>\n",
        x = WIDTH - 150.0,
        tx = WIDTH - 132.0
    ));
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
