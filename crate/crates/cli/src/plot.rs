//! Static SVG scatter plots, written directly (no display server).

pub struct Point {
    pub x: f64,
    pub y: f64,
    pub label: String,
}

const W: f64 = 640.0;
const H: f64 = 440.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 30.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 55.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Maps a data range onto a pixel span, widening degenerate ranges so a
/// single point still lands mid-axis.
fn scale(lo: f64, hi: f64) -> (f64, f64) {
    if (hi - lo).abs() < 1e-12 {
        (lo - 0.5 - lo.abs() * 0.05, hi + 0.5 + hi.abs() * 0.05)
    } else {
        let pad = (hi - lo) * 0.08;
        (lo - pad, hi + pad)
    }
}

pub fn scatter_svg(points: &[Point], xlabel: &str, ylabel: &str, title: &str) -> String {
    let (xmin, xmax) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.x), b.max(p.x)));
    let (ymin, ymax) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.y), b.max(p.y)));
    let (xmin, xmax) = scale(xmin, xmax);
    let (ymin, ymax) = scale(ymin, ymax);
    let px = |x: f64| MARGIN_L + (x - xmin) / (xmax - xmin) * (W - MARGIN_L - MARGIN_R);
    let py = |y: f64| H - MARGIN_B - (y - ymin) / (ymax - ymin) * (H - MARGIN_T - MARGIN_B);

    let mut s = String::new();
    s.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    s.push_str("  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    s.push_str(&format!(
        "  <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">{}</text>\n",
        W / 2.0,
        esc(title)
    ));

    // axes
    s.push_str(&format!(
        "  <line x1=\"{MARGIN_L}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - MARGIN_B,
        W - MARGIN_R,
        H - MARGIN_B
    ));
    s.push_str(&format!(
        "  <line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - MARGIN_B
    ));

    // four ticks per axis with value labels
    for i in 0..=3 {
        let f = i as f64 / 3.0;
        let xv = xmin + f * (xmax - xmin);
        let yv = ymin + f * (ymax - ymin);
        let (tx, ty) = (px(xv), py(yv));
        s.push_str(&format!(
            "  <line x1=\"{tx:.1}\" y1=\"{}\" x2=\"{tx:.1}\" y2=\"{}\" stroke=\"black\"/>\n",
            H - MARGIN_B,
            H - MARGIN_B + 5.0
        ));
        s.push_str(&format!(
            "  <text x=\"{tx:.1}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
            H - MARGIN_B + 18.0,
            format_tick(xv)
        ));
        s.push_str(&format!(
            "  <line x1=\"{}\" y1=\"{ty:.1}\" x2=\"{MARGIN_L}\" y2=\"{ty:.1}\" stroke=\"black\"/>\n",
            MARGIN_L - 5.0
        ));
        s.push_str(&format!(
            "  <text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
            MARGIN_L - 9.0,
            ty + 4.0,
            format_tick(yv)
        ));
    }

    s.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">{}</text>\n",
        (MARGIN_L + W - MARGIN_R) / 2.0,
        H - 12.0,
        esc(xlabel)
    ));
    s.push_str(&format!(
        "  <text x=\"18\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" transform=\"rotate(-90 18 {})\">{}</text>\n",
        (MARGIN_T + H - MARGIN_B) / 2.0,
        (MARGIN_T + H - MARGIN_B) / 2.0,
        esc(ylabel)
    ));

    for p in points {
        let (cx, cy) = (px(p.x), py(p.y));
        s.push_str(&format!(
            "  <circle cx=\"{cx:.1}\" cy=\"{cy:.1}\" r=\"5\" fill=\"#1f77b4\" fill-opacity=\"0.85\"/>\n"
        ));
        s.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
            cx + 8.0,
            cy - 6.0,
            esc(&p.label)
        ));
    }
    s.push_str("</svg>\n");
    s
}

fn format_tick(v: f64) -> String {
    if v.abs() >= 10_000.0 {
        format!("{:.2e}", v)
    } else if (v - v.round()).abs() < 1e-9 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v:.3}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_are_escaped() {
        let pts = vec![Point { x: 1.0, y: 2.0, label: "a<b>&\"c\"".into() }];
        let svg = scatter_svg(&pts, "x", "y", "t");
        assert!(svg.contains("a&lt;b&gt;&amp;&quot;c&quot;"));
        assert!(!svg.contains("a<b>"));
    }

    #[test]
    fn single_point_stays_on_canvas() {
        let pts = vec![Point { x: 42.0, y: 0.97, label: "k=4".into() }];
        let svg = scatter_svg(&pts, "cost", "acc", "k sweep");
        // the circle must sit inside the viewBox
        let cx: f64 = svg
            .split("circle cx=\"")
            .nth(1)
            .and_then(|r| r.split('"').next())
            .unwrap()
            .parse()
            .unwrap();
        assert!(cx > 0.0 && cx < W);
    }
}
