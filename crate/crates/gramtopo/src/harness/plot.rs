//! Static SVG plots written directly: bars, lines, and heatmap cells as
//! plain rectangles. Output depends only on the data passed in, so
//! regenerating a plot reproduces it byte for byte.

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 24.0;
const MARGIN_TOP: f64 = 48.0;
const MARGIN_BOTTOM: f64 = 96.0;

const PALETTE: [&str; 6] = ["#4878d0", "#ee854a", "#6acc64", "#d65f5f", "#956cb4", "#8c613c"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, title: &str) {
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\">\n"
    ));
    out.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"#ffffff\"/>\n"
    ));
    out.push_str(&format!(
        "<text x=\"{:.3}\" y=\"28\" font-size=\"16\" fill=\"#222222\" text-anchor=\"middle\">{}</text>\n",
        WIDTH / 2.0,
        esc(title)
    ));
}

fn y_axis(out: &mut String, max: f64) {
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    for i in 0..=4 {
        let v = max * i as f64 / 4.0;
        let y = MARGIN_TOP + plot_h * (1.0 - i as f64 / 4.0);
        out.push_str(&format!(
            "<line x1=\"{MARGIN_LEFT}\" y1=\"{y:.3}\" x2=\"{:.3}\" y2=\"{y:.3}\" \
             stroke=\"#dddddd\" stroke-width=\"1\"/>\n",
            WIDTH - MARGIN_RIGHT
        ));
        out.push_str(&format!(
            "<text x=\"{:.3}\" y=\"{:.3}\" font-size=\"11\" fill=\"#444444\" \
             text-anchor=\"end\">{:.3}</text>\n",
            MARGIN_LEFT - 6.0,
            y + 4.0,
            v
        ));
    }
}

/// Vertical bars, one per (label, value), colored round-robin. Bar
/// heights are proportional to the values.
pub fn bar_chart(title: &str, bars: &[(String, f64)]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let max = bars.iter().map(|b| b.1).fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);
    y_axis(&mut out, max);
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let slot = plot_w / bars.len().max(1) as f64;
    let bar_w = slot * 0.7;
    for (i, (label, value)) in bars.iter().enumerate() {
        let h = plot_h * value / max;
        let x = MARGIN_LEFT + slot * i as f64 + (slot - bar_w) / 2.0;
        let y = MARGIN_TOP + plot_h - h;
        out.push_str(&format!(
            "<rect class=\"bar\" x=\"{x:.3}\" y=\"{y:.3}\" width=\"{bar_w:.3}\" \
             height=\"{h:.3}\" fill=\"{}\"/>\n",
            PALETTE[i % PALETTE.len()]
        ));
        let cx = x + bar_w / 2.0;
        let ty = MARGIN_TOP + plot_h + 12.0;
        out.push_str(&format!(
            "<text x=\"{cx:.3}\" y=\"{ty:.3}\" font-size=\"10\" fill=\"#333333\" \
             text-anchor=\"end\" transform=\"rotate(-45 {cx:.3} {ty:.3})\">{}</text>\n",
            esc(label)
        ));
        out.push_str(&format!(
            "<text x=\"{cx:.3}\" y=\"{:.3}\" font-size=\"10\" fill=\"#333333\" \
             text-anchor=\"middle\">{value:.3}</text>\n",
            y - 4.0
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// One polyline per series over shared integer x positions.
pub fn line_chart(title: &str, x_labels: &[String], series: &[(String, Vec<f64>)]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let max = series
        .iter()
        .flat_map(|s| s.1.iter().copied())
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    y_axis(&mut out, max);
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let steps = x_labels.len().max(2) - 1;
    for (i, label) in x_labels.iter().enumerate() {
        let x = MARGIN_LEFT + plot_w * i as f64 / steps as f64;
        out.push_str(&format!(
            "<text x=\"{x:.3}\" y=\"{:.3}\" font-size=\"11\" fill=\"#444444\" \
             text-anchor=\"middle\">{}</text>\n",
            MARGIN_TOP + plot_h + 18.0,
            esc(label)
        ));
    }
    for (k, (name, values)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let x = MARGIN_LEFT + plot_w * i as f64 / steps as f64;
                let y = MARGIN_TOP + plot_h * (1.0 - v / max);
                format!("{x:.3},{y:.3}")
            })
            .collect();
        out.push_str(&format!(
            "<polyline class=\"series\" points=\"{}\" fill=\"none\" stroke=\"{color}\" \
             stroke-width=\"2\"/>\n",
            points.join(" ")
        ));
        let ly = MARGIN_TOP + 16.0 * k as f64 + 8.0;
        out.push_str(&format!(
            "<rect x=\"{:.3}\" y=\"{:.3}\" width=\"12\" height=\"4\" fill=\"{color}\"/>\n",
            MARGIN_LEFT + 8.0,
            ly - 3.0
        ));
        out.push_str(&format!(
            "<text x=\"{:.3}\" y=\"{ly:.3}\" font-size=\"11\" fill=\"#333333\">{}</text>\n",
            MARGIN_LEFT + 26.0,
            esc(name)
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Square heatmap; cell brightness runs from white (0) to a deep blue at
/// the matrix maximum.
pub fn heatmap(title: &str, labels: &[String], matrix: &[Vec<f64>]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let n = labels.len().max(1);
    let max = matrix
        .iter()
        .flat_map(|r| r.iter().copied())
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let area = (HEIGHT - MARGIN_TOP - 40.0).min(WIDTH - MARGIN_LEFT - 160.0);
    let cell = area / n as f64;
    let (x0, y0) = (MARGIN_LEFT + 120.0, MARGIN_TOP);
    for (i, row) in matrix.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let t = v / max;
            let r = (255.0 * (1.0 - t * 0.72)) as u8;
            let g = (255.0 * (1.0 - t * 0.53)) as u8;
            let b = (255.0 * (1.0 - t * 0.18)) as u8;
            out.push_str(&format!(
                "<rect class=\"cell\" x=\"{:.3}\" y=\"{:.3}\" width=\"{cell:.3}\" \
                 height=\"{cell:.3}\" fill=\"#{r:02x}{g:02x}{b:02x}\" data-value=\"{v}\"/>\n",
                x0 + cell * j as f64,
                y0 + cell * i as f64
            ));
        }
    }
    for (i, label) in labels.iter().enumerate() {
        out.push_str(&format!(
            "<text x=\"{:.3}\" y=\"{:.3}\" font-size=\"9\" fill=\"#333333\" \
             text-anchor=\"end\">{}</text>\n",
            x0 - 6.0,
            y0 + cell * (i as f64 + 0.6),
            esc(label)
        ));
        let cx = x0 + cell * (i as f64 + 0.5);
        let cy = y0 + cell * n as f64 + 10.0;
        out.push_str(&format!(
            "<text x=\"{cx:.3}\" y=\"{cy:.3}\" font-size=\"9\" fill=\"#333333\" \
             text-anchor=\"end\" transform=\"rotate(-60 {cx:.3} {cy:.3})\">{}</text>\n",
            esc(label)
        ));
    }
    out.push_str("</svg>\n");
    out
}
