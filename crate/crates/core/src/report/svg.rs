//! Self-contained SVG figures: line charts, heatmaps and grouped bars.
//! Coordinates are printed with two decimals so output is byte-stable.

use std::fmt::Write;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

const FONT: &str = "font-family=\"sans-serif\" font-size=\"11\"";

pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            _ => out.push(c),
        }
    }
    out
}

fn open(w: f64, h: f64, title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\">"
    );
    let _ = writeln!(s, "<rect width=\"{w:.0}\" height=\"{h:.0}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{:.2}\" y=\"18\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{}</text>",
        w / 2.0,
        escape(title)
    );
    s
}

fn text(s: &mut String, x: f64, y: f64, anchor: &str, body: &str) {
    let _ = writeln!(
        s,
        "<text x=\"{x:.2}\" y=\"{y:.2}\" text-anchor=\"{anchor}\" {FONT}>{}</text>",
        escape(body)
    );
}

/// Axis range padded so flat series still get a visible band.
fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

/// Line chart with markers. `y_fixed` pins the y range (e.g. `[0, 1]`),
/// widened if any point falls outside it.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    y_fixed: Option<(f64, f64)>,
    hline: Option<f64>,
) -> String {
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (60.0, 170.0, 36.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let (x0, x1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (mut y0, mut y1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    if let Some((a, b)) = y_fixed {
        y0 = y0.min(a);
        y1 = y1.max(b);
    }
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = open(w, h, title);
    let _ = writeln!(
        s,
        "<rect x=\"{left:.2}\" y=\"{top:.2}\" width=\"{pw:.2}\" height=\"{ph:.2}\" fill=\"none\" stroke=\"black\"/>"
    );
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        text(&mut s, sx(fx), top + ph + 16.0, "middle", &format!("{fx:.2}"));
        text(&mut s, left - 6.0, sy(fy) + 4.0, "end", &format!("{fy:.2}"));
        let _ = writeln!(
            s,
            "<line x1=\"{left:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#dddddd\"/>",
            sy(fy),
            left + pw,
            sy(fy)
        );
    }
    text(&mut s, left + pw / 2.0, h - 12.0, "middle", x_label);
    let _ = writeln!(
        s,
        "<text x=\"16\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.2})\" {FONT}>{}</text>",
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    if let Some(y) = hline.filter(|y| *y >= y0 && *y <= y1) {
        let _ = writeln!(
            s,
            "<line x1=\"{left:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\" stroke-dasharray=\"2 3\"/>",
            sy(y),
            left + pw,
            sy(y)
        );
    }
    for (i, se) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = se
            .points
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let dash = if se.dashed { " stroke-dasharray=\"5 3\"" } else { "" };
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"{dash}/>",
            pts.join(" ")
        );
        for p in &pts {
            let (x, y) = p.split_once(',').unwrap_or(("0", "0"));
            let _ = writeln!(s, "<circle cx=\"{x}\" cy=\"{y}\" r=\"2.5\" fill=\"{color}\"/>");
        }
        let ly = top + 10.0 + 16.0 * i as f64;
        let _ = writeln!(
            s,
            "<line x1=\"{:.2}\" y1=\"{ly:.2}\" x2=\"{:.2}\" y2=\"{ly:.2}\" stroke=\"{color}\" stroke-width=\"2\"{dash}/>",
            left + pw + 10.0,
            left + pw + 30.0
        );
        text(&mut s, left + pw + 34.0, ly + 4.0, "start", &se.name);
    }
    s.push_str("</svg>\n");
    s
}

/// Blue for positive, red for negative, white at zero; `scale` maps to
/// full saturation.
fn diverging(v: f64, scale: f64) -> String {
    let t = if scale > 0.0 { (v / scale).clamp(-1.0, 1.0) } else { 0.0 };
    let fade = |t: f64| (255.0 * (1.0 - t.abs())).round() as u8;
    if t >= 0.0 {
        format!("#{:02x}{:02x}ff", fade(t), fade(t))
    } else {
        format!("#ff{:02x}{:02x}", fade(t), fade(t))
    }
}

/// Grid of cells coloured by value with optional per-cell text. Values are
/// coloured on a diverging scale around zero; missing cells are grey.
pub fn heatmap(
    title: &str,
    row_labels: &[String],
    col_labels: &[String],
    values: &[Vec<Option<f64>>],
    cell_text: Option<&[Vec<String>]>,
) -> String {
    let cell_w = if cell_text.is_some() { 88.0 } else { 48.0 };
    let cell_h = 24.0;
    let left = 20.0 + 7.0 * row_labels.iter().map(|l| l.len()).max().unwrap_or(4) as f64;
    let top = 70.0;
    let w = left + cell_w * col_labels.len() as f64 + 20.0;
    let h = top + cell_h * row_labels.len() as f64 + 20.0;
    let scale = values
        .iter()
        .flatten()
        .flatten()
        .fold(0.0f64, |m, v| if v.is_finite() { m.max(v.abs()) } else { m });

    let mut s = open(w.max(240.0), h, title);
    for (j, c) in col_labels.iter().enumerate() {
        let x = left + cell_w * (j as f64 + 0.5);
        let _ = writeln!(
            s,
            "<text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"start\" transform=\"rotate(-35 {x:.2} {:.2})\" {FONT}>{}</text>",
            top - 6.0,
            top - 6.0,
            escape(c)
        );
    }
    for (i, r) in row_labels.iter().enumerate() {
        let y = top + cell_h * i as f64;
        text(&mut s, left - 6.0, y + cell_h / 2.0 + 4.0, "end", r);
        for j in 0..col_labels.len() {
            let v = values.get(i).and_then(|row| row.get(j)).copied().flatten();
            let fill = match v {
                Some(v) if v.is_finite() => diverging(v, scale),
                _ => "#cccccc".to_string(),
            };
            let x = left + cell_w * j as f64;
            let _ = writeln!(
                s,
                "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{cell_w:.2}\" height=\"{cell_h:.2}\" fill=\"{fill}\" stroke=\"white\"/>"
            );
            let label = match (cell_text, v) {
                (Some(t), _) => t.get(i).and_then(|row| row.get(j)).cloned().unwrap_or_default(),
                (None, Some(v)) => format!("{v:.2}"),
                (None, None) => String::new(),
            };
            text(&mut s, x + cell_w / 2.0, y + cell_h / 2.0 + 4.0, "middle", &label);
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Grouped bars: one group per category, one bar per series. Missing
/// values leave a gap.
pub fn bar_chart(
    title: &str,
    y_label: &str,
    categories: &[String],
    series: &[(String, Vec<Option<f64>>)],
    y_fixed: Option<(f64, f64)>,
) -> String {
    let (left, right, top, bottom) = (60.0, 170.0, 36.0, 50.0);
    let group_w = 18.0 * series.len().max(1) as f64 + 16.0;
    let pw = (group_w * categories.len() as f64).max(200.0);
    let ph = 300.0;
    let (w, h) = (left + pw + right, top + ph + bottom);
    let (mut y0, mut y1) = range(series.iter().flat_map(|s| s.1.iter().flatten().copied()));
    y0 = y0.min(0.0);
    if let Some((a, b)) = y_fixed {
        y0 = y0.min(a);
        y1 = y1.max(b);
    }
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = open(w, h, title);
    let _ = writeln!(
        s,
        "<rect x=\"{left:.2}\" y=\"{top:.2}\" width=\"{pw:.2}\" height=\"{ph:.2}\" fill=\"none\" stroke=\"black\"/>"
    );
    for i in 0..=4 {
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        text(&mut s, left - 6.0, sy(fy) + 4.0, "end", &format!("{fy:.2}"));
    }
    let _ = writeln!(
        s,
        "<text x=\"16\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.2})\" {FONT}>{}</text>",
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (g, cat) in categories.iter().enumerate() {
        let gx = left + group_w * g as f64 + 8.0;
        text(&mut s, gx + (group_w - 16.0) / 2.0, top + ph + 16.0, "middle", cat);
        for (k, (_, vals)) in series.iter().enumerate() {
            let Some(v) = vals.get(g).copied().flatten().filter(|v| v.is_finite()) else {
                continue;
            };
            let (ya, yb) = (sy(v.max(0.0)), sy(v.min(0.0)));
            let _ = writeln!(
                s,
                "<rect x=\"{:.2}\" y=\"{ya:.2}\" width=\"16.00\" height=\"{:.2}\" fill=\"{}\"/>",
                gx + 18.0 * k as f64,
                (yb - ya).max(0.5),
                PALETTE[k % PALETTE.len()]
            );
        }
    }
    for (k, (name, _)) in series.iter().enumerate() {
        let ly = top + 10.0 + 16.0 * k as f64;
        let _ = writeln!(
            s,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"12\" height=\"10\" fill=\"{}\"/>",
            left + pw + 10.0,
            ly - 6.0,
            PALETTE[k % PALETTE.len()]
        );
        text(&mut s, left + pw + 28.0, ly + 4.0, "start", name);
    }
    s.push_str("</svg>\n");
    s
}
