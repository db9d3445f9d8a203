//! Static SVG plots built from rect, text and path elements.

use std::fmt::Write as _;

const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(out: &mut String, w: f64, h: f64) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
}

fn text(out: &mut String, x: f64, y: f64, anchor: &str, s: &str) {
    let _ = writeln!(out, r#"<text x="{x:.1}" y="{y:.1}" text-anchor="{anchor}">{}</text>"#, escape(s));
}

fn tick_label(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-2..1e4).contains(&a) {
        format!("{v:.1e}")
    } else if a >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

pub struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
}

/// Line chart; with `log_y` the y axis is log10 and non-positive values are dropped.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series], log_y: bool) -> String {
    let (w, h) = (640.0, 360.0);
    let (left, right, top, bottom) = (70.0, 20.0, 40.0, 50.0);
    let ty = |y: f64| if log_y { y.log10() } else { y };
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .filter(|&(x, y)| x.is_finite() && y.is_finite() && (!log_y || y > 0.0))
        .map(|(x, y)| (x, ty(y)))
        .collect();
    let mut out = String::new();
    header(&mut out, w, h);
    text(&mut out, w / 2.0, 20.0, "middle", title);
    if pts.is_empty() {
        text(&mut out, w / 2.0, h / 2.0, "middle", "no data");
        out.push_str("</svg>\n");
        return out;
    }
    let fold = |f: fn(f64, f64) -> f64, init: f64, sel: fn(&(f64, f64)) -> f64| pts.iter().map(sel).fold(init, f);
    let (mut x0, mut x1) = (fold(f64::min, f64::INFINITY, |p| p.0), fold(f64::max, f64::NEG_INFINITY, |p| p.0));
    let (mut y0, mut y1) = (fold(f64::min, f64::INFINITY, |p| p.1), fold(f64::max, f64::NEG_INFINITY, |p| p.1));
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pad = 0.05 * (y1 - y0);
    y0 -= pad;
    y1 += pad;
    if x0 > 0.0 && x0 < 0.05 * x1 {
        x0 = 0.0;
    }
    let (pw, ph) = (w - left - right, h - top - bottom);
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * ph;
    let _ = writeln!(out, r##"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let yl = if log_y { 10f64.powf(yv) } else { yv };
        text(&mut out, sx(xv), top + ph + 16.0, "middle", &tick_label(xv));
        text(&mut out, left - 6.0, sy(yv) + 4.0, "end", &tick_label(yl));
        let _ = writeln!(
            out,
            r##"<path d="M{left:.1} {y:.1} H{r:.1}" stroke="#ddd" stroke-width="0.5"/>"##,
            y = sy(yv),
            r = left + pw
        );
    }
    text(&mut out, left + pw / 2.0, h - 12.0, "middle", x_label);
    let _ = writeln!(
        out,
        r#"<text x="16" y="{y:.1}" text-anchor="middle" transform="rotate(-90 16 {y:.1})">{}</text>"#,
        escape(&format!("{y_label}{}", if log_y { " (log)" } else { "" })),
        y = top + ph / 2.0
    );
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut d = String::new();
        for &(x, y) in s.points.iter().filter(|&&(x, y)| x.is_finite() && y.is_finite() && (!log_y || y > 0.0)) {
            let cmd = if d.is_empty() { 'M' } else { 'L' };
            let _ = write!(d, "{cmd}{:.1} {:.1} ", sx(x), sy(ty(y)));
        }
        let _ = writeln!(out, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.2"/>"#, d.trim_end());
        let ly = top + 14.0 + 14.0 * k as f64;
        let _ = writeln!(out, r#"<rect x="{:.1}" y="{:.1}" width="12" height="3" fill="{color}"/>"#, left + pw - 120.0, ly - 4.0);
        text(&mut out, left + pw - 104.0, ly, "start", s.name);
    }
    out.push_str("</svg>\n");
    out
}

/// Data for the alignment figure of one utterance.
pub struct AlignmentPlot<'a> {
    pub title: &'a str,
    /// `T × L` row-major, heads averaged.
    pub attention: &'a [f64],
    pub units: usize,
    pub phoneme_names: &'a [String],
    pub mask_probs: &'a [f64],
    pub e_hat: &'a [f64],
    pub decisions: &'a [u8],
    pub labels: &'a [u8],
    pub threshold: f64,
}

/// Heatmap with phonemes on the vertical axis and unit positions on the
/// horizontal axis, `M̂` as a strip above, and `Ê` bars to the right.
pub fn alignment_heatmap(p: &AlignmentPlot) -> String {
    let t = p.units;
    let l = p.phoneme_names.len();
    let cell = (560.0 / t.max(1) as f64).clamp(6.0, 18.0);
    let row = 16.0;
    let (left, top) = (70.0, 70.0);
    let grid_w = cell * t as f64;
    let bar_x = left + grid_w + 20.0;
    let bar_w = 120.0;
    let w = bar_x + bar_w + 90.0;
    let h = top + row * l as f64 + 50.0;
    let mut out = String::new();
    header(&mut out, w, h);
    text(&mut out, w / 2.0, 18.0, "middle", p.title);
    text(&mut out, left - 6.0, top - 22.0, "end", "M̂");
    for (j, &m) in p.mask_probs.iter().enumerate() {
        let shade = (255.0 * (1.0 - m.clamp(0.0, 1.0))).round() as u8;
        let _ = writeln!(
            out,
            r#"<rect x="{:.1}" y="{:.1}" width="{cell:.1}" height="12" fill="rgb(255,{shade},{shade})"/>"#,
            left + cell * j as f64,
            top - 32.0
        );
    }
    let max = p.attention.iter().copied().fold(0.0f64, f64::max).max(1e-12);
    for i in 0..l {
        let y = top + row * i as f64;
        let name = if p.labels.get(i) == Some(&1) { format!("{}*", p.phoneme_names[i]) } else { p.phoneme_names[i].clone() };
        text(&mut out, left - 6.0, y + 12.0, "end", &name);
        for j in 0..t {
            let a = p.attention.get(j * l + i).copied().unwrap_or(0.0) / max;
            let shade = (255.0 * (1.0 - a.clamp(0.0, 1.0))).round() as u8;
            let _ = writeln!(
                out,
                r#"<rect x="{:.1}" y="{y:.1}" width="{cell:.1}" height="{row}" fill="rgb({shade},{shade},255)"/>"#,
                left + cell * j as f64
            );
        }
        let e = p.e_hat.get(i).copied().unwrap_or(0.0);
        let color = if p.decisions.get(i) == Some(&1) { "#d62728" } else { "#888" };
        let _ = writeln!(
            out,
            r#"<rect x="{bar_x:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{color}"/>"#,
            y + 2.0,
            bar_w * e.clamp(0.0, 1.0),
            row - 4.0
        );
        text(&mut out, bar_x + bar_w + 6.0, y + 12.0, "start", &format!("{e:.2}"));
    }
    let hx = bar_x + bar_w * p.threshold;
    let _ = writeln!(
        out,
        r##"<path d="M{hx:.1} {top:.1} V{:.1}" stroke="#000" stroke-dasharray="3,2"/>"##,
        top + row * l as f64
    );
    text(&mut out, hx, top - 6.0, "middle", &format!("H={}", p.threshold));
    text(&mut out, left + grid_w / 2.0, top + row * l as f64 + 20.0, "middle", "AU position");
    text(&mut out, bar_x + bar_w / 2.0, top + row * l as f64 + 20.0, "middle", "Ê per phoneme");
    text(&mut out, left, h - 8.0, "start", "* = injected substitution; red bar = flagged");
    out.push_str("</svg>\n");
    out
}
