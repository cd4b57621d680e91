//! Minimal static SVG charts for KDE curves and attention shares.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 360.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{m} {t} L{m} {b} L{r} {b}" stroke="black" fill="none"/>"#,
        m = MARGIN,
        t = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN
    );
    s
}

/// Overlaid line series sharing one x axis.
pub fn line_chart(title: &str, x: &[f64], series: &[(&str, &[f64])]) -> String {
    let mut s = header(title);
    let (x0, x1) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let ymax = series.iter().flat_map(|(_, ys)| ys.iter().copied()).fold(0.0f64, f64::max);
    let sx = |v: f64| if x1 > x0 { MARGIN + (v - x0) / (x1 - x0) * (W - 2.0 * MARGIN) } else { W / 2.0 };
    let sy = |v: f64| if ymax > 0.0 { H - MARGIN - v / ymax * (H - 2.0 * MARGIN) } else { H - MARGIN };
    for (k, (name, ys)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = x.iter().zip(ys.iter()).map(|(&a, &b)| format!("{:.2},{:.2}", sx(a), sy(b))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" stroke="{color}" fill="none" stroke-width="1.5"/>"#, pts.join(" "));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" fill="{color}">{}</text>"#,
            W - MARGIN - 140.0,
            MARGIN + 16.0 * (k as f64 + 1.0),
            escape(name)
        );
    }
    let _ = writeln!(s, r#"<text x="{MARGIN}" y="{}" font-family="sans-serif" font-size="11">{x0:.2}</text>"#, H - MARGIN + 16.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{x1:.2}</text>"#, W - MARGIN, H - MARGIN + 16.0);
    s.push_str("</svg>\n");
    s
}

/// Grouped bars in percent, one group per label and one bar per series.
pub fn grouped_bars(title: &str, labels: &[String], series: &[(&str, Vec<f64>)]) -> String {
    let mut s = header(title);
    let groups = labels.len().max(1) as f64;
    let gw = (W - 2.0 * MARGIN) / groups;
    let bw = gw * 0.8 / series.len().max(1) as f64;
    for (g, label) in labels.iter().enumerate() {
        let gx = MARGIN + g as f64 * gw + gw * 0.1;
        for (k, (_, vals)) in series.iter().enumerate() {
            let v = vals.get(g).copied().unwrap_or(0.0).clamp(0.0, 100.0);
            let h = v / 100.0 * (H - 2.0 * MARGIN);
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                gx + k as f64 * bw,
                H - MARGIN - h,
                bw,
                h,
                COLORS[k % COLORS.len()]
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle">{}</text>"#,
            gx + gw * 0.4,
            H - MARGIN + 16.0,
            escape(label)
        );
    }
    for (k, (name, _)) in series.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" fill="{}">{}</text>"#,
            W - MARGIN - 140.0,
            MARGIN + 16.0 * (k as f64 + 1.0),
            COLORS[k % COLORS.len()],
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}
