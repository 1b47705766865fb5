//! Minimal self-contained SVG line plots.

use std::fmt::Write;

pub struct Series<'a> {
    pub label: &'a str,
    pub values: &'a [f64],
    pub color: &'a str,
}

const W: f64 = 720.0;
const H: f64 = 360.0;
const PAD_L: f64 = 60.0;
const PAD_R: f64 = 150.0;
const PAD_T: f64 = 36.0;
const PAD_B: f64 = 44.0;

/// Hour on x, one polyline per series, optional dashed horizontal reference.
pub fn line_plot(title: &str, y_label: &str, series: &[Series<'_>], reference: Option<(f64, &str)>) -> String {
    let n = series.iter().map(|s| s.values.len()).max().unwrap_or(0).max(2);
    let mut lo = series.iter().flat_map(|s| s.values.iter().copied()).fold(0.0f64, f64::min);
    let mut hi = series.iter().flat_map(|s| s.values.iter().copied()).fold(0.0f64, f64::max);
    if let Some((r, _)) = reference {
        lo = lo.min(r);
        hi = hi.max(r);
    }
    if hi - lo < 1e-9 {
        hi = lo + 1.0;
    }
    let span = hi - lo;
    lo -= 0.05 * span;
    hi += 0.05 * span;
    let pw = W - PAD_L - PAD_R;
    let ph = H - PAD_T - PAD_B;
    let x = |i: f64| PAD_L + pw * i / (n - 1) as f64;
    let y = |v: f64| PAD_T + ph * (hi - v) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"##
    );
    let _ = writeln!(s, r##"<rect width="{W}" height="{H}" fill="white"/>"##);
    let _ = writeln!(
        s,
        r##"<text x="{}" y="20" font-size="14" text-anchor="middle">{}</text>"##,
        PAD_L + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(s, r##"<rect x="{PAD_L}" y="{PAD_T}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##);
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let _ = writeln!(s, r##"<text x="{}" y="{:.1}" text-anchor="end">{:.1}</text>"##, PAD_L - 6.0, y(v) + 4.0, v);
    }
    let step = if n > 24 { 6 } else { 4 };
    for i in (0..n).step_by(step) {
        let _ = writeln!(s, r##"<text x="{:.1}" y="{}" text-anchor="middle">{i}</text>"##, x(i as f64), H - PAD_B + 16.0);
    }
    let _ = writeln!(s, r##"<text x="{}" y="{}" text-anchor="middle">hour</text>"##, PAD_L + pw / 2.0, H - 8.0);
    let _ = writeln!(
        s,
        r##"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"##,
        PAD_T + ph / 2.0,
        PAD_T + ph / 2.0,
        escape(y_label)
    );
    if lo < 0.0 && hi > 0.0 {
        let _ = writeln!(
            s,
            r##"<line x1="{PAD_L}" x2="{}" y1="{:.1}" y2="{:.1}" stroke="#bbb"/>"##,
            PAD_L + pw,
            y(0.0),
            y(0.0)
        );
    }
    let mut legend_y = PAD_T + 10.0;
    if let Some((r, label)) = reference {
        let _ = writeln!(
            s,
            r##"<line x1="{PAD_L}" x2="{}" y1="{:.1}" y2="{:.1}" stroke="#c00" stroke-dasharray="6 4"/>"##,
            PAD_L + pw,
            y(r),
            y(r)
        );
        legend(&mut s, legend_y, "#c00", label, true);
        legend_y += 18.0;
    }
    for ser in series {
        let pts: Vec<String> = ser.values.iter().enumerate().map(|(i, &v)| format!("{:.1},{:.1}", x(i as f64), y(v))).collect();
        let _ = writeln!(
            s,
            r##"<polyline fill="none" stroke="{}" stroke-width="2" points="{}"/>"##,
            ser.color,
            pts.join(" ")
        );
        legend(&mut s, legend_y, ser.color, ser.label, false);
        legend_y += 18.0;
    }
    s.push_str("</svg>\n");
    s
}

fn legend(s: &mut String, y: f64, color: &str, label: &str, dashed: bool) {
    let x0 = W - PAD_R + 12.0;
    let dash = if dashed { r#" stroke-dasharray="6 4""# } else { "" };
    let _ = writeln!(
        s,
        r##"<line x1="{x0}" x2="{}" y1="{y}" y2="{y}" stroke="{color}" stroke-width="2"{dash}/>"##,
        x0 + 22.0
    );
    let _ = writeln!(s, r##"<text x="{}" y="{}">{}</text>"##, x0 + 28.0, y + 4.0, escape(label));
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
