//! Minimal static SVG charts.

use std::fmt::Write as _;

const W: f64 = 480.0;
const H: f64 = 300.0;
const PAD: f64 = 44.0;

fn frame(title: &str, lo: f64, hi: f64) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n",
        W / 2.0,
        escape(title)
    );
    let (x0, y0, x1, y1) = (PAD, H - PAD, W - PAD / 2.0, PAD / 1.5);
    writeln!(s, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>").unwrap();
    writeln!(s, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>").unwrap();
    writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>", x0 - 4.0, y0, fmt_tick(lo)).unwrap();
    writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>", x0 - 4.0, y1 + 4.0, fmt_tick(hi)).unwrap();
    s
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 100.0 || (v != 0.0 && v.abs() < 0.01) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn range(values: &[f64]) -> (f64, f64) {
    let finite = values.iter().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(v), b.max(v)));
    if lo > hi {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// One polyline over x = 1..=n.
pub fn line_chart(title: &str, x_label: &str, values: &[f64]) -> String {
    let (lo, hi) = range(values);
    let mut s = frame(title, lo, hi);
    let n = values.len().max(2) - 1;
    let px = |i: usize| PAD + (W - 1.5 * PAD) * i as f64 / n as f64;
    let py = |v: f64| (H - PAD) - (H - PAD - PAD / 1.5) * (v - lo) / (hi - lo);
    let points: Vec<String> =
        values.iter().enumerate().filter(|(_, v)| v.is_finite()).map(|(i, &v)| format!("{:.1},{:.1}", px(i), py(v))).collect();
    writeln!(s, "<polyline fill=\"none\" stroke=\"#1f5fa8\" stroke-width=\"2\" points=\"{}\"/>", points.join(" ")).unwrap();
    writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", W / 2.0, H - 10.0, escape(x_label)).unwrap();
    writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", PAD, H - PAD + 14.0, 1).unwrap();
    writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", px(n), H - PAD + 14.0, values.len()).unwrap();
    s + "</svg>\n"
}

/// Labeled bars on a fixed [0, 1] axis; `None` bars are drawn as gaps.
pub fn bar_chart(title: &str, bars: &[(String, Option<f64>)]) -> String {
    let mut s = frame(title, 0.0, 1.0);
    let slot = (W - 1.5 * PAD) / bars.len().max(1) as f64;
    for (i, (label, v)) in bars.iter().enumerate() {
        let x = PAD + slot * i as f64 + slot * 0.15;
        if let Some(v) = v {
            let h = (H - PAD - PAD / 1.5) * v.clamp(0.0, 1.0);
            writeln!(
                s,
                "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{h:.1}\" fill=\"#3a8f5c\"/>",
                H - PAD - h,
                slot * 0.7
            )
            .unwrap();
        }
        writeln!(s, "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>", x + slot * 0.35, H - PAD + 14.0, escape(label))
            .unwrap();
    }
    s + "</svg>\n"
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed() {
        let l = line_chart("loss", "epoch", &[3.0, 2.0, 1.5, f64::NAN]);
        assert!(l.starts_with("<svg") && l.ends_with("</svg>\n"));
        assert_eq!(l.matches("<polyline").count(), 1);
        let b = bar_chart("iou <per class>", &[("0".into(), Some(0.5)), ("1".into(), None)]);
        assert!(b.contains("&lt;per class&gt;"));
        assert_eq!(b.matches("<rect").count(), 2);
        assert!(line_chart("one", "x", &[1.0]).contains("<polyline"));
    }
}
