use std::fmt::Write as _;

use weaksup_pose::pipeline::EvalReport;

const BAR: f64 = 14.0;
const GAP: f64 = 10.0;
const PLOT_H: f64 = 240.0;
const LEFT: f64 = 50.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 110.0;

/// Grouped bar chart of per-keypoint OKS (3D and 2D), values in [0, 1].
pub fn per_keypoint_svg(report: &EvalReport) -> String {
    let n = report.per_keypoint.len() as f64;
    let width = LEFT + n * (2.0 * BAR + GAP) + 20.0;
    let height = TOP + PLOT_H + BOTTOM;
    let base = TOP + PLOT_H;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{LEFT}" y="18" font-size="13">Per-keypoint OKS</text>"#
    );
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let y = base - v * PLOT_H;
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/>"##,
            width - 20.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{v:.2}</text>"#,
            LEFT - 6.0,
            y + 4.0
        );
    }
    for (i, row) in report.per_keypoint.iter().enumerate() {
        let x0 = LEFT + GAP / 2.0 + i as f64 * (2.0 * BAR + GAP);
        for (j, (value, color)) in [(row.oks_3d, "#3b6ea5"), (row.oks_2d, "#e08a2c")]
            .into_iter()
            .enumerate()
        {
            let v = value.unwrap_or(0.0).clamp(0.0, 1.0);
            let h = v * PLOT_H;
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{:.1}" width="{BAR}" height="{:.1}" fill="{color}"><title>{} {}: {:.3}</title></rect>"#,
                x0 + j as f64 * BAR,
                base - h,
                h,
                row.keypoint.name(),
                if j == 0 { "3D" } else { "2D" },
                v
            );
        }
        let lx = x0 + BAR;
        let ly = base + 8.0;
        let _ = writeln!(
            s,
            r#"<text x="{lx:.1}" y="{ly:.1}" text-anchor="end" transform="rotate(-60 {lx:.1} {ly:.1})">{}</text>"#,
            row.keypoint.name()
        );
    }
    let ly = height - 12.0;
    let _ = writeln!(
        s,
        r##"<rect x="{LEFT}" y="{}" width="10" height="10" fill="#3b6ea5"/>"##,
        ly - 9.0
    );
    let _ = writeln!(s, r#"<text x="{}" y="{ly}">OKS@3D</text>"#, LEFT + 14.0);
    let _ = writeln!(
        s,
        r##"<rect x="{}" y="{}" width="10" height="10" fill="#e08a2c"/>"##,
        LEFT + 80.0,
        ly - 9.0
    );
    let _ = writeln!(s, r#"<text x="{}" y="{ly}">OKS@2D</text>"#, LEFT + 94.0);
    s.push_str("</svg>\n");
    s
}
