//! Standalone SVG bar charts for evaluation and ablation results.

use std::fmt::Write as _;

use crate::eval::EvalReport;
use crate::pipeline::AblationReport;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Horizontal bars for values in `[0, 1]`.
pub fn bar_chart(title: &str, bars: &[(String, f64)]) -> String {
    let (label_w, bar_w, row_h, top) = (170.0, 360.0, 26.0, 40.0);
    let height = top + row_h * bars.len() as f64 + 20.0;
    let width = label_w + bar_w + 70.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="13">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="10" y="22" font-size="15" font-weight="bold">{}</text>"#, escape(title));
    for (i, (label, value)) in bars.iter().enumerate() {
        let y = top + row_h * i as f64;
        let v = value.clamp(0.0, 1.0);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            label_w - 8.0,
            y + 15.0,
            escape(label)
        );
        let _ = writeln!(
            svg,
            r##"<rect x="{label_w}" y="{y}" width="{:.1}" height="{}" fill="#4878a8"/>"##,
            v * bar_w,
            row_h - 6.0
        );
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{}">{value:.3}</text>"#, label_w + v * bar_w + 6.0, y + 15.0);
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn eval_chart(report: &EvalReport) -> String {
    let mut bars = vec![
        ("overall".to_string(), report.overall.hits1),
        ("simple".to_string(), report.simple.hits1),
        ("complex".to_string(), report.complex.hits1),
    ];
    bars.extend(report.categories.iter().map(|(c, h)| (c.to_string(), h.hits1)));
    bar_chart("Hits@1", &bars)
}

pub fn ablation_chart(report: &AblationReport) -> String {
    let bars: Vec<(String, f64)> = report
        .rows
        .iter()
        .map(|r| (r.variant.label().to_string(), r.test.overall.hits1))
        .collect();
    bar_chart("Hits@1 by variant", &bars)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_has_one_bar_per_value() {
        let svg = bar_chart("t", &[("a".into(), 0.5), ("b<c".into(), 1.0)]);
        assert_eq!(svg.matches("<rect").count(), 3);
        assert!(svg.contains("b&lt;c"));
        assert!(svg.ends_with("</svg>\n"));
    }
}
