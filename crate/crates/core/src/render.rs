//! SVG previews of planned layouts.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::geometry::{BBox, CANVAS};
use crate::planner::{LayoutPlan, PlannerOutput, SceneSpec};

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderStyle {
    /// Output width and height in pixels.
    pub canvas_px: u32,
    pub stroke_width: f64,
    pub font_size: f64,
}

impl Default for RenderStyle {
    fn default() -> Self {
        Self {
            canvas_px: 1000,
            stroke_width: 3.0,
            font_size: 20.0,
        }
    }
}

impl RenderStyle {
    /// Color for 1-based entity index `i`.
    pub fn color(&self, i: usize) -> &'static str {
        PALETTE[i.saturating_sub(1) % PALETTE.len()]
    }
}

/// One labelled rectangle.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderItem {
    pub index: usize,
    pub label: String,
    pub bbox: BBox,
}

pub fn items_from_output(out: &PlannerOutput) -> Vec<RenderItem> {
    out.objects
        .iter()
        .map(|o| RenderItem {
            index: o.index,
            label: o.name.clone(),
            bbox: o.bbox,
        })
        .collect()
}

/// Items in spec order when a spec is given, otherwise in id order.
pub fn items_from_plan(plan: &LayoutPlan, spec: Option<&SceneSpec>) -> Vec<RenderItem> {
    let ids: Vec<(&str, &str)> = match spec {
        Some(s) => s.entities.iter().map(|e| (e.id.as_str(), e.phrase.as_str())).collect(),
        None => plan.boxes.keys().map(|k| (k.as_str(), k.as_str())).collect(),
    };
    ids.into_iter()
        .filter_map(|(id, label)| plan.boxes.get(id).map(|b| (label, *b)))
        .enumerate()
        .map(|(i, (label, bbox))| RenderItem {
            index: i + 1,
            label: label.to_string(),
            bbox,
        })
        .collect()
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

pub fn render_svg(items: &[RenderItem], style: &RenderStyle) -> String {
    let px = style.canvas_px;
    let k = px as f64 / CANVAS as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{px}" height="{px}" viewBox="0 0 {px} {px}">"#
    );
    let _ = writeln!(svg, r##"  <rect x="0" y="0" width="{px}" height="{px}" fill="#ffffff" stroke="#000000"/>"##);
    for it in items {
        let [x0, y0, x1, y1] = it.bbox.coords().map(|c| c as f64 * k);
        let color = style.color(it.index);
        let _ = writeln!(
            svg,
            r#"  <rect x="{x0}" y="{y0}" width="{}" height="{}" fill="{color}" fill-opacity="0.15" stroke="{color}" stroke-width="{}"/>"#,
            x1 - x0,
            y1 - y0,
            style.stroke_width
        );
        let _ = writeln!(
            svg,
            r#"  <text x="{}" y="{}" font-family="sans-serif" font-size="{}" fill="{color}">{}. {}</text>"#,
            x0 + style.stroke_width + 2.0,
            y0 + style.font_size + style.stroke_width,
            style.font_size,
            it.index,
            escape(&it.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_layout_draws_only_the_canvas() {
        let svg = render_svg(&[], &RenderStyle::default());
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<rect").count(), 1);
        assert!(svg.ends_with("</svg>\n"));
    }

    #[test]
    fn labels_are_escaped() {
        let item = RenderItem {
            index: 1,
            label: "a <b> & \"c\"".into(),
            bbox: BBox::new(0, 0, 10, 10).unwrap(),
        };
        let svg = render_svg(&[item], &RenderStyle::default());
        assert!(svg.contains("1. a &lt;b&gt; &amp; &quot;c&quot;"));
    }

    #[test]
    fn scales_to_canvas_size() {
        let item = RenderItem {
            index: 2,
            label: "x".into(),
            bbox: BBox::new(100, 200, 300, 600).unwrap(),
        };
        let style = RenderStyle {
            canvas_px: 500,
            ..RenderStyle::default()
        };
        let svg = render_svg(&[item], &style);
        assert!(svg.contains(r#"x="50" y="100" width="100" height="200""#), "{svg}");
        assert!(svg.contains(PALETTE[1]));
    }
}
