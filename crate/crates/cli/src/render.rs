//! SVG 1.1 drawing of a scanpath over its grade map.

use std::fmt::Write;

use pathscan::synth::{GradeMap, Label};
use pathscan::{MagLevel, Scanpath};
use serde_json::Value;

const CANVAS: f64 = 800.0;
const LEGEND_H: f64 = 40.0;

fn label_fill(l: Label) -> &'static str {
    match l {
        Label::Background => "#f7f7f7",
        Label::Benign => "#cfe3c6",
        Label::G3 => "#f6d68b",
        Label::G4 => "#ee9a5a",
        Label::G5 => "#c4473a",
    }
}

/// Colour and radius (canvas pixels) of the marker for a level; higher
/// magnification draws smaller, darker markers.
fn marker(m: MagLevel) -> (&'static str, f64) {
    const COLOURS: [&str; MagLevel::COUNT] = ["#9ecae1", "#6baed6", "#4292c6", "#2171b5", "#08519c", "#08306b"];
    (COLOURS[m.index()], 12.0 - 1.6 * m.index() as f64)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Grade cells as rectangles, the fixation sequence as a polyline and one
/// numbered, magnification-coded circle per fixation. `meta` is embedded
/// in a `<metadata>` element.
pub fn render_svg(sp: &Scanpath, gm: &GradeMap, meta: &Value) -> String {
    let b = gm.bounds();
    let scale = CANVAS / b.width.max(b.height);
    let (w, h) = (b.width * scale, b.height * scale);
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8" standalone="no"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{:.0}" height="{:.0}" viewBox="0 0 {w:.2} {:.2}">"#,
        w.ceil(),
        (h + LEGEND_H).ceil(),
        h + LEGEND_H
    );
    let _ = writeln!(s, "<title>{} / {}</title>", escape(&sp.wsi_id), escape(&sp.reader_id));
    let _ = writeln!(s, "<metadata>{}</metadata>", escape(&meta.to_string()));
    let cs = gm.cell_size() * scale;
    let _ = writeln!(s, r#"<g id="grades" shape-rendering="crispEdges">"#);
    for r in 0..gm.rows() {
        for c in 0..gm.cols() {
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{cs:.2}" height="{cs:.2}" fill="{}"/>"#,
                c as f64 * cs,
                r as f64 * cs,
                label_fill(gm.get(r, c))
            );
        }
    }
    let _ = writeln!(s, "</g>");
    if sp.len() > 1 {
        let pts: Vec<String> = sp
            .fixations
            .iter()
            .map(|f| format!("{:.2},{:.2}", f.x * scale, f.y * scale))
            .collect();
        let _ = writeln!(
            s,
            r##"<polyline id="path" points="{}" fill="none" stroke="#333333" stroke-width="1.5" stroke-opacity="0.7"/>"##,
            pts.join(" ")
        );
    }
    let _ = writeln!(s, r#"<g id="fixations" font-family="sans-serif" font-size="9" text-anchor="middle">"#);
    for (i, f) in sp.fixations.iter().enumerate() {
        let (fill, r) = marker(f.mag);
        let (x, y) = (f.x * scale, f.y * scale);
        let _ = writeln!(
            s,
            r##"<circle cx="{x:.2}" cy="{y:.2}" r="{r:.2}" fill="{fill}" fill-opacity="0.85" stroke="#ffffff" stroke-width="1"><title>#{} {} ({:.0}, {:.0})</title></circle>"##,
            i + 1,
            f.mag,
            f.x,
            f.y
        );
        let _ = writeln!(s, r##"<text x="{x:.2}" y="{:.2}" fill="#ffffff">{}</text>"##, y + 3.0, i + 1);
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g id="legend" font-family="sans-serif" font-size="11">"#);
    for (i, m) in MagLevel::ALL.iter().enumerate() {
        let (fill, r) = marker(*m);
        let x = 20.0 + i as f64 * 70.0;
        let y = h + LEGEND_H / 2.0;
        let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="{r:.2}" fill="{fill}"/>"#);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{m}</text>"#, x + 15.0, y + 4.0);
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, "</svg>");
    s
}
