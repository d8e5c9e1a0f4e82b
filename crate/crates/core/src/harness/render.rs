//! SVG rendering of a tuning trace over its diagram.

use std::fmt::Write as _;

use base64::Engine as _;

use super::HarnessError;
use crate::diagram::StabilityDiagram;
use crate::explorer::{Stage, TuningOutcome};
use crate::geometry::Point;

/// Screen pixels per diagram pixel.
const SCALE: f64 = 4.0;

fn stage_color(s: Stage) -> &'static str {
    match s {
        Stage::FindFirst => "#e41a1c",
        Stage::SlopeEstimate => "#377eb8",
        Stage::SpacingScan => "#4daf4a",
        Stage::MissedLineCheck => "#984ea3",
        Stage::TargetInference => "#ff7f00",
        Stage::Done => "#a65628",
    }
}

/// Grayscale PNG of the grid with the highest row on top.
fn heatmap_png(d: &StabilityDiagram) -> Vec<u8> {
    let (lo, hi) = d
        .grid
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut pixels = Vec::with_capacity(d.width * d.height);
    for row in (0..d.height).rev() {
        for i in 0..d.width {
            pixels.push(((d.value(i, row) - lo) / span * 255.0).round() as u8);
        }
    }
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, d.width as u32, d.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().expect("in-memory png header");
    w.write_image_data(&pixels).expect("in-memory png data");
    w.finish().expect("in-memory png finish");
    out
}

/// Draws the grid as a heatmap, one rectangle per measured patch colored by
/// stage in measurement order, the labelled lines and the final coordinate.
pub fn render_trace(outcome: &TuningOutcome, d: &StabilityDiagram) -> Result<String, HarnessError> {
    if outcome.trace.is_empty() {
        return Err(HarnessError::EmptyTrace);
    }
    let (w, h) = (d.width as f64 * SCALE, d.height as f64 * SCALE);
    // pixel centers sit at integer coordinates; row 0 is drawn at the bottom
    let sx = |px: f64| (px + 0.5) * SCALE;
    let sy = |py: f64| (d.height as f64 - 0.5 - py) * SCALE;
    let png = base64::engine::general_purpose::STANDARD.encode(heatmap_png(d));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" xmlns:xlink="http://www.w3.org/1999/xlink" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}">"#
    );
    let _ = writeln!(s, "<title>{}</title>", xml_escape(&d.id));
    let _ = writeln!(
        s,
        r#"<image x="0" y="0" width="{w:.0}" height="{h:.0}" preserveAspectRatio="none" style="image-rendering:pixelated" xlink:href="data:image/png;base64,{png}"/>"#
    );

    let _ = writeln!(s, r##"<g id="lines" fill="none" stroke="#00e5ff" stroke-width="1.5" stroke-opacity="0.7">"##);
    for line in &d.lines {
        let pts: Vec<String> = line
            .polyline
            .iter()
            .map(|&v| {
                let p = d.pixel_at(v);
                format!("{:.2},{:.2}", sx(p.x), sy(p.y))
            })
            .collect();
        let _ = writeln!(s, r#"<polyline data-line="{}" points="{}"/>"#, line.index, pts.join(" "));
    }
    let _ = writeln!(s, "</g>");

    let _ = writeln!(s, r#"<g id="steps" fill="none" stroke-width="1.5">"#);
    for (k, step) in outcome.trace.iter().enumerate() {
        let r = step.rect;
        let x = (r.x as f64) * SCALE;
        let y = sy((r.y + r.side) as f64 - 0.5);
        let side = r.side as f64 * SCALE;
        let dash = if step.validation { r#" stroke-dasharray="3 2""# } else { "" };
        let _ = writeln!(
            s,
            r#"<rect data-step="{k}" data-stage="{}" data-verdict="{}" x="{x:.2}" y="{y:.2}" width="{side:.2}" height="{side:.2}" stroke="{}"{dash}/>"#,
            step.stage.as_str(),
            verdict_str(step.verdict),
            stage_color(step.stage),
        );
    }
    let _ = writeln!(s, "</g>");

    let p: Point = d.pixel_at(outcome.final_v);
    let color = if outcome.success { "#00ff00" } else { "#ff0000" };
    let _ = writeln!(
        s,
        r#"<circle id="final" cx="{:.2}" cy="{:.2}" r="{:.1}" fill="{color}" stroke="black"/>"#,
        sx(p.x),
        sy(p.y),
        SCALE * 1.5
    );
    s.push_str("</svg>\n");
    Ok(s)
}

fn verdict_str(v: crate::calibrate::Verdict) -> &'static str {
    match v {
        crate::calibrate::Verdict::Line => "line",
        crate::calibrate::Verdict::NoLine => "no-line",
        crate::calibrate::Verdict::Unknown => "unknown",
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
