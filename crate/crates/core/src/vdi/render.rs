//! Explanation documents: JSON, Graphviz DOT and an SVG box overlay.

use std::fmt::Write;
use std::str::FromStr;

use super::{ContributionScale, Explanation, Question};
use crate::error::{Error, Result};
use crate::world::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Json,
    Dot,
    Svg,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(Format::Json),
            "dot" => Ok(Format::Dot),
            "svg" => Ok(Format::Svg),
            other => Err(Error::UnknownFormat(other.into())),
        }
    }
}

/// `image` is only needed for SVG.
pub fn render_explanation(
    expl: &Explanation,
    format: Format,
    scale: &ContributionScale,
    image: Option<&Image>,
) -> Result<String> {
    match format {
        Format::Json => render_json(expl),
        Format::Dot => Ok(render_dot(expl, scale)),
        Format::Svg => {
            let img = image.ok_or_else(|| Error::InvalidArgument("SVG output needs the image".into()))?;
            Ok(render_svg(expl, scale, img))
        }
    }
}

pub fn render_json(expl: &Explanation) -> Result<String> {
    Ok(serde_json::to_string_pretty(expl)?)
}

pub fn parse_explanation(json: &str) -> Result<Explanation> {
    let e: Explanation = serde_json::from_str(json).map_err(|e| Error::schema("explanation", e.to_string()))?;
    if e.version != super::EXPLANATION_VERSION {
        return Err(Error::schema("explanation.version", format!("unsupported {}", e.version)));
    }
    Ok(e)
}

/// One cluster per class, drawing that class's own hypothesis with nodes
/// and edges colored by contribution bucket.
pub fn render_dot(expl: &Explanation, scale: &ContributionScale) -> String {
    let mut s = String::from("digraph explanation {\n  rankdir=LR;\n  node [shape=ellipse, style=filled];\n");
    for sec in &expl.sections {
        let h = sec.own();
        let q = match sec.question {
            Question::Why => "why",
            Question::WhyNot => "why not",
        };
        let _ = writeln!(s, "  subgraph cluster_c{} {{", sec.class_id);
        let _ = writeln!(
            s,
            "    label=\"{q} class {} (logit {:.3}, s = {:.3})\";",
            sec.class_id, sec.logit, h.score
        );
        for n in &h.nodes {
            let style = if n.detected { "filled" } else { "filled,dashed" };
            let _ = writeln!(
                s,
                "    c{}_k{} [label=\"concept {}\\n{:+.3}\", fillcolor=\"{}\", style=\"{style}\"];",
                sec.class_id,
                n.concept_id,
                n.concept_id,
                n.score,
                scale.bucket(n.normalized).color()
            );
        }
        for e in &h.edges {
            let _ = writeln!(
                s,
                "    c{c}_k{} -> c{c}_k{} [label=\"{:+.3}\", color=\"{}\"];",
                e.from,
                e.to,
                e.score,
                scale.bucket(e.normalized).color(),
                c = sec.class_id
            );
        }
        s.push_str("  }\n");
    }
    s.push_str("}\n");
    s
}

const PX: usize = 4;

/// The image once per class, with that class's detected concept boxes
/// outlined in their bucket color.
pub fn render_svg(expl: &Explanation, scale: &ContributionScale, image: &Image) -> String {
    let (w, h) = (image.width * PX, image.height * PX);
    let pad = 24;
    let total_w = expl.sections.len() * (w + pad) + pad;
    let total_h = h + 2 * pad;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{total_w}\" height=\"{total_h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let mut pixels = String::new();
    for y in 0..image.height {
        for x in 0..image.width {
            let rgb: Vec<u8> = (0..3)
                .map(|c| {
                    let v = image.at(c.min(image.channels - 1), y, x);
                    (v.clamp(0.0, 1.0) * 255.0).round() as u8
                })
                .collect();
            let _ = writeln!(
                pixels,
                "<rect x=\"{}\" y=\"{}\" width=\"{PX}\" height=\"{PX}\" fill=\"#{:02x}{:02x}{:02x}\"/>",
                x * PX,
                y * PX,
                rgb[0],
                rgb[1],
                rgb[2]
            );
        }
    }
    for (k, sec) in expl.sections.iter().enumerate() {
        let ox = pad + k * (w + pad);
        let q = if sec.question == Question::Why { "why" } else { "why not" };
        let _ = writeln!(s, "<g transform=\"translate({ox},{pad})\">");
        let _ = writeln!(s, "<text x=\"0\" y=\"-8\">{q} class {} ({:+.3})</text>", sec.class_id, sec.own().score);
        s.push_str(&pixels);
        for n in sec.own().nodes.iter().filter(|n| n.detected) {
            if let Some(b) = n.bbox {
                let color = scale.bucket(n.normalized).color();
                let _ = writeln!(
                    s,
                    "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>",
                    b.x0 * PX,
                    b.y0 * PX,
                    b.width() * PX,
                    b.height() * PX
                );
                let _ = writeln!(
                    s,
                    "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{} {:+.2}</text>",
                    b.x0 * PX + 2,
                    b.y0 * PX + 12,
                    n.concept_id,
                    n.score
                );
            }
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}
