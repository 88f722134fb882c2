//! SVG scatter plots of 2-D embeddings: color encodes the label, marker shape
//! encodes the domain. Every sample is one element with `class="point"`.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use super::EmbeddingSet;
use crate::error::{Error, Result};

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];
const UNLABELED: &str = "#444444";
const SIZE: f64 = 640.0;
const MARGIN: f64 = 40.0;
const LEGEND_W: f64 = 160.0;
const R: f64 = 4.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
        .replace('\'', "&apos;")
}

fn marker(out: &mut String, shape: usize, x: f64, y: f64, fill: &str, extra: &str) {
    let _ = match shape % 4 {
        0 => write!(out, r#"<circle {extra}cx="{x:.2}" cy="{y:.2}" r="{R}" fill="{fill}"/>"#),
        1 => write!(
            out,
            r#"<rect {extra}x="{:.2}" y="{:.2}" width="{}" height="{}" fill="{fill}"/>"#,
            x - R,
            y - R,
            2.0 * R,
            2.0 * R
        ),
        2 => write!(
            out,
            r#"<polygon {extra}points="{:.2},{:.2} {:.2},{:.2} {:.2},{:.2}" fill="{fill}"/>"#,
            x,
            y - R,
            x - R,
            y + R,
            x + R,
            y + R
        ),
        _ => write!(
            out,
            r#"<polygon {extra}points="{:.2},{:.2} {:.2},{:.2} {:.2},{:.2} {:.2},{:.2}" fill="{fill}"/>"#,
            x,
            y - R,
            x + R,
            y,
            x,
            y + R,
            x - R,
            y
        ),
    };
    out.push('\n');
}

/// Renders the first two columns of `emb` as an SVG document.
pub fn scatter_svg(emb: &EmbeddingSet, title: &str) -> Result<String> {
    if emb.dim() < 2 {
        return Err(Error::Dimension(format!("scatter needs 2-D points, got {}-D", emb.dim())));
    }
    let domains: Vec<&str> = emb
        .domains
        .iter()
        .map(String::as_str)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let labels: BTreeSet<usize> = emb.labels.iter().flatten().copied().collect();

    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for v in &emb.vectors {
        for d in 0..2 {
            lo[d] = lo[d].min(v[d]);
            hi[d] = hi[d].max(v[d]);
        }
    }
    let span = |d: usize| if hi[d] > lo[d] { hi[d] - lo[d] } else { 1.0 };
    let inner = SIZE - 2.0 * MARGIN;
    let px = |v: f64| MARGIN + (v - lo[0]) / span(0) * inner;
    let py = |v: f64| SIZE - MARGIN - (v - lo[1]) / span(1) * inner;
    let color = |l: Option<usize>| l.map_or(UNLABELED, |l| PALETTE[l % PALETTE.len()]);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{SIZE}" viewBox="0 0 {w} {SIZE}">"#,
        w = SIZE + LEGEND_W
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{MARGIN}" y="{}" font-family="sans-serif" font-size="14">{}</text>"#,
        MARGIN / 2.0,
        escape(title)
    );
    out.push_str("<g id=\"points\">\n");
    for i in 0..emb.len() {
        let shape = domains.binary_search(&emb.domains[i].as_str()).expect("collected above");
        let extra = format!(r#"class="point" data-id="{}" "#, escape(&emb.ids[i]));
        marker(&mut out, shape, px(emb.vectors[i][0]), py(emb.vectors[i][1]), color(emb.labels[i]), &extra);
    }
    out.push_str("</g>\n<g id=\"legend\" font-family=\"sans-serif\" font-size=\"12\">\n");
    let x0 = SIZE + 10.0;
    let mut y = MARGIN;
    for &l in &labels {
        marker(&mut out, 0, x0, y, color(Some(l)), "");
        let _ = writeln!(out, r#"<text x="{}" y="{}">label {l}</text>"#, x0 + 10.0, y + 4.0);
        y += 18.0;
    }
    y += 10.0;
    for (k, d) in domains.iter().enumerate() {
        marker(&mut out, k, x0, y, UNLABELED, "");
        let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, x0 + 10.0, y + 4.0, escape(d));
        y += 18.0;
    }
    out.push_str("</g>\n</svg>\n");
    Ok(out)
}
