//! File formats: grayscale masks, graph JSON and SVG drawings.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::BezierGraph;
use crate::raster::{CanvasSpec, CoverageMap};

/// Loads an 8-bit grayscale PNG or PGM; each pixel becomes `level / 255`.
pub fn load_mask(path: &Path, meters_per_pixel: f64) -> Result<CoverageMap> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })?;
    let gray = img.to_luma8();
    let canvas = CanvasSpec::new(gray.width() as usize, gray.height() as usize, meters_per_pixel)?;
    CoverageMap::from_gray8(canvas, gray.as_raw())
}

/// Writes a mask as PNG or PGM depending on the file extension.
pub fn save_mask(map: &CoverageMap, path: &Path) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("pgm") => map.save_pgm(path),
        _ => map.save_png(path),
    }
}

pub fn read_graph(path: &Path) -> Result<(BezierGraph, f64)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    BezierGraph::from_json(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_graph(g: &BezierGraph, meters_per_pixel: f64, path: &Path) -> Result<()> {
    std::fs::write(path, g.to_json(meters_per_pixel)).map_err(|e| Error::io(path, e))
}

/// SVG drawing in meter coordinates: one cubic path per edge with the
/// stroke set to the road width, then a dot per node.
pub fn graph_svg(g: &BezierGraph, canvas: &CanvasSpec) -> String {
    let (w, h) = canvas.extent_m();
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {w} {h}">"#,
        canvas.width, canvas.height
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="black"/>"#);
    for e in g.edges() {
        let Ok(cp) = g.control_polygon(e.id) else { continue };
        let _ = writeln!(
            s,
            r#"<path id="e{}" d="M {:.3} {:.3} C {:.3} {:.3} {:.3} {:.3} {:.3} {:.3}" fill="none" stroke="white" stroke-opacity="0.8" stroke-width="{:.3}"/>"#,
            e.id.0, cp.p0.x, cp.p0.y, cp.p1.x, cp.p1.y, cp.p2.x, cp.p2.y, cp.p3.x, cp.p3.y, e.width
        );
    }
    let r = 1.5 * canvas.meters_per_pixel;
    for n in g.nodes() {
        let _ = writeln!(
            s,
            r##"<circle id="n{}" cx="{:.3}" cy="{:.3}" r="{r}" fill="#e4572e"/>"##,
            n.id.0, n.position.x, n.position.y
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_svg(g: &BezierGraph, canvas: &CanvasSpec, path: &Path) -> Result<()> {
    std::fs::write(path, graph_svg(g, canvas)).map_err(|e| Error::io(path, e))
}
