//! Soft rasterization of edge ribbons with analytic gradients.
//!
//! Each edge is serialized to a ribbon polygon and shaded by a linear ramp
//! over its signed distance: `cov = clamp(0.5 - sdf / beta, 0, 1)` where
//! `beta` is one pixel. Only pixels inside the ramp carry gradient, and
//! the chain back to the graph parameters is
//! pixel -> nearest ribbon segment -> ribbon vertices -> control points
//! -> node positions / width / shape.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{
    control_polygon_vjp, edge_ribbon, point_segment_distance, ribbon_vjp, ControlPolygon, Point2, Ribbon,
};
use crate::graph::{BezierGraph, EdgeId, ParamLayout};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CanvasSpec {
    pub width: usize,
    pub height: usize,
    pub meters_per_pixel: f64,
}

impl CanvasSpec {
    pub fn new(width: usize, height: usize, meters_per_pixel: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidConfig(format!("canvas {width}x{height} is empty")));
        }
        if !(meters_per_pixel > 0.0 && meters_per_pixel.is_finite()) {
            return Err(Error::InvalidConfig(format!("meters per pixel must be positive, got {meters_per_pixel}")));
        }
        Ok(CanvasSpec { width, height, meters_per_pixel })
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Center of pixel `(col, row)` in meters.
    #[inline]
    pub fn pixel_center(&self, col: usize, row: usize) -> Point2 {
        Point2::new((col as f64 + 0.5) * self.meters_per_pixel, (row as f64 + 0.5) * self.meters_per_pixel)
    }

    /// Width of the anti-aliasing ramp in meters.
    pub fn aa_band(&self) -> f64 {
        self.meters_per_pixel
    }

    pub fn extent_m(&self) -> (f64, f64) {
        (self.width as f64 * self.meters_per_pixel, self.height as f64 * self.meters_per_pixel)
    }

    /// Inclusive pixel range whose centers fall in `[lo, hi]` along one axis.
    fn pixel_range(&self, lo: f64, hi: f64, count: usize) -> Option<(usize, usize)> {
        let first = (lo / self.meters_per_pixel - 0.5).ceil().max(0.0);
        let last = (hi / self.meters_per_pixel - 0.5).floor().min(count as f64 - 1.0);
        (first <= last).then_some((first as usize, last as usize))
    }
}

/// Row-major scalar grid with every value in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoverageMap {
    width: usize,
    height: usize,
    meters_per_pixel: f64,
    data: Vec<f64>,
}

impl CoverageMap {
    pub fn zeros(canvas: CanvasSpec) -> Self {
        CoverageMap {
            width: canvas.width,
            height: canvas.height,
            meters_per_pixel: canvas.meters_per_pixel,
            data: vec![0.0; canvas.pixel_count()],
        }
    }

    pub fn from_values(canvas: CanvasSpec, data: Vec<f64>) -> Result<Self> {
        if data.len() != canvas.pixel_count() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {}x{} canvas",
                data.len(),
                canvas.width,
                canvas.height
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidConfig(format!("coverage value {v} outside [0, 1]")));
        }
        Ok(CoverageMap { width: canvas.width, height: canvas.height, meters_per_pixel: canvas.meters_per_pixel, data })
    }

    /// Gray levels mapped to `level / 255`.
    pub fn from_gray8(canvas: CanvasSpec, levels: &[u8]) -> Result<Self> {
        Self::from_values(canvas, levels.iter().map(|&v| v as f64 / 255.0).collect())
    }

    pub fn canvas(&self) -> CanvasSpec {
        CanvasSpec { width: self.width, height: self.height, meters_per_pixel: self.meters_per_pixel }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn meters_per_pixel(&self) -> f64 {
        self.meters_per_pixel
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn same_shape(&self, other: &CoverageMap) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// Total coverage times pixel area, in m².
    pub fn mass_m2(&self) -> f64 {
        self.data.iter().sum::<f64>() * self.meters_per_pixel * self.meters_per_pixel
    }

    pub fn to_gray8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (255.0 * v).round().clamp(0.0, 255.0) as u8).collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.to_gray8())
            .expect("buffer matches dimensions");
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let mut bytes = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        bytes.extend(self.to_gray8());
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

/// Per-pixel record for pixels inside the anti-aliasing ramp.
#[derive(Clone, Copy, Debug)]
struct BandPixel {
    local: u32,
    segment: u32,
    /// Parameter of the nearest point along the segment.
    t: f64,
    /// Gradient of the signed distance w.r.t. the nearest point.
    dsdf_dq: Point2,
}

/// Coverage of one edge, restricted to its padded bounding box.
#[derive(Clone, Debug)]
pub struct EdgeRaster {
    pub edge: EdgeId,
    /// Column and row of the box's top-left pixel.
    pub origin: (usize, usize),
    pub box_width: usize,
    pub box_height: usize,
    pub coverage: Vec<f64>,
    ribbon_samples: usize,
    band: Vec<BandPixel>,
}

impl EdgeRaster {
    fn empty(edge: EdgeId) -> Self {
        EdgeRaster { edge, origin: (0, 0), box_width: 0, box_height: 0, coverage: Vec::new(), ribbon_samples: 0, band: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.coverage.is_empty()
    }

    /// Canvas pixel index of a box-local index.
    #[inline]
    fn global(&self, local: usize, canvas: &CanvasSpec) -> usize {
        let (c, r) = (local % self.box_width, local / self.box_width);
        (self.origin.1 + r) * canvas.width + self.origin.0 + c
    }

    /// Coverage mass in pixel units.
    pub fn mass(&self) -> f64 {
        self.coverage.iter().sum()
    }

    pub fn band_len(&self) -> usize {
        self.band.len()
    }

    /// Writes this edge's coverage into a full-canvas buffer.
    pub fn splat(&self, canvas: &CanvasSpec, out: &mut [f64]) {
        for (i, &v) in self.coverage.iter().enumerate() {
            out[self.global(i, canvas)] += v;
        }
    }
}

/// Nonzero-winding inside test for every pixel center of a box.
fn winding_fill(ribbon: &Ribbon, canvas: &CanvasSpec, cols: (usize, usize), rows: (usize, usize)) -> Vec<bool> {
    let bw = cols.1 - cols.0 + 1;
    let bh = rows.1 - rows.0 + 1;
    let mpp = canvas.meters_per_pixel;
    let mut crossings: Vec<Vec<(f64, i32)>> = vec![Vec::new(); bh];
    for (a, b) in ribbon.segments() {
        if a.y == b.y {
            continue;
        }
        let (lo, hi, dir) = if a.y < b.y { (a, b, 1) } else { (b, a, -1) };
        // Rows whose center y lies in [lo.y, hi.y).
        let r0 = ((lo.y / mpp - 0.5).ceil().max(rows.0 as f64)) as isize;
        let r1 = ((hi.y / mpp - 0.5).ceil() - 1.0).min(rows.1 as f64) as isize;
        for r in r0..=r1 {
            let y = (r as f64 + 0.5) * mpp;
            if y < lo.y || y >= hi.y {
                continue;
            }
            let x = lo.x + (y - lo.y) * (hi.x - lo.x) / (hi.y - lo.y);
            crossings[r as usize - rows.0].push((x, dir));
        }
    }
    let mut inside = vec![false; bw * bh];
    for (r, row) in crossings.iter_mut().enumerate() {
        if row.is_empty() {
            continue;
        }
        row.sort_by(|p, q| p.0.total_cmp(&q.0));
        let mut k = 0;
        let mut winding = 0;
        for c in 0..bw {
            let x = (cols.0 + c) as f64 * mpp + 0.5 * mpp;
            while k < row.len() && row[k].0 < x {
                winding += row[k].1;
                k += 1;
            }
            inside[r * bw + c] = winding != 0;
        }
    }
    inside
}

/// Soft coverage of one ribbon, plus the bookkeeping its backward pass needs.
pub fn render_ribbon(ribbon: &Ribbon, edge: EdgeId, canvas: &CanvasSpec) -> EdgeRaster {
    let beta = canvas.aa_band();
    let half = 0.5 * beta;
    let mut lo = ribbon.vertices[0];
    let mut hi = lo;
    for v in &ribbon.vertices {
        lo = Point2 { x: lo.x.min(v.x), y: lo.y.min(v.y) };
        hi = Point2 { x: hi.x.max(v.x), y: hi.y.max(v.y) };
    }
    let (Some(cols), Some(rows)) = (
        canvas.pixel_range(lo.x - beta, hi.x + beta, canvas.width),
        canvas.pixel_range(lo.y - beta, hi.y + beta, canvas.height),
    ) else {
        return EdgeRaster::empty(edge);
    };
    let bw = cols.1 - cols.0 + 1;
    let bh = rows.1 - rows.0 + 1;
    let inside = winding_fill(ribbon, canvas, cols, rows);

    // Nearest segment within half a band of each pixel.
    let mut best: Vec<(f64, u32, f64)> = vec![(half, u32::MAX, 0.0); bw * bh];
    let n = ribbon.vertices.len();
    for s in 0..n {
        let a = ribbon.vertices[s];
        let b = ribbon.vertices[(s + 1) % n];
        let Some((c0, c1)) = canvas.pixel_range(a.x.min(b.x) - half, a.x.max(b.x) + half, canvas.width) else {
            continue;
        };
        let Some((r0, r1)) = canvas.pixel_range(a.y.min(b.y) - half, a.y.max(b.y) + half, canvas.height) else {
            continue;
        };
        for r in r0.max(rows.0)..=r1.min(rows.1) {
            for c in c0.max(cols.0)..=c1.min(cols.1) {
                let (d, t) = point_segment_distance(canvas.pixel_center(c, r), a, b);
                let slot = &mut best[(r - rows.0) * bw + (c - cols.0)];
                if d < slot.0 {
                    *slot = (d, s as u32, t);
                }
            }
        }
    }

    let mut coverage = vec![0.0; bw * bh];
    let mut band = Vec::new();
    for (i, (&(d, seg, t), &is_in)) in best.iter().zip(&inside).enumerate() {
        if seg == u32::MAX {
            coverage[i] = if is_in { 1.0 } else { 0.0 };
            continue;
        }
        let sdf = if is_in { -d } else { d };
        coverage[i] = (0.5 - sdf / beta).clamp(0.0, 1.0);
        if d > 0.0 {
            let (col, row) = (cols.0 + i % bw, rows.0 + i / bw);
            let p = canvas.pixel_center(col, row);
            let a = ribbon.vertices[seg as usize];
            let b = ribbon.vertices[(seg as usize + 1) % n];
            let q = a.lerp(b, t);
            let sign = if is_in { -1.0 } else { 1.0 };
            band.push(BandPixel { local: i as u32, segment: seg, t, dsdf_dq: (q - p) * (sign / d) });
        }
    }
    EdgeRaster {
        edge,
        origin: (cols.0, rows.0),
        box_width: bw,
        box_height: bh,
        coverage,
        ribbon_samples: ribbon.sample_count(),
        band,
    }
}

pub fn render_edge(cp: &ControlPolygon, width: f64, edge: EdgeId, canvas: &CanvasSpec) -> EdgeRaster {
    render_ribbon(&edge_ribbon(cp, width), edge, canvas)
}

/// Everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct RenderBundle {
    pub canvas: CanvasSpec,
    /// One entry per edge, in edge-id order.
    pub per_edge: Vec<EdgeRaster>,
    /// `min(1, composite_sum)`.
    pub composite_union: CoverageMap,
    /// Unclipped sum of per-edge coverage.
    pub composite_sum: Vec<f64>,
}

impl RenderBundle {
    pub fn edge_count(&self) -> usize {
        self.per_edge.len()
    }
}

fn render_one(g: &BezierGraph, id: EdgeId, canvas: &CanvasSpec) -> EdgeRaster {
    let edge = g.edge(id).expect("edge id from the same graph");
    match g.control_polygon(id) {
        Ok(cp) if edge.width > 0.0 => render_edge(&cp, edge.width, id, canvas),
        _ => EdgeRaster::empty(id),
    }
}

pub fn render_graph(g: &BezierGraph, canvas: &CanvasSpec) -> RenderBundle {
    render_graph_with(g, canvas, true)
}

/// Renders every edge, optionally spreading edges over the rayon pool.
/// Compositing always runs in edge-id order, so both modes agree bit for bit.
pub fn render_graph_with(g: &BezierGraph, canvas: &CanvasSpec, parallel: bool) -> RenderBundle {
    let ids = g.edge_ids();
    let per_edge: Vec<EdgeRaster> = if parallel {
        ids.par_iter().map(|&id| render_one(g, id, canvas)).collect()
    } else {
        ids.iter().map(|&id| render_one(g, id, canvas)).collect()
    };
    let mut sum = vec![0.0; canvas.pixel_count()];
    for r in &per_edge {
        r.splat(canvas, &mut sum);
    }
    let union = sum.iter().map(|&s| s.min(1.0)).collect();
    RenderBundle {
        canvas: *canvas,
        per_edge,
        composite_union: CoverageMap {
            width: canvas.width,
            height: canvas.height,
            meters_per_pixel: canvas.meters_per_pixel,
            data: union,
        },
        composite_sum: sum,
    }
}

/// Gradient accumulator aligned with a graph's flattened parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GradSink {
    pub values: Vec<f64>,
}

impl GradSink {
    pub fn zeros(len: usize) -> Self {
        GradSink { values: vec![0.0; len] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn add_scaled(&mut self, other: &GradSink, scale: f64) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }
}

/// Gradient contributions of one edge, before scattering into the sink.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct EdgeContribution {
    pub edge_index: usize,
    pub node_a: usize,
    pub node_b: usize,
    pub grad_a: Point2,
    pub grad_b: Point2,
    /// width, alpha0, alpha1, d0, d1
    pub edge: [f64; 5],
}

impl EdgeContribution {
    pub(crate) fn scatter(&self, layout: &ParamLayout, sink: &mut GradSink) {
        let na = BezierGraph::node_offset(layout, self.node_a);
        let nb = BezierGraph::node_offset(layout, self.node_b);
        sink.values[na] += self.grad_a.x;
        sink.values[na + 1] += self.grad_a.y;
        sink.values[nb] += self.grad_b.x;
        sink.values[nb + 1] += self.grad_b.y;
        let eo = BezierGraph::edge_offset(layout, self.edge_index);
        for (k, v) in self.edge.iter().enumerate() {
            sink.values[eo + k] += v;
        }
    }
}

/// Sorted node ids, for mapping a node to its layout index.
pub(crate) fn node_index(g: &BezierGraph) -> Vec<crate::graph::NodeId> {
    g.node_ids()
}

pub(crate) fn index_of(ids: &[crate::graph::NodeId], id: crate::graph::NodeId) -> usize {
    ids.binary_search(&id).expect("node id present in layout")
}

/// Chain rule from per-pixel gradients of the two composites back to the
/// graph parameters.
///
/// The union clip passes gradient only where the sum is strictly below one.
pub fn backward(
    bundle: &RenderBundle,
    g: &BezierGraph,
    layout: &ParamLayout,
    upstream_union: &[f64],
    upstream_sum: &[f64],
) -> Result<GradSink> {
    layout.check(g)?;
    let canvas = &bundle.canvas;
    if upstream_union.len() != canvas.pixel_count() || upstream_sum.len() != canvas.pixel_count() {
        return Err(Error::DimensionMismatch(format!(
            "upstream maps of {} / {} values for a {}-pixel canvas",
            upstream_union.len(),
            upstream_sum.len(),
            canvas.pixel_count()
        )));
    }
    let ids = g.edge_ids();
    if ids.len() != bundle.per_edge.len() || ids.iter().zip(&bundle.per_edge).any(|(a, r)| *a != r.edge) {
        return Err(Error::LayoutMismatch("render bundle was produced from a different graph".into()));
    }
    let dsum: Vec<f64> = bundle
        .composite_sum
        .iter()
        .zip(upstream_union.iter().zip(upstream_sum))
        .map(|(&s, (&gu, &gs))| gs + if s < 1.0 { gu } else { 0.0 })
        .collect();
    let nodes = node_index(g);
    let contributions: Vec<Option<EdgeContribution>> = bundle
        .per_edge
        .par_iter()
        .enumerate()
        .map(|(k, raster)| edge_backward(g, raster, k, &nodes, canvas, &dsum))
        .collect::<Result<_>>()?;
    let mut sink = GradSink::zeros(layout.len());
    for c in contributions.into_iter().flatten() {
        c.scatter(layout, &mut sink);
    }
    Ok(sink)
}

fn edge_backward(
    g: &BezierGraph,
    raster: &EdgeRaster,
    edge_index: usize,
    nodes: &[crate::graph::NodeId],
    canvas: &CanvasSpec,
    dsum: &[f64],
) -> Result<Option<EdgeContribution>> {
    if raster.band.is_empty() {
        return Ok(None);
    }
    let edge = g.edge(raster.edge)?;
    let cp = g.control_polygon(raster.edge)?;
    let n_vertices = 2 * raster.ribbon_samples;
    let mut vertex_grads = vec![Point2::ZERO; n_vertices];
    let inv_beta = 1.0 / canvas.aa_band();
    let mut any = false;
    for bp in &raster.band {
        let up = dsum[raster.global(bp.local as usize, canvas)];
        if up == 0.0 {
            continue;
        }
        any = true;
        let f = -up * inv_beta;
        let s = bp.segment as usize;
        vertex_grads[s] += bp.dsdf_dq * (f * (1.0 - bp.t));
        vertex_grads[(s + 1) % n_vertices] += bp.dsdf_dq * (f * bp.t);
    }
    if !any {
        return Ok(None);
    }
    let (gcp, gw) = ribbon_vjp(&cp, edge.width, &vertex_grads);
    let pa = g.position(edge.a)?;
    let pb = g.position(edge.b)?;
    let sg = control_polygon_vjp(pa, pb, &edge.shape, &gcp)?;
    Ok(Some(EdgeContribution {
        edge_index,
        node_a: index_of(nodes, edge.a),
        node_b: index_of(nodes, edge.b),
        grad_a: sg.pi,
        grad_b: sg.pj,
        edge: [gw, sg.alpha0, sg.alpha1, sg.d0, sg.d1],
    }))
}
