//! Seeded synthetic road networks and an exact-sampling rasterizer used as
//! ground truth.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{edge_ribbon, EdgeShape, Point2, Ribbon};
use crate::graph::{BezierGraph, EdgeParams, NodeId};
use crate::raster::{CanvasSpec, CoverageMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    SingleCurve,
    Grid,
    TJunctions,
    RandomPlanar,
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layout::SingleCurve => "single_curve",
            Layout::Grid => "grid",
            Layout::TJunctions => "t_junctions",
            Layout::RandomPlanar => "random_planar",
        })
    }
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single_curve" => Ok(Layout::SingleCurve),
            "grid" => Ok(Layout::Grid),
            "t_junctions" => Ok(Layout::TJunctions),
            "random_planar" => Ok(Layout::RandomPlanar),
            other => Err(Error::InvalidConfig(format!(
                "unknown layout {other:?} (expected single_curve, grid, t_junctions or random_planar)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub layout: Layout,
    /// Side length of the square scene, in meters.
    pub extent: f64,
    pub width_min: f64,
    pub width_max: f64,
    /// Largest control-point offset as a fraction of the chord.
    pub max_curvature: f64,
    /// Grid rows and columns of roads, or stub count for `TJunctions`.
    pub rows: usize,
    pub cols: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(layout: Layout, extent: f64, seed: u64) -> Self {
        SynthSpec { layout, extent, width_min: 6.0, width_max: 10.0, max_curvature: 0.3, rows: 2, cols: 2, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.extent > 0.0 && self.extent.is_finite()) {
            return Err(Error::InvalidConfig(format!("extent must be positive, got {}", self.extent)));
        }
        if !(self.width_min > 0.0 && self.width_min <= self.width_max) {
            return Err(Error::InvalidConfig("road width range must satisfy 0 < min <= max".into()));
        }
        if !(0.0..=0.5).contains(&self.max_curvature) {
            return Err(Error::InvalidConfig("max_curvature must lie in [0, 0.5]".into()));
        }
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidConfig("rows and cols must be at least 1".into()));
        }
        Ok(())
    }
}

struct Builder<'a> {
    g: BezierGraph,
    rng: &'a mut ChaCha8Rng,
    spec: &'a SynthSpec,
}

impl Builder<'_> {
    fn width(&mut self) -> f64 {
        if self.spec.width_min == self.spec.width_max {
            self.spec.width_min
        } else {
            self.rng.gen_range(self.spec.width_min..=self.spec.width_max)
        }
    }

    fn jitter(&mut self, amount: f64) -> f64 {
        self.rng.gen_range(-amount..=amount)
    }

    /// A gently bowed edge: both offsets on the same side.
    fn bow(&mut self, limit: f64) -> EdgeShape {
        let c = self.jitter(limit.min(self.spec.max_curvature));
        EdgeShape { d0: c, d1: c, ..EdgeShape::default() }
    }

    fn edge(&mut self, a: NodeId, b: NodeId, width: f64, rel: EdgeShape) {
        let len = self.g.position(a).unwrap().distance(self.g.position(b).unwrap());
        let shape = EdgeShape { d0: rel.d0 * len, d1: rel.d1 * len, ..rel };
        self.g.add_edge(a, b, EdgeParams { width, shape }).expect("generator emits valid edges");
    }
}

pub fn generate(spec: &SynthSpec) -> Result<BezierGraph> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut b = Builder { g: BezierGraph::new(), rng: &mut rng, spec };
    match spec.layout {
        Layout::SingleCurve => single_curve(&mut b),
        Layout::Grid => grid(&mut b),
        Layout::TJunctions => t_junctions(&mut b),
        Layout::RandomPlanar => random_planar(&mut b),
    }
    Ok(b.g)
}

fn single_curve(b: &mut Builder) {
    let e = b.spec.extent;
    let m = 0.1 * e;
    let start = Point2::new(m + b.jitter(0.03 * e), m + b.jitter(0.03 * e));
    let end = Point2::new(e - m + b.jitter(0.03 * e), e - m + b.jitter(0.03 * e));
    let p = b.g.add_node(start);
    let q = b.g.add_node(end);
    let lo = 0.5 * b.spec.max_curvature;
    let c = b.rng.gen_range(lo..=b.spec.max_curvature) * if b.rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let w = b.width();
    b.edge(p, q, w, EdgeShape { d0: c, d1: -c, ..EdgeShape::default() });
}

/// `rows` horizontal roads crossing `cols` vertical roads; every crossing
/// is a degree-4 node and every road ends short of the border.
fn grid(b: &mut Builder) {
    let e = b.spec.extent;
    let (rows, cols) = (b.spec.rows, b.spec.cols);
    let inset = 0.08 * e;
    let j = 0.02 * e;
    let ys: Vec<f64> = (1..=rows).map(|k| e * k as f64 / (rows + 1) as f64).collect();
    let xs: Vec<f64> = (1..=cols).map(|k| e * k as f64 / (cols + 1) as f64).collect();
    let mut cross = vec![vec![NodeId(0); cols]; rows];
    for (r, &y) in ys.iter().enumerate() {
        for (c, &x) in xs.iter().enumerate() {
            let at = Point2::new(x + b.jitter(j), y + b.jitter(j));
            cross[r][c] = b.g.add_node(at);
        }
    }
    for (r, &y) in ys.iter().enumerate() {
        let w = b.width();
        let at = Point2::new(inset, y + b.jitter(j));
        let left = b.g.add_node(at);
        let at = Point2::new(e - inset, y + b.jitter(j));
        let right = b.g.add_node(at);
        let mut chain = vec![left];
        chain.extend(cross[r].iter().copied());
        chain.push(right);
        for pair in chain.windows(2) {
            let s = b.bow(0.08);
            b.edge(pair[0], pair[1], w, s);
        }
    }
    for (c, &x) in xs.iter().enumerate() {
        let w = b.width();
        let at = Point2::new(x + b.jitter(j), inset);
        let top = b.g.add_node(at);
        let at = Point2::new(x + b.jitter(j), e - inset);
        let bottom = b.g.add_node(at);
        let mut chain = vec![top];
        chain.extend((0..rows).map(|r| cross[r][c]));
        chain.push(bottom);
        for pair in chain.windows(2) {
            let s = b.bow(0.08);
            b.edge(pair[0], pair[1], w, s);
        }
    }
}

/// A main road across the scene with `cols` stubs branching off it,
/// alternating sides.
fn t_junctions(b: &mut Builder) {
    let e = b.spec.extent;
    let stubs = b.spec.cols;
    let inset = 0.08 * e;
    let y = 0.5 * e + b.jitter(0.05 * e);
    let w_main = b.width();
    let at = Point2::new(inset, y + b.jitter(0.03 * e));
    let left = b.g.add_node(at);
    let at = Point2::new(e - inset, y + b.jitter(0.03 * e));
    let right = b.g.add_node(at);
    let mut chain = vec![left];
    let mut feet = Vec::new();
    for k in 1..=stubs {
        let x = e * k as f64 / (stubs + 1) as f64 + b.jitter(0.04 * e);
        let t = (x - inset) / (e - 2.0 * inset);
        let py = b.g.position(left).unwrap().y * (1.0 - t) + b.g.position(right).unwrap().y * t;
        let foot = b.g.add_node(Point2::new(x, py));
        chain.push(foot);
        feet.push(foot);
    }
    chain.push(right);
    for pair in chain.windows(2) {
        let s = b.bow(0.05);
        b.edge(pair[0], pair[1], w_main, s);
    }
    for (k, foot) in feet.into_iter().enumerate() {
        let side = if k % 2 == 0 { -1.0 } else { 1.0 };
        let p = b.g.position(foot).unwrap();
        let len = b.rng.gen_range(0.3..0.38) * e;
        let at = Point2::new(p.x + b.jitter(0.05 * e), p.y + side * len);
        let tip = b.g.add_node(at);
        let w = b.width();
        let s = b.bow(0.15);
        b.edge(foot, tip, w, s);
    }
}

fn segments_cross(a: Point2, b: Point2, c: Point2, d: Point2) -> bool {
    let o = |p: Point2, q: Point2, r: Point2| (q - p).cross(r - p);
    let (d1, d2, d3, d4) = (o(a, b, c), o(a, b, d), o(c, d, a), o(c, d, b));
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

/// Poisson-disk nodes joined to near neighbors by non-crossing, nearly
/// straight edges with generous angular separation at shared nodes.
fn random_planar(b: &mut Builder) {
    let e = b.spec.extent;
    let inset = 0.1 * e;
    let spacing = 0.22 * e;
    let mut pts: Vec<Point2> = Vec::new();
    for _ in 0..2000 {
        let p = Point2::new(b.rng.gen_range(inset..e - inset), b.rng.gen_range(inset..e - inset));
        if pts.iter().all(|q| q.distance(p) >= spacing) {
            pts.push(p);
        }
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let d = pts[i].distance(pts[j]);
            if d < 1.8 * spacing {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|p, q| p.0.total_cmp(&q.0));
    let mut chosen: Vec<(usize, usize)> = Vec::new();
    let mut degree = vec![0usize; pts.len()];
    let min_angle = 50f64.to_radians();
    for (_, i, j) in pairs {
        if degree[i] >= 3 || degree[j] >= 3 {
            continue;
        }
        let crosses = chosen.iter().any(|&(a, c)| {
            ![a, c].contains(&i) && ![a, c].contains(&j) && segments_cross(pts[i], pts[j], pts[a], pts[c])
        });
        let tight = chosen.iter().any(|&(a, c)| {
            [(i, j), (j, i)].iter().any(|&(s, t)| {
                let other = if a == s { c } else if c == s { a } else { return false };
                let u = pts[t] - pts[s];
                let v = pts[other] - pts[s];
                (u.dot(v) / (u.norm() * v.norm())).clamp(-1.0, 1.0).acos() < min_angle
            })
        });
        if !crosses && !tight {
            chosen.push((i, j));
            degree[i] += 1;
            degree[j] += 1;
        }
    }
    let mut ids = vec![None; pts.len()];
    for &(i, j) in &chosen {
        for k in [i, j] {
            if ids[k].is_none() {
                ids[k] = Some(b.g.add_node(pts[k]));
            }
        }
    }
    for (i, j) in chosen {
        let w = b.width();
        let s = b.bow(0.05);
        b.edge(ids[i].unwrap(), ids[j].unwrap(), w, s);
    }
}

/// Marks subsamples of one ribbon by even-odd scanline filling.
fn fill_ribbon(ribbon: &Ribbon, canvas: &CanvasSpec, ss: usize, hits: &mut [bool]) {
    let step = canvas.meters_per_pixel / ss as f64;
    let (sw, sh) = (canvas.width * ss, canvas.height * ss);
    let (mut ylo, mut yhi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in &ribbon.vertices {
        ylo = ylo.min(v.y);
        yhi = yhi.max(v.y);
    }
    let r0 = ((ylo / step - 0.5).floor().max(0.0)) as usize;
    let r1 = ((yhi / step - 0.5).ceil().max(0.0) as usize).min(sh.saturating_sub(1));
    let mut xs: Vec<f64> = Vec::new();
    let n = ribbon.vertices.len();
    for r in r0..=r1 {
        let y = (r as f64 + 0.5) * step;
        xs.clear();
        for i in 0..n {
            let (a, b) = (ribbon.vertices[i], ribbon.vertices[(i + 1) % n]);
            if (a.y > y) != (b.y > y) {
                xs.push(a.x + (y - a.y) / (b.y - a.y) * (b.x - a.x));
            }
        }
        xs.sort_by(f64::total_cmp);
        for span in xs.chunks_exact(2) {
            let c0 = ((span[0] / step - 0.5).ceil().max(0.0)) as usize;
            let c1 = (span[1] / step - 0.5).floor();
            if c1 < 0.0 {
                continue;
            }
            let c1 = (c1 as usize).min(sw - 1);
            for c in c0..=c1 {
                hits[r * sw + c] = true;
            }
        }
    }
}

/// Fraction of each pixel's `ss`×`ss` subsample lattice covered by the
/// union of all edge ribbons.
pub fn hard_rasterize(g: &BezierGraph, canvas: &CanvasSpec, supersample: usize) -> Result<CoverageMap> {
    if supersample == 0 {
        return Err(Error::InvalidConfig("supersample must be at least 1".into()));
    }
    let ss = supersample;
    let sw = canvas.width * ss;
    let mut hits = vec![false; sw * canvas.height * ss];
    for e in g.edges() {
        if let Ok(cp) = g.control_polygon(e.id) {
            fill_ribbon(&edge_ribbon(&cp, e.width), canvas, ss, &mut hits);
        }
    }
    let mut out = vec![0.0; canvas.pixel_count()];
    let inv = 1.0 / (ss * ss) as f64;
    for (i, row) in hits.chunks_exact(sw).enumerate() {
        let r = i / ss;
        for (c, chunk) in row.chunks_exact(ss).enumerate() {
            out[r * canvas.width + c] += chunk.iter().filter(|&&h| h).count() as f64 * inv;
        }
    }
    CoverageMap::from_values(*canvas, out.into_iter().map(|v: f64| v.min(1.0)).collect())
}

/// Hard render at eight subsamples per axis.
pub fn synth_mask(g: &BezierGraph, canvas: &CanvasSpec) -> Result<CoverageMap> {
    hard_rasterize(g, canvas, 8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layouts_have_expected_structure() {
        let g = generate(&SynthSpec::new(Layout::SingleCurve, 256.0, 1)).unwrap();
        assert_eq!((g.node_count(), g.edge_count()), (2, 1));

        let mut spec = SynthSpec::new(Layout::Grid, 200.0, 1);
        spec.rows = 3;
        spec.cols = 3;
        let g = generate(&spec).unwrap();
        g.validate().unwrap();
        assert_eq!(g.nodes().filter(|n| g.degree(n.id) == 4).count(), 9);
        assert_eq!(g.edge_count(), 24);

        let g = generate(&SynthSpec::new(Layout::TJunctions, 256.0, 4)).unwrap();
        assert_eq!(g.nodes().filter(|n| g.degree(n.id) == 3).count(), 2);

        let g = generate(&SynthSpec::new(Layout::RandomPlanar, 256.0, 4)).unwrap();
        g.validate().unwrap();
        assert!(g.edge_count() >= 2);
    }

    #[test]
    fn generation_is_seeded() {
        for layout in [Layout::SingleCurve, Layout::Grid, Layout::TJunctions, Layout::RandomPlanar] {
            let a = generate(&SynthSpec::new(layout, 256.0, 9)).unwrap();
            let b = generate(&SynthSpec::new(layout, 256.0, 9)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn offsets_respect_the_soft_bound() {
        for seed in 0..10 {
            for layout in [Layout::SingleCurve, Layout::Grid, Layout::TJunctions, Layout::RandomPlanar] {
                let g = generate(&SynthSpec::new(layout, 256.0, seed)).unwrap();
                for e in g.edges() {
                    let len = g.position(e.a).unwrap().distance(g.position(e.b).unwrap());
                    assert!(e.shape.d0.abs() / len <= 0.75 && e.shape.d1.abs() / len <= 0.75);
                }
            }
        }
    }

    #[test]
    fn rectangle_area_and_empty_graph() {
        let canvas = CanvasSpec::new(32, 32, 1.0).unwrap();
        let mut g = BezierGraph::new();
        assert!(hard_rasterize(&g, &canvas, 8).unwrap().values().iter().all(|&v| v == 0.0));
        let a = g.add_node(Point2::new(5.3, 10.2));
        let b = g.add_node(Point2::new(15.3, 10.2));
        g.add_edge(a, b, EdgeParams::straight(2.0)).unwrap();
        let mass: f64 = hard_rasterize(&g, &canvas, 8).unwrap().values().iter().sum();
        assert!((mass - 20.0).abs() / 20.0 < 0.02, "{mass}");
    }

    #[test]
    fn road_fraction_is_well_posed() {
        let canvas = CanvasSpec::new(256, 256, 1.0).unwrap();
        for seed in 0..5 {
            for layout in [Layout::SingleCurve, Layout::Grid, Layout::TJunctions, Layout::RandomPlanar] {
                let g = generate(&SynthSpec::new(layout, 256.0, seed)).unwrap();
                let m = synth_mask(&g, &canvas).unwrap();
                let frac = m.values().iter().filter(|&&v| v >= 0.5).count() as f64 / canvas.pixel_count() as f64;
                assert!((0.02..=0.5).contains(&frac), "{layout} seed {seed}: {frac}");
            }
        }
    }
}
