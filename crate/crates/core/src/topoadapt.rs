//! Discrete topology edits applied between gradient steps.
//!
//! Every operator checks its own preconditions and returns an error when
//! they do not hold; [`topo_pass`] uses those checks as filters and applies
//! whatever is eligible until nothing changes.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    arc_length, closest_point, eval_curve, fit_shape_at, fit_shape_to_points, sample_polyline, split_curve,
    ControlPolygon, EdgeShape, Point2,
};
use crate::graph::{BezierGraph, EdgeId, EdgeParams, NodeId};
use crate::raster::CoverageMap;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopoConfig {
    pub eps_merge: f64,
    /// Degrees; two edges meeting at a node count as collinear above this.
    pub theta_collinear: f64,
    pub min_edge_length: f64,
    pub min_edge_width: f64,
    pub min_unfit_area: f64,
    pub road_add_period: u32,
    pub connect_min_age: u32,
    pub collinear_min_age: u32,
    pub prune_grace: u32,
    pub t_warmup: u32,
    pub tau_seg: f64,
    pub tau_render: f64,
    pub init_edge_length: f64,
    pub init_edge_width: f64,
    pub cell_size: f64,
}

impl Default for TopoConfig {
    fn default() -> Self {
        TopoConfig {
            eps_merge: 4.0,
            theta_collinear: 170.0,
            min_edge_length: 0.6,
            min_edge_width: 0.3,
            min_unfit_area: 50.0,
            road_add_period: 20,
            connect_min_age: 15,
            collinear_min_age: 60,
            prune_grace: 20,
            t_warmup: 15,
            tau_seg: 0.5,
            tau_render: 0.5,
            init_edge_length: 10.0,
            init_edge_width: 4.0,
            cell_size: 8.0,
        }
    }
}

impl TopoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.eps_merge > 0.0) {
            return bad(format!("eps_merge must be positive, got {}", self.eps_merge));
        }
        if !(self.theta_collinear > 90.0 && self.theta_collinear < 180.0) {
            return bad(format!("theta_collinear must lie in (90, 180), got {}", self.theta_collinear));
        }
        if self.cell_size < self.eps_merge {
            return bad(format!("cell_size {} is smaller than eps_merge {}", self.cell_size, self.eps_merge));
        }
        if self.road_add_period == 0 {
            return bad("road_add_period must be at least 1".into());
        }
        if !(self.init_edge_length > 0.0 && self.init_edge_width > 0.0) {
            return bad("initial edge length and width must be positive".into());
        }
        if self.min_edge_length < 0.0 || self.min_edge_width < 0.0 || self.min_unfit_area < 0.0 {
            return bad("minimum sizes must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditOp {
    Merge,
    Tjunction,
    Collinear,
    Prune,
    Add,
}

/// One applied edit. The meaning of `ids` depends on the operation:
/// merge `[u, v, new]`, tjunction `[v, split_edge, half_a, half_b]`,
/// collinear `[v, e1, e2, new]`, prune `[edge, a, b]` or `[node]`,
/// add `[a, b, edge]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub iter: u32,
    pub op: EditOp,
    pub ids: Vec<u64>,
    pub pos: [f64; 2],
}

impl EditRecord {
    fn new(iter: u32, op: EditOp, ids: Vec<u64>, pos: Point2) -> Self {
        EditRecord { iter, op, ids, pos: [pos.x, pos.y] }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("edit records serialize")
    }
}

type Cell = (i64, i64);

/// Uniform bucket grid over node positions and padded edge bounds.
#[derive(Clone, Debug)]
pub struct SpatialGrid {
    pub cell_size: f64,
    pub edge_pad: f64,
    node_buckets: BTreeMap<Cell, Vec<NodeId>>,
    edge_buckets: BTreeMap<Cell, Vec<EdgeId>>,
}

impl SpatialGrid {
    pub fn cell_of(&self, p: Point2) -> Cell {
        ((p.x / self.cell_size).floor() as i64, (p.y / self.cell_size).floor() as i64)
    }

    /// Nodes in the 3×3 block of cells around `p`.
    pub fn nodes_near(&self, p: Point2) -> Vec<NodeId> {
        let (cx, cy) = self.cell_of(p);
        let mut out = Vec::new();
        for dy in -1..=1 {
            for dx in -1..=1 {
                if let Some(ids) = self.node_buckets.get(&(cx + dx, cy + dy)) {
                    out.extend_from_slice(ids);
                }
            }
        }
        out
    }

    /// Edges whose padded bounds touch the cell containing `p`.
    pub fn edges_near(&self, p: Point2) -> &[EdgeId] {
        self.edge_buckets.get(&self.cell_of(p)).map_or(&[], Vec::as_slice)
    }

    pub fn node_cell_count(&self) -> usize {
        self.node_buckets.len()
    }
}

fn edge_bounds(g: &BezierGraph, e: EdgeId) -> Result<(Point2, Point2)> {
    match g.control_polygon(e) {
        Ok(cp) => Ok(cp.bounds()),
        Err(_) => {
            let edge = g.edge(e)?;
            let (a, b) = (g.position(edge.a)?, g.position(edge.b)?);
            Ok((Point2::new(a.x.min(b.x), a.y.min(b.y)), Point2::new(a.x.max(b.x), a.y.max(b.y))))
        }
    }
}

/// Buckets every node by its host cell and every edge into all cells its
/// bounds, padded by `edge_pad`, intersect.
pub fn build_grid(g: &BezierGraph, cell_size: f64, edge_pad: f64) -> SpatialGrid {
    let mut grid = SpatialGrid { cell_size, edge_pad, node_buckets: BTreeMap::new(), edge_buckets: BTreeMap::new() };
    for n in g.nodes() {
        let c = grid.cell_of(n.position);
        grid.node_buckets.entry(c).or_default().push(n.id);
    }
    for e in g.edges() {
        let Ok((lo, hi)) = edge_bounds(g, e.id) else { continue };
        let pad = Point2::new(edge_pad, edge_pad);
        let (c0, c1) = (grid.cell_of(lo - pad), grid.cell_of(hi + pad));
        for cy in c0.1..=c1.1 {
            for cx in c0.0..=c1.0 {
                grid.edge_buckets.entry((cx, cy)).or_default().push(e.id);
            }
        }
    }
    grid
}

/// Node pairs closer than `radius`, as `(distance, u, v)` with `u < v`,
/// sorted by distance then ids.
pub fn close_node_pairs(g: &BezierGraph, grid: &SpatialGrid, radius: f64) -> Vec<(f64, NodeId, NodeId)> {
    let mut out = Vec::new();
    for n in g.nodes() {
        for other in grid.nodes_near(n.position) {
            if other <= n.id {
                continue;
            }
            let d = n.position.distance(g.position(other).expect("grid built from graph"));
            if d < radius {
                out.push((d, n.id, other));
            }
        }
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    out
}

/// Node/edge pairs where the node is within `radius` of a curve it is not
/// an endpoint of, as `(distance, node, edge, t)`, sorted by distance.
pub fn close_node_edge_pairs(g: &BezierGraph, grid: &SpatialGrid, radius: f64) -> Vec<(f64, NodeId, EdgeId, f64)> {
    let mut out = Vec::new();
    for n in g.nodes() {
        for &e in grid.edges_near(n.position) {
            let edge = g.edge(e).expect("grid built from graph");
            if edge.touches(n.id) {
                continue;
            }
            let Ok(cp) = g.control_polygon(e) else { continue };
            let (t, _, d) = closest_point(&cp, n.position);
            if d < radius {
                out.push((d, n.id, e, t));
            }
        }
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    out
}

fn require_age(what: String, age: u32, min: u32) -> Result<()> {
    if age < min {
        return Err(Error::TooYoung(what, age, min));
    }
    Ok(())
}

/// Moves every edge incident to one of `olds` onto `new`, dropping edges
/// that would become self-loops and keeping only the longest edge per
/// resulting endpoint pair. Returns the removed edges.
fn absorb_nodes(g: &mut BezierGraph, olds: &[NodeId], new: NodeId) -> Result<Vec<EdgeId>> {
    let mut by_other: BTreeMap<NodeId, Vec<(f64, EdgeId)>> = BTreeMap::new();
    let mut removed = Vec::new();
    let mut incident: Vec<EdgeId> = olds.iter().flat_map(|&o| g.incident(o).to_vec()).collect();
    incident.sort();
    incident.dedup();
    for e in incident {
        let edge = g.edge(e)?;
        let ends = [edge.a, edge.b].map(|n| if olds.contains(&n) { new } else { n });
        if ends[0] == ends[1] {
            g.remove_edge(e)?;
            removed.push(e);
            continue;
        }
        let other = if ends[0] == new { ends[1] } else { ends[0] };
        by_other.entry(other).or_default().push((g.edge_length(e), e));
    }
    for (other, mut group) in by_other {
        if let Some(existing) = g.edge_between(new, other) {
            group.push((g.edge_length(existing), existing));
        }
        group.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, e) in &group[1..] {
            g.remove_edge(e)?;
            removed.push(e);
        }
        let keep = group[0].1;
        let edge = g.edge(keep)?;
        for end in [edge.a, edge.b] {
            if olds.contains(&end) {
                g.rewire_edge(keep, end, new)?;
            }
        }
    }
    Ok(removed)
}

/// Replaces `u` and `v` with one node at their midpoint.
pub fn merge_nodes(g: &mut BezierGraph, u: NodeId, v: NodeId, cfg: &TopoConfig) -> Result<NodeId> {
    let (nu, nv) = (g.node(u)?.clone(), g.node(v)?.clone());
    if u == v {
        return Err(Error::InvalidGraph(format!("cannot merge {u} with itself")));
    }
    let distance = nu.position.distance(nv.position);
    if distance >= cfg.eps_merge {
        return Err(Error::TooFar { distance, limit: cfg.eps_merge });
    }
    require_age(u.to_string(), nu.age, cfg.connect_min_age)?;
    require_age(v.to_string(), nv.age, cfg.connect_min_age)?;
    let new = g.add_node_with_age(nu.position.lerp(nv.position, 0.5), nu.age.max(nv.age));
    absorb_nodes(g, &[u, v], new)?;
    g.remove_node(u)?;
    g.remove_node(v)?;
    Ok(new)
}

/// Samples the exact sub-curve and projects it back onto the chord-relative
/// shape between new endpoints `a` and `b`.
fn refit_half(half: &ControlPolygon, a: Point2, b: Point2) -> Result<EdgeShape> {
    const SAMPLES: usize = 16;
    let ts: Vec<f64> = (0..SAMPLES).map(|i| i as f64 / (SAMPLES - 1) as f64).collect();
    let pts: Vec<Point2> = ts.iter().map(|&t| eval_curve(half, t)).collect();
    fit_shape_at(a, b, &ts, &pts)
}

/// Splits a curve at `t` and refits both halves with their own endpoints.
pub fn split_edge_shapes(cp: &ControlPolygon, t: f64) -> Result<(EdgeShape, EdgeShape, Point2)> {
    let (left, right) = split_curve(cp, t);
    let s = left.p3;
    Ok((refit_half(&left, cp.p0, s)?, refit_half(&right, s, cp.p3)?, s))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TJunction {
    pub split_t: f64,
    pub position: Point2,
    /// New edges toward the split edge's `a` and `b` endpoints; `None`
    /// where an existing longer edge already joined the pair.
    pub halves: [Option<EdgeId>; 2],
}

struct TPlan {
    t: f64,
    target: Point2,
    shapes: [EdgeShape; 2],
}

fn plan_t_junction(g: &BezierGraph, v: NodeId, e: EdgeId, cfg: &TopoConfig) -> Result<TPlan> {
    let node = g.node(v)?;
    let edge = g.edge(e)?;
    if edge.touches(v) {
        return Err(Error::IsEndpoint(v, e));
    }
    let cp = g.control_polygon(e)?;
    let (t, split, distance) = closest_point(&cp, node.position);
    if distance >= cfg.eps_merge {
        return Err(Error::TooFar { distance, limit: cfg.eps_merge });
    }
    require_age(v.to_string(), node.age, cfg.connect_min_age)?;
    require_age(e.to_string(), edge.age, cfg.connect_min_age)?;
    // Joining next to an existing endpoint is a node merge, not a junction.
    if split.distance(cp.p0) < cfg.eps_merge || split.distance(cp.p3) < cfg.eps_merge {
        return Err(Error::NearEndpoint(v, e));
    }
    let target = node.position.lerp(split, 0.5);
    let (left, right) = split_curve(&cp, t);
    for chord in [target - cp.p0, cp.p3 - target] {
        if chord.norm() < 1e-6 {
            return Err(Error::DegenerateChord { length: chord.norm() });
        }
    }
    Ok(TPlan { t, target, shapes: [refit_half(&left, cp.p0, target)?, refit_half(&right, target, cp.p3)?] })
}

/// Splits `e` at the point closest to `v` and joins both halves to `v`,
/// which moves halfway toward the split point.
pub fn create_t_junction(g: &mut BezierGraph, v: NodeId, e: EdgeId, cfg: &TopoConfig) -> Result<TJunction> {
    let plan = plan_t_junction(g, v, e, cfg)?;
    let old = g.remove_edge(e)?;
    g.node_mut(v)?.position = plan.target;
    let mut halves = [None, None];
    for (k, (end, shape)) in [(old.a, plan.shapes[0]), (old.b, plan.shapes[1])].into_iter().enumerate() {
        // Orient each half so that it runs from `end` or toward it as fitted.
        let (a, b, shape) = if k == 0 { (end, v, shape) } else { (v, end, shape) };
        let params = EdgeParams { width: old.width, shape };
        if let Some(existing) = g.edge_between(a, b) {
            let new_len = build_len(g, a, b, &shape)?;
            if g.edge_length(existing) >= new_len {
                continue;
            }
            g.remove_edge(existing)?;
        }
        halves[k] = Some(g.add_edge_with_age(a, b, params, old.age)?);
    }
    Ok(TJunction { split_t: plan.t, position: plan.target, halves })
}

fn build_len(g: &BezierGraph, a: NodeId, b: NodeId, shape: &EdgeShape) -> Result<f64> {
    let cp = crate::geometry::build_from_shape(g.position(a)?, g.position(b)?, shape)?;
    Ok(arc_length(&cp))
}

/// Control polygon of `e` oriented so that it starts at `from`.
fn oriented(g: &BezierGraph, e: EdgeId, from: NodeId) -> Result<ControlPolygon> {
    let cp = g.control_polygon(e)?;
    Ok(if g.edge(e)?.a == from { cp } else { cp.reversed() })
}

/// Direction in which an edge leaves `v`, falling back to its chord.
fn outward(cp: &ControlPolygon) -> Point2 {
    let d = cp.p1 - cp.p0;
    if d.norm() > 1e-9 {
        d
    } else {
        cp.p3 - cp.p0
    }
}

/// Angle in degrees between the two edges' outgoing directions at `v`;
/// 180 means a straight continuation.
pub fn continuation_angle(g: &BezierGraph, v: NodeId) -> Result<f64> {
    let inc = g.incident(v);
    if inc.len() != 2 {
        return Err(Error::WrongDegree(v, inc.len()));
    }
    let d1 = outward(&oriented(g, inc[0], v)?);
    let d2 = outward(&oriented(g, inc[1], v)?);
    let c = d1.dot(d2) / (d1.norm() * d2.norm());
    Ok(c.clamp(-1.0, 1.0).acos().to_degrees())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollinearMerge {
    pub edge: EdgeId,
    pub removed: [EdgeId; 2],
    pub fit_rms: f64,
}

/// Points along a polyline at equal arc-length spacing.
fn resample(poly: &[Point2], n: usize) -> Vec<Point2> {
    let mut acc = vec![0.0; poly.len()];
    for i in 1..poly.len() {
        acc[i] = acc[i - 1] + poly[i].distance(poly[i - 1]);
    }
    let total = *acc.last().unwrap_or(&0.0);
    let mut out = Vec::with_capacity(n);
    let mut j = 0;
    for k in 0..n {
        let s = total * k as f64 / (n - 1) as f64;
        while j + 2 < poly.len() && acc[j + 1] < s {
            j += 1;
        }
        let seg = acc[j + 1] - acc[j];
        let f = if seg > 0.0 { ((s - acc[j]) / seg).clamp(0.0, 1.0) } else { 0.0 };
        out.push(poly[j].lerp(poly[j + 1], f));
    }
    out
}

/// Dense polyline of the path `a -> v -> b` through a degree-2 node.
pub fn path_through(g: &BezierGraph, v: NodeId) -> Result<(NodeId, NodeId, Vec<Point2>)> {
    let inc = g.incident(v);
    if inc.len() != 2 {
        return Err(Error::WrongDegree(v, inc.len()));
    }
    let (e1, e2) = (inc[0].min(inc[1]), inc[0].max(inc[1]));
    let a = g.edge(e1)?.other(v);
    let b = g.edge(e2)?.other(v);
    let first = oriented(g, e1, v)?.reversed();
    let second = oriented(g, e2, v)?;
    let dense = |cp: &ControlPolygon| (0..=200).map(|i| eval_curve(cp, i as f64 / 200.0)).collect::<Vec<_>>();
    let mut pts = dense(&first);
    pts.extend(dense(&second).into_iter().skip(1));
    Ok((a, b, pts))
}

/// Replaces the two edges at a straight-through degree-2 node with one
/// refitted edge between the outer endpoints.
pub fn merge_collinear(g: &mut BezierGraph, v: NodeId, cfg: &TopoConfig) -> Result<CollinearMerge> {
    let node = g.node(v)?;
    let degree = g.degree(v);
    if degree != 2 {
        return Err(Error::WrongDegree(v, degree));
    }
    if node.age <= cfg.collinear_min_age {
        return Err(Error::TooYoung(v.to_string(), node.age, cfg.collinear_min_age + 1));
    }
    let angle = continuation_angle(g, v)?;
    if angle <= cfg.theta_collinear {
        return Err(Error::NotCollinear { angle, threshold: cfg.theta_collinear });
    }
    let (a, b, dense) = path_through(g, v)?;
    if a == b {
        return Err(Error::SelfLoop(a));
    }
    if g.edge_between(a, b).is_some() {
        return Err(Error::DuplicateEdge(a, b));
    }
    let pts = resample(&dense, 32);
    let (shape, fit_rms) = fit_shape_to_points(g.position(a)?, g.position(b)?, &pts)?;
    let inc = g.incident(v).to_vec();
    let (e1, e2) = (inc[0].min(inc[1]), inc[0].max(inc[1]));
    let (l1, l2) = (g.edge_length(e1), g.edge_length(e2));
    let (r1, r2) = (g.edge(e1)?.clone(), g.edge(e2)?.clone());
    let width = if l1 + l2 > 0.0 { (r1.width * l1 + r2.width * l2) / (l1 + l2) } else { 0.5 * (r1.width + r2.width) };
    g.remove_edge(e1)?;
    g.remove_edge(e2)?;
    g.remove_node(v)?;
    let edge = g.add_edge_with_age(a, b, EdgeParams { width, shape }, r1.age.max(r2.age))?;
    Ok(CollinearMerge { edge, removed: [e1, e2], fit_rms })
}

fn edge_midpoint(g: &BezierGraph, e: EdgeId) -> Point2 {
    match g.control_polygon(e) {
        Ok(cp) => eval_curve(&cp, 0.5),
        Err(_) => {
            let edge = g.edge(e).expect("edge present");
            g.position(edge.a).unwrap_or_default().lerp(g.position(edge.b).unwrap_or_default(), 0.5)
        }
    }
}

/// Removes mature edges that are too short or too thin, any edge with a
/// degenerate chord, and then every isolated node.
pub fn prune(g: &mut BezierGraph, cfg: &TopoConfig, iteration: u32) -> Vec<EditRecord> {
    let mut log = Vec::new();
    for e in g.edge_ids() {
        let edge = g.edge(e).expect("listed edge").clone();
        let degenerate = g.control_polygon(e).is_err();
        let mature = edge.age > cfg.prune_grace;
        let invalid = edge.width < cfg.min_edge_width || g.edge_length(e) < cfg.min_edge_length;
        if degenerate || (mature && invalid) {
            let pos = edge_midpoint(g, e);
            g.remove_edge(e).expect("listed edge");
            log.push(EditRecord::new(iteration, EditOp::Prune, vec![e.0, edge.a.0, edge.b.0], pos));
        }
    }
    for n in g.node_ids() {
        if g.degree(n) == 0 {
            let node = g.remove_node(n).expect("isolated node");
            log.push(EditRecord::new(iteration, EditOp::Prune, vec![n.0], node.position));
        }
    }
    log
}

/// 4-connected components of a boolean raster, each as a list of pixel
/// indices in scan order. Components are returned largest first.
pub fn connected_components(mask: &[bool], width: usize, height: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut comps = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (c, r) = (i % width, i / width);
            let mut visit = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < width {
                visit(i + 1);
            }
            if r > 0 {
                visit(i - width);
            }
            if r + 1 < height {
                visit(i + width);
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    comps
}

/// Unit principal direction of a point cloud, or `None` when the spread is
/// isotropic.
fn principal_axis(pts: &[Point2]) -> Option<Point2> {
    let n = pts.len() as f64;
    let mean = pts.iter().fold(Point2::ZERO, |acc, &p| acc + p) * (1.0 / n);
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in pts {
        let d = *p - mean;
        sxx += d.x * d.x;
        sxy += d.x * d.y;
        syy += d.y * d.y;
    }
    let half_gap = (0.25 * (sxx - syy).powi(2) + sxy * sxy).sqrt();
    if half_gap <= 1e-9 * (sxx + syy).max(1e-300) {
        return None;
    }
    let angle = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    Some(Point2::new(angle.cos(), angle.sin()))
}

/// Seeds one new edge in every sufficiently large patch of target road that
/// the current render misses.
pub fn add_roads_at_unfit<R: Rng>(
    g: &mut BezierGraph,
    target: &CoverageMap,
    render: &CoverageMap,
    cfg: &TopoConfig,
    iteration: u32,
    rng: &mut R,
) -> Result<Vec<EditRecord>> {
    target.same_shape(render)?;
    let canvas = target.canvas();
    let unfit: Vec<bool> = target
        .values()
        .iter()
        .zip(render.values())
        .map(|(&s, &r)| s > cfg.tau_seg && r < cfg.tau_render)
        .collect();
    let pixel_area = canvas.meters_per_pixel * canvas.meters_per_pixel;
    let mut log = Vec::new();
    for comp in connected_components(&unfit, canvas.width, canvas.height) {
        if (comp.len() as f64) * pixel_area < cfg.min_unfit_area {
            break;
        }
        let pts: Vec<Point2> = comp.iter().map(|&i| canvas.pixel_center(i % canvas.width, i / canvas.width)).collect();
        let centroid = pts.iter().fold(Point2::ZERO, |acc, &p| acc + p) * (1.0 / pts.len() as f64);
        let center = *pts
            .iter()
            .min_by(|a, b| a.distance(centroid).total_cmp(&b.distance(centroid)))
            .expect("component is nonempty");
        let u = principal_axis(&pts).unwrap_or_else(|| {
            let a: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            Point2::new(a.cos(), a.sin())
        });
        let half = u * (0.5 * cfg.init_edge_length);
        let a = g.add_node(center - half);
        let b = g.add_node(center + half);
        let shape = EdgeShape { d0: rng.gen_range(-0.1..=0.1), d1: rng.gen_range(-0.1..=0.1), ..EdgeShape::default() };
        let e = g.add_edge(a, b, EdgeParams { width: cfg.init_edge_width, shape })?;
        log.push(EditRecord::new(iteration, EditOp::Add, vec![a.0, b.0, e.0], center));
    }
    Ok(log)
}

/// Applies node merges closest-first until no eligible pair remains.
fn merge_all(g: &mut BezierGraph, cfg: &TopoConfig, iteration: u32, log: &mut Vec<EditRecord>) -> Result<bool> {
    let mut changed = false;
    'outer: loop {
        let grid = build_grid(g, cfg.cell_size, cfg.eps_merge);
        for (_, u, v) in close_node_pairs(g, &grid, cfg.eps_merge) {
            if let Ok(new) = merge_nodes(g, u, v, cfg) {
                log.push(EditRecord::new(iteration, EditOp::Merge, vec![u.0, v.0, new.0], g.position(new)?));
                changed = true;
                continue 'outer;
            }
        }
        return Ok(changed);
    }
}

fn t_junction_all(g: &mut BezierGraph, cfg: &TopoConfig, iteration: u32, log: &mut Vec<EditRecord>) -> Result<bool> {
    let mut changed = false;
    'outer: loop {
        let grid = build_grid(g, cfg.cell_size, cfg.eps_merge);
        for (_, v, e, _) in close_node_edge_pairs(g, &grid, cfg.eps_merge) {
            if let Ok(tj) = create_t_junction(g, v, e, cfg) {
                let mut ids = vec![v.0, e.0];
                ids.extend(tj.halves.iter().flatten().map(|h| h.0));
                log.push(EditRecord::new(iteration, EditOp::Tjunction, ids, tj.position));
                changed = true;
                continue 'outer;
            }
        }
        return Ok(changed);
    }
}

fn collinear_all(g: &mut BezierGraph, cfg: &TopoConfig, iteration: u32, log: &mut Vec<EditRecord>) -> bool {
    let mut changed = false;
    'outer: loop {
        for v in g.node_ids() {
            let pos = g.position(v).expect("listed node");
            if let Ok(m) = merge_collinear(g, v, cfg) {
                log.push(EditRecord::new(
                    iteration,
                    EditOp::Collinear,
                    vec![v.0, m.removed[0].0, m.removed[1].0, m.edge.0],
                    pos,
                ));
                changed = true;
                continue 'outer;
            }
        }
        return changed;
    }
}

/// Upper bound on merge/junction/collinear/prune rounds within one pass.
const MAX_ROUNDS: usize = 64;

/// One topology pass: merges and junctions (after warm-up), collinear
/// merges and pruning, repeated until stable, then periodic road addition.
pub fn topo_pass<R: Rng>(
    g: &mut BezierGraph,
    target: &CoverageMap,
    render: &CoverageMap,
    cfg: &TopoConfig,
    iteration: u32,
    rng: &mut R,
) -> Result<Vec<EditRecord>> {
    let mut log = Vec::new();
    for _ in 0..MAX_ROUNDS {
        let mut changed = false;
        if iteration > cfg.t_warmup {
            changed |= merge_all(g, cfg, iteration, &mut log)?;
            changed |= t_junction_all(g, cfg, iteration, &mut log)?;
        }
        changed |= collinear_all(g, cfg, iteration, &mut log);
        let pruned = prune(g, cfg, iteration);
        changed |= !pruned.is_empty();
        log.extend(pruned);
        if !changed {
            break;
        }
    }
    if iteration.is_multiple_of(cfg.road_add_period) {
        log.extend(add_roads_at_unfit(g, target, render, cfg, iteration, rng)?);
    }
    debug_assert!(g.validate().is_ok());
    Ok(log)
}

/// Samples every edge at roughly one-meter spacing; used by metrics and
/// tests that compare traces.
pub fn dense_trace(g: &BezierGraph, e: EdgeId, spacing: f64) -> Result<Vec<Point2>> {
    Ok(sample_polyline(&g.control_polygon(e)?, spacing))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::CanvasSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn p(x: f64, y: f64) -> Point2 {
        Point2::new(x, y)
    }

    fn mature(g: &mut BezierGraph, age: u32) {
        for _ in 0..age {
            g.tick_ages();
        }
    }

    #[test]
    fn merge_midpoint_and_errors() {
        let cfg = TopoConfig::default();
        let mut g = BezierGraph::new();
        let u = g.add_node(p(0.0, 0.0));
        let v = g.add_node(p(2.0, 0.0));
        let far = g.add_node(p(7.0, 0.0));
        assert!(matches!(merge_nodes(&mut g, u, v, &cfg), Err(Error::TooYoung(..))));
        mature(&mut g, 15);
        assert!(matches!(merge_nodes(&mut g, v, far, &cfg), Err(Error::TooFar { .. })));
        let n = merge_nodes(&mut g, u, v, &cfg).unwrap();
        assert_eq!(g.position(n).unwrap(), p(1.0, 0.0));
        assert_eq!(g.node(n).unwrap().age, 15);
        assert!(!g.contains_node(u) && !g.contains_node(v));
    }

    #[test]
    fn merge_keeps_the_longer_duplicate() {
        let cfg = TopoConfig::default();
        let mut g = BezierGraph::new();
        let u = g.add_node(p(0.0, 0.0));
        let v = g.add_node(p(0.0, 2.0));
        let w = g.add_node(p(20.0, 0.0));
        let short = g.add_edge(u, w, EdgeParams::straight(2.0)).unwrap();
        let mut bent = EdgeParams::straight(2.0);
        bent.shape.d0 = 6.0;
        let long = g.add_edge(v, w, bent).unwrap();
        let uv = g.add_edge(u, v, EdgeParams::straight(2.0)).unwrap();
        mature(&mut g, 20);
        let n = merge_nodes(&mut g, u, v, &cfg).unwrap();
        assert!(g.contains_edge(long));
        assert!(!g.contains_edge(short));
        assert!(!g.contains_edge(uv));
        assert_eq!(g.degree(n), 1);
        g.validate().unwrap();
    }

    #[test]
    fn t_junction_on_straight_edge() {
        let cfg = TopoConfig::default();
        let mut g = BezierGraph::new();
        let a = g.add_node(p(0.0, 0.0));
        let b = g.add_node(p(20.0, 0.0));
        let e = g.add_edge(a, b, EdgeParams::straight(3.0)).unwrap();
        let v = g.add_node(p(10.0, 1.0));
        let far = g.add_node(p(10.0, 6.0));
        let stub = g.add_node(p(10.0, 12.0));
        g.add_edge(v, stub, EdgeParams::straight(3.0)).unwrap();
        mature(&mut g, 15);
        assert!(matches!(create_t_junction(&mut g, a, e, &cfg), Err(Error::IsEndpoint(..))));
        assert!(matches!(create_t_junction(&mut g, far, e, &cfg), Err(Error::TooFar { .. })));
        let before = g.degree(v);
        let tj = create_t_junction(&mut g, v, e, &cfg).unwrap();
        assert!((tj.split_t - 0.5).abs() < 1e-6);
        assert_eq!(g.degree(v), before + 2);
        assert!((g.position(v).unwrap().distance(p(10.0, 0.5))) < 1e-6);
        for h in tj.halves.iter().flatten() {
            let l = g.edge_length(*h);
            assert!((l - 10.0).abs() < 0.1, "{l}");
        }
        g.validate().unwrap();
    }

    #[test]
    fn collinear_examples() {
        let cfg = TopoConfig { collinear_min_age: 0, ..TopoConfig::default() };
        let mut g = BezierGraph::new();
        let a = g.add_node(p(0.0, 0.0));
        let v = g.add_node(p(5.0, 0.0));
        let b = g.add_node(p(10.0, 0.0));
        g.add_edge(a, v, EdgeParams::straight(2.0)).unwrap();
        g.add_edge(v, b, EdgeParams::straight(4.0)).unwrap();
        g.tick_ages();
        let m = merge_collinear(&mut g, v, &cfg).unwrap();
        assert!(m.fit_rms < 1e-3);
        let e = g.edge(m.edge).unwrap();
        assert!((e.width - 3.0).abs() < 1e-9);
        assert!(e.shape.d0.abs() < 1e-6 && e.shape.d1.abs() < 1e-6);
        assert_eq!(g.node_count(), 2);

        let mut g = BezierGraph::new();
        let a = g.add_node(p(0.0, 0.0));
        let v = g.add_node(p(5.0, 0.0));
        let b = g.add_node(p(5.0, 5.0));
        g.add_edge(a, v, EdgeParams::straight(2.0)).unwrap();
        g.add_edge(v, b, EdgeParams::straight(2.0)).unwrap();
        g.tick_ages();
        assert!(matches!(merge_collinear(&mut g, v, &cfg), Err(Error::NotCollinear { .. })));
        assert!(matches!(merge_collinear(&mut g, a, &cfg), Err(Error::WrongDegree(..))));
    }

    #[test]
    fn prune_gates() {
        let cfg = TopoConfig::default();
        let mut g = BezierGraph::new();
        let a = g.add_node(p(0.0, 0.0));
        let b = g.add_node(p(0.5, 0.0));
        g.add_edge(a, b, EdgeParams::straight(2.0)).unwrap();
        mature(&mut g, 5);
        assert!(prune(&mut g, &cfg, 5).is_empty());
        mature(&mut g, 20);
        let log = prune(&mut g, &cfg, 25);
        assert_eq!(log.len(), 3);
        assert!(g.is_empty());
    }

    #[test]
    fn grid_finds_near_pairs_only() {
        let mut g = BezierGraph::new();
        let a = g.add_node(p(1.0, 1.0));
        let b = g.add_node(p(4.0, 1.0));
        g.add_node(p(54.0, 1.0));
        let grid = build_grid(&g, 8.0, 4.0);
        let pairs = close_node_pairs(&g, &grid, 4.0);
        assert_eq!(pairs.len(), 1);
        assert_eq!((pairs[0].1, pairs[0].2), (a, b));
    }

    #[test]
    fn road_addition_on_blobs() {
        let canvas = CanvasSpec::new(40, 40, 1.0).unwrap();
        let cfg = TopoConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut big = vec![0.0; 1600];
        for r in 5..15 {
            for c in 20..30 {
                big[r * 40 + c] = 1.0;
            }
        }
        let target = CoverageMap::from_values(canvas, big).unwrap();
        let mut g = BezierGraph::new();
        let log = add_roads_at_unfit(&mut g, &target, &target, &cfg, 0, &mut rng).unwrap();
        assert!(log.is_empty());
        let empty = CoverageMap::zeros(canvas);
        let log = add_roads_at_unfit(&mut g, &target, &empty, &cfg, 0, &mut rng).unwrap();
        assert_eq!(log.len(), 1);
        let c = log[0].pos;
        assert!((20.0..=30.0).contains(&c[0]) && (5.0..=15.0).contains(&c[1]));

        let mut small = vec![0.0; 1600];
        for r in 5..11 {
            for c in 20..25 {
                small[r * 40 + c] = 1.0;
            }
        }
        let target = CoverageMap::from_values(canvas, small).unwrap();
        let log = add_roads_at_unfit(&mut g, &target, &empty, &cfg, 0, &mut rng).unwrap();
        assert!(log.is_empty());
    }

    #[test]
    fn warmup_gate_blocks_merges() {
        let canvas = CanvasSpec::new(32, 32, 1.0).unwrap();
        let cfg = TopoConfig::default();
        let mut g = BezierGraph::new();
        let a = g.add_node(p(5.0, 5.0));
        let b = g.add_node(p(15.0, 5.0));
        let c = g.add_node(p(16.0, 5.0));
        let d = g.add_node(p(26.0, 5.0));
        g.add_edge(a, b, EdgeParams::straight(3.0)).unwrap();
        g.add_edge(c, d, EdgeParams::straight(3.0)).unwrap();
        mature(&mut g, 30);
        let m = CoverageMap::zeros(canvas);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let log = topo_pass(&mut g, &m, &m, &cfg, 5, &mut rng).unwrap();
        assert!(log.is_empty());
        let log = topo_pass(&mut g, &m, &m, &cfg, 21, &mut rng).unwrap();
        assert_eq!(log.iter().filter(|r| r.op == EditOp::Merge).count(), 1);
        assert!(topo_pass(&mut g, &m, &m, &cfg, 21, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn edit_record_json_shape() {
        let r = EditRecord::new(3, EditOp::Tjunction, vec![1, 2], p(1.5, 2.0));
        assert_eq!(r.to_json_line(), r#"{"iter":3,"op":"tjunction","ids":[1,2],"pos":[1.5,2.0]}"#);
    }
}
