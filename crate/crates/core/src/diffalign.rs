//! The fitting objective, its gradients, and the Adam optimizer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{control_polygon_vjp, EdgeShape, Point2, MIN_CHORD};
use crate::graph::{BezierGraph, Field, ParamKey, ParamLayout};
use crate::raster::{
    backward, index_of, node_index, render_graph, CoverageMap, EdgeContribution, GradSink, RenderBundle,
};

pub const ALPHA0_REST: f64 = 1.0 / 3.0;
pub const ALPHA1_REST: f64 = 2.0 / 3.0;
pub const MIN_WIDTH: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cover: f64,
    pub lambda_overlap: f64,
    pub lambda_g1: f64,
    pub lambda_offset: f64,
    pub lambda_spacing: f64,
    /// Activation threshold of the tangent term, in degrees.
    pub t_g1: f64,
    pub tau_d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cover: 1.0,
            lambda_overlap: 0.3,
            lambda_g1: 0.012,
            lambda_offset: 6e-3,
            lambda_spacing: 6e-3,
            t_g1: 90.0,
            tau_d: 0.75,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_cover, self.lambda_overlap, self.lambda_g1, self.lambda_offset, self.lambda_spacing];
        if lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::InvalidConfig("loss weights must be finite and non-negative".into()));
        }
        if !(self.t_g1 > 0.0 && self.t_g1 <= 180.0) {
            return Err(Error::InvalidConfig(format!("t_g1 must lie in (0, 180], got {}", self.t_g1)));
        }
        if !(self.tau_d > 0.0 && self.tau_d.is_finite()) {
            return Err(Error::InvalidConfig(format!("tau_d must be positive, got {}", self.tau_d)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cover: f64,
    pub overlap: f64,
    pub g1: f64,
    pub offset: f64,
    pub spacing: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn weighted(w: &LossWeights, cover: f64, overlap: f64, g1: f64, offset: f64, spacing: f64) -> Self {
        let total = w.lambda_cover * cover
            + w.lambda_overlap * overlap
            + w.lambda_g1 * g1
            + w.lambda_offset * offset
            + w.lambda_spacing * spacing;
        LossBreakdown { cover, overlap, g1, offset, spacing, total }
    }
}

/// Mean squared difference between the union render and the target, and
/// its per-pixel gradient w.r.t. the union.
pub fn loss_cover(bundle: &RenderBundle, target: &CoverageMap) -> Result<(f64, Vec<f64>)> {
    bundle.composite_union.same_shape(target)?;
    let count = target.values().len() as f64;
    let mut loss = 0.0;
    let grad = bundle
        .composite_union
        .values()
        .iter()
        .zip(target.values())
        .map(|(&u, &s)| {
            let r = u - s;
            loss += r * r;
            2.0 * r / count
        })
        .collect();
    Ok((loss / count, grad))
}

/// Excess of the summed render over one, per edge and per pixel.
pub fn loss_overlap(bundle: &RenderBundle) -> (f64, Vec<f64>) {
    let n_edges = bundle.edge_count();
    let count = bundle.composite_sum.len();
    if n_edges == 0 || count == 0 {
        return (0.0, vec![0.0; count]);
    }
    let norm = n_edges as f64 * count as f64;
    let mut loss = 0.0;
    let grad = bundle
        .composite_sum
        .iter()
        .map(|&s| {
            if s > 1.0 {
                loss += s - 1.0;
                1.0 / norm
            } else {
                0.0
            }
        })
        .collect();
    (loss / norm, grad)
}

/// Adds `scale * dL/dcp` for one edge's control points into the sink.
fn push_control_grad(
    g: &BezierGraph,
    layout: &ParamLayout,
    nodes: &[crate::graph::NodeId],
    edge_index: usize,
    edge_id: crate::graph::EdgeId,
    grad_cp: [Point2; 4],
    sink: &mut GradSink,
) -> Result<()> {
    let e = g.edge(edge_id)?;
    let sg = control_polygon_vjp(g.position(e.a)?, g.position(e.b)?, &e.shape, &grad_cp)?;
    EdgeContribution {
        edge_index,
        node_a: index_of(nodes, e.a),
        node_b: index_of(nodes, e.b),
        grad_a: sg.pi,
        grad_b: sg.pj,
        edge: [0.0, sg.alpha0, sg.alpha1, sg.d0, sg.d1],
    }
    .scatter(layout, sink);
    Ok(())
}

/// Tangent-continuity penalty at degree-2 nodes, normalized by edge count.
pub fn loss_g1(g: &BezierGraph, t_g1_deg: f64) -> Result<(f64, GradSink)> {
    let layout = g.layout();
    let mut sink = GradSink::zeros(layout.len());
    let n_edges = g.edge_count();
    if n_edges == 0 {
        return Ok((0.0, sink));
    }
    let nodes = node_index(g);
    let edge_ids = g.edge_ids();
    let threshold = t_g1_deg.to_radians();
    let mut loss = 0.0;
    for &j in &nodes {
        let inc = g.incident(j);
        if inc.len() != 2 {
            continue;
        }
        let (ea, eb) = (inc[0].min(inc[1]), inc[0].max(inc[1]));
        let (Ok(cpa), Ok(cpb)) = (g.control_polygon(ea), g.control_polygon(eb)) else {
            continue;
        };
        // Control point adjacent to j on each edge, and its slot.
        let neighbor = |id, cp: &crate::geometry::ControlPolygon| -> Result<(Point2, usize)> {
            Ok(if g.edge(id)?.a == j { (cp.p1, 1) } else { (cp.p2, 2) })
        };
        let (qa, slot_a) = neighbor(ea, &cpa)?;
        let (qb, slot_b) = neighbor(eb, &cpb)?;
        let p = g.position(j)?;
        let v_in = p - qa;
        let v_out = qb - p;
        let (ni, no) = (v_in.norm(), v_out.norm());
        if ni < 1e-12 || no < 1e-12 {
            continue;
        }
        let cos = (v_in.dot(v_out) / (ni * no)).clamp(-1.0, 1.0);
        if cos.acos() >= threshold {
            continue;
        }
        loss += 1.0 - cos;
        // d(1 - cos)/dv = -(dcos/dv)
        let g_in = -(v_out * (1.0 / (ni * no)) - v_in * (cos / (ni * ni)));
        let g_out = -(v_in * (1.0 / (ni * no)) - v_out * (cos / (no * no)));
        let scale = 1.0 / n_edges as f64;
        // v_in = p - qa, v_out = qb - p. The endpoint p is shared by both control
        // polygons; its contribution is routed through edge a's slot for p.
        let mut ga = [Point2::ZERO; 4];
        ga[slot_a] = -g_in * scale;
        let p_slot_a = if slot_a == 1 { 0 } else { 3 };
        ga[p_slot_a] = (g_in - g_out) * scale;
        let mut gb = [Point2::ZERO; 4];
        gb[slot_b] = g_out * scale;
        let ia = edge_ids.binary_search(&ea).expect("edge present");
        let ib = edge_ids.binary_search(&eb).expect("edge present");
        push_control_grad(g, &layout, &nodes, ia, ea, ga, &mut sink)?;
        push_control_grad(g, &layout, &nodes, ib, eb, gb, &mut sink)?;
    }
    Ok((loss / n_edges as f64, sink))
}

/// Soft penalty on offsets larger than `tau_d` chord lengths.
pub fn loss_offset(g: &BezierGraph, tau_d: f64) -> Result<(f64, GradSink)> {
    let layout = g.layout();
    let mut sink = GradSink::zeros(layout.len());
    let n_edges = g.edge_count();
    if n_edges == 0 {
        return Ok((0.0, sink));
    }
    let nodes = node_index(g);
    let scale = 1.0 / n_edges as f64;
    let mut loss = 0.0;
    for (k, e) in g.edges().enumerate() {
        let (pa, pb) = (g.position(e.a)?, g.position(e.b)?);
        let c = pb - pa;
        let len = c.norm();
        if len <= MIN_CHORD {
            continue;
        }
        let eo = BezierGraph::edge_offset(&layout, k);
        let na = BezierGraph::node_offset(&layout, index_of(&nodes, e.a));
        let nb = BezierGraph::node_offset(&layout, index_of(&nodes, e.b));
        for (slot, d) in [(3, e.shape.d0), (4, e.shape.d1)] {
            let x = d.abs() / len - tau_d;
            if x <= 0.0 {
                continue;
            }
            let ex = x.exp();
            loss += ex - 1.0;
            sink.values[eo + slot] += scale * ex * d.signum() / len;
            let dl = -scale * ex * d.abs() / (len * len);
            let dc = c * (dl / len);
            sink.values[nb] += dc.x;
            sink.values[nb + 1] += dc.y;
            sink.values[na] -= dc.x;
            sink.values[na + 1] -= dc.y;
        }
    }
    Ok((loss * scale, sink))
}

/// Pull of the interior control points toward even chord spacing.
pub fn loss_spacing(g: &BezierGraph) -> (f64, GradSink) {
    let layout = g.layout();
    let mut sink = GradSink::zeros(layout.len());
    let n_edges = g.edge_count();
    if n_edges == 0 {
        return (0.0, sink);
    }
    let scale = 1.0 / n_edges as f64;
    let mut loss = 0.0;
    for (k, e) in g.edges().enumerate() {
        let EdgeShape { alpha0, alpha1, .. } = e.shape;
        let (r0, r1) = (alpha0 - ALPHA0_REST, alpha1 - ALPHA1_REST);
        loss += r0 * r0 + r1 * r1;
        let eo = BezierGraph::edge_offset(&layout, k);
        sink.values[eo + 1] += 2.0 * r0 * scale;
        sink.values[eo + 2] += 2.0 * r1 * scale;
    }
    (loss * scale, sink)
}

/// One forward/backward evaluation of the weighted objective.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub losses: LossBreakdown,
    pub grad: GradSink,
    pub layout: ParamLayout,
    pub bundle: RenderBundle,
}

pub fn total_loss_and_grad(g: &BezierGraph, target: &CoverageMap, weights: &LossWeights) -> Result<Evaluation> {
    let canvas = target.canvas();
    let bundle = render_graph(g, &canvas);
    let (cover, up_cover) = loss_cover(&bundle, target)?;
    let (overlap, up_overlap) = loss_overlap(&bundle);
    let up_union: Vec<f64> = up_cover.iter().map(|v| v * weights.lambda_cover).collect();
    let up_sum: Vec<f64> = up_overlap.iter().map(|v| v * weights.lambda_overlap).collect();
    let layout = g.layout();
    let mut grad = backward(&bundle, g, &layout, &up_union, &up_sum)?;
    let (g1, g1_grad) = loss_g1(g, weights.t_g1)?;
    let (offset, offset_grad) = loss_offset(g, weights.tau_d)?;
    let (spacing, spacing_grad) = loss_spacing(g);
    grad.add_scaled(&g1_grad, weights.lambda_g1);
    grad.add_scaled(&offset_grad, weights.lambda_offset);
    grad.add_scaled(&spacing_grad, weights.lambda_spacing);
    Ok(Evaluation {
        losses: LossBreakdown::weighted(weights, cover, overlap, g1, offset, spacing),
        grad,
        layout,
        bundle,
    })
}

/// Loss value only; used by finite-difference checks.
pub fn total_loss(g: &BezierGraph, target: &CoverageMap, weights: &LossWeights) -> Result<LossBreakdown> {
    Ok(total_loss_and_grad(g, target, weights)?.losses)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Meters per optimizer unit for positions, widths and offsets.
    /// Chord fractions are always optimized in their own units.
    pub length_scale: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, length_scale: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Moment {
    m: f64,
    v: f64,
    step: u32,
}

/// Adam moments keyed by parameter identity, so they survive topology edits.
///
/// Parameters that appear for the first time start with fresh moments and
/// their own bias-correction counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub steps: u64,
    moments: BTreeMap<ParamKey, Moment>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState { config, steps: 0, moments: BTreeMap::new() }
    }

    /// First and second moments in layout order; zero for unseen parameters.
    pub fn moments(&self, layout: &ParamLayout) -> (Vec<f64>, Vec<f64>) {
        layout
            .keys
            .iter()
            .map(|k| self.moments.get(k).map_or((0.0, 0.0), |m| (m.m, m.v)))
            .unzip()
    }

    pub fn tracked(&self) -> usize {
        self.moments.len()
    }

    /// Updates `params` in place, then projects them onto the feasible set.
    pub fn step(&mut self, layout: &ParamLayout, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != layout.len() || grads.len() != layout.len() {
            return Err(Error::LayoutMismatch(format!(
                "{} params / {} grads for {} slots",
                params.len(),
                grads.len(),
                layout.len()
            )));
        }
        let keep: std::collections::BTreeSet<ParamKey> = layout.keys.iter().copied().collect();
        self.moments.retain(|k, _| keep.contains(k));
        let c = self.config;
        for ((key, p), &g) in layout.keys.iter().zip(params.iter_mut()).zip(grads) {
            let scale = if key.field.is_alpha() { 1.0 } else { c.length_scale };
            let g = g * scale;
            let m = self.moments.entry(*key).or_default();
            m.step += 1;
            m.m = c.beta1 * m.m + (1.0 - c.beta1) * g;
            m.v = c.beta2 * m.v + (1.0 - c.beta2) * g * g;
            let m_hat = m.m / (1.0 - c.beta1.powi(m.step as i32));
            let v_hat = m.v / (1.0 - c.beta2.powi(m.step as i32));
            *p -= scale * c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
        self.steps += 1;
        project(layout, params);
        Ok(())
    }
}

/// Clamps chord fractions to `[0, 1]` and widths to at least `MIN_WIDTH`.
pub fn project(layout: &ParamLayout, params: &mut [f64]) {
    for (key, p) in layout.keys.iter().zip(params.iter_mut()) {
        match key.field {
            Field::Alpha0 | Field::Alpha1 => *p = p.clamp(0.0, 1.0),
            Field::Width => *p = p.max(MIN_WIDTH),
            _ => {}
        }
    }
}

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientCheck {
    pub checked: usize,
    pub passed: usize,
    pub skipped: usize,
    /// Worst relative error among failures, with the failing parameter.
    pub failures: Vec<(ParamKey, f64, f64)>,
}

impl GradientCheck {
    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }

    pub fn merge(&mut self, other: GradientCheck) {
        self.checked += other.checked;
        self.passed += other.passed;
        self.skipped += other.skipped;
        self.failures.extend(other.failures);
    }
}

/// Central-difference check of [`total_loss_and_grad`] on every parameter.
///
/// Steps are 1e-3 m for lengths and 1e-4 for chord fractions. Parameters
/// whose perturbation leaves the feasible set or changes the ribbon
/// resolution of an edge are skipped. A component passes with relative
/// error at most `rel_tol` or absolute error at most `abs_tol`.
pub fn gradient_check(
    g: &BezierGraph,
    target: &CoverageMap,
    weights: &LossWeights,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<GradientCheck> {
    let eval = total_loss_and_grad(g, target, weights)?;
    let (base, layout) = g.flatten_params();
    let samples = |graph: &BezierGraph| -> Vec<usize> {
        graph
            .edge_ids()
            .iter()
            .map(|&id| graph.control_polygon(id).map(|cp| crate::geometry::ribbon_sample_count(&cp)).unwrap_or(0))
            .collect()
    };
    let base_samples = samples(g);
    let mut out = GradientCheck::default();
    for (i, key) in layout.keys.iter().enumerate() {
        let h = if key.field.is_alpha() { 1e-4 } else { 1e-3 };
        let probe = |delta: f64| -> Result<Option<f64>> {
            let mut v = base.clone();
            v[i] += delta;
            let mut projected = v.clone();
            project(&layout, &mut projected);
            if projected[i] != v[i] {
                return Ok(None);
            }
            let mut gg = g.clone();
            gg.unflatten_params(&layout, &v)?;
            if samples(&gg) != base_samples {
                return Ok(None);
            }
            Ok(Some(total_loss(&gg, target, weights)?.total))
        };
        let (Some(plus), Some(minus)) = (probe(h)?, probe(-h)?) else {
            out.skipped += 1;
            continue;
        };
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = eval.grad.values[i];
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
        out.checked += 1;
        if rel <= rel_tol || abs <= abs_tol {
            out.passed += 1;
        } else {
            out.failures.push((*key, analytic, numeric));
        }
    }
    Ok(out)
}
