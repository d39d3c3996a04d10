//! Pixel agreement, node recovery against a known graph, and compactness.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::BezierGraph;
use crate::raster::CoverageMap;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PixelMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

/// Confusion-matrix rates after binarizing both maps at `threshold`.
///
/// Empty sets are handled so that two empty maps agree perfectly, while an
/// empty prediction against a nonempty truth (or the reverse) scores zero.
pub fn pixel_metrics(pred: &CoverageMap, truth: &CoverageMap, threshold: f64) -> Result<PixelMetrics> {
    pred.same_shape(truth)?;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.values().iter().zip(truth.values()) {
        match (p >= threshold, t >= threshold) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let ratio = |num: usize, den: usize, empty: bool| if den == 0 { f64::from(u8::from(empty)) } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp, tp + fneg == 0);
    let recall = ratio(tp, tp + fneg, tp + fp == 0);
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    let iou = ratio(tp, tp + fp + fneg, true);
    Ok(PixelMetrics { precision, recall, f1, iou })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub node_recovery: f64,
    pub junction_recovery: f64,
}

/// Greedy matching of truth nodes to predicted nodes, closest pairs first,
/// each node used at most once. Junction recovery is the matched share of
/// truth nodes with degree three or more (1.0 when there are none).
pub fn graph_recovery(pred: &BezierGraph, truth: &BezierGraph, tol: f64) -> Result<Recovery> {
    if !(tol > 0.0) {
        return Err(Error::InvalidConfig(format!("matching tolerance must be positive, got {tol}")));
    }
    let truth_nodes: Vec<_> = truth.nodes().collect();
    let pred_nodes: Vec<_> = pred.nodes().collect();
    let mut pairs = Vec::new();
    for (i, t) in truth_nodes.iter().enumerate() {
        for (j, p) in pred_nodes.iter().enumerate() {
            let d = t.position.distance(p.position);
            if d <= tol {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut truth_used = vec![false; truth_nodes.len()];
    let mut pred_used = vec![false; pred_nodes.len()];
    for (_, i, j) in pairs {
        if !truth_used[i] && !pred_used[j] {
            truth_used[i] = true;
            pred_used[j] = true;
        }
    }
    let share = |filter: &dyn Fn(usize) -> bool, empty: f64| {
        let idx: Vec<usize> = (0..truth_nodes.len()).filter(|&i| filter(i)).collect();
        if idx.is_empty() {
            empty
        } else {
            idx.iter().filter(|&&i| truth_used[i]).count() as f64 / idx.len() as f64
        }
    };
    Ok(Recovery {
        node_recovery: share(&|_| true, 1.0),
        junction_recovery: share(&|i| truth.degree(truth_nodes[i].id) >= 3, 1.0),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Compactness {
    pub nodes_per_km: f64,
    pub edges_per_km: f64,
    pub total_length_km: f64,
    pub polyline_segment_count: usize,
    /// Segments per km of the same network drawn as a 1 m polyline.
    pub polyline_segments_per_km: f64,
}

pub fn compactness(g: &BezierGraph) -> Result<Compactness> {
    let lengths: Vec<f64> = g.edge_ids().iter().map(|&e| g.edge_length(e)).collect();
    let total_m: f64 = lengths.iter().sum();
    if total_m <= 0.0 {
        return Err(Error::ZeroLength);
    }
    let km = total_m / 1000.0;
    let segments: usize = lengths.iter().map(|&l| (l.round() as usize).max(1)).sum();
    Ok(Compactness {
        nodes_per_km: g.node_count() as f64 / km,
        edges_per_km: g.edge_count() as f64 / km,
        total_length_km: km,
        polyline_segment_count: segments,
        polyline_segments_per_km: segments as f64 / km,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pixel_precision: f64,
    pub pixel_recall: f64,
    pub pixel_f1: f64,
    pub iou: f64,
    pub node_recovery: Option<f64>,
    pub junction_recovery: Option<f64>,
    pub nodes_per_km: f64,
    pub edges_per_km: f64,
    pub total_length_km: f64,
    pub polyline_segment_count: usize,
    pub polyline_segments_per_km: f64,
}

/// Full report for a predicted graph rendered on the mask's canvas.
pub fn evaluate(
    pred: &BezierGraph,
    mask: &CoverageMap,
    truth: Option<&BezierGraph>,
    threshold: f64,
    tol: f64,
) -> Result<EvalReport> {
    let render = crate::raster::render_graph(pred, &mask.canvas()).composite_union;
    let px = pixel_metrics(&render, mask, threshold)?;
    let recovery = truth.map(|t| graph_recovery(pred, t, tol)).transpose()?;
    let comp = compactness(pred).unwrap_or_default();
    Ok(EvalReport {
        pixel_precision: px.precision,
        pixel_recall: px.recall,
        pixel_f1: px.f1,
        iou: px.iou,
        node_recovery: recovery.map(|r| r.node_recovery),
        junction_recovery: recovery.map(|r| r.junction_recovery),
        nodes_per_km: comp.nodes_per_km,
        edges_per_km: comp.edges_per_km,
        total_length_km: comp.total_length_km,
        polyline_segment_count: comp.polyline_segment_count,
        polyline_segments_per_km: comp.polyline_segments_per_km,
    })
}
