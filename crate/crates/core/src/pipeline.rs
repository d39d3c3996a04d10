//! The optimization loop: initialize from a mask, then alternate topology
//! edits with gradient steps until the coverage loss plateaus.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffalign::{total_loss_and_grad, AdamConfig, AdamState, LossBreakdown, LossWeights};
use crate::error::{Error, Result};
use crate::geometry::{EdgeShape, Point2};
use crate::graph::{BezierGraph, EdgeParams};
use crate::io::{write_graph, write_svg};
use crate::metrics::{evaluate, EvalReport};
use crate::raster::{render_graph, CanvasSpec, CoverageMap};
use crate::topoadapt::{topo_pass, EditRecord, TopoConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub max_iterations: u32,
    pub early_stop_window: u32,
    pub early_stop_tolerance: f64,
    pub seed: u64,
    /// Zero disables snapshots.
    pub snapshot_period: u32,
    pub weights: LossWeights,
    pub topo: TopoConfig,
    pub adam: AdamConfig,
    /// Optimize lengths in units of the canvas extent rather than meters.
    pub normalize_lengths: bool,
    /// Road area per initial edge, in m².
    pub init_area_per_edge: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            max_iterations: 300,
            early_stop_window: 30,
            early_stop_tolerance: 1e-3,
            seed: 0,
            snapshot_period: 10,
            weights: LossWeights::default(),
            topo: TopoConfig::default(),
            adam: AdamConfig::default(),
            normalize_lengths: true,
            init_area_per_edge: 300.0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.topo.validate()?;
        if self.early_stop_window == 0 {
            return Err(Error::InvalidConfig("early_stop_window must be at least 1".into()));
        }
        if !(self.early_stop_tolerance >= 0.0) {
            return Err(Error::InvalidConfig("early_stop_tolerance must be non-negative".into()));
        }
        if !(self.adam.lr > 0.0 && self.adam.eps > 0.0) {
            return Err(Error::InvalidConfig("learning rate and epsilon must be positive".into()));
        }
        if !((0.0..1.0).contains(&self.adam.beta1) && (0.0..1.0).contains(&self.adam.beta2)) {
            return Err(Error::InvalidConfig("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.init_area_per_edge > 0.0) {
            return Err(Error::InvalidConfig("init_area_per_edge must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIter,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub iter: u32,
    pub losses: LossBreakdown,
    pub nodes: usize,
    pub edges: usize,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub graph: BezierGraph,
    pub canvas: CanvasSpec,
    pub history: Vec<LossRow>,
    pub edits: Vec<EditRecord>,
    pub stop_reason: StopReason,
    pub wall_time_s: f64,
}

impl RunReport {
    pub fn iterations(&self) -> usize {
        self.history.len()
    }

    pub fn losses_csv(&self) -> String {
        let mut s = String::from("iter,cover,overlap,g1,offset,spacing,total,nodes,edges\n");
        for r in &self.history {
            let l = &r.losses;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.iter, l.cover, l.overlap, l.g1, l.offset, l.spacing, l.total, r.nodes, r.edges
            );
        }
        s
    }

    pub fn edits_jsonl(&self) -> String {
        self.edits.iter().map(|e| e.to_json_line() + "\n").collect()
    }
}

/// Number of initial edges for a target with `road_area` m² of road.
pub fn initial_edge_count(road_area: f64, area_per_edge: f64) -> usize {
    ((road_area / area_per_edge).round() as usize).clamp(4, 256)
}

/// Scatters straight edges of random orientation over road pixels.
pub fn initialize_graph<R: Rng>(target: &CoverageMap, cfg: &RunConfig, rng: &mut R) -> Result<BezierGraph> {
    let canvas = target.canvas();
    let road: Vec<usize> =
        target.values().iter().enumerate().filter(|(_, &v)| v > cfg.topo.tau_seg).map(|(i, _)| i).collect();
    if road.is_empty() {
        return Err(Error::EmptyTarget);
    }
    let area = road.len() as f64 * canvas.meters_per_pixel * canvas.meters_per_pixel;
    let n = initial_edge_count(area, cfg.init_area_per_edge).min(road.len());
    let mut picks: Vec<usize> = sample(rng, road.len(), n).into_iter().map(|k| road[k]).collect();
    picks.sort_unstable();
    let mut g = BezierGraph::new();
    for i in picks {
        let center = canvas.pixel_center(i % canvas.width, i / canvas.width);
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let half = Point2::new(angle.cos(), angle.sin()) * (0.5 * cfg.topo.init_edge_length);
        let a = g.add_node(center - half);
        let b = g.add_node(center + half);
        let shape = EdgeShape { d0: rng.gen_range(-0.1..=0.1), d1: rng.gen_range(-0.1..=0.1), ..EdgeShape::default() };
        g.add_edge(a, b, EdgeParams { width: cfg.topo.init_edge_width, shape })?;
    }
    Ok(g)
}

/// Writes `iter_NNNNN.svg` and `iter_NNNNN.png` for the current graph.
pub fn snapshot(g: &BezierGraph, union: &CoverageMap, iter: u32, out_dir: &Path) -> Result<()> {
    write_svg(g, &union.canvas(), &out_dir.join(format!("iter_{iter:05}.svg")))?;
    union.save_png(&out_dir.join(format!("iter_{iter:05}.png")))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Relative change of the coverage loss's moving average between the last
/// two iterations; also requires that no topology edit landed inside the
/// current window.
fn plateaued(history: &[LossRow], edits: &[EditRecord], window: usize, tol: f64) -> bool {
    let n = history.len();
    if window == 0 || n < window + 1 {
        return false;
    }
    let cover: Vec<f64> = history[n - window - 1..].iter().map(|r| r.losses.cover).collect();
    let (prev, last) = (mean(&cover[..window]), mean(&cover[1..]));
    let first_iter = history[n - window].iter;
    if edits.iter().any(|e| e.iter >= first_iter) {
        return false;
    }
    (last - prev).abs() <= tol * prev.abs().max(1e-12)
}

fn at(iteration: u32) -> impl Fn(Error) -> Error {
    move |e| Error::AtIteration { iteration, source: Box::new(e) }
}

/// Initializes from the target and optimizes.
pub fn run(target: &CoverageMap, cfg: &RunConfig, snapshot_dir: Option<&Path>) -> Result<RunReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let g = initialize_graph(target, cfg, &mut rng)?;
    optimize(g, target, cfg, &mut rng, snapshot_dir)
}

/// Optimizes a given starting graph.
pub fn run_from(
    g: BezierGraph,
    target: &CoverageMap,
    cfg: &RunConfig,
    snapshot_dir: Option<&Path>,
) -> Result<RunReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    optimize(g, target, cfg, &mut rng, snapshot_dir)
}

fn optimize(
    mut g: BezierGraph,
    target: &CoverageMap,
    cfg: &RunConfig,
    rng: &mut ChaCha8Rng,
    snapshot_dir: Option<&Path>,
) -> Result<RunReport> {
    let started = Instant::now();
    let canvas = target.canvas();
    let mut adam_cfg = cfg.adam;
    if cfg.normalize_lengths {
        let (w, h) = canvas.extent_m();
        adam_cfg.length_scale = w.max(h);
    }
    let mut adam = AdamState::new(adam_cfg);
    let mut history = Vec::new();
    let mut edits = Vec::new();
    let mut render = render_graph(&g, &canvas).composite_union;
    let snap = |g: &BezierGraph, t: u32| -> Result<()> {
        match snapshot_dir {
            Some(dir) if cfg.snapshot_period > 0 && t.is_multiple_of(cfg.snapshot_period) => {
                snapshot(g, &render_graph(g, &canvas).composite_union, t, dir)
            }
            _ => Ok(()),
        }
    };
    let mut stop_reason = StopReason::MaxIter;
    for t in 0..cfg.max_iterations {
        snap(&g, t)?;
        let log = topo_pass(&mut g, target, &render, &cfg.topo, t, rng).map_err(at(t))?;
        if !log.is_empty() {
            log::debug!("iteration {t}: {} topology edits", log.len());
        }
        edits.extend(log);
        let eval = total_loss_and_grad(&g, target, &cfg.weights).map_err(at(t))?;
        history.push(LossRow { iter: t, losses: eval.losses, nodes: g.node_count(), edges: g.edge_count() });
        let (mut values, layout) = g.flatten_params();
        adam.step(&layout, &mut values, &eval.grad.values).map_err(at(t))?;
        g.unflatten_params(&layout, &values).map_err(at(t))?;
        g.tick_ages();
        render = eval.bundle.composite_union;
        if t % 10 == 0 {
            log::info!(
                "iteration {t}: total {:.6} cover {:.6}, {} nodes, {} edges",
                eval.losses.total,
                eval.losses.cover,
                g.node_count(),
                g.edge_count()
            );
        }
        if plateaued(&history, &edits, cfg.early_stop_window as usize, cfg.early_stop_tolerance) {
            stop_reason = StopReason::Converged;
            break;
        }
    }
    snap(&g, history.len() as u32)?;
    Ok(RunReport {
        graph: g,
        canvas,
        history,
        edits,
        stop_reason,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub stop_reason: StopReason,
    pub iterations: usize,
    pub wall_time_s: f64,
    pub final_losses: Option<LossBreakdown>,
    pub nodes: usize,
    pub edges: usize,
    pub metrics: EvalReport,
}

/// Writes graph.json, losses.csv, edits.jsonl and report.json.
pub fn write_outputs(report: &RunReport, target: &CoverageMap, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_graph(&report.graph, report.canvas.meters_per_pixel, &out_dir.join("graph.json"))?;
    let put = |name: &str, text: String| {
        let path = out_dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))
    };
    put("losses.csv", report.losses_csv())?;
    put("edits.jsonl", report.edits_jsonl())?;
    let summary = RunSummary {
        stop_reason: report.stop_reason,
        iterations: report.iterations(),
        wall_time_s: report.wall_time_s,
        final_losses: report.history.last().map(|r| r.losses),
        nodes: report.graph.node_count(),
        edges: report.graph.edge_count(),
        metrics: evaluate(&report.graph, target, None, 0.5, 5.0)?,
    };
    put("report.json", serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n")
}
