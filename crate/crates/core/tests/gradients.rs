use doge_core::diffalign::{gradient_check, total_loss_and_grad, LossWeights};
use doge_core::graph::EdgeParams;
use doge_core::{BezierGraph, CanvasSpec, CoverageMap, EdgeShape, Point2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_graph(rng: &mut ChaCha8Rng) -> BezierGraph {
    let mut g = BezierGraph::new();
    let n_edges = rng.gen_range(1..=3);
    let mut nodes = vec![g.add_node(Point2::new(rng.gen_range(12.0..52.0), rng.gen_range(12.0..52.0)))];
    for _ in 0..n_edges {
        let from = nodes[rng.gen_range(0..nodes.len())];
        let p = g.position(from).unwrap();
        let ang: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let len = rng.gen_range(8.0..20.0);
        let q = Point2::new((p.x + len * ang.cos()).clamp(6.0, 58.0), (p.y + len * ang.sin()).clamp(6.0, 58.0));
        if q.distance(p) < 4.0 {
            continue;
        }
        let to = g.add_node(q);
        nodes.push(to);
        let shape = EdgeShape {
            alpha0: rng.gen_range(0.2..0.45),
            alpha1: rng.gen_range(0.55..0.8),
            d0: rng.gen_range(-3.0..3.0),
            d1: rng.gen_range(-3.0..3.0),
        };
        g.add_edge(from, to, EdgeParams { width: rng.gen_range(2.0..6.0), shape }).unwrap();
    }
    g
}

fn random_target(rng: &mut ChaCha8Rng, canvas: CanvasSpec) -> CoverageMap {
    let other = random_graph(rng);
    doge_core::raster::render_graph(&other, &canvas).composite_union
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let canvas = CanvasSpec::new(64, 64, 1.0).unwrap();
    // Heavier regularizers so every term is exercised.
    let weights = LossWeights { lambda_g1: 0.5, lambda_offset: 0.5, tau_d: 0.05, ..LossWeights::default() };
    let mut total = doge_core::diffalign::GradientCheck::default();
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng);
        let target = random_target(&mut rng, canvas);
        let check = gradient_check(&g, &target, &weights, 1e-2, 1e-6).unwrap();
        for f in &check.failures {
            eprintln!("seed {seed}: {:?} analytic {} numeric {}", f.0, f.1, f.2);
        }
        total.merge(check);
    }
    eprintln!("checked {} passed {} skipped {}", total.checked, total.passed, total.skipped);
    assert!(total.pass_fraction() >= 0.9);
    assert!(total.skipped * 10 <= total.checked + total.skipped);
}

#[test]
fn widening_a_covered_edge_lowers_the_loss() {
    let canvas = CanvasSpec::new(48, 48, 1.0).unwrap();
    let mut g = BezierGraph::new();
    let a = g.add_node(Point2::new(8.0, 24.0));
    let b = g.add_node(Point2::new(40.0, 24.0));
    g.add_edge(a, b, EdgeParams::straight(1.5)).unwrap();
    let target = CoverageMap::from_values(canvas, vec![1.0; canvas.pixel_count()]).unwrap();
    let w = LossWeights::default();
    let eval = total_loss_and_grad(&g, &target, &w).unwrap();
    let width_slot = 2 * g.node_count();
    assert!(eval.grad.values[width_slot] < 0.0);
}
