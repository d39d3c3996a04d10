use std::collections::BTreeSet;

use doge_core::geometry::closest_point;
use doge_core::graph::EdgeParams;
use doge_core::raster::render_graph;
use doge_core::topoadapt::{
    build_grid, close_node_edge_pairs, close_node_pairs, create_t_junction, merge_nodes, topo_pass, EditOp,
    TopoConfig,
};
use doge_core::{BezierGraph, CanvasSpec, CoverageMap, EdgeShape, Error, Point2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scatter(seed: u64, nodes: usize, edges: usize, extent: f64) -> BezierGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = BezierGraph::new();
    let ids: Vec<_> =
        (0..nodes).map(|_| g.add_node(Point2::new(rng.gen_range(0.0..extent), rng.gen_range(0.0..extent)))).collect();
    for _ in 0..edges * 4 {
        if g.edge_count() == edges {
            break;
        }
        let (a, b) = (ids[rng.gen_range(0..nodes)], ids[rng.gen_range(0..nodes)]);
        if a == b || g.edge_between(a, b).is_some() {
            continue;
        }
        if g.position(a).unwrap().distance(g.position(b).unwrap()) < 0.5 {
            continue;
        }
        let shape = EdgeShape {
            alpha0: rng.gen_range(0.1..0.5),
            alpha1: rng.gen_range(0.5..0.9),
            d0: rng.gen_range(-4.0..4.0),
            d1: rng.gen_range(-4.0..4.0),
        };
        g.add_edge(a, b, EdgeParams { width: rng.gen_range(0.2..6.0), shape }).unwrap();
    }
    g
}

fn age(g: &mut BezierGraph, ticks: u32) {
    for _ in 0..ticks {
        g.tick_ages();
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn grid_candidates_match_a_full_scan(seed in any::<u64>(), radius in 0.5f64..8.0) {
        let g = scatter(seed, 60, 30, 80.0);
        let grid = build_grid(&g, 8.0f64.max(radius), radius);
        let fast: BTreeSet<_> = close_node_pairs(&g, &grid, radius).into_iter().map(|(_, u, v)| (u, v)).collect();
        let mut slow = BTreeSet::new();
        for a in g.nodes() {
            for b in g.nodes() {
                if a.id < b.id && a.position.distance(b.position) < radius {
                    slow.insert((a.id, b.id));
                }
            }
        }
        prop_assert_eq!(fast, slow);
        let fast: BTreeSet<_> =
            close_node_edge_pairs(&g, &grid, radius).into_iter().map(|(_, n, e, _)| (n, e)).collect();
        let mut slow = BTreeSet::new();
        for n in g.nodes() {
            for e in g.edges() {
                if !e.touches(n.id) && closest_point(&g.control_polygon(e.id).unwrap(), n.position).2 < radius {
                    slow.insert((n.id, e.id));
                }
            }
        }
        prop_assert_eq!(fast, slow);
    }

    #[test]
    fn a_pass_leaves_a_valid_fixpoint(seed in any::<u64>(), ticks in 0u32..90, iteration in 1u32..200) {
        let cfg = TopoConfig::default();
        let mut g = scatter(seed, 30, 24, 50.0);
        age(&mut g, ticks);
        let canvas = CanvasSpec::new(56, 56, 1.0).unwrap();
        let target = CoverageMap::zeros(canvas);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let render = render_graph(&g, &canvas).composite_union;
        topo_pass(&mut g, &target, &render, &cfg, iteration, &mut rng).unwrap();
        prop_assert!(g.validate().is_ok());
        let again: Vec<_> = topo_pass(&mut g, &target, &render, &cfg, iteration, &mut rng)
            .unwrap()
            .into_iter()
            .filter(|r| r.op != EditOp::Add)
            .collect();
        prop_assert!(again.is_empty(), "{:?}", again);
    }

    #[test]
    fn no_pair_within_merge_radius_survives_after_warmup(seed in any::<u64>()) {
        let cfg = TopoConfig::default();
        let mut g = scatter(seed, 40, 20, 60.0);
        age(&mut g, 100);
        let canvas = CanvasSpec::new(64, 64, 1.0).unwrap();
        let target = CoverageMap::zeros(canvas);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        topo_pass(&mut g, &target, &target, &cfg, 41, &mut rng).unwrap();
        let grid = build_grid(&g, cfg.cell_size, cfg.eps_merge);
        prop_assert!(close_node_pairs(&g, &grid, cfg.eps_merge).is_empty());
    }

    #[test]
    fn merge_conserves_other_connections(seed in any::<u64>()) {
        let cfg = TopoConfig::default();
        let mut g = scatter(seed, 12, 10, 30.0);
        age(&mut g, cfg.connect_min_age);
        let grid = build_grid(&g, cfg.cell_size, cfg.eps_merge);
        if let Some(&(_, u, v)) = close_node_pairs(&g, &grid, cfg.eps_merge).first() {
            let mut neighbours: BTreeSet<_> = g.incident(u).iter().chain(g.incident(v)).map(|&e| {
                let edge = g.edge(e).unwrap();
                if edge.a == u || edge.a == v { edge.b } else { edge.a }
            }).collect();
            neighbours.remove(&u);
            neighbours.remove(&v);
            let n = merge_nodes(&mut g, u, v, &cfg).unwrap();
            let after: BTreeSet<_> = g.incident(n).iter().map(|&e| g.edge(e).unwrap().other(n)).collect();
            prop_assert_eq!(after, neighbours);
            prop_assert!(g.validate().is_ok());
        }
    }
}

#[test]
fn junction_near_an_endpoint_is_left_to_merging() {
    let cfg = TopoConfig::default();
    let mut g = BezierGraph::new();
    let a = g.add_node(Point2::new(0.0, 0.0));
    let b = g.add_node(Point2::new(30.0, 0.0));
    let e = g.add_edge(a, b, EdgeParams::straight(4.0)).unwrap();
    let near_end = g.add_node(Point2::new(2.0, 3.0));
    let middle = g.add_node(Point2::new(15.0, 3.0));
    age(&mut g, cfg.connect_min_age);
    assert!(matches!(create_t_junction(&mut g, near_end, e, &cfg), Err(Error::NearEndpoint(..))));
    let tj = create_t_junction(&mut g, middle, e, &cfg).unwrap();
    assert!((tj.position.y - 1.5).abs() < 1e-6);
    assert_eq!(g.degree(middle), 2);
}

#[test]
fn warmup_holds_back_connections_but_not_pruning() {
    let cfg = TopoConfig::default();
    let mut g = BezierGraph::new();
    let u = g.add_node(Point2::new(10.0, 10.0));
    let v = g.add_node(Point2::new(11.0, 10.0));
    let w = g.add_node(Point2::new(40.0, 10.0));
    let x = g.add_node(Point2::new(10.0, 40.0));
    g.add_edge(v, w, EdgeParams::straight(4.0)).unwrap();
    g.add_edge(u, x, EdgeParams::straight(4.0)).unwrap();
    let thin_a = g.add_node(Point2::new(30.0, 30.0));
    let thin_b = g.add_node(Point2::new(40.0, 30.0));
    let thin = g.add_edge(thin_a, thin_b, EdgeParams::straight(0.1)).unwrap();
    age(&mut g, 30);
    let canvas = CanvasSpec::new(48, 48, 1.0).unwrap();
    let empty = CoverageMap::zeros(canvas);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let log = topo_pass(&mut g, &empty, &empty, &TopoConfig { t_warmup: 50, ..cfg }, 30, &mut rng).unwrap();
    assert!(log.iter().all(|r| r.op == EditOp::Prune));
    assert!(!g.contains_edge(thin));
    assert!(g.contains_node(u) && g.contains_node(v));
    let log = topo_pass(&mut g, &empty, &empty, &cfg, 31, &mut rng).unwrap();
    assert_eq!(log.iter().filter(|r| r.op == EditOp::Merge).count(), 1);
}
