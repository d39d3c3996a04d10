//! The mutable Bézier road graph.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{arc_length, build_from_shape, ControlPolygon, EdgeShape, Point2};
pub use crate::ids::{EdgeId, NodeId};

#[derive(Clone, Debug, PartialEq)]
pub struct GraphNode {
    pub id: NodeId,
    pub position: Point2,
    pub age: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BezierEdge {
    pub id: EdgeId,
    pub a: NodeId,
    pub b: NodeId,
    pub width: f64,
    pub shape: EdgeShape,
    pub age: u32,
}

impl BezierEdge {
    pub fn other(&self, n: NodeId) -> NodeId {
        if self.a == n {
            self.b
        } else {
            self.a
        }
    }

    pub fn touches(&self, n: NodeId) -> bool {
        self.a == n || self.b == n
    }
}

/// Optimizable parameters of a new edge.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeParams {
    pub width: f64,
    pub shape: EdgeShape,
}

impl EdgeParams {
    pub fn straight(width: f64) -> Self {
        EdgeParams { width, shape: EdgeShape::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BezierGraph {
    nodes: BTreeMap<NodeId, GraphNode>,
    edges: BTreeMap<EdgeId, BezierEdge>,
    adjacency: BTreeMap<NodeId, Vec<EdgeId>>,
    next_node: u64,
    next_edge: u64,
}

impl BezierGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &GraphNode> {
        self.nodes.values()
    }

    pub fn edges(&self) -> impl Iterator<Item = &BezierEdge> {
        self.edges.values()
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.nodes.keys().copied().collect()
    }

    pub fn edge_ids(&self) -> Vec<EdgeId> {
        self.edges.keys().copied().collect()
    }

    pub fn node(&self, id: NodeId) -> Result<&GraphNode> {
        self.nodes.get(&id).ok_or(Error::MissingNode(id))
    }

    pub fn node_mut(&mut self, id: NodeId) -> Result<&mut GraphNode> {
        self.nodes.get_mut(&id).ok_or(Error::MissingNode(id))
    }

    pub fn edge(&self, id: EdgeId) -> Result<&BezierEdge> {
        self.edges.get(&id).ok_or(Error::MissingEdge(id))
    }

    pub fn edge_mut(&mut self, id: EdgeId) -> Result<&mut BezierEdge> {
        self.edges.get_mut(&id).ok_or(Error::MissingEdge(id))
    }

    pub fn contains_node(&self, id: NodeId) -> bool {
        self.nodes.contains_key(&id)
    }

    pub fn contains_edge(&self, id: EdgeId) -> bool {
        self.edges.contains_key(&id)
    }

    pub fn position(&self, id: NodeId) -> Result<Point2> {
        Ok(self.node(id)?.position)
    }

    pub fn incident(&self, id: NodeId) -> &[EdgeId] {
        self.adjacency.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn degree(&self, id: NodeId) -> usize {
        self.incident(id).len()
    }

    pub fn edge_between(&self, u: NodeId, v: NodeId) -> Option<EdgeId> {
        self.incident(u).iter().copied().find(|e| self.edges[e].touches(v) && self.edges[e].other(u) == v)
    }

    pub fn add_node(&mut self, position: Point2) -> NodeId {
        self.add_node_with_age(position, 0)
    }

    pub fn add_node_with_age(&mut self, position: Point2, age: u32) -> NodeId {
        assert!(position.is_finite(), "node position must be finite");
        let id = NodeId(self.next_node);
        self.next_node += 1;
        self.nodes.insert(id, GraphNode { id, position, age });
        self.adjacency.insert(id, Vec::new());
        id
    }

    pub fn add_edge(&mut self, a: NodeId, b: NodeId, params: EdgeParams) -> Result<EdgeId> {
        self.add_edge_with_age(a, b, params, 0)
    }

    pub fn add_edge_with_age(&mut self, a: NodeId, b: NodeId, params: EdgeParams, age: u32) -> Result<EdgeId> {
        self.check_new_edge(a, b)?;
        let id = EdgeId(self.next_edge);
        self.next_edge += 1;
        self.edges.insert(id, BezierEdge { id, a, b, width: params.width, shape: params.shape, age });
        self.adjacency.entry(a).or_default().push(id);
        self.adjacency.entry(b).or_default().push(id);
        Ok(id)
    }

    fn check_new_edge(&self, a: NodeId, b: NodeId) -> Result<()> {
        self.node(a)?;
        self.node(b)?;
        if a == b {
            return Err(Error::SelfLoop(a));
        }
        if self.edge_between(a, b).is_some() {
            return Err(Error::DuplicateEdge(a, b));
        }
        Ok(())
    }

    pub fn remove_edge(&mut self, id: EdgeId) -> Result<BezierEdge> {
        let edge = self.edges.remove(&id).ok_or(Error::MissingEdge(id))?;
        for n in [edge.a, edge.b] {
            if let Some(list) = self.adjacency.get_mut(&n) {
                list.retain(|&e| e != id);
            }
        }
        Ok(edge)
    }

    pub fn remove_node(&mut self, id: NodeId) -> Result<GraphNode> {
        let degree = self.degree(id);
        if !self.nodes.contains_key(&id) {
            return Err(Error::MissingNode(id));
        }
        if degree > 0 {
            return Err(Error::NodeStillConnected(id, degree));
        }
        self.adjacency.remove(&id);
        Ok(self.nodes.remove(&id).expect("checked above"))
    }

    /// Moves one endpoint of an edge from `from` to `to`, keeping the edge's
    /// id, age and shape parameters.
    pub fn rewire_edge(&mut self, id: EdgeId, from: NodeId, to: NodeId) -> Result<()> {
        let edge = self.edge(id)?;
        if !edge.touches(from) {
            return Err(Error::InvalidGraph(format!("{id} does not touch {from}")));
        }
        let other = edge.other(from);
        self.node(to)?;
        if other == to {
            return Err(Error::SelfLoop(to));
        }
        if self.edge_between(other, to).is_some() {
            return Err(Error::DuplicateEdge(other, to));
        }
        let edge = self.edges.get_mut(&id).expect("checked above");
        if edge.a == from {
            edge.a = to;
        } else {
            edge.b = to;
        }
        if let Some(list) = self.adjacency.get_mut(&from) {
            list.retain(|&e| e != id);
        }
        self.adjacency.entry(to).or_default().push(id);
        Ok(())
    }

    pub fn control_polygon(&self, id: EdgeId) -> Result<ControlPolygon> {
        let e = self.edge(id)?;
        build_from_shape(self.position(e.a)?, self.position(e.b)?, &e.shape)
    }

    /// Arc length of an edge; zero for a degenerate chord.
    pub fn edge_length(&self, id: EdgeId) -> f64 {
        self.control_polygon(id).map(|cp| arc_length(&cp)).unwrap_or(0.0)
    }

    pub fn tick_ages(&mut self) {
        for n in self.nodes.values_mut() {
            n.age = n.age.saturating_add(1);
        }
        for e in self.edges.values_mut() {
            e.age = e.age.saturating_add(1);
        }
    }

    /// Checks adjacency against edge endpoints, self-loops and duplicates.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidGraph(m));
        if self.adjacency.len() != self.nodes.len() || self.adjacency.keys().any(|k| !self.nodes.contains_key(k)) {
            return bad("adjacency keys differ from node set".into());
        }
        let mut pairs = std::collections::BTreeSet::new();
        let mut expected: BTreeMap<NodeId, Vec<EdgeId>> = self.nodes.keys().map(|&n| (n, Vec::new())).collect();
        for e in self.edges.values() {
            if e.a == e.b {
                return bad(format!("{} is a self-loop", e.id));
            }
            let key = (e.a.min(e.b), e.a.max(e.b));
            if !pairs.insert(key) {
                return bad(format!("{} duplicates the pair {:?}", e.id, key));
            }
            for n in [e.a, e.b] {
                match expected.get_mut(&n) {
                    Some(list) => list.push(e.id),
                    None => return bad(format!("{} references missing node {n}", e.id)),
                }
            }
        }
        for (n, mut want) in expected {
            let mut have = self.adjacency[&n].clone();
            want.sort();
            have.sort();
            if want != have {
                return bad(format!("adjacency of {n} is {have:?}, edges say {want:?}"));
            }
        }
        Ok(())
    }

    /// All optimizable scalars in a deterministic order: nodes by id
    /// (x, y), then edges by id (width, alpha0, alpha1, d0, d1).
    pub fn flatten_params(&self) -> (Vec<f64>, ParamLayout) {
        let mut values = Vec::with_capacity(2 * self.nodes.len() + 5 * self.edges.len());
        let mut keys = Vec::with_capacity(values.capacity());
        for n in self.nodes.values() {
            values.extend([n.position.x, n.position.y]);
            keys.extend([ParamKey::node(n.id, Field::X), ParamKey::node(n.id, Field::Y)]);
        }
        for e in self.edges.values() {
            values.extend([e.width, e.shape.alpha0, e.shape.alpha1, e.shape.d0, e.shape.d1]);
            for f in EDGE_FIELDS {
                keys.push(ParamKey::edge(e.id, f));
            }
        }
        (values, ParamLayout { keys, node_count: self.nodes.len(), edge_count: self.edges.len() })
    }

    pub fn layout(&self) -> ParamLayout {
        self.flatten_params().1
    }

    pub fn unflatten_params(&mut self, layout: &ParamLayout, values: &[f64]) -> Result<()> {
        layout.check(self)?;
        if values.len() != layout.len() {
            return Err(Error::LayoutMismatch(format!("{} values for {} slots", values.len(), layout.len())));
        }
        let (node_part, edge_part) = values.split_at(2 * layout.node_count);
        for (n, xy) in self.nodes.values_mut().zip(node_part.chunks_exact(2)) {
            n.position = Point2::new(xy[0], xy[1]);
        }
        for (e, v) in self.edges.values_mut().zip(edge_part.chunks_exact(5)) {
            e.width = v[0];
            e.shape = EdgeShape { alpha0: v[1], alpha1: v[2], d0: v[3], d1: v[4] };
        }
        Ok(())
    }

    /// Position of a node inside the flat parameter vector.
    pub fn node_offset(layout: &ParamLayout, index: usize) -> usize {
        debug_assert!(index < layout.node_count);
        2 * index
    }

    pub fn edge_offset(layout: &ParamLayout, index: usize) -> usize {
        debug_assert!(index < layout.edge_count);
        2 * layout.node_count + 5 * index
    }

    pub fn to_document(&self, meters_per_pixel: f64) -> GraphDocument {
        GraphDocument {
            meters_per_pixel,
            nodes: self.nodes.values().map(|n| NodeRecord { id: n.id.0, x: n.position.x, y: n.position.y }).collect(),
            edges: self
                .edges
                .values()
                .map(|e| EdgeRecord {
                    id: e.id.0,
                    a: e.a.0,
                    b: e.b.0,
                    width: e.width,
                    alpha0: e.shape.alpha0,
                    alpha1: e.shape.alpha1,
                    d0: e.shape.d0,
                    d1: e.shape.d1,
                })
                .collect(),
        }
    }

    /// Rebuilds a graph from its JSON document; ages start at zero.
    pub fn from_document(doc: &GraphDocument) -> Result<Self> {
        let mut g = BezierGraph::new();
        for n in &doc.nodes {
            let id = NodeId(n.id);
            if g.nodes.contains_key(&id) {
                return Err(Error::InvalidGraph(format!("duplicate node id {id}")));
            }
            let position = Point2 { x: n.x, y: n.y };
            if !position.is_finite() {
                return Err(Error::InvalidGraph(format!("node {id} has a non-finite position")));
            }
            g.nodes.insert(id, GraphNode { id, position, age: 0 });
            g.adjacency.insert(id, Vec::new());
            g.next_node = g.next_node.max(n.id + 1);
        }
        for e in &doc.edges {
            let id = EdgeId(e.id);
            if g.edges.contains_key(&id) {
                return Err(Error::InvalidGraph(format!("duplicate edge id {id}")));
            }
            let (a, b) = (NodeId(e.a), NodeId(e.b));
            g.check_new_edge(a, b)?;
            let shape = EdgeShape { alpha0: e.alpha0, alpha1: e.alpha1, d0: e.d0, d1: e.d1 };
            g.edges.insert(id, BezierEdge { id, a, b, width: e.width, shape, age: 0 });
            g.adjacency.entry(a).or_default().push(id);
            g.adjacency.entry(b).or_default().push(id);
            g.next_edge = g.next_edge.max(e.id + 1);
        }
        Ok(g)
    }

    pub fn to_json(&self, meters_per_pixel: f64) -> String {
        serde_json::to_string_pretty(&self.to_document(meters_per_pixel)).expect("graph serializes")
    }

    /// Parses a graph document, returning the graph and its meters-per-pixel.
    pub fn from_json(text: &str) -> Result<(Self, f64)> {
        let doc: GraphDocument =
            serde_json::from_str(text).map_err(|e| Error::InvalidGraph(format!("bad graph JSON: {e}")))?;
        Ok((Self::from_document(&doc)?, doc.meters_per_pixel))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Entity {
    Node(NodeId),
    Edge(EdgeId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Field {
    X,
    Y,
    Width,
    Alpha0,
    Alpha1,
    D0,
    D1,
}

impl Field {
    pub fn is_alpha(self) -> bool {
        matches!(self, Field::Alpha0 | Field::Alpha1)
    }

    /// Fields measured in meters (as opposed to unitless chord fractions).
    pub fn is_length(self) -> bool {
        !self.is_alpha()
    }
}

const EDGE_FIELDS: [Field; 5] = [Field::Width, Field::Alpha0, Field::Alpha1, Field::D0, Field::D1];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub entity: Entity,
    pub field: Field,
}

impl ParamKey {
    fn node(id: NodeId, field: Field) -> Self {
        ParamKey { entity: Entity::Node(id), field }
    }

    fn edge(id: EdgeId, field: Field) -> Self {
        ParamKey { entity: Entity::Edge(id), field }
    }
}

/// Maps each scalar of a flattened parameter vector back to its owner.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub keys: Vec<ParamKey>,
    pub node_count: usize,
    pub edge_count: usize,
}

impl ParamLayout {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Errors unless this layout describes exactly the graph's entities.
    pub fn check(&self, g: &BezierGraph) -> Result<()> {
        let ok = self.node_count == g.node_count()
            && self.edge_count == g.edge_count()
            && self.keys.len() == 2 * self.node_count + 5 * self.edge_count
            && g.nodes.keys().zip(self.keys.iter().step_by(2)).all(|(n, k)| k.entity == Entity::Node(*n))
            && g
                .edges
                .keys()
                .zip(self.keys[2 * self.node_count..].iter().step_by(5))
                .all(|(e, k)| k.entity == Entity::Edge(*e));
        if ok {
            Ok(())
        } else {
            Err(Error::LayoutMismatch(format!(
                "layout has {} nodes / {} edges, graph has {} / {}",
                self.node_count,
                self.edge_count,
                g.node_count(),
                g.edge_count()
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: u64,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub id: u64,
    pub a: u64,
    pub b: u64,
    pub width: f64,
    pub alpha0: f64,
    pub alpha1: f64,
    pub d0: f64,
    pub d1: f64,
}

/// On-disk graph format; coordinates in meters, y pointing down.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphDocument {
    pub meters_per_pixel: f64,
    pub nodes: Vec<NodeRecord>,
    pub edges: Vec<EdgeRecord>,
}
