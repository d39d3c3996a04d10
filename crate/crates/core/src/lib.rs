//! Road-graph reconstruction from segmentation masks.
//!
//! A road network is modeled as a graph whose edges are cubic Bézier ribbons.
//! The graph is fitted to a coverage mask by rendering it with a
//! differentiable soft rasterizer and descending a weighted loss, while a set
//! of discrete edits keeps the topology tidy between gradient steps.

pub mod diffalign;
pub mod error;
pub mod geometry;
pub mod graph;
pub mod ids;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod synth;
pub mod topoadapt;

pub use error::{Error, Result};
pub use geometry::{ControlPolygon, EdgeShape, Point2};
pub use graph::{BezierGraph, EdgeId, NodeId};
pub use raster::{CanvasSpec, CoverageMap};
