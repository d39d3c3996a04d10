//! Cubic Bézier mathematics for road edges.
//!
//! An edge is anchored at two node positions; its two interior control
//! points are placed along the chord (`alpha`) and pushed off it along the
//! chord's left normal (`d`). Everything here is a pure function.

use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use crate::error::{Error, Result};
use crate::ids::EdgeId;

/// Chords at or below this length cannot define a normal.
pub const MIN_CHORD: f64 = 1e-9;

/// Number of points in the piecewise-linear arc-length estimate.
pub const ARC_LENGTH_POINTS: usize = 100;

const TANGENT_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const ZERO: Point2 = Point2 { x: 0.0, y: 0.0 };

    #[inline]
    pub fn new(x: f64, y: f64) -> Self {
        debug_assert!(x.is_finite() && y.is_finite(), "non-finite point ({x}, {y})");
        Point2 { x, y }
    }

    #[inline]
    pub fn dot(self, o: Point2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    #[inline]
    pub fn cross(self, o: Point2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    #[inline]
    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn distance(self, o: Point2) -> f64 {
        (self - o).norm()
    }

    /// Counter-clockwise quarter turn: `(x, y) -> (-y, x)`.
    #[inline]
    pub fn perp(self) -> Point2 {
        Point2 { x: -self.y, y: self.x }
    }

    /// Transpose of [`Point2::perp`]: `(x, y) -> (y, -x)`.
    #[inline]
    pub fn perp_t(self) -> Point2 {
        Point2 { x: self.y, y: -self.x }
    }

    #[inline]
    pub fn lerp(self, o: Point2, t: f64) -> Point2 {
        self + (o - self) * t
    }

    pub fn normalized(self) -> Option<Point2> {
        let n = self.norm();
        (n > TANGENT_EPS).then(|| self * (1.0 / n))
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Point2 {
    type Output = Point2;
    #[inline]
    fn add(self, o: Point2) -> Point2 {
        Point2 { x: self.x + o.x, y: self.y + o.y }
    }
}

impl AddAssign for Point2 {
    #[inline]
    fn add_assign(&mut self, o: Point2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl Sub for Point2 {
    type Output = Point2;
    #[inline]
    fn sub(self, o: Point2) -> Point2 {
        Point2 { x: self.x - o.x, y: self.y - o.y }
    }
}

impl SubAssign for Point2 {
    #[inline]
    fn sub_assign(&mut self, o: Point2) {
        self.x -= o.x;
        self.y -= o.y;
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    #[inline]
    fn mul(self, s: f64) -> Point2 {
        Point2 { x: self.x * s, y: self.y * s }
    }
}

impl Neg for Point2 {
    type Output = Point2;
    #[inline]
    fn neg(self) -> Point2 {
        Point2 { x: -self.x, y: -self.y }
    }
}

/// The chord-relative shape parameters of an edge.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeShape {
    pub alpha0: f64,
    pub alpha1: f64,
    pub d0: f64,
    pub d1: f64,
}

impl Default for EdgeShape {
    fn default() -> Self {
        EdgeShape { alpha0: 1.0 / 3.0, alpha1: 2.0 / 3.0, d0: 0.0, d1: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControlPolygon {
    pub p0: Point2,
    pub p1: Point2,
    pub p2: Point2,
    pub p3: Point2,
}

impl ControlPolygon {
    pub fn new(p0: Point2, p1: Point2, p2: Point2, p3: Point2) -> Self {
        ControlPolygon { p0, p1, p2, p3 }
    }

    pub fn points(&self) -> [Point2; 4] {
        [self.p0, self.p1, self.p2, self.p3]
    }

    pub fn reversed(&self) -> ControlPolygon {
        ControlPolygon::new(self.p3, self.p2, self.p1, self.p0)
    }

    /// Axis-aligned bounds of the control points (which contain the curve).
    pub fn bounds(&self) -> (Point2, Point2) {
        let pts = self.points();
        let mut lo = pts[0];
        let mut hi = pts[0];
        for p in &pts[1..] {
            lo.x = lo.x.min(p.x);
            lo.y = lo.y.min(p.y);
            hi.x = hi.x.max(p.x);
            hi.y = hi.y.max(p.y);
        }
        (lo, hi)
    }

    pub fn perimeter(&self) -> f64 {
        self.p0.distance(self.p1) + self.p1.distance(self.p2) + self.p2.distance(self.p3)
    }
}

/// Unit left normal of the chord `pi -> pj`.
pub fn chord_normal(pi: Point2, pj: Point2) -> Result<Point2> {
    let c = pj - pi;
    let len = c.norm();
    if len <= MIN_CHORD {
        return Err(Error::DegenerateChord { length: len });
    }
    Ok(c.perp() * (1.0 / len))
}

pub fn build_control_polygon(
    pi: Point2,
    pj: Point2,
    alpha0: f64,
    alpha1: f64,
    d0: f64,
    d1: f64,
) -> Result<ControlPolygon> {
    let n = chord_normal(pi, pj)?;
    let p1 = pi.lerp(pj, alpha0) + n * d0;
    let p2 = pi.lerp(pj, alpha1) + n * d1;
    Ok(ControlPolygon::new(pi, p1, p2, pj))
}

pub fn build_from_shape(pi: Point2, pj: Point2, s: &EdgeShape) -> Result<ControlPolygon> {
    build_control_polygon(pi, pj, s.alpha0, s.alpha1, s.d0, s.d1)
}

#[inline]
pub fn bernstein(t: f64) -> [f64; 4] {
    let s = 1.0 - t;
    [s * s * s, 3.0 * s * s * t, 3.0 * s * t * t, t * t * t]
}

#[inline]
pub fn bernstein_deriv(t: f64) -> [f64; 4] {
    let s = 1.0 - t;
    [
        -3.0 * s * s,
        3.0 * s * s - 6.0 * t * s,
        6.0 * t * s - 3.0 * t * t,
        3.0 * t * t,
    ]
}

pub fn eval_curve(cp: &ControlPolygon, t: f64) -> Point2 {
    debug_assert!((0.0..=1.0).contains(&t), "t = {t} outside [0, 1]");
    let b = bernstein(t);
    cp.p0 * b[0] + cp.p1 * b[1] + cp.p2 * b[2] + cp.p3 * b[3]
}

fn raw_derivative(cp: &ControlPolygon, t: f64) -> Point2 {
    let b = bernstein_deriv(t);
    cp.p0 * b[0] + cp.p1 * b[1] + cp.p2 * b[2] + cp.p3 * b[3]
}

/// Curve derivative, falling back to the chord where it vanishes (cusps).
pub fn eval_tangent(cp: &ControlPolygon, t: f64) -> Point2 {
    debug_assert!((0.0..=1.0).contains(&t), "t = {t} outside [0, 1]");
    let d = raw_derivative(cp, t);
    if d.norm() > TANGENT_EPS {
        d
    } else {
        cp.p3 - cp.p0
    }
}

/// Unit left normal of the curve at `t`; zero only for a fully collapsed curve.
pub fn eval_normal(cp: &ControlPolygon, t: f64) -> Point2 {
    eval_tangent(cp, t).normalized().map(Point2::perp).unwrap_or(Point2::ZERO)
}

fn uniform_ts(n_points: usize) -> impl Iterator<Item = f64> {
    let last = (n_points - 1) as f64;
    (0..n_points).map(move |i| i as f64 / last)
}

fn polyline_length(pts: impl Iterator<Item = Point2>) -> f64 {
    let mut total = 0.0;
    let mut prev: Option<Point2> = None;
    for p in pts {
        if let Some(q) = prev {
            total += p.distance(q);
        }
        prev = Some(p);
    }
    total
}

/// Curve length from a piecewise-linear approximation with `n_points` samples.
pub fn arc_length_with(cp: &ControlPolygon, n_points: usize) -> f64 {
    polyline_length(uniform_ts(n_points.max(2)).map(|t| eval_curve(cp, t)))
}

pub fn arc_length(cp: &ControlPolygon) -> f64 {
    arc_length_with(cp, ARC_LENGTH_POINTS)
}

/// Uniform-`t` samples with roughly `interval` meters between neighbours.
pub fn sample_polyline(cp: &ControlPolygon, interval: f64) -> Vec<Point2> {
    assert!(interval > 0.0, "sampling interval must be positive");
    let segments = ((arc_length(cp) / interval).round() as usize).max(1);
    uniform_ts(segments + 1).map(|t| eval_curve(cp, t)).collect()
}

/// Number of centerline samples used when serializing an edge to a ribbon.
pub fn ribbon_sample_count(cp: &ControlPolygon) -> usize {
    (arc_length(cp).ceil() as usize).max(8)
}

/// Closed polygon around a curve, offset by half the width on both sides.
///
/// Vertices run along the left boundary from `t = 0` to `t = 1`, then back
/// along the right boundary; the closing edge is implicit.
#[derive(Clone, Debug, PartialEq)]
pub struct Ribbon {
    pub vertices: Vec<Point2>,
    pub source_edge: Option<EdgeId>,
}

impl Ribbon {
    pub fn sample_count(&self) -> usize {
        self.vertices.len() / 2
    }

    /// Shoelace area (absolute).
    pub fn area(&self) -> f64 {
        let v = &self.vertices;
        let n = v.len();
        let twice: f64 = (0..n).map(|i| v[i].cross(v[(i + 1) % n])).sum();
        0.5 * twice.abs()
    }

    pub fn segments(&self) -> impl Iterator<Item = (Point2, Point2)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }
}

pub fn serialize_ribbon(cp: &ControlPolygon, width: f64, samples: usize) -> Ribbon {
    assert!(samples >= 2, "a ribbon needs at least two samples");
    let half = 0.5 * width;
    let mut left = Vec::with_capacity(samples);
    let mut right = Vec::with_capacity(samples);
    for t in uniform_ts(samples) {
        let c = eval_curve(cp, t);
        let n = eval_normal(cp, t);
        left.push(c + n * half);
        right.push(c - n * half);
    }
    right.reverse();
    left.extend(right);
    Ribbon { vertices: left, source_edge: None }
}

/// Ribbon with the default sample count for this curve.
pub fn edge_ribbon(cp: &ControlPolygon, width: f64) -> Ribbon {
    serialize_ribbon(cp, width, ribbon_sample_count(cp))
}

/// Splits a curve at `t` by de Casteljau subdivision.
pub fn split_curve(cp: &ControlPolygon, t: f64) -> (ControlPolygon, ControlPolygon) {
    let a = cp.p0.lerp(cp.p1, t);
    let b = cp.p1.lerp(cp.p2, t);
    let c = cp.p2.lerp(cp.p3, t);
    let ab = a.lerp(b, t);
    let bc = b.lerp(c, t);
    let mid = ab.lerp(bc, t);
    (
        ControlPolygon::new(cp.p0, a, ab, mid),
        ControlPolygon::new(mid, bc, c, cp.p3),
    )
}

/// Closest point on the curve to `p`: `(t, point, distance)`.
pub fn closest_point(cp: &ControlPolygon, p: Point2) -> (f64, Point2, f64) {
    const COARSE: usize = 64;
    let mut best_i = 0;
    let mut best_d = f64::INFINITY;
    for i in 0..=COARSE {
        let d = eval_curve(cp, i as f64 / COARSE as f64).distance(p);
        if d < best_d {
            best_d = d;
            best_i = i;
        }
    }
    // Golden-section refinement on the bracketing interval.
    let mut lo = (best_i.saturating_sub(1)) as f64 / COARSE as f64;
    let mut hi = ((best_i + 1).min(COARSE)) as f64 / COARSE as f64;
    let inv_phi = 0.5 * (5f64.sqrt() - 1.0);
    let dist = |t: f64| eval_curve(cp, t).distance(p);
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = dist(x1);
    let mut f2 = dist(x2);
    for _ in 0..60 {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = dist(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = dist(x2);
        }
    }
    let mut t = 0.5 * (lo + hi);
    let mut d = dist(t);
    if best_d < d {
        t = best_i as f64 / COARSE as f64;
        d = best_d;
    }
    (t, eval_curve(cp, t), d)
}

/// Distance from `p` to the closest point of segment `a-b`, with the
/// segment parameter of that point.
#[inline]
pub fn point_segment_distance(p: Point2, a: Point2, b: Point2) -> (f64, f64) {
    let ab = b - a;
    let len_sq = ab.norm_sq();
    let t = if len_sq > 0.0 { ((p - a).dot(ab) / len_sq).clamp(0.0, 1.0) } else { 0.0 };
    ((a + ab * t).distance(p), t)
}

/// Solves `min |A x - u|²` for two unknowns given the normal-equation sums.
/// Returns `None` when the system is singular.
fn solve_2x2(a11: f64, a12: f64, a22: f64, b1: f64, b2: f64) -> Option<(f64, f64)> {
    let det = a11 * a22 - a12 * a12;
    let scale = a11.abs().max(a22.abs()).max(1e-300);
    if det.abs() <= 1e-12 * scale * scale {
        return None;
    }
    Some(((b1 * a22 - b2 * a12) / det, (a11 * b2 - a12 * b1) / det))
}

/// Box-constrained two-variable least squares over `[0, 1]²`.
fn solve_alpha_box(a11: f64, a12: f64, a22: f64, b1: f64, b2: f64) -> (f64, f64) {
    let obj = |x: f64, y: f64| 0.5 * (a11 * x * x + 2.0 * a12 * x * y + a22 * y * y) - b1 * x - b2 * y;
    if let Some((x, y)) = solve_2x2(a11, a12, a22, b1, b2) {
        if (0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y) {
            return (x, y);
        }
    }
    let mut candidates: Vec<(f64, f64)> = Vec::with_capacity(8);
    for fixed in [0.0, 1.0] {
        if a22 > 0.0 {
            candidates.push((fixed, ((b2 - a12 * fixed) / a22).clamp(0.0, 1.0)));
        }
        if a11 > 0.0 {
            candidates.push((((b1 - a12 * fixed) / a11).clamp(0.0, 1.0), fixed));
        }
    }
    candidates.extend([(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)]);
    candidates
        .into_iter()
        .min_by(|p, q| obj(p.0, p.1).total_cmp(&obj(q.0, q.1)))
        .unwrap_or((1.0 / 3.0, 2.0 / 3.0))
}

/// Least-squares projection of samples `(t_i, q_i)` onto the chord-relative
/// shape of a curve anchored at `a` and `b`, with alphas kept in `[0, 1]`.
///
/// In the chord frame the along-chord and normal components decouple, so
/// this is two independent 2×2 problems.
pub fn fit_shape_at(a: Point2, b: Point2, ts: &[f64], targets: &[Point2]) -> Result<EdgeShape> {
    assert_eq!(ts.len(), targets.len());
    let c = b - a;
    let len = c.norm();
    if len <= MIN_CHORD {
        return Err(Error::DegenerateChord { length: len });
    }
    let u = c * (1.0 / len);
    let n = u.perp();
    let (mut s11, mut s12, mut s22, mut ru1, mut ru2, mut rn1, mut rn2) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for (&t, &q) in ts.iter().zip(targets) {
        let bb = bernstein(t);
        let base = a * (bb[0] + bb[1] + bb[2]) + b * bb[3];
        let r = q - base;
        let (ru, rn) = (r.dot(u), r.dot(n));
        s11 += bb[1] * bb[1];
        s12 += bb[1] * bb[2];
        s22 += bb[2] * bb[2];
        ru1 += bb[1] * ru;
        ru2 += bb[2] * ru;
        rn1 += bb[1] * rn;
        rn2 += bb[2] * rn;
    }
    // Along the chord the unknowns are alpha * len.
    let (alpha0, alpha1) = solve_alpha_box(
        s11 * len * len,
        s12 * len * len,
        s22 * len * len,
        ru1 * len,
        ru2 * len,
    );
    let (d0, d1) = solve_2x2(s11, s12, s22, rn1, rn2).unwrap_or((0.0, 0.0));
    Ok(EdgeShape { alpha0, alpha1, d0, d1 })
}

/// Fits an edge shape to an ordered point sequence running from `a` to `b`,
/// alternating least squares with re-projection of the sample parameters.
/// Returns the shape and the RMS distance of the samples to the fitted curve.
pub fn fit_shape_to_points(a: Point2, b: Point2, pts: &[Point2]) -> Result<(EdgeShape, f64)> {
    let n = pts.len();
    assert!(n >= 2, "need at least two samples to fit");
    let mut ts: Vec<f64> = {
        let mut acc = vec![0.0; n];
        for i in 1..n {
            acc[i] = acc[i - 1] + pts[i].distance(pts[i - 1]);
        }
        let total = acc[n - 1];
        if total > 0.0 {
            acc.iter().map(|s| s / total).collect()
        } else {
            (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
        }
    };
    let mut shape = fit_shape_at(a, b, &ts, pts)?;
    for _ in 0..8 {
        let cp = build_from_shape(a, b, &shape)?;
        for (t, &q) in ts.iter_mut().zip(pts).skip(1).take(n.saturating_sub(2)) {
            *t = refine_parameter(&cp, q, *t);
        }
        shape = fit_shape_at(a, b, &ts, pts)?;
    }
    let cp = build_from_shape(a, b, &shape)?;
    let sq: f64 = ts.iter().zip(pts).map(|(&t, &q)| eval_curve(&cp, t).distance(q).powi(2)).sum();
    Ok((shape, (sq / n as f64).sqrt()))
}

/// A few Newton steps on `|C(t) - q|²` starting from `t`.
fn refine_parameter(cp: &ControlPolygon, q: Point2, mut t: f64) -> f64 {
    for _ in 0..4 {
        let c = eval_curve(cp, t);
        let d1 = raw_derivative(cp, t);
        let d2 = second_derivative(cp, t);
        let r = c - q;
        let g = r.dot(d1);
        let h = d1.norm_sq() + r.dot(d2);
        if h.abs() < 1e-15 {
            break;
        }
        t = (t - g / h).clamp(0.0, 1.0);
    }
    t
}

fn second_derivative(cp: &ControlPolygon, t: f64) -> Point2 {
    let s = 1.0 - t;
    ((cp.p2 - cp.p1 * 2.0 + cp.p0) * s + (cp.p3 - cp.p2 * 2.0 + cp.p1) * t) * 6.0
}

/// Gradients of a scalar with respect to the inputs of
/// [`build_control_polygon`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ShapeGrad {
    pub pi: Point2,
    pub pj: Point2,
    pub alpha0: f64,
    pub alpha1: f64,
    pub d0: f64,
    pub d1: f64,
}

/// Pulls control-point gradients back onto the node positions and shape.
pub fn control_polygon_vjp(
    pi: Point2,
    pj: Point2,
    shape: &EdgeShape,
    grad: &[Point2; 4],
) -> Result<ShapeGrad> {
    let c = pj - pi;
    let len = c.norm();
    if len <= MIN_CHORD {
        return Err(Error::DegenerateChord { length: len });
    }
    let u = c * (1.0 / len);
    let n = u.perp();
    let [g0, g1, g2, g3] = *grad;
    let gn = g1 * shape.d0 + g2 * shape.d1;
    // d n / d c = J (I - u u^T) / len
    let jt = gn.perp_t();
    let gc = (jt - u * u.dot(jt)) * (1.0 / len);
    Ok(ShapeGrad {
        pi: g0 + g1 * (1.0 - shape.alpha0) + g2 * (1.0 - shape.alpha1) - gc,
        pj: g3 + g1 * shape.alpha0 + g2 * shape.alpha1 + gc,
        alpha0: g1.dot(c),
        alpha1: g2.dot(c),
        d0: g1.dot(n),
        d1: g2.dot(n),
    })
}

/// Pulls ribbon-vertex gradients back onto control points and width.
///
/// `vertex_grads` is aligned with the vertices produced by
/// [`serialize_ribbon`] for the same curve, width and sample count.
pub fn ribbon_vjp(cp: &ControlPolygon, width: f64, vertex_grads: &[Point2]) -> ([Point2; 4], f64) {
    let samples = vertex_grads.len() / 2;
    assert!(samples >= 2 && vertex_grads.len() == 2 * samples);
    let half = 0.5 * width;
    let pts = cp.points();
    let mut gp = [Point2::ZERO; 4];
    let mut gw = 0.0;
    for (i, t) in uniform_ts(samples).enumerate() {
        let gl = vertex_grads[i];
        let gr = vertex_grads[2 * samples - 1 - i];
        let b = bernstein(t);
        let gcurve = gl + gr;
        for r in 0..4 {
            gp[r] += gcurve * b[r];
        }
        let raw = raw_derivative(cp, t);
        let (tangent, from_chord) = if raw.norm() > TANGENT_EPS { (raw, false) } else { (pts[3] - pts[0], true) };
        let tlen = tangent.norm();
        if tlen <= TANGENT_EPS {
            continue;
        }
        let tau = tangent * (1.0 / tlen);
        let n = tau.perp();
        let diff = gl - gr;
        gw += 0.5 * n.dot(diff);
        let gn = diff * half;
        let jt = gn.perp_t();
        let gt = (jt - tau * tau.dot(jt)) * (1.0 / tlen);
        if from_chord {
            gp[0] -= gt;
            gp[3] += gt;
        } else {
            let bd = bernstein_deriv(t);
            for r in 0..4 {
                gp[r] += gt * bd[r];
            }
        }
    }
    (gp, gw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(x: f64, y: f64) -> Point2 {
        Point2::new(x, y)
    }

    fn close(a: Point2, b: Point2, tol: f64) -> bool {
        a.distance(b) <= tol
    }

    #[test]
    fn control_polygon_examples() {
        let cp = build_control_polygon(p(0.0, 0.0), p(3.0, 0.0), 1.0 / 3.0, 2.0 / 3.0, 0.0, 1.0).unwrap();
        assert!(close(cp.p1, p(1.0, 0.0), 1e-12));
        assert!(close(cp.p2, p(2.0, 1.0), 1e-12));
        let cp = build_control_polygon(p(0.0, 0.0), p(0.0, 4.0), 0.5, 0.5, 2.0, 0.0).unwrap();
        assert!(close(cp.p1, p(-2.0, 2.0), 1e-12));
        assert!(matches!(
            build_control_polygon(p(1.0, 1.0), p(1.0, 1.0), 0.3, 0.6, 0.0, 0.0),
            Err(Error::DegenerateChord { .. })
        ));
    }

    #[test]
    fn curve_and_tangent_examples() {
        let cp = ControlPolygon::new(p(0.0, 0.0), p(0.0, 1.0), p(1.0, 1.0), p(1.0, 0.0));
        assert_eq!(eval_curve(&cp, 0.0), cp.p0);
        assert_eq!(eval_curve(&cp, 1.0), cp.p3);
        // (P0 + 3 P1 + 3 P2 + P3) / 8
        assert!(close(eval_curve(&cp, 0.5), p(0.5, 0.75), 1e-12));

        let cp = ControlPolygon::new(p(0.0, 0.0), p(1.0, 0.0), p(0.0, 0.0), p(0.0, 2.0));
        assert!(close(eval_tangent(&cp, 0.0), p(3.0, 0.0), 1e-12));
        assert!(close(eval_tangent(&cp, 1.0), p(0.0, 6.0), 1e-12));

        let line = build_control_polygon(p(1.0, 2.0), p(7.0, 5.0), 0.2, 0.9, 0.0, 0.0).unwrap();
        for t in [0.0, 0.3, 0.77, 1.0] {
            assert!(eval_tangent(&line, t).cross(line.p3 - line.p0).abs() < 1e-9);
        }
    }

    #[test]
    fn tangent_falls_back_to_chord_at_cusp() {
        // P1 == P0 and P2 == P3 make the derivative vanish at both ends.
        let cp = ControlPolygon::new(p(0.0, 0.0), p(0.0, 0.0), p(4.0, 0.0), p(4.0, 0.0));
        assert_eq!(eval_tangent(&cp, 0.0), p(4.0, 0.0));
        assert_eq!(eval_normal(&cp, 1.0), p(0.0, 1.0));
    }

    #[test]
    fn arc_length_examples() {
        let line = build_control_polygon(p(0.0, 0.0), p(10.0, 0.0), 1.0 / 3.0, 2.0 / 3.0, 0.0, 0.0).unwrap();
        assert!((arc_length(&line) - 10.0).abs() < 1e-6);

        let cp = ControlPolygon::new(p(0.0, 0.0), p(0.0, 1.0), p(1.0, 1.0), p(1.0, 0.0));
        let dense = arc_length_with(&cp, 10_000);
        assert!((arc_length(&cp) - dense).abs() / dense < 1e-3);

        let dot = ControlPolygon::new(p(2.0, 2.0), p(2.0, 2.0), p(2.0, 2.0), p(2.0, 2.0));
        assert!(arc_length(&dot) < 1e-12);
    }

    #[test]
    fn polyline_sampling_examples() {
        let line = build_control_polygon(p(0.0, 0.0), p(10.0, 0.0), 1.0 / 3.0, 2.0 / 3.0, 0.0, 0.0).unwrap();
        let pts = sample_polyline(&line, 1.0);
        assert_eq!(pts.len(), 11);
        for w in pts.windows(2) {
            assert!((w[0].distance(w[1]) - 1.0).abs() < 0.01);
        }

        let short = build_control_polygon(p(0.0, 0.0), p(0.4, 0.0), 1.0 / 3.0, 2.0 / 3.0, 0.0, 0.0).unwrap();
        assert_eq!(sample_polyline(&short, 1.0).len(), 2);

        let s = build_control_polygon(p(0.0, 0.0), p(40.0, 0.0), 0.3, 0.7, 12.0, -12.0).unwrap();
        let oracle = arc_length_with(&s, 10_000);
        let pts = sample_polyline(&s, 1.0);
        assert_eq!(pts.len() - 1, oracle.round() as usize);
        assert_eq!(pts[0], s.p0);
        assert_eq!(*pts.last().unwrap(), s.p3);
    }

    #[test]
    fn ribbon_examples() {
        let line = build_control_polygon(p(0.0, 0.0), p(10.0, 0.0), 1.0 / 3.0, 2.0 / 3.0, 0.0, 0.0).unwrap();
        let r = serialize_ribbon(&line, 2.0, 2);
        let expect = [p(0.0, 1.0), p(10.0, 1.0), p(10.0, -1.0), p(0.0, -1.0)];
        assert_eq!(r.vertices.len(), 4);
        for (a, b) in r.vertices.iter().zip(expect) {
            assert!(close(*a, b, 1e-12));
        }
        let thin = serialize_ribbon(&line, 1e-4, 8);
        assert!((thin.area() - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn curved_ribbon_area_matches_monte_carlo() {
        use rand::{Rng, SeedableRng};
        let cp = build_control_polygon(p(0.0, 0.0), p(40.0, 0.0), 0.3, 0.7, 8.0, 8.0).unwrap();
        let width = 1.5;
        let r = serialize_ribbon(&cp, width, 200);
        // Monte-Carlo point-in-polygon oracle, even-odd rule.
        let inside = |q: Point2| {
            let v = &r.vertices;
            let mut c = false;
            let mut j = v.len() - 1;
            for i in 0..v.len() {
                if (v[i].y > q.y) != (v[j].y > q.y)
                    && q.x < (v[j].x - v[i].x) * (q.y - v[i].y) / (v[j].y - v[i].y) + v[i].x
                {
                    c = !c;
                }
                j = i;
            }
            c
        };
        let (lo, hi) = cp.bounds();
        let (lo, hi) = (lo - p(width, width), hi + p(width, width));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        let hits = (0..n)
            .filter(|_| inside(p(rng.gen_range(lo.x..hi.x), rng.gen_range(lo.y..hi.y))))
            .count();
        let mc_area = hits as f64 / n as f64 * (hi.x - lo.x) * (hi.y - lo.y);
        let expect = arc_length(&cp) * width;
        assert!((mc_area - expect).abs() / expect < 0.05, "{mc_area} vs {expect}");
    }

    #[test]
    fn split_preserves_trace() {
        let cp = build_control_polygon(p(0.0, 0.0), p(30.0, 5.0), 0.25, 0.8, 6.0, -4.0).unwrap();
        let (a, b) = split_curve(&cp, 0.25);
        for i in 0..=20 {
            let s = i as f64 / 20.0;
            assert!(close(eval_curve(&a, s), eval_curve(&cp, 0.25 * s), 1e-9));
            assert!(close(eval_curve(&b, s), eval_curve(&cp, 0.25 + 0.75 * s), 1e-9));
        }
    }

    #[test]
    fn closest_point_on_line() {
        let line = build_control_polygon(p(0.0, 0.0), p(20.0, 0.0), 1.0 / 3.0, 2.0 / 3.0, 0.0, 0.0).unwrap();
        let (t, q, d) = closest_point(&line, p(10.0, 1.0));
        assert!((t - 0.5).abs() < 1e-6);
        assert!(close(q, p(10.0, 0.0), 1e-6));
        assert!((d - 1.0).abs() < 1e-9);
    }

    #[test]
    fn exact_fit_recovers_shape() {
        let (a, b) = (p(1.0, 2.0), p(25.0, -3.0));
        let shape = EdgeShape { alpha0: 0.28, alpha1: 0.61, d0: 3.5, d1: -2.0 };
        let cp = build_from_shape(a, b, &shape).unwrap();
        let ts: Vec<f64> = (0..16).map(|i| i as f64 / 15.0).collect();
        let pts: Vec<Point2> = ts.iter().map(|&t| eval_curve(&cp, t)).collect();
        let fit = fit_shape_at(a, b, &ts, &pts).unwrap();
        assert!((fit.alpha0 - shape.alpha0).abs() < 1e-9);
        assert!((fit.alpha1 - shape.alpha1).abs() < 1e-9);
        assert!((fit.d0 - shape.d0).abs() < 1e-9);
        assert!((fit.d1 - shape.d1).abs() < 1e-9);
    }

    #[test]
    fn fit_clamps_alpha() {
        let (a, b) = (p(0.0, 0.0), p(10.0, 0.0));
        // Control points beyond the chord ends force alpha outside [0, 1].
        let cp = ControlPolygon::new(a, p(-3.0, 2.0), p(13.0, 2.0), b);
        let ts: Vec<f64> = (0..16).map(|i| i as f64 / 15.0).collect();
        let pts: Vec<Point2> = ts.iter().map(|&t| eval_curve(&cp, t)).collect();
        let fit = fit_shape_at(a, b, &ts, &pts).unwrap();
        assert!((0.0..=1.0).contains(&fit.alpha0) && (0.0..=1.0).contains(&fit.alpha1));
    }

    fn fd_check_vjp(pi: Point2, pj: Point2, shape: EdgeShape, width: f64, weights: &[Point2]) {
        // Scalar probe: sum of weight_k . vertex_k over the ribbon.
        let samples = weights.len() / 2;
        let f = |pi: Point2, pj: Point2, s: EdgeShape, w: f64| -> f64 {
            let cp = build_from_shape(pi, pj, &s).unwrap();
            serialize_ribbon(&cp, w, samples).vertices.iter().zip(weights).map(|(v, g)| v.dot(*g)).sum()
        };
        let cp = build_from_shape(pi, pj, &shape).unwrap();
        let (gcp, gw) = ribbon_vjp(&cp, width, weights);
        let g = control_polygon_vjp(pi, pj, &shape, &gcp).unwrap();
        let h = 1e-6;
        let check = |analytic: f64, plus: f64, minus: f64| {
            let numeric = (plus - minus) / (2.0 * h);
            assert!((analytic - numeric).abs() <= 1e-5 * (1.0 + numeric.abs()), "{analytic} vs {numeric}");
        };
        check(g.pi.x, f(pi + p(h, 0.0), pj, shape, width), f(pi - p(h, 0.0), pj, shape, width));
        check(g.pi.y, f(pi + p(0.0, h), pj, shape, width), f(pi - p(0.0, h), pj, shape, width));
        check(g.pj.x, f(pi, pj + p(h, 0.0), shape, width), f(pi, pj - p(h, 0.0), shape, width));
        check(g.pj.y, f(pi, pj + p(0.0, h), shape, width), f(pi, pj - p(0.0, h), shape, width));
        let bump = |k: usize, s: f64| {
            let mut e = shape;
            match k {
                0 => e.alpha0 += s,
                1 => e.alpha1 += s,
                2 => e.d0 += s,
                _ => e.d1 += s,
            }
            e
        };
        for (k, an) in [g.alpha0, g.alpha1, g.d0, g.d1].into_iter().enumerate() {
            check(an, f(pi, pj, bump(k, h), width), f(pi, pj, bump(k, -h), width));
        }
        check(gw, f(pi, pj, shape, width + h), f(pi, pj, shape, width - h));
    }

    fn point() -> impl Strategy<Value = Point2> {
        (-50.0..50.0f64, -50.0..50.0f64).prop_map(|(x, y)| Point2::new(x, y))
    }

    fn shape() -> impl Strategy<Value = EdgeShape> {
        (0.05..0.95f64, 0.05..0.95f64, -5.0..5.0f64, -5.0..5.0f64)
            .prop_map(|(alpha0, alpha1, d0, d1)| EdgeShape { alpha0, alpha1, d0, d1 })
    }

    proptest! {
        #[test]
        fn convex_hull_contains_curve(a in point(), b in point(), c in point(), d in point(), t in 0.0..=1.0f64) {
            let cp = ControlPolygon::new(a, b, c, d);
            let q = eval_curve(&cp, t);
            // q is inside the hull iff it lies inside one of the four triangles.
            let pts = cp.points();
            let in_tri = |x: Point2, y: Point2, z: Point2| {
                let d1 = (y - x).cross(q - x);
                let d2 = (z - y).cross(q - y);
                let d3 = (x - z).cross(q - z);
                let tol = 1e-7 * (1.0 + x.norm() + y.norm() + z.norm()).powi(2);
                let neg = d1 < -tol || d2 < -tol || d3 < -tol;
                let pos = d1 > tol || d2 > tol || d3 > tol;
                !(neg && pos)
            };
            let any = (0..4).any(|i| {
                let others: Vec<Point2> = (0..4).filter(|&j| j != i).map(|j| pts[j]).collect();
                in_tri(others[0], others[1], others[2])
            });
            prop_assert!(any);
        }

        #[test]
        fn reversal_symmetry(a in point(), b in point(), c in point(), d in point(), t in 0.0..=1.0f64) {
            let cp = ControlPolygon::new(a, b, c, d);
            let q = eval_curve(&cp, t);
            let r = eval_curve(&cp.reversed(), 1.0 - t);
            prop_assert!(q.distance(r) < 1e-12 * (1.0 + q.norm()) + 1e-12);
        }

        #[test]
        fn zero_offset_is_collinear(a in point(), b in point(), a0 in 0.0..=1.0f64, a1 in 0.0..=1.0f64) {
            prop_assume!(a.distance(b) > 1e-3);
            let cp = build_control_polygon(a, b, a0, a1, 0.0, 0.0).unwrap();
            let u = (b - a).normalized().unwrap();
            prop_assert!(u.cross(cp.p1 - a).abs() < 1e-9);
            prop_assert!(u.cross(cp.p2 - a).abs() < 1e-9);
        }

        #[test]
        fn arc_length_bounds(a in point(), b in point(), s in shape()) {
            prop_assume!(a.distance(b) > 1e-3);
            let cp = build_from_shape(a, b, &s).unwrap();
            let len = arc_length(&cp);
            prop_assert!(len >= a.distance(b) - 1e-9);
            prop_assert!(len <= cp.perimeter() + 1e-9);
        }

        #[test]
        fn polyline_spacing(a in point(), b in point(), s in shape()) {
            prop_assume!(a.distance(b) > 5.0);
            // Keep the curve tame so uniform-t spacing is near uniform.
            let s = EdgeShape { alpha0: 1.0 / 3.0, alpha1: 2.0 / 3.0, d0: s.d0 * 0.1, d1: s.d1 * 0.1 };
            let cp = build_from_shape(a, b, &s).unwrap();
            let pts = sample_polyline(&cp, 1.0);
            let n = pts.len() - 1;
            for w in pts[..n].windows(2) {
                prop_assert!((w[0].distance(w[1]) - 1.0).abs() < 0.1);
            }
        }

        #[test]
        fn vjp_matches_finite_differences(a in point(), b in point(), s in shape(), w in 0.5..6.0f64, seed in 0u64..1000) {
            prop_assume!(a.distance(b) > 2.0);
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let weights: Vec<Point2> = (0..16).map(|_| Point2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
            fd_check_vjp(a, b, s, w, &weights);
        }
    }
}
