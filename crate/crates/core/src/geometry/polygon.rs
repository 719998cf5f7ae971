use std::f64::consts::PI;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::GeometryError;

pub type Vec2 = Vector2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Convex,
    Nonconvex,
}

/// Area and first moments of a planar region.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub area: f64,
    pub sx: f64,
    pub sy: f64,
}

impl Moments {
    pub fn centroid(&self) -> Option<Vec2> {
        if self.area > 0.0 {
            Some(Vec2::new(self.sx / self.area, self.sy / self.area))
        } else {
            None
        }
    }

    fn add(&mut self, o: Moments) {
        self.area += o.area;
        self.sx += o.sx;
        self.sy += o.sy;
    }
}

fn cross(a: Vec2, b: Vec2) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Signed area and first moments (shoelace). Positive for CCW rings.
pub fn ring_moments(ring: &[Vec2]) -> Moments {
    let n = ring.len();
    let mut m = Moments::default();
    for i in 0..n {
        let p = ring[i];
        let q = ring[(i + 1) % n];
        let c = cross(p, q);
        m.area += c;
        m.sx += (p.x + q.x) * c;
        m.sy += (p.y + q.y) * c;
    }
    m.area *= 0.5;
    m.sx /= 6.0;
    m.sy /= 6.0;
    m
}

/// Even-odd point test. Points exactly on an edge may land either way.
pub fn point_in_ring(p: Vec2, ring: &[Vec2]) -> bool {
    let n = ring.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let a = ring[i];
        let b = ring[j];
        if (a.y > p.y) != (b.y > p.y) {
            let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn point_segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return (p - a).norm();
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

fn orient(a: Vec2, b: Vec2, c: Vec2) -> f64 {
    cross(b - a, c - a)
}

fn segments_intersect(a0: Vec2, a1: Vec2, b0: Vec2, b1: Vec2) -> bool {
    let d1 = orient(b0, b1, a0);
    let d2 = orient(b0, b1, a1);
    let d3 = orient(a0, a1, b0);
    let d4 = orient(a0, a1, b1);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    let on = |p: Vec2, q: Vec2, r: Vec2, d: f64| {
        d == 0.0
            && r.x >= p.x.min(q.x)
            && r.x <= p.x.max(q.x)
            && r.y >= p.y.min(q.y)
            && r.y <= p.y.max(q.y)
    };
    on(b0, b1, a0, d1) || on(b0, b1, a1, d2) || on(a0, a1, b0, d3) || on(a0, a1, b1, d4)
}

pub fn segment_distance(a0: Vec2, a1: Vec2, b0: Vec2, b1: Vec2) -> f64 {
    if segments_intersect(a0, a1, b0, b1) {
        return 0.0;
    }
    point_segment_distance(a0, b0, b1)
        .min(point_segment_distance(a1, b0, b1))
        .min(point_segment_distance(b0, a0, a1))
        .min(point_segment_distance(b1, a0, a1))
}

/// Smallest distance between the boundaries of two rings (0 when they touch
/// or cross).
pub fn min_boundary_distance(a: &[Vec2], b: &[Vec2]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..a.len() {
        let a0 = a[i];
        let a1 = a[(i + 1) % a.len()];
        for j in 0..b.len() {
            let d = segment_distance(a0, a1, b[j], b[(j + 1) % b.len()]);
            if d < best {
                best = d;
                if best == 0.0 {
                    return 0.0;
                }
            }
        }
    }
    best
}

fn is_simple(ring: &[Vec2]) -> bool {
    let n = ring.len();
    for i in 0..n {
        let a0 = ring[i];
        let a1 = ring[(i + 1) % n];
        if a0 == a1 {
            return false;
        }
        for j in (i + 1)..n {
            // adjacent edges share a vertex
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            if segments_intersect(a0, a1, ring[j], ring[(j + 1) % n]) {
                return false;
            }
        }
    }
    true
}

/// Ear-clipping triangulation of a simple CCW ring.
pub fn triangulate(ring: &[Vec2]) -> Vec<[Vec2; 3]> {
    let mut idx: Vec<usize> = (0..ring.len()).collect();
    let mut tris = Vec::with_capacity(ring.len().saturating_sub(2));
    let mut guard = 0;
    while idx.len() > 3 && guard < 10 * ring.len() * ring.len() {
        guard += 1;
        let n = idx.len();
        let mut clipped = false;
        for k in 0..n {
            let ip = idx[(k + n - 1) % n];
            let ic = idx[k];
            let inx = idx[(k + 1) % n];
            let (a, b, c) = (ring[ip], ring[ic], ring[inx]);
            if orient(a, b, c) <= 0.0 {
                continue;
            }
            let blocked = idx.iter().any(|&o| {
                if o == ip || o == ic || o == inx {
                    return false;
                }
                let p = ring[o];
                orient(a, b, p) >= 0.0 && orient(b, c, p) >= 0.0 && orient(c, a, p) >= 0.0
            });
            if !blocked {
                tris.push([a, b, c]);
                idx.remove(k);
                clipped = true;
                break;
            }
        }
        if !clipped {
            break;
        }
    }
    if idx.len() == 3 {
        tris.push([ring[idx[0]], ring[idx[1]], ring[idx[2]]]);
    }
    tris
}

/// Sutherland-Hodgman: clips `subject` against a convex CCW `clip` polygon.
pub fn clip_convex(subject: &[Vec2], clip: &[Vec2]) -> Vec<Vec2> {
    let mut output: Vec<Vec2> = subject.to_vec();
    let m = clip.len();
    for i in 0..m {
        if output.is_empty() {
            break;
        }
        let c0 = clip[i];
        let c1 = clip[(i + 1) % m];
        let input = std::mem::take(&mut output);
        let k = input.len();
        for j in 0..k {
            let p = input[j];
            let q = input[(j + 1) % k];
            let dp = orient(c0, c1, p);
            let dq = orient(c0, c1, q);
            if dp >= 0.0 {
                output.push(p);
            }
            if (dp >= 0.0) != (dq >= 0.0) {
                let t = dp / (dp - dq);
                output.push(p + (q - p) * t);
            }
        }
    }
    output
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    min: Vec2,
    max: Vec2,
}

impl Aabb {
    fn of(points: &[Vec2]) -> Self {
        let mut min = Vec2::new(f64::INFINITY, f64::INFINITY);
        let mut max = Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in points {
            min.x = min.x.min(p.x);
            min.y = min.y.min(p.y);
            max.x = max.x.max(p.x);
            max.y = max.y.max(p.y);
        }
        Aabb { min, max }
    }

    fn overlaps(&self, o: &Aabb) -> bool {
        self.min.x < o.max.x && o.min.x < self.max.x && self.min.y < o.max.y && o.min.y < self.max.y
    }
}

/// Area and moments of the intersection of two triangulated regions.
pub fn intersection_moments(a: &[[Vec2; 3]], b: &[[Vec2; 3]]) -> Moments {
    let bb: Vec<Aabb> = b.iter().map(|t| Aabb::of(t)).collect();
    let mut total = Moments::default();
    for ta in a {
        let ba = Aabb::of(ta);
        for (tb, bbox) in b.iter().zip(&bb) {
            if !ba.overlaps(bbox) {
                continue;
            }
            let piece = clip_convex(ta, tb);
            if piece.len() >= 3 {
                total.add(ring_moments(&piece));
            }
        }
    }
    total
}

/// Rigidly moves a ring: rotation by `theta` then translation.
pub fn transform_ring(ring: &[Vec2], theta: f64, offset: Vec2) -> Vec<Vec2> {
    let (s, c) = theta.sin_cos();
    ring.iter()
        .map(|p| Vec2::new(c * p.x - s * p.y + offset.x, s * p.x + c * p.y + offset.y))
        .collect()
}

pub fn transform_triangles(tris: &[[Vec2; 3]], theta: f64, offset: Vec2) -> Vec<[Vec2; 3]> {
    let (s, c) = theta.sin_cos();
    let f = |p: Vec2| Vec2::new(c * p.x - s * p.y + offset.x, s * p.x + c * p.y + offset.y);
    tris.iter().map(|t| [f(t[0]), f(t[1]), f(t[2])]).collect()
}

/// Planar cross-section of a peg, hole, shaft or hoop opening: a simple CCW
/// polygon in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossSection {
    vertices: Vec<Vec2>,
    kind: ShapeKind,
    triangles: Vec<[Vec2; 3]>,
}

impl CrossSection {
    /// Validates and normalizes to CCW order.
    pub fn new(mut vertices: Vec<Vec2>) -> Result<Self, GeometryError> {
        if vertices.len() < 3 {
            return Err(GeometryError::TooFewVertices(vertices.len()));
        }
        if vertices.iter().any(|v| !v.x.is_finite() || !v.y.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let area = ring_moments(&vertices).area;
        if area.abs() < 1e-14 {
            return Err(GeometryError::ZeroArea);
        }
        if area < 0.0 {
            vertices.reverse();
        }
        if !is_simple(&vertices) {
            return Err(GeometryError::SelfIntersecting);
        }
        let n = vertices.len();
        let convex = (0..n).all(|i| {
            orient(vertices[(i + n - 1) % n], vertices[i], vertices[(i + 1) % n]) >= 0.0
        });
        let triangles = triangulate(&vertices);
        Ok(CrossSection {
            vertices,
            kind: if convex { ShapeKind::Convex } else { ShapeKind::Nonconvex },
            triangles,
        })
    }

    pub fn vertices(&self) -> &[Vec2] {
        &self.vertices
    }

    pub fn kind(&self) -> ShapeKind {
        self.kind
    }

    pub fn triangles(&self) -> &[[Vec2; 3]] {
        &self.triangles
    }

    pub fn moments(&self) -> Moments {
        ring_moments(&self.vertices)
    }

    pub fn area(&self) -> f64 {
        self.moments().area
    }

    pub fn centroid(&self) -> Vec2 {
        self.moments().centroid().unwrap_or_else(Vec2::zeros)
    }

    pub fn contains_point(&self, p: Vec2) -> bool {
        point_in_ring(p, &self.vertices)
    }

    /// Largest distance from the origin to a vertex.
    pub fn radius(&self) -> f64 {
        self.vertices.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn transformed(&self, theta: f64, offset: Vec2) -> Vec<Vec2> {
        transform_ring(&self.vertices, theta, offset)
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> Result<Self, GeometryError> {
        CrossSection::new(self.vertices.iter().map(|v| Vec2::new(v.x * sx, v.y * sy)).collect())
    }

    /// Mitered outward offset: every edge moves out by `distance`.
    pub fn inflated(&self, distance: f64) -> Result<Self, GeometryError> {
        let n = self.vertices.len();
        let normal = |i: usize| {
            let d = self.vertices[(i + 1) % n] - self.vertices[i];
            Vec2::new(d.y, -d.x).normalize()
        };
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let n0 = normal((i + n - 1) % n);
            let n1 = normal(i);
            let denom = 1.0 + n0.dot(&n1);
            if denom < 1e-9 {
                return Err(GeometryError::DegenerateOffset);
            }
            out.push(self.vertices[i] + (n0 + n1) * (distance / denom));
        }
        CrossSection::new(out)
    }

    pub fn rectangle(width: f64, height: f64) -> Self {
        let (w, h) = (width / 2.0, height / 2.0);
        CrossSection::new(vec![
            Vec2::new(-w, -h),
            Vec2::new(w, -h),
            Vec2::new(w, h),
            Vec2::new(-w, h),
        ])
        .expect("rectangle")
    }

    pub fn square(side: f64) -> Self {
        CrossSection::rectangle(side, side)
    }

    /// Regular polygon with the given circumradius; the first vertex sits on
    /// the +x axis.
    pub fn regular(sides: usize, circumradius: f64) -> Self {
        let v = (0..sides)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / sides as f64;
                Vec2::new(circumradius * a.cos(), circumradius * a.sin())
            })
            .collect();
        CrossSection::new(v).expect("regular polygon")
    }

    /// Polygonal circle whose edges are tangent to a circle of `radius`.
    pub fn circle(radius: f64, segments: usize) -> Self {
        let r = radius / (PI / segments as f64).cos();
        CrossSection::regular(segments, r)
    }

    /// Equilateral triangle centered on its centroid, apex toward +y.
    pub fn triangle(side: f64) -> Self {
        let r = side / 3f64.sqrt();
        let v = (0..3)
            .map(|k| {
                let a = PI / 2.0 + 2.0 * PI * k as f64 / 3.0;
                Vec2::new(r * a.cos(), r * a.sin())
            })
            .collect();
        CrossSection::new(v).expect("triangle")
    }

    /// Non-convex plug outline: a `width`×`bar` head on top of a centered
    /// `stem`×(`height`−`bar`) body, bounding box centered on the origin.
    pub fn plug(width: f64, height: f64, bar: f64, stem: f64) -> Self {
        let (w, h, s) = (width / 2.0, height / 2.0, stem / 2.0);
        let y_bar = h - bar;
        CrossSection::new(vec![
            Vec2::new(-s, -h),
            Vec2::new(s, -h),
            Vec2::new(s, y_bar),
            Vec2::new(w, y_bar),
            Vec2::new(w, h),
            Vec2::new(-w, h),
            Vec2::new(-w, y_bar),
            Vec2::new(-s, y_bar),
        ])
        .expect("plug")
    }
}
