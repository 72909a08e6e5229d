use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::rbox::RotatedBox;

/// Tolerance of the inside/outside test, relative to edge length.
pub const CLIP_EPS: f64 = 1e-12;

/// Convex polygon with counter-clockwise vertices; fewer than three means empty.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConvexPolygon {
    pub vertices: Vec<[f64; 2]>,
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

impl ConvexPolygon {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.len() < 3
    }

    /// Drops repeated and collinear vertices; collapses to empty below three.
    fn pruned(mut self) -> Self {
        let scale = self
            .vertices
            .iter()
            .fold(1.0f64, |m, p| m.max(p[0].abs()).max(p[1].abs()));
        let tol = 1e-12 * scale;
        let mut changed = true;
        while changed && self.vertices.len() >= 3 {
            changed = false;
            let n = self.vertices.len();
            for i in 0..n {
                let a = self.vertices[(i + n - 1) % n];
                let b = self.vertices[i];
                let c = self.vertices[(i + 1) % n];
                let dup = dist(a, b) <= tol;
                let flat = cross(a, b, c).abs() <= CLIP_EPS * dist(a, b) * dist(b, c) + tol * tol;
                if dup || flat {
                    self.vertices.remove(i);
                    changed = true;
                    break;
                }
            }
        }
        if self.vertices.len() < 3 {
            self.vertices.clear();
        }
        self
    }

    pub fn signed_area(&self) -> f64 {
        let n = self.vertices.len();
        if n < 3 {
            return 0.0;
        }
        let mut s = 0.0;
        for i in 0..n {
            let p = self.vertices[i];
            let q = self.vertices[(i + 1) % n];
            s += p[0] * q[1] - q[0] * p[1];
        }
        s / 2.0
    }
}

pub fn polygon_from_box(b: &RotatedBox) -> ConvexPolygon {
    ConvexPolygon {
        vertices: b.corners().to_vec(),
    }
}

/// Shoelace area; zero for empty polygons.
pub fn polygon_area(p: &ConvexPolygon) -> f64 {
    p.signed_area().abs()
}

/// Sutherland–Hodgman clipping of `a` by every edge of `b`.
pub fn convex_intersection(a: &ConvexPolygon, b: &ConvexPolygon) -> ConvexPolygon {
    if a.is_empty() || b.is_empty() {
        return ConvexPolygon::empty();
    }
    let mut out = a.vertices.clone();
    let m = b.vertices.len();
    for j in 0..m {
        if out.is_empty() {
            break;
        }
        let e0 = b.vertices[j];
        let e1 = b.vertices[(j + 1) % m];
        let len = dist(e0, e1);
        let side = |p: [f64; 2]| {
            let c = cross(e0, e1, p);
            if c.abs() <= CLIP_EPS * len * (1.0 + dist(e0, p)) {
                0.0
            } else {
                c
            }
        };
        let input = std::mem::take(&mut out);
        let n = input.len();
        for i in 0..n {
            let p = input[i];
            let q = input[(i + 1) % n];
            let (sp, sq) = (side(p), side(q));
            if sp >= 0.0 {
                out.push(p);
            }
            if (sp > 0.0 && sq < 0.0) || (sp < 0.0 && sq > 0.0) {
                let t = sp / (sp - sq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    ConvexPolygon { vertices: out }.pruned()
}

/// Convex hull by monotone chain, counter-clockwise, collinear points dropped.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(pts.len() * 2);
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Smallest-area enclosing rectangle, found over hull edge directions.
pub fn min_area_rect(points: &[[f64; 2]]) -> Result<RotatedBox> {
    if points.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::InvalidBox("non-finite vertex".into()));
    }
    let hull = convex_hull(points);
    if hull.len() < 3 {
        return Err(Error::InvalidBox("points are collinear".into()));
    }
    let n = hull.len();
    let mut best: Option<(f64, RotatedBox)> = None;
    for i in 0..n {
        let p = hull[i];
        let q = hull[(i + 1) % n];
        let len = dist(p, q);
        let (ux, uy) = ((q[0] - p[0]) / len, (q[1] - p[1]) / len);
        let (mut u0, mut u1, mut v0, mut v1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for r in &hull {
            let u = r[0] * ux + r[1] * uy;
            let v = -r[0] * uy + r[1] * ux;
            u0 = u0.min(u);
            u1 = u1.max(u);
            v0 = v0.min(v);
            v1 = v1.max(v);
        }
        let area = (u1 - u0) * (v1 - v0);
        if best.as_ref().map_or(true, |(a, _)| area < *a) {
            let (uc, vc) = ((u0 + u1) / 2.0, (v0 + v1) / 2.0);
            let b = RotatedBox {
                cx: uc * ux - vc * uy,
                cy: uc * uy + vc * ux,
                w: u1 - u0,
                h: v1 - v0,
                theta: uy.atan2(ux),
            };
            best = Some((area, b));
        }
    }
    let (_, b) = best.expect("hull has edges");
    b.validate()?;
    Ok(b.canonical())
}
