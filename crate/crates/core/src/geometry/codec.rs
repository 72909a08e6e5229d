use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::polygon::min_area_rect;
use crate::geometry::rbox::{wrap_half_pi, RotatedBox};

/// Six-parameter box: enclosing axis-aligned rectangle plus two vertex offsets.
///
/// `d_alpha` is the x offset of the vertex with the largest y from `cx`;
/// `d_beta` is the y offset of the vertex with the largest x from `cy`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MidpointOffsetBox {
    pub cx: f64,
    pub cy: f64,
    pub w_ext: f64,
    pub h_ext: f64,
    pub d_alpha: f64,
    pub d_beta: f64,
}

impl MidpointOffsetBox {
    /// The four vertices the offsets describe, counter-clockwise from the rightmost.
    pub fn vertices(&self) -> [[f64; 2]; 4] {
        let (hw, hh) = (self.w_ext / 2.0, self.h_ext / 2.0);
        [
            [self.cx + hw, self.cy + self.d_beta],
            [self.cx + self.d_alpha, self.cy + hh],
            [self.cx - hw, self.cy - self.d_beta],
            [self.cx - self.d_alpha, self.cy - hh],
        ]
    }
}

pub fn midpoint_encode(b: &RotatedBox) -> Result<MidpointOffsetBox> {
    b.validate()?;
    let b = b.canonical();
    let (s, c) = b.theta.sin_cos();
    let (hw, hh) = (b.w / 2.0, b.h / 2.0);
    // Top and right vertices: (+w,+h) and (+w,-h) corners for theta >= 0,
    // (-w,+h) and (+w,+h) corners otherwise.
    let (top, right) = if b.theta >= 0.0 {
        ((hw, hh), (hw, -hh))
    } else {
        ((-hw, hh), (hw, hh))
    };
    let rot = |(u, v): (f64, f64)| (c * u - s * v, s * u + c * v);
    let (tx, _) = rot(top);
    let (_, ry) = rot(right);
    let ex = (c * b.w).abs() + (s * b.h).abs();
    let ey = (s * b.w).abs() + (c * b.h).abs();
    Ok(MidpointOffsetBox {
        cx: b.cx,
        cy: b.cy,
        w_ext: ex,
        h_ext: ey,
        d_alpha: tx,
        d_beta: ry,
    })
}

pub fn midpoint_decode(m: &MidpointOffsetBox) -> Result<RotatedBox> {
    let fields = [m.cx, m.cy, m.w_ext, m.h_ext, m.d_alpha, m.d_beta];
    if fields.iter().any(|v| !v.is_finite()) || m.w_ext <= 0.0 || m.h_ext <= 0.0 {
        return Err(Error::InvalidBox(format!("bad midpoint box {m:?}")));
    }
    let tol = 1e-12 * (1.0 + m.w_ext.max(m.h_ext));
    if m.d_alpha.abs() > m.w_ext / 2.0 + tol || m.d_beta.abs() > m.h_ext / 2.0 + tol {
        return Err(Error::InvalidBox(format!(
            "offsets ({}, {}) exceed half-extents ({}, {})",
            m.d_alpha,
            m.d_beta,
            m.w_ext / 2.0,
            m.h_ext / 2.0
        )));
    }
    min_area_rect(&m.vertices())
}

/// Regression target of `target` relative to `proposal`, in the proposal's rotated frame.
pub fn delta_encode(proposal: &RotatedBox, target: &RotatedBox) -> Result<[f64; 5]> {
    proposal.validate()?;
    target.validate()?;
    let (p, t) = (proposal.canonical(), target.canonical());
    let (s, c) = p.theta.sin_cos();
    let (dx, dy) = (t.cx - p.cx, t.cy - p.cy);
    Ok([
        (c * dx + s * dy) / p.w,
        (-s * dx + c * dy) / p.h,
        (t.w / p.w).ln(),
        (t.h / p.h).ln(),
        wrap_half_pi(t.theta - p.theta),
    ])
}

pub fn delta_decode(proposal: &RotatedBox, d: &[f64; 5]) -> Result<RotatedBox> {
    proposal.validate()?;
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("regression deltas".into()));
    }
    let p = proposal.canonical();
    let (s, c) = p.theta.sin_cos();
    let (u, v) = (d[0] * p.w, d[1] * p.h);
    let b = RotatedBox {
        cx: p.cx + c * u - s * v,
        cy: p.cy + s * u + c * v,
        w: p.w * d[2].exp(),
        h: p.h * d[3].exp(),
        theta: p.theta + d[4],
    };
    b.validate()?;
    Ok(b.canonical())
}
