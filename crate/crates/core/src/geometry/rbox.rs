use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Oriented box: center, side lengths and rotation in radians.
///
/// The canonical form has `w >= h` and `theta` in `[-π/2, π/2)`. Squares
/// additionally fold `theta` into `[-π/4, π/4)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotatedBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

/// Wraps an angle into `[lo, lo + period)`.
pub fn wrap_angle(theta: f64, lo: f64, period: f64) -> f64 {
    let mut t = theta - period * ((theta - lo) / period).floor();
    if t >= lo + period {
        t -= period;
    }
    if t < lo {
        t = lo;
    }
    t
}

/// Wraps into `[-π/2, π/2)`.
pub fn wrap_half_pi(theta: f64) -> f64 {
    wrap_angle(theta, -FRAC_PI_2, PI)
}

impl RotatedBox {
    /// Validated box, canonicalized.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h, theta };
        b.validate()?;
        Ok(b.canonical())
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.cx, self.cy, self.w, self.h, self.theta];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite field in {self:?}")));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidBox(format!(
                "sides must be positive, got {} x {}",
                self.w, self.h
            )));
        }
        Ok(())
    }

    pub fn canonical(&self) -> Self {
        let (mut w, mut h, mut t) = (self.w, self.h, self.theta);
        if w < h {
            std::mem::swap(&mut w, &mut h);
            t += FRAC_PI_2;
        }
        let t = if w == h {
            wrap_angle(t, -FRAC_PI_4, FRAC_PI_2)
        } else {
            wrap_half_pi(t)
        };
        Self {
            cx: self.cx,
            cy: self.cy,
            w,
            h,
            theta: t,
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn aspect_ratio(&self) -> f64 {
        self.w.max(self.h) / self.w.min(self.h)
    }

    /// Corners counter-clockwise: `(+w,+h)`, `(-w,+h)`, `(-w,-h)`, `(+w,-h)` half-extents rotated by `theta`.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.theta.sin_cos();
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        [(hw, hh), (-hw, hh), (-hw, -hh), (hw, -hh)].map(|(u, v)| {
            [self.cx + c * u - s * v, self.cy + s * u + c * v]
        })
    }

    /// Point membership, boundary included.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        u.abs() <= self.w / 2.0 && v.abs() <= self.h / 2.0
    }

    /// Axis-aligned bounds `(x0, y0, x1, y1)`.
    pub fn bounds(&self) -> [f64; 4] {
        let (s, c) = self.theta.sin_cos();
        let ex = (c * self.w).abs() / 2.0 + (s * self.h).abs() / 2.0;
        let ey = (s * self.w).abs() / 2.0 + (c * self.h).abs() / 2.0;
        [self.cx - ex, self.cy - ey, self.cx + ex, self.cy + ey]
    }

    /// The same box moved by a rotation of `phi` about the origin and then a translation.
    pub fn rigid(&self, phi: f64, tx: f64, ty: f64) -> Self {
        let (s, c) = phi.sin_cos();
        Self {
            cx: c * self.cx - s * self.cy + tx,
            cy: s * self.cx + c * self.cy + ty,
            w: self.w,
            h: self.h,
            theta: self.theta + phi,
        }
        .canonical()
    }
}
