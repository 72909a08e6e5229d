#![allow(dead_code)]

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use stripdet_core::geometry::{wrap_angle, RotatedBox};

/// Jittered-grid rasterization of IoU over the joint bounding rectangle.
pub fn monte_carlo_iou<R: Rng>(a: &RotatedBox, b: &RotatedBox, grid: usize, rng: &mut R) -> f64 {
    let (ba, bb) = (a.bounds(), b.bounds());
    let x0 = ba[0].min(bb[0]);
    let y0 = ba[1].min(bb[1]);
    let x1 = ba[2].max(bb[2]);
    let y1 = ba[3].max(bb[3]);
    let (dx, dy) = ((x1 - x0) / grid as f64, (y1 - y0) / grid as f64);
    let (mut both, mut either) = (0u64, 0u64);
    for i in 0..grid {
        for j in 0..grid {
            let x = x0 + (j as f64 + rng.gen::<f64>()) * dx;
            let y = y0 + (i as f64 + rng.gen::<f64>()) * dy;
            let (ia, ib) = (a.contains(x, y), b.contains(x, y));
            both += (ia && ib) as u64;
            either += (ia || ib) as u64;
        }
    }
    if either == 0 {
        0.0
    } else {
        both as f64 / either as f64
    }
}

pub fn random_box<R: Rng>(rng: &mut R) -> RotatedBox {
    RotatedBox::new(
        rng.gen_range(-50.0..50.0),
        rng.gen_range(-50.0..50.0),
        rng.gen_range(1.0..40.0),
        rng.gen_range(1.0..40.0),
        rng.gen_range(-PI..PI),
    )
    .unwrap()
}

/// A box near `a`, so that pairs overlap most of the time.
pub fn nearby_box<R: Rng>(a: &RotatedBox, rng: &mut R) -> RotatedBox {
    RotatedBox::new(
        a.cx + rng.gen_range(-0.5..0.5) * a.w,
        a.cy + rng.gen_range(-0.5..0.5) * a.w,
        a.w * rng.gen_range(0.5..1.5),
        a.h * rng.gen_range(0.5..1.5),
        a.theta + rng.gen_range(-0.8..0.8),
    )
    .unwrap()
}

/// Same point set within `tol`: centers, sides, and angle modulo the box symmetry.
pub fn same_box(a: &RotatedBox, b: &RotatedBox, tol: f64) -> bool {
    let period = if (a.w - a.h).abs() <= tol { FRAC_PI_2 } else { PI };
    let d = wrap_angle(a.theta - b.theta, -period / 2.0, period).abs();
    (a.cx - b.cx).abs() <= tol
        && (a.cy - b.cy).abs() <= tol
        && (a.w - b.w).abs() <= tol
        && (a.h - b.h).abs() <= tol
        && d <= tol
}

pub fn max_box_err(a: &RotatedBox, b: &RotatedBox) -> f64 {
    let period = if (a.w - a.h).abs() <= 1e-9 { FRAC_PI_2 } else { PI };
    let d = wrap_angle(a.theta - b.theta, -period / 2.0, period).abs();
    [
        (a.cx - b.cx).abs(),
        (a.cy - b.cy).abs(),
        (a.w - b.w).abs(),
        (a.h - b.h).abs(),
        d,
    ]
    .into_iter()
    .fold(0.0, f64::max)
}
