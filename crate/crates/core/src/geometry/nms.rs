use crate::geometry::polygon::{convex_intersection, polygon_area, polygon_from_box};
use crate::geometry::rbox::RotatedBox;

/// Intersection over union of two oriented boxes, in `[0, 1]`.
pub fn rotated_iou(a: &RotatedBox, b: &RotatedBox) -> f64 {
    let (a, b) = (a.canonical(), b.canonical());
    if a == b {
        return 1.0;
    }
    let inter = polygon_area(&convex_intersection(&polygon_from_box(&a), &polygon_from_box(&b)));
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy suppression by descending score; equal scores keep input order.
/// A box is dropped when its IoU with a kept box exceeds `iou_thr`.
pub fn rotated_nms(dets: &[(RotatedBox, f64)], iou_thr: f64) -> Vec<usize> {
    let scores: Vec<f64> = dets.iter().map(|d| d.1).collect();
    greedy_suppress(&scores, iou_thr, |i, j| rotated_iou(&dets[i].0, &dets[j].0))
}

/// The greedy loop behind [`rotated_nms`] with an arbitrary overlap function.
pub fn greedy_suppress(scores: &[f64], iou_thr: f64, iou: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(k, i) <= iou_thr) {
            kept.push(i);
        }
    }
    kept
}
