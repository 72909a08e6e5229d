//! Oriented boxes, exact rotated IoU, box codecs and rotated NMS.

pub mod codec;
pub mod nms;
pub mod polygon;
pub mod rbox;
pub mod text;

pub use codec::{delta_decode, delta_encode, midpoint_decode, midpoint_encode, MidpointOffsetBox};
pub use nms::{greedy_suppress, rotated_iou, rotated_nms};
pub use polygon::{convex_hull, convex_intersection, min_area_rect, polygon_area, polygon_from_box, ConvexPolygon};
pub use rbox::{wrap_angle, wrap_half_pi, RotatedBox};
pub use text::{format_detection, format_detections, parse_detections, Detection};
