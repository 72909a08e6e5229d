//! DOTA annotation ingestion, patch tiling and cross-tile merging.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::GroundTruthRecord;
use crate::geometry::text::{format_quad, parse_quad};
use crate::geometry::{min_area_rect, rotated_nms, Detection, RotatedBox};

pub const DEFAULT_PATCH: usize = 1024;
pub const DEFAULT_OVERLAP: usize = 200;
pub const MULTI_SCALE_OVERLAP: usize = 500;
pub const MULTI_SCALES: [f64; 3] = [0.5, 1.0, 1.5];
pub const MERGE_NMS_THR: f64 = 0.1;

/// One annotation line: `x1 y1 ... x4 y4 category difficult`. Header lines
/// (`imagesource:`, `gsd:`) and blank lines are skipped; any malformed line
/// fails the whole file.
pub fn parse_dota_annotations(text: &str, image_id: &str) -> Result<Vec<GroundTruthRecord>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with("imagesource:") || s.starts_with("gsd:") {
            continue;
        }
        let toks: Vec<&str> = s.split_whitespace().collect();
        if toks.len() != 9 && toks.len() != 10 {
            return Err(Error::Parse {
                line,
                message: format!("expected 8 coordinates, a category and a difficulty flag, found {} tokens", toks.len()),
            });
        }
        let quad = parse_quad(&toks, line)?;
        let difficult = match toks.get(9) {
            None | Some(&"0") => false,
            Some(&"1") => true,
            Some(t) => {
                return Err(Error::Parse {
                    line,
                    message: format!("difficulty must be 0 or 1, got {t:?}"),
                })
            }
        };
        let rbox = min_area_rect(&quad).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        out.push(GroundTruthRecord {
            image_id: image_id.to_string(),
            class: toks[8].to_string(),
            rbox,
            difficult,
        });
    }
    Ok(out)
}

pub fn format_dota_annotations(gts: &[GroundTruthRecord]) -> String {
    let mut s = String::new();
    for g in gts {
        let c = g.rbox.corners();
        s.push_str(&format!("{} {} {}\n", format_quad(&c), g.class, g.difficult as u8));
    }
    s
}

/// Offsets along one axis: multiples of `patch - overlap`, the last clamped
/// to `max(0, dim - patch)`, duplicates removed.
pub fn tile_offsets(dim: usize, patch: usize, overlap: usize) -> Result<Vec<usize>> {
    if patch <= overlap {
        return Err(Error::Config(format!("patch {patch} must exceed overlap {overlap}")));
    }
    let stride = patch - overlap;
    let last = dim.saturating_sub(patch);
    let mut offs = Vec::new();
    let mut x = 0;
    loop {
        let o = x.min(last);
        if offs.last() != Some(&o) {
            offs.push(o);
        }
        if x + patch >= dim {
            break;
        }
        x += stride;
    }
    Ok(offs)
}

/// `(x, y)` tile origins for a `width × height` image, row-major.
pub fn tile_image(width: usize, height: usize, patch: usize, overlap: usize) -> Result<Vec<(usize, usize)>> {
    let xs = tile_offsets(width, patch, overlap)?;
    let ys = tile_offsets(height, patch, overlap)?;
    Ok(ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect())
}

/// Which ground truths a tile keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClipMode {
    /// Keep boxes whose center lies in the tile, unclipped.
    #[default]
    CenterInside,
    /// Keep only boxes entirely inside the tile.
    FullyInside,
}

impl ClipMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "center-inside" => Ok(Self::CenterInside),
            "fully-inside" => Ok(Self::FullyInside),
            _ => Err(Error::Config(format!("unknown clip mode {s:?}; use center-inside or fully-inside"))),
        }
    }
}

fn shift(b: &RotatedBox, dx: f64, dy: f64) -> RotatedBox {
    RotatedBox {
        cx: b.cx + dx,
        cy: b.cy + dy,
        ..*b
    }
}

pub fn scale_box(b: &RotatedBox, s: f64) -> RotatedBox {
    RotatedBox {
        cx: b.cx * s,
        cy: b.cy * s,
        w: b.w * s,
        h: b.h * s,
        theta: b.theta,
    }
}

/// Ground truths of one tile in tile coordinates.
pub fn tile_ground_truth(
    gts: &[GroundTruthRecord],
    origin: (usize, usize),
    tile_w: usize,
    tile_h: usize,
    mode: ClipMode,
    tile_id: &str,
) -> Vec<GroundTruthRecord> {
    let (x0, y0) = (origin.0 as f64, origin.1 as f64);
    let (x1, y1) = (x0 + tile_w as f64, y0 + tile_h as f64);
    gts.iter()
        .filter(|g| match mode {
            ClipMode::CenterInside => g.rbox.cx >= x0 && g.rbox.cx < x1 && g.rbox.cy >= y0 && g.rbox.cy < y1,
            ClipMode::FullyInside => {
                let b = g.rbox.bounds();
                b[0] >= x0 && b[1] >= y0 && b[2] <= x1 && b[3] <= y1
            }
        })
        .map(|g| GroundTruthRecord {
            image_id: tile_id.to_string(),
            rbox: shift(&g.rbox, -x0, -y0),
            ..g.clone()
        })
        .collect()
}

/// `P0001__1__824___0`: image, scale, x and y of the tile origin.
pub fn tile_name(image: &str, scale: f64, x: usize, y: usize) -> String {
    format!("{image}__{scale}__{x}___{y}")
}

pub fn parse_tile_name(name: &str) -> Result<(String, f64, usize, usize)> {
    let bad = || Error::Format(format!("{name:?} is not a tile name like image__1__0___0"));
    let (rest, y) = name.rsplit_once("___").ok_or_else(bad)?;
    let (rest, x) = rest.rsplit_once("__").ok_or_else(bad)?;
    let (image, scale) = rest.rsplit_once("__").ok_or_else(bad)?;
    let scale: f64 = scale.parse().map_err(|_| bad())?;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(bad());
    }
    Ok((
        image.to_string(),
        scale,
        x.parse().map_err(|_| bad())?,
        y.parse().map_err(|_| bad())?,
    ))
}

/// Detections of one tile with its origin and the scale the image was resized by.
#[derive(Debug, Clone, PartialEq)]
pub struct TileDetections {
    pub origin: (usize, usize),
    pub scale: f64,
    pub detections: Vec<Detection>,
}

/// Moves tile detections back to image coordinates and applies per-class
/// rotated NMS. Output is ordered by class, then descending score, then input order.
pub fn merge_tile_detections(tiles: &[TileDetections], nms_thr: f64) -> Result<Vec<Detection>> {
    let mut by_class: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for t in tiles {
        if !(t.scale > 0.0 && t.scale.is_finite()) {
            return Err(Error::Config(format!("tile scale {} must be positive", t.scale)));
        }
        for d in &t.detections {
            let b = shift(&d.rbox, t.origin.0 as f64, t.origin.1 as f64);
            by_class.entry(d.class.clone()).or_default().push(Detection {
                rbox: scale_box(&b, 1.0 / t.scale).canonical(),
                ..d.clone()
            });
        }
    }
    let mut out = Vec::new();
    for dets in by_class.into_values() {
        let pairs: Vec<(RotatedBox, f64)> = dets.iter().map(|d| (d.rbox, d.score)).collect();
        out.extend(rotated_nms(&pairs, nms_thr).into_iter().map(|i| dets[i].clone()));
    }
    Ok(out)
}
