//! Line formats: `class score cx cy w h theta_deg` for detections, eight
//! coordinates for quads.

use crate::error::{Error, Result};
use crate::geometry::rbox::RotatedBox;

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub class: String,
    pub score: f64,
    pub rbox: RotatedBox,
}

fn num(tok: &str, line: usize, what: &str) -> Result<f64> {
    let v: f64 = tok.parse().map_err(|_| Error::Parse {
        line,
        message: format!("{what}: cannot parse {tok:?} as a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            message: format!("{what} is not finite"),
        });
    }
    Ok(v)
}

/// Parses detection lines; blank lines and `#` comments are skipped. Line numbers are 1-based.
pub fn parse_detections(text: &str) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = s.split_whitespace().collect();
        if toks.len() != 7 {
            return Err(Error::Parse {
                line,
                message: format!("expected 7 fields, found {}", toks.len()),
            });
        }
        let score = num(toks[1], line, "score")?;
        let f: Vec<f64> = toks[2..]
            .iter()
            .zip(["cx", "cy", "w", "h", "theta"])
            .map(|(t, w)| num(t, line, w))
            .collect::<Result<_>>()?;
        let rbox = RotatedBox::new(f[0], f[1], f[2], f[3], f[4].to_radians()).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        out.push(Detection {
            class: toks[0].to_string(),
            score,
            rbox,
        });
    }
    Ok(out)
}

pub fn format_detection(d: &Detection) -> String {
    let b = &d.rbox;
    // Round off the radian round-trip so 30 degrees prints as 30.
    let deg = (b.theta.to_degrees() * 1e10).round() / 1e10;
    format!(
        "{} {} {} {} {} {} {}",
        d.class,
        d.score,
        b.cx,
        b.cy,
        b.w,
        b.h,
        deg
    )
}

pub fn format_detections(dets: &[Detection]) -> String {
    let mut s = String::new();
    for d in dets {
        s.push_str(&format_detection(d));
        s.push('\n');
    }
    s
}

/// Eight vertex coordinates from the first eight tokens.
pub fn parse_quad(tokens: &[&str], line: usize) -> Result<[[f64; 2]; 4]> {
    if tokens.len() < 8 {
        return Err(Error::Parse {
            line,
            message: format!("expected 8 coordinates, found {}", tokens.len()),
        });
    }
    let mut q = [[0.0; 2]; 4];
    for (k, t) in tokens[..8].iter().enumerate() {
        q[k / 2][k % 2] = num(t, line, "coordinate")?;
    }
    Ok(q)
}

pub fn format_quad(q: &[[f64; 2]; 4]) -> String {
    q.iter()
        .map(|p| format!("{} {}", p[0], p[1]))
        .collect::<Vec<_>>()
        .join(" ")
}
