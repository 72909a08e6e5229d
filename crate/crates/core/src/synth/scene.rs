use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RotatedBox;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Background {
    Flat,
    /// Sum of a few random low-frequency sinusoids.
    #[default]
    Waves,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub image_size: usize,
    /// Aspect ratios are drawn log-uniformly from this range.
    pub ar_range: (f64, f64),
    /// Long side as a fraction of the image size.
    pub scale_range: (f64, f64),
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    pub background: Background,
    /// Subsamples per pixel side for anti-aliasing.
    pub supersample: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            ar_range: (1.0, 10.0),
            scale_range: (0.25, 0.65),
            noise: 0.05,
            background: Background::Waves,
            supersample: 4,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (a0, a1) = self.ar_range;
        let (s0, s1) = self.scale_range;
        if self.image_size == 0 || self.supersample == 0 {
            return Err(Error::Config("image size and supersampling must be positive".into()));
        }
        if !(a0 >= 1.0 && a1 >= a0 && a1.is_finite()) {
            return Err(Error::Config(format!("aspect-ratio range {a0}..{a1} must satisfy 1 <= lo <= hi")));
        }
        if !(s0 > 0.0 && s1 >= s0) {
            return Err(Error::Config(format!("scale range {s0}..{s1} must be positive and ordered")));
        }
        // A box of long side L fits at any angle only if its diagonal does.
        let l = s1 * self.image_size as f64;
        let diag = l * (1.0 + 1.0 / (a0 * a0)).sqrt();
        if diag >= self.image_size as f64 {
            return Err(Error::Config(format!(
                "scale up to {s1} with aspect ratio {a0} cannot fit a {}-pixel image at every angle",
                self.image_size
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("noise level must be non-negative".into()));
        }
        Ok(())
    }
}

pub const BACKGROUND_LEVEL: f64 = 0.3;

/// One anti-aliased filled rotated rectangle on a background, `(1, 1, S, S)`.
/// Deterministic in `(cfg.seed, index)`.
pub fn generate_scene(cfg: &SceneConfig, index: u64) -> Result<(Tensor, RotatedBox)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let s = cfg.image_size as f64;
    let ar = (rng.gen_range(0.0..=1.0) * (cfg.ar_range.1 / cfg.ar_range.0).ln()).exp() * cfg.ar_range.0;
    let long = rng.gen_range(cfg.scale_range.0..=cfg.scale_range.1) * s;
    let theta = rng.gen_range(-FRAC_PI_2..FRAC_PI_2);
    let probe = RotatedBox { cx: 0.0, cy: 0.0, w: long, h: long / ar, theta };
    let [x0, y0, x1, y1] = probe.bounds();
    let cx = rng.gen_range(-x0..=s - x1);
    let cy = rng.gen_range(-y0..=s - y1);
    let gt = RotatedBox::new(cx, cy, long, long / ar, theta)?;
    let fg = rng.gen_range(0.65..0.95);

    let n = cfg.image_size;
    let mut bg = vec![BACKGROUND_LEVEL; n * n];
    if cfg.background == Background::Waves {
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                let f = rng.gen_range(0.5..3.0) * 2.0 * PI / s;
                let a = rng.gen_range(0.0..PI);
                (f * a.cos(), f * a.sin(), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.02..0.06))
            })
            .collect();
        for y in 0..n {
            for x in 0..n {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                bg[y * n + x] += waves.iter().map(|(kx, ky, ph, amp)| amp * (kx * px + ky * py + ph).sin()).sum::<f64>();
            }
        }
    }
    let ss = cfg.supersample;
    let total = (ss * ss) as u32;
    let [bx0, by0, bx1, by1] = gt.bounds();
    let mut img = Tensor::zeros([1, 1, n, n]);
    let noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).map_err(|e| Error::Config(e.to_string()))?;
    for y in 0..n {
        for x in 0..n {
            let mut hits = 0u32;
            let (fx, fy) = (x as f64, y as f64);
            if fx + 1.0 >= bx0 && fx <= bx1 && fy + 1.0 >= by0 && fy <= by1 {
                for sy in 0..ss {
                    for sx in 0..ss {
                        let px = fx + (sx as f64 + 0.5) / ss as f64;
                        let py = fy + (sy as f64 + 0.5) / ss as f64;
                        hits += gt.contains(px, py) as u32;
                    }
                }
            }
            let b = bg[y * n + x];
            let mut v = if hits == 0 {
                b
            } else if hits == total {
                fg
            } else {
                b + (fg - b) * hits as f64 / total as f64
            };
            if cfg.noise > 0.0 {
                v += noise.sample(&mut rng);
            }
            img.set(0, 0, y, x, v);
        }
    }
    Ok((img, gt))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_index() {
        let cfg = SceneConfig::default();
        let (a, ga) = generate_scene(&cfg, 7).unwrap();
        let (b, gb) = generate_scene(&cfg, 7).unwrap();
        assert_eq!(ga, gb);
        let bytes = |t: &Tensor| t.data().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>();
        assert_eq!(bytes(&a), bytes(&b));
        let (_, gc) = generate_scene(&cfg, 8).unwrap();
        assert_ne!(ga, gc);
    }

    #[test]
    fn fixed_aspect_ratio() {
        let cfg = SceneConfig { ar_range: (5.0, 5.0), ..Default::default() };
        for i in 0..50 {
            let (_, g) = generate_scene(&cfg, i).unwrap();
            assert!((g.aspect_ratio() - 5.0).abs() < 1e-6);
        }
    }

    #[test]
    fn boxes_stay_in_frame() {
        let cfg = SceneConfig::default();
        for i in 0..200 {
            let (_, g) = generate_scene(&cfg, i).unwrap();
            let [x0, y0, x1, y1] = g.bounds();
            assert!(x0 >= -1e-9 && y0 >= -1e-9 && x1 <= 64.0 + 1e-9 && y1 <= 64.0 + 1e-9, "{g:?}");
        }
    }

    #[test]
    fn clean_flat_scene_has_two_levels_plus_edges() {
        let cfg = SceneConfig { noise: 0.0, background: Background::Flat, ..Default::default() };
        let (img, g) = generate_scene(&cfg, 3).unwrap();
        let fg = img.data().iter().copied().fold(f64::MIN, f64::max);
        let mut edge = 0;
        for &v in img.data() {
            if v != BACKGROUND_LEVEL && v != fg {
                assert!(v > BACKGROUND_LEVEL && v < fg);
                let steps = (v - BACKGROUND_LEVEL) / (fg - BACKGROUND_LEVEL) * 16.0;
                assert!((steps - steps.round()).abs() < 1e-9);
                edge += 1;
            }
        }
        assert!(edge > 0);
        let inside = img.data().iter().filter(|&&v| v == fg).count() as f64;
        assert!(inside < g.area() && inside > g.area() * 0.3);
    }

    #[test]
    fn unfittable_config_rejected() {
        let cfg = SceneConfig { scale_range: (0.5, 1.2), ..Default::default() };
        assert!(generate_scene(&cfg, 0).is_err());
        let cfg = SceneConfig { ar_range: (0.5, 2.0), ..Default::default() };
        assert!(generate_scene(&cfg, 0).is_err());
    }
}
