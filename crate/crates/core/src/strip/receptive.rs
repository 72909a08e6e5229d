//! Receptive fields measured as the support of an input gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Tape, Var};
use crate::tensor::Tensor;

pub const SUPPORT_THRESHOLD: f64 = 1e-12;

/// Boolean `height × width` mask in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportMask {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
}

impl SupportMask {
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.mask[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    /// Inclusive `(y0, x0, y1, x1)` of the set positions.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    bb = Some(match bb {
                        None => (y, x, y, x),
                        Some((a, b, c, d)) => (a.min(y), b.min(x), c.max(y), d.max(x)),
                    });
                }
            }
        }
        bb
    }

    /// True when the set positions form a full `h × w` rectangle.
    pub fn is_full_rect(&self, h: usize, w: usize) -> bool {
        match self.bounding_box() {
            Some((y0, x0, y1, x1)) => {
                y1 - y0 + 1 == h && x1 - x0 + 1 == w && self.count() == h * w
            }
            None => false,
        }
    }

    /// Binary PGM (P5), 255 for support.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.mask.iter().map(|&b| if b { 255u8 } else { 0 }));
        out
    }

    /// One row per line, `0`/`1` comma-separated.
    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(self.mask.len() * 2);
        for row in self.mask.chunks(self.width) {
            let line: Vec<&str> = row.iter().map(|&b| if b { "1" } else { "0" }).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }
}

/// Where to probe: output channel and spatial position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Probe {
    pub channel: usize,
    pub y: usize,
    pub x: usize,
}

/// Input positions whose gradient for the probed output exceeds [`SUPPORT_THRESHOLD`],
/// OR-reduced over input channels.
///
/// `window` is the expected `(height, width)` of the receptive field; the
/// probe must sit far enough from the borders for that window to fit. The
/// input is drawn strictly positive from `seed`.
pub fn receptive_field_map<M, F>(
    module: &M,
    input_dims: [usize; 4],
    probe: Probe,
    window: (usize, usize),
    seed: u64,
    f: F,
) -> Result<SupportMask>
where
    F: for<'a> Fn(&'a M, &mut Tape<'a>, Var) -> Result<Var>,
{
    let [n, _, h, w] = input_dims;
    if n != 1 {
        return Err(Error::Shape("receptive field probing uses a batch of one".into()));
    }
    let (rh, rw) = (window.0 / 2, window.1 / 2);
    if probe.y < rh || probe.x < rw || probe.y + rh >= h || probe.x + rw >= w {
        return Err(Error::Config(format!(
            "probe ({}, {}) is closer than ({rh}, {rw}) to the border of a {h}x{w} input",
            probe.y, probe.x
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = Tensor::uniform(input_dims, 0.5, 1.5, &mut rng);
    let mut tape = Tape::new();
    let x = tape.input(input);
    let out = f(module, &mut tape, x)?;
    let od = tape.value(out).dims();
    if probe.channel >= od[1] || probe.y >= od[2] || probe.x >= od[3] {
        return Err(Error::Config(format!("probe outside output {od:?}")));
    }
    let mut seed_grad = Tensor::zeros(od);
    seed_grad.set(0, probe.channel, probe.y, probe.x, 1.0);
    let grads = tape.backward(out, seed_grad)?;
    let g = grads
        .wrt(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(input_dims));
    let mut mask = vec![false; h * w];
    for c in 0..input_dims[1] {
        for y in 0..h {
            for xx in 0..w {
                if g.get(0, c, y, xx).abs() > SUPPORT_THRESHOLD {
                    mask[y * w + xx] = true;
                }
            }
        }
    }
    Ok(SupportMask {
        height: h,
        width: w,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ConvParams, Module};
    use crate::strip::module::{ModuleDesign, StripModuleParams, StripOrder};

    fn positive(p: &mut impl Module, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        p.visit_mut("", &mut |_, t, _| *t = Tensor::uniform(t.dims(), 0.5, 1.5, &mut rng));
    }

    fn strip_module(k: usize, design: ModuleDesign) -> StripModuleParams {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = StripModuleParams::with_design(3, k, design, 0.1, &mut rng).unwrap();
        positive(&mut p, 1);
        p
    }

    const PROBE: Probe = Probe { channel: 1, y: 20, x: 22 };

    #[test]
    fn attention_map_support_is_23x23() {
        let p = strip_module(19, ModuleDesign::Sequential);
        let m = receptive_field_map(&p, [1, 3, 41, 45], PROBE, (23, 23), 2, |m, t, x| {
            m.attention(t, x, StripOrder::HorizontalFirst)
        })
        .unwrap();
        assert!(m.is_full_rect(23, 23));
        assert_eq!(m.bounding_box(), Some((9, 11, 31, 33)));
    }

    #[test]
    fn full_module_support_includes_probe() {
        let p = strip_module(19, ModuleDesign::Sequential);
        let m = receptive_field_map(&p, [1, 3, 41, 45], PROBE, (23, 23), 2, |m, t, x| {
            m.forward(t, x, StripOrder::HorizontalFirst)
        })
        .unwrap();
        assert!(m.is_full_rect(23, 23));
        assert!(m.get(PROBE.y, PROBE.x));
    }

    #[test]
    fn square_5x5_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut conv = ConvParams::depthwise(3, 5, 5, 0.1, &mut rng);
        positive(&mut conv, 4);
        let m = receptive_field_map(&conv, [1, 3, 15, 15], Probe { channel: 0, y: 7, x: 7 }, (5, 5), 1, |m, t, x| {
            t.conv(x, m)
        })
        .unwrap();
        assert!(m.is_full_rect(5, 5));
    }

    #[test]
    fn parallel_support_is_a_cross() {
        let p = strip_module(9, ModuleDesign::Parallel);
        let m = receptive_field_map(&p, [1, 3, 31, 31], Probe { channel: 0, y: 15, x: 15 }, (13, 13), 2, |m, t, x| {
            m.attention(t, x, StripOrder::HorizontalFirst)
        })
        .unwrap();
        // 5x5 dilated by a 1x9 bar and by a 9x1 bar: 5x13 + 13x5 - 5x5.
        assert_eq!(m.count(), 65 + 65 - 25);
        assert!(!m.get(15 - 6, 15 - 6));
    }

    #[test]
    fn probe_near_border_is_error() {
        let p = strip_module(19, ModuleDesign::Sequential);
        let r = receptive_field_map(&p, [1, 3, 41, 45], Probe { channel: 0, y: 5, x: 22 }, (23, 23), 0, |m, t, x| {
            m.attention(t, x, StripOrder::HorizontalFirst)
        });
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn pgm_and_csv_encoding() {
        let m = SupportMask {
            height: 2,
            width: 3,
            mask: vec![true, false, false, false, true, true],
        };
        let pgm = m.to_pgm();
        assert!(pgm.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&pgm[pgm.len() - 6..], &[255, 0, 0, 0, 255, 255]);
        assert_eq!(m.to_csv(), "1,0,0\n0,1,1\n");
    }
}
