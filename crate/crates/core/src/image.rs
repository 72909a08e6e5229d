//! Netpbm and raw tensor images as `(1, C, H, W)` tensors with values in `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn header_tokens(bytes: &[u8], count: usize) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::Format("truncated netpbm header".into()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    Ok((tokens, i))
}

/// Decodes P2, P3, P5 and P6 images. 16-bit samples are big-endian.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor> {
    let (head, end) = header_tokens(bytes, 4)?;
    let channels = match head[0].as_str() {
        "P2" | "P5" => 1,
        "P3" | "P6" => 3,
        other => return Err(Error::Format(format!("unsupported netpbm magic {other:?}"))),
    };
    let num = |s: &str| -> Result<usize> { s.parse().map_err(|_| Error::Format(format!("bad header value {s:?}"))) };
    let (w, h, maxval) = (num(&head[1])?, num(&head[2])?, num(&head[3])?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("bad netpbm geometry {w}x{h}, maxval {maxval}")));
    }
    let count = w * h * channels;
    let samples: Vec<usize> = if head[0] == "P2" || head[0] == "P3" {
        let text = std::str::from_utf8(&bytes[end..]).map_err(|_| Error::Format("non-ASCII raster".into()))?;
        let v = text
            .split_ascii_whitespace()
            .take(count)
            .map(num)
            .collect::<Result<Vec<_>>>()?;
        if v.len() < count {
            return Err(Error::Format("truncated raster".into()));
        }
        v
    } else {
        let data = &bytes[(end + 1).min(bytes.len())..];
        let wide = maxval > 255;
        let need = count * if wide { 2 } else { 1 };
        if data.len() < need {
            return Err(Error::Format(format!("raster has {} bytes, expected {need}", data.len())));
        }
        if wide {
            data[..need].chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]]) as usize).collect()
        } else {
            data[..need].iter().map(|&b| b as usize).collect()
        }
    };
    let mut t = Tensor::zeros([1, channels, h, w]);
    for (i, s) in samples.iter().enumerate() {
        if *s > maxval {
            return Err(Error::Format(format!("sample {s} exceeds maxval {maxval}")));
        }
        let (pix, c) = (i / channels, i % channels);
        t.set(0, c, pix / w, pix % w, *s as f64 / maxval as f64);
    }
    Ok(t)
}

/// Reads `.pgm`/`.ppm`/`.pnm` or an `STNT` tensor (any other extension).
pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let t = if bytes.starts_with(b"P") {
        decode_pnm(&bytes)?
    } else {
        Tensor::read_from(bytes.as_slice())?
    };
    if t.dims()[0] != 1 {
        return Err(Error::Shape(format!("image tensor must have batch 1, got {:?}", t.dims())));
    }
    Ok(t)
}

/// The `w × h` window at `(x, y)`; the window must lie inside the image.
pub fn crop(img: &Tensor, x: usize, y: usize, w: usize, h: usize) -> Result<Tensor> {
    let [n, c, ih, iw] = img.dims();
    if x + w > iw || y + h > ih {
        return Err(Error::Shape(format!("crop {w}x{h} at ({x}, {y}) exceeds {iw}x{ih}")));
    }
    let mut out = Tensor::zeros([n, c, h, w]);
    for b in 0..n {
        for ch in 0..c {
            for r in 0..h {
                for col in 0..w {
                    out.set(b, ch, r, col, img.get(b, ch, y + r, x + col));
                }
            }
        }
    }
    Ok(out)
}

/// Bilinear resampling by `scale` with pixel-center alignment; output size is `round(dim · scale)`.
pub fn resize_bilinear(img: &Tensor, scale: f64) -> Result<Tensor> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Config(format!("scale {scale} must be positive")));
    }
    let [n, c, h, w] = img.dims();
    let (oh, ow) = ((h as f64 * scale).round() as usize, (w as f64 * scale).round() as usize);
    if oh == 0 || ow == 0 {
        return Err(Error::Config(format!("scale {scale} collapses a {w}x{h} image")));
    }
    let src = |o: usize, len: usize, olen: usize| {
        let p = ((o as f64 + 0.5) * len as f64 / olen as f64 - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = p.floor() as usize;
        (i0, (i0 + 1).min(len - 1), p - i0 as f64)
    };
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for oy in 0..oh {
        let (y0, y1, fy) = src(oy, h, oh);
        for ox in 0..ow {
            let (x0, x1, fx) = src(ox, w, ow);
            for b in 0..n {
                for ch in 0..c {
                    let top = img.get(b, ch, y0, x0) * (1.0 - fx) + img.get(b, ch, y0, x1) * fx;
                    let bot = img.get(b, ch, y1, x0) * (1.0 - fx) + img.get(b, ch, y1, x1) * fx;
                    out.set(b, ch, oy, ox, top * (1.0 - fy) + bot * fy);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_and_ascii_gray() {
        let mut p5 = b"P5\n# note\n3 2\n255\n".to_vec();
        p5.extend_from_slice(&[0, 51, 255, 102, 153, 204]);
        let a = decode_pnm(&p5).unwrap();
        let b = decode_pnm(b"P2 3 2 255 0 51 255 102 153 204").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dims(), [1, 1, 2, 3]);
        assert_eq!(a.get(0, 0, 1, 0), 0.4);
    }

    #[test]
    fn color_planes() {
        let mut p6 = b"P6 2 1 255\n".to_vec();
        p6.extend_from_slice(&[255, 0, 0, 0, 0, 255]);
        let t = decode_pnm(&p6).unwrap();
        assert_eq!(t.dims(), [1, 3, 1, 2]);
        assert_eq!((t.get(0, 0, 0, 0), t.get(0, 2, 0, 1), t.get(0, 2, 0, 0)), (1.0, 1.0, 0.0));
    }

    #[test]
    fn truncated_raster_rejected() {
        assert!(decode_pnm(b"P5 4 4 255\n\x00\x01").is_err());
        assert!(decode_pnm(b"P7 1 1 1\n\x00").is_err());
    }

    #[test]
    fn unit_scale_is_identity() {
        let t = Tensor::from_vec([1, 1, 2, 3], vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        assert_eq!(resize_bilinear(&t, 1.0).unwrap(), t);
        assert_eq!(resize_bilinear(&t, 2.0).unwrap().dims(), [1, 1, 4, 6]);
        assert_eq!(crop(&t, 1, 1, 2, 1).unwrap().data(), &[0.4, 0.5]);
        assert!(crop(&t, 2, 0, 2, 1).is_err());
    }
}
