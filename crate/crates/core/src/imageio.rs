//! Image decoding, resampling, and the decode -> LAB -> resize -> normalize
//! input pipeline shared by training and evaluation.

use std::path::Path;

use crate::colorspace::{normalize_lab, srgb_to_lab, LabImage, RgbImage};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Decode an 8-bit image file into interleaved RGB.
pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let display = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| Error::io(display.clone(), e))?;
    let decoded = image::load_from_memory(&bytes)
        .map_err(|e| Error::DecodeFailure { path: display, reason: e.to_string() })?;
    let rgb = decoded.to_rgb8();
    let (w, h) = rgb.dimensions();
    RgbImage::new(w as usize, h as usize, rgb.into_raw())
}

/// Bilinear resample of a LAB image to `(out_w, out_h)`.
pub fn resize_lab_bilinear(img: &LabImage, out_w: usize, out_h: usize) -> LabImage {
    let (w, h) = (img.width(), img.height());
    if (w, h) == (out_w, out_h) {
        return img.clone();
    }
    let src = img.data();
    let mut data = vec![0.0f32; out_w * out_h * 3];
    let sx = w as f64 / out_w as f64;
    let sy = h as f64 / out_h as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ch in 0..3 {
                let at = |x: usize, y: usize| src[(y * w + x) * 3 + ch] as f64;
                let top = at(x0, y0) * (1.0 - wx) + at(x1, y0) * wx;
                let bot = at(x0, y1) * (1.0 - wx) + at(x1, y1) * wx;
                data[(oy * out_w + ox) * 3 + ch] = (top * (1.0 - wy) + bot * wy) as f32;
            }
        }
    }
    LabImage::new(out_w, out_h, data).expect("resize buffer sized correctly")
}

/// Exact box-integration (area-average) resample of a single plane.
///
/// Output cell (i,j) averages the source rectangle it covers, with
/// fractional edge pixels weighted by overlap.
pub fn area_resize_plane(
    src: &[f32],
    w: usize,
    h: usize,
    out_w: usize,
    out_h: usize,
) -> Vec<f32> {
    assert_eq!(src.len(), w * h);
    let mut out = vec![0.0f32; out_w * out_h];
    let sx = w as f64 / out_w as f64;
    let sy = h as f64 / out_h as f64;
    for oy in 0..out_h {
        let y0 = oy as f64 * sy;
        let y1 = (oy + 1) as f64 * sy;
        for ox in 0..out_w {
            let x0 = ox as f64 * sx;
            let x1 = (ox + 1) as f64 * sx;
            let mut acc = 0.0f64;
            let mut area = 0.0f64;
            let mut py = y0.floor() as usize;
            while (py as f64) < y1 && py < h {
                let wy = (y1.min((py + 1) as f64) - y0.max(py as f64)).max(0.0);
                if wy > 0.0 {
                    let mut px = x0.floor() as usize;
                    while (px as f64) < x1 && px < w {
                        let wx = (x1.min((px + 1) as f64) - x0.max(px as f64)).max(0.0);
                        if wx > 0.0 {
                            acc += src[py * w + px] as f64 * wx * wy;
                            area += wx * wy;
                        }
                        px += 1;
                    }
                }
                py += 1;
            }
            out[oy * out_w + ox] = (acc / area) as f32;
        }
    }
    out
}

/// Full input pipeline: decode, convert to LAB, bilinear-resize to the
/// network input size, normalize to a `(3,H,W)` tensor.
pub fn load_input_tensor<T: Scalar>(path: &Path, input_size: (usize, usize)) -> Result<Tensor<T>> {
    let rgb = load_rgb(path)?;
    let lab = srgb_to_lab(&rgb);
    let resized = resize_lab_bilinear(&lab, input_size.1, input_size.0);
    Ok(normalize_lab(&resized))
}
