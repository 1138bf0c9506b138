//! 8-bit sRGB <-> CIE 1976 L*a*b* under a D65 reference white.
//!
//! The chain is sRGB inverse gamma -> linear RGB -> CIE XYZ (sRGB/D65
//! matrix) -> L*a*b*, computed in double precision and stored as single
//! precision. The inverse clamps linear RGB to [0,1] before gamma encoding
//! and rounds to 8 bits.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

const XYZ_TO_SRGB: [[f64; 3]; 3] = [
    [3.2404542, -1.5371385, -0.4985314],
    [-0.9692660, 1.8760108, 0.0415560],
    [0.0556434, -0.2040259, 1.0572252],
];

const D65_WHITE: (f64, f64, f64) = (0.95047, 1.0, 1.08883);

const EPS: f64 = 216.0 / 24389.0;
const KAPPA: f64 = 24389.0 / 27.0;

/// Row-major interleaved 8-bit (R,G,B) image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::ShapeMismatch(format!(
                "rgb data length {} for {width}x{height}",
                data.len()
            )));
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> (u8, u8, u8) {
        let i = (y * self.width + x) * 3;
        (self.data[i], self.data[i + 1], self.data[i + 2])
    }
}

/// Row-major interleaved (L,a,b) image, single-precision storage.
#[derive(Debug, Clone, PartialEq)]
pub struct LabImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl LabImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::ShapeMismatch(format!(
                "lab data length {} for {width}x{height}",
                data.len()
            )));
        }
        Ok(LabImage { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> (f32, f32, f32) {
        let i = (y * self.width + x) * 3;
        (self.data[i], self.data[i + 1], self.data[i + 2])
    }

    /// The L plane as a row-major vector.
    pub fn l_plane(&self) -> Vec<f32> {
        self.data.iter().step_by(3).copied().collect()
    }
}

fn srgb_inverse_gamma(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn srgb_gamma(c: f64) -> f64 {
    if c <= 0.0031308 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > EPS {
        t.cbrt()
    } else {
        (KAPPA * t + 16.0) / 116.0
    }
}

/// One 8-bit sRGB pixel to L*a*b*, in double precision.
pub fn srgb_pixel_to_lab(r: u8, g: u8, b: u8) -> (f64, f64, f64) {
    let rl = srgb_inverse_gamma(r as f64 / 255.0);
    let gl = srgb_inverse_gamma(g as f64 / 255.0);
    let bl = srgb_inverse_gamma(b as f64 / 255.0);
    let x = SRGB_TO_XYZ[0][0] * rl + SRGB_TO_XYZ[0][1] * gl + SRGB_TO_XYZ[0][2] * bl;
    let y = SRGB_TO_XYZ[1][0] * rl + SRGB_TO_XYZ[1][1] * gl + SRGB_TO_XYZ[1][2] * bl;
    let z = SRGB_TO_XYZ[2][0] * rl + SRGB_TO_XYZ[2][1] * gl + SRGB_TO_XYZ[2][2] * bl;
    let fx = lab_f(x / D65_WHITE.0);
    let fy = lab_f(y / D65_WHITE.1);
    let fz = lab_f(z / D65_WHITE.2);
    (116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz))
}

/// One L*a*b* pixel back to 8-bit sRGB, clamping linear RGB to [0,1].
pub fn lab_pixel_to_srgb(l: f64, a: f64, b: f64) -> (u8, u8, u8) {
    let fy = (l + 16.0) / 116.0;
    let fx = fy + a / 500.0;
    let fz = fy - b / 200.0;
    let xr = if fx.powi(3) > EPS { fx.powi(3) } else { (116.0 * fx - 16.0) / KAPPA };
    let yr = if l > KAPPA * EPS { fy.powi(3) } else { l / KAPPA };
    let zr = if fz.powi(3) > EPS { fz.powi(3) } else { (116.0 * fz - 16.0) / KAPPA };
    let x = xr * D65_WHITE.0;
    let y = yr * D65_WHITE.1;
    let z = zr * D65_WHITE.2;
    let encode = |row: &[f64; 3]| {
        let lin = (row[0] * x + row[1] * y + row[2] * z).clamp(0.0, 1.0);
        (srgb_gamma(lin) * 255.0).round().clamp(0.0, 255.0) as u8
    };
    (
        encode(&XYZ_TO_SRGB[0]),
        encode(&XYZ_TO_SRGB[1]),
        encode(&XYZ_TO_SRGB[2]),
    )
}

/// Per-pixel CIE 1976 L*a*b* conversion; dimensions preserved.
pub fn srgb_to_lab(img: &RgbImage) -> LabImage {
    let mut data = Vec::with_capacity(img.data.len());
    for px in img.data.chunks_exact(3) {
        let (l, a, b) = srgb_pixel_to_lab(px[0], px[1], px[2]);
        data.push(l as f32);
        data.push(a as f32);
        data.push(b as f32);
    }
    LabImage { width: img.width, height: img.height, data }
}

/// Inverse conversion; test utility for roundtrip verification.
pub fn lab_to_srgb(img: &LabImage) -> RgbImage {
    let mut data = Vec::with_capacity(img.data.len());
    for px in img.data.chunks_exact(3) {
        let (r, g, b) = lab_pixel_to_srgb(px[0] as f64, px[1] as f64, px[2] as f64);
        data.push(r);
        data.push(g);
        data.push(b);
    }
    RgbImage { width: img.width, height: img.height, data }
}

/// Channel-planar `(3, H, W)` tensor with L/100, a/128, b/128.
pub fn normalize_lab<T: Scalar>(img: &LabImage) -> Tensor<T> {
    let (w, h) = (img.width, img.height);
    let plane = w * h;
    let mut out = Tensor::zeros(&[3, h, w]);
    let data = out.data_mut();
    for i in 0..plane {
        data[i] = T::from_f64(img.data[i * 3] as f64 / 100.0);
        data[plane + i] = T::from_f64(img.data[i * 3 + 1] as f64 / 128.0);
        data[2 * plane + i] = T::from_f64(img.data[i * 3 + 2] as f64 / 128.0);
    }
    out
}

const LABF_MAGIC: &[u8; 4] = b"LABF";

/// Raw LAB dump: 16-byte header (magic, width u32 LE, height u32, reserved
/// u32 = 0) followed by height*width*3 little-endian f32 in (L,a,b) order.
pub fn write_labf(img: &LabImage, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + img.data.len() * 4);
    buf.extend_from_slice(LABF_MAGIC);
    buf.extend_from_slice(&(img.width as u32).to_le_bytes());
    buf.extend_from_slice(&(img.height as u32).to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    for v in &img.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_labf(path: &Path) -> Result<LabImage> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 16 || &bytes[0..4] != LABF_MAGIC {
        return Err(Error::FormatViolation("bad LABF header".into()));
    }
    let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 16 + width * height * 3 * 4;
    if bytes.len() != expected {
        return Err(Error::FormatViolation(format!(
            "LABF payload {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    LabImage::new(width, height, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn white_point_identity() {
        let (l, a, b) = srgb_pixel_to_lab(255, 255, 255);
        assert!(close(l, 100.0, 1e-3) && close(a, 0.0, 1e-3) && close(b, 0.0, 1e-3));
        assert_eq!(lab_pixel_to_srgb(100.0, 0.0, 0.0), (255, 255, 255));
    }

    #[test]
    fn black_maps_to_origin() {
        let (l, a, b) = srgb_pixel_to_lab(0, 0, 0);
        assert!(close(l, 0.0, 1e-3) && close(a, 0.0, 1e-3) && close(b, 0.0, 1e-3));
        assert_eq!(lab_pixel_to_srgb(0.0, 0.0, 0.0), (0, 0, 0));
    }

    #[test]
    fn red_fixture() {
        // Fixed by a one-off evaluation of the standard formula chain.
        let (l, a, b) = srgb_pixel_to_lab(255, 0, 0);
        assert!(close(l, 53.24, 0.05), "L = {l}");
        assert!(close(a, 80.09, 0.05), "a = {a}");
        assert!(close(b, 67.20, 0.05), "b = {b}");
    }

    #[test]
    fn roundtrip_within_one_per_channel() {
        for r in (0..=255u16).step_by(37) {
            for g in (0..=255u16).step_by(37) {
                for b in (0..=255u16).step_by(37) {
                    let (l, a, bb) = srgb_pixel_to_lab(r as u8, g as u8, b as u8);
                    let (ro, go, bo) = lab_pixel_to_srgb(l, a, bb);
                    assert!((ro as i32 - r as i32).abs() <= 1, "{r},{g},{b} -> {ro}");
                    assert!((go as i32 - g as i32).abs() <= 1, "{r},{g},{b} -> {go}");
                    assert!((bo as i32 - b as i32).abs() <= 1, "{r},{g},{b} -> {bo}");
                }
            }
        }
    }

    #[test]
    fn gray_ramp_is_monotone_and_neutral() {
        let mut prev = -1.0f64;
        for v in 0..=255u8 {
            let (l, a, b) = srgb_pixel_to_lab(v, v, v);
            assert!(l > prev, "L not increasing at {v}");
            assert!(a.abs() < 0.01 && b.abs() < 0.01, "chroma at {v}: {a}, {b}");
            prev = l;
        }
    }

    #[test]
    fn normalize_scales_channels() {
        let img = LabImage::new(2, 1, vec![50.0, 0.0, 0.0, 100.0, 64.0, -128.0]).unwrap();
        let t: Tensor<f32> = normalize_lab(&img);
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[0.5, 1.0, 0.0, 0.5, 0.0, -1.0]);
    }

    #[test]
    fn normalize_preserves_spatial_shape() {
        let img = LabImage::new(224, 224, vec![0.0; 224 * 224 * 3]).unwrap();
        let t: Tensor<f32> = normalize_lab(&img);
        assert_eq!(t.shape(), &[3, 224, 224]);
    }

    #[test]
    fn labf_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.labf");
        let img = LabImage::new(3, 2, (0..18).map(|i| i as f32 * 0.5 - 3.0).collect()).unwrap();
        write_labf(&img, &path).unwrap();
        let back = read_labf(&path).unwrap();
        assert_eq!(img, back);

        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"LABF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 0);
        assert_eq!(bytes.len(), 16 + 18 * 4);
    }

    #[test]
    fn truncated_labf_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.labf");
        let img = LabImage::new(2, 2, vec![0.0; 12]).unwrap();
        write_labf(&img, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_labf(&path), Err(Error::FormatViolation(_))));
    }
}
