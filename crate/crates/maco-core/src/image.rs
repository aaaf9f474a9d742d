//! Image buffers and pixel-level utilities.
//!
//! Images are `[C, H, W]` arrays of `f64` with the nominal value range
//! `[0, 1]`. Intermediate buffers produced by spectral reconstruction may
//! leave that range; consumers that need valid pixels clamp explicitly.

use ndarray::{Array2, Array3};
use std::path::Path;

use crate::error::{Error, Result};

/// `[C, H, W]` pixel buffer.
pub type Image = Array3<f64>;

/// (channels, height, width) of an image.
pub fn image_shape(img: &Image) -> (usize, usize, usize) {
    let s = img.shape();
    (s[0], s[1], s[2])
}

pub fn all_finite(img: &Image) -> bool {
    img.iter().all(|v| v.is_finite())
}

/// Clamp to [0, 1], returning the clamped image and a pass-through gradient
/// mask (1 where the input was within range, 0 where it was clipped).
pub fn clamp01_with_mask(img: &Image) -> (Image, Image) {
    let clamped = img.mapv(|v| v.clamp(0.0, 1.0));
    let mask = img.mapv(|v| if (0.0..=1.0).contains(&v) { 1.0 } else { 0.0 });
    (clamped, mask)
}

pub fn clamp01(img: &Image) -> Image {
    img.mapv(|v| v.clamp(0.0, 1.0))
}

/// Fraction of pixels that fall outside [0, 1].
pub fn out_of_range_fraction(img: &Image) -> f64 {
    let total = img.len();
    if total == 0 {
        return 0.0;
    }
    let out = img.iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
    out as f64 / total as f64
}

/// Bilinear resize with half-pixel sample centers and edge clamping.
pub fn bilinear_resize(img: &Image, out_h: usize, out_w: usize) -> Image {
    let (c, h, w) = image_shape(img);
    if h == out_h && w == out_w {
        return img.clone();
    }
    let mut out = Image::zeros((c, out_h, out_w));
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for i in 0..out_h {
        let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for j in 0..out_w {
            let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ch in 0..c {
                let v00 = img[[ch, y0, x0]];
                let v01 = img[[ch, y0, x1]];
                let v10 = img[[ch, y1, x0]];
                let v11 = img[[ch, y1, x1]];
                out[[ch, i, j]] = v00 * (1.0 - wy) * (1.0 - wx)
                    + v01 * (1.0 - wy) * wx
                    + v10 * wy * (1.0 - wx)
                    + v11 * wy * wx;
            }
        }
    }
    out
}

/// Bilinear resize of a single-channel map.
pub fn bilinear_resize_plane(plane: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = plane.dim();
    let img = plane
        .clone()
        .into_shape_with_order((1, h, w))
        .expect("plane reshape");
    let resized = bilinear_resize(&img, out_h, out_w);
    resized
        .into_shape_with_order((out_h, out_w))
        .expect("plane reshape")
}

/// Display mapping for export: identity when the image already lies in
/// [0, 1], otherwise the affine map onto [0, 1] that preserves relative
/// contrast (a pure gain plus offset, so spectral energy ratios survive).
pub fn display_normalize(img: &Image) -> Image {
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    for &v in img.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    if span <= 0.0 {
        return img.clone();
    }
    img.mapv(|v| (v - lo) / span)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write an image as 8-bit RGBA PNG. The alpha plane, when given, becomes
/// the alpha channel; otherwise the image is opaque. Single-channel images
/// are replicated to gray, three-channel images map to RGB.
pub fn save_png_rgba(path: &Path, img: &Image, alpha: Option<&Array2<f64>>) -> Result<()> {
    let (c, h, w) = image_shape(img);
    if c != 1 && c != 3 {
        return Err(Error::invalid_input(format!(
            "PNG export expects 1 or 3 channels, got {c}"
        )));
    }
    if let Some(a) = alpha {
        if a.dim() != (h, w) {
            return Err(Error::invalid_input("alpha plane size mismatch"));
        }
    }
    let shown = display_normalize(img);
    let mut buf = Vec::with_capacity(h * w * 4);
    for i in 0..h {
        for j in 0..w {
            let (r, g, b) = if c == 3 {
                (shown[[0, i, j]], shown[[1, i, j]], shown[[2, i, j]])
            } else {
                let v = shown[[0, i, j]];
                (v, v, v)
            };
            let a = alpha.map_or(1.0, |p| p[[i, j]]);
            buf.extend_from_slice(&[to_u8(r), to_u8(g), to_u8(b), to_u8(a)]);
        }
    }
    let encoded: image::RgbaImage = image::ImageBuffer::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| Error::invalid_input("PNG buffer construction failed"))?;
    encoded
        .save(path)
        .map_err(|e| Error::invalid_input(format!("PNG write failed: {e}")))?;
    Ok(())
}

/// Load an image file as an RGB `[3, H, W]` buffer in [0, 1].
pub fn load_image_rgb(path: &Path) -> Result<Image> {
    let decoded = image::open(path)
        .map_err(|e| Error::invalid_input(format!("cannot read image {}: {e}", path.display())))?
        .into_rgb8();
    let (w, h) = decoded.dimensions();
    let mut img = Image::zeros((3, h as usize, w as usize));
    for (x, y, px) in decoded.enumerate_pixels() {
        for ch in 0..3 {
            img[[ch, y as usize, x as usize]] = px.0[ch] as f64 / 255.0;
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_when_same_size() {
        let img = Image::from_shape_fn((3, 4, 4), |(c, i, j)| (c + i * 4 + j) as f64);
        let out = bilinear_resize(&img, 4, 4);
        assert_eq!(img, out);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let img = Image::from_elem((3, 8, 8), 0.7);
        let out = bilinear_resize(&img, 5, 11);
        for &v in out.iter() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn display_normalize_identity_in_range() {
        let img = Image::from_shape_fn((1, 2, 2), |(_, i, j)| 0.1 + 0.2 * (i + j) as f64);
        assert_eq!(display_normalize(&img), img);
    }

    #[test]
    fn display_normalize_rescales_out_of_range() {
        let img = Image::from_shape_fn((1, 1, 3), |(_, _, j)| j as f64 * 2.0 - 1.0); // -1, 1, 3
        let out = display_normalize(&img);
        assert!((out[[0, 0, 0]] - 0.0).abs() < 1e-12);
        assert!((out[[0, 0, 2]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clamp_mask_flags_clipped_pixels() {
        let img = Image::from_shape_fn((1, 1, 3), |(_, _, j)| j as f64 - 0.5); // -0.5, 0.5, 1.5
        let (clamped, mask) = clamp01_with_mask(&img);
        assert_eq!(clamped[[0, 0, 0]], 0.0);
        assert_eq!(clamped[[0, 0, 2]], 1.0);
        assert_eq!(mask[[0, 0, 0]], 0.0);
        assert_eq!(mask[[0, 0, 1]], 1.0);
        assert_eq!(mask[[0, 0, 2]], 0.0);
        assert!((out_of_range_fraction(&img) - 2.0 / 3.0).abs() < 1e-12);
    }
}
