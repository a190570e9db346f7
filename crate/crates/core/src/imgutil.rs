//! Small deterministic image helpers shared by the data pipeline and the
//! evaluation harness: bilinear resize, crop/paste, PNG round-trips, and a
//! box-outline overlay.

use crate::error::{FicgenError, Result};
use crate::layout::BBox;
use crate::num::Real;
use ndarray::Array3;
use std::path::Path;

/// Bilinear resize of a `[C,H,W]` image.
pub fn resize_bilinear<F: Real>(img: &Array3<F>, out_h: usize, out_w: usize) -> Array3<F> {
    let (c, h, w) = img.dim();
    assert!(out_h >= 1 && out_w >= 1 && h >= 1 && w >= 1);
    let mut out = Array3::<F>::zeros((c, out_h, out_w));
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oi in 0..out_h {
        // pixel-center alignment
        let fy = ((oi as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for oj in 0..out_w {
            let fx = ((oj as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for k in 0..c {
                let v00 = img[[k, y0, x0]].as_f64();
                let v01 = img[[k, y0, x1]].as_f64();
                let v10 = img[[k, y1, x0]].as_f64();
                let v11 = img[[k, y1, x1]].as_f64();
                let top = v00 * (1.0 - wx) + v01 * wx;
                let bot = v10 * (1.0 - wx) + v11 * wx;
                out[[k, oi, oj]] = F::of(top * (1.0 - wy) + bot * wy);
            }
        }
    }
    out
}

/// Extract the pixel rectangle of a normalized box.
pub fn crop_box<F: Real>(img: &Array3<F>, bbox: &BBox) -> Array3<F> {
    let (c, h, w) = img.dim();
    let (r0, c0, rh, cw) = bbox.pixel_rect(h, w);
    let mut out = Array3::<F>::zeros((c, rh, cw));
    for k in 0..c {
        for i in 0..rh {
            for j in 0..cw {
                out[[k, i, j]] = img[[k, r0 + i, c0 + j]];
            }
        }
    }
    out
}

/// Crop a box and resize it to a canonical square.
pub fn crop_box_resized<F: Real>(img: &Array3<F>, bbox: &BBox, size: usize) -> Array3<F> {
    resize_bilinear(&crop_box(img, bbox), size, size)
}

/// Paste `patch` over the pixel rectangle of `bbox`, resizing to fit.
pub fn paste_box<F: Real>(canvas: &mut Array3<F>, patch: &Array3<F>, bbox: &BBox) {
    let (c, h, w) = canvas.dim();
    let (r0, c0, rh, cw) = bbox.pixel_rect(h, w);
    let resized = if patch.dim().1 == rh && patch.dim().2 == cw {
        patch.clone()
    } else {
        resize_bilinear(patch, rh, cw)
    };
    for k in 0..c.min(resized.dim().0) {
        for i in 0..rh {
            for j in 0..cw {
                canvas[[k, r0 + i, c0 + j]] = resized[[k, i, j]];
            }
        }
    }
}

/// Zero out the pixel rectangle of a box.
pub fn zero_box<F: Real>(canvas: &mut Array3<F>, bbox: &BBox) {
    let (c, h, w) = canvas.dim();
    let (r0, c0, rh, cw) = bbox.pixel_rect(h, w);
    for k in 0..c {
        for i in 0..rh {
            for j in 0..cw {
                canvas[[k, r0 + i, c0 + j]] = F::zero();
            }
        }
    }
}

/// Save a `[3,H,W]` image in `[0,1]` as an 8-bit PNG. Deterministic.
pub fn save_png<F: Real>(img: &Array3<F>, path: &Path) -> Result<()> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(FicgenError::ShapeMismatch(format!(
            "save_png expects 3 channels, got {c}"
        )));
    }
    let mut buf = vec![0u8; h * w * 3];
    for i in 0..h {
        for j in 0..w {
            for k in 0..3 {
                let v = img[[k, i, j]].as_f64().clamp(0.0, 1.0);
                buf[(i * w + j) * 3 + k] = (v * 255.0).round() as u8;
            }
        }
    }
    let im = image::RgbImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| FicgenError::ShapeMismatch("png buffer".into()))?;
    im.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| FicgenError::Dataset(format!("saving {path:?}: {e}")))?;
    Ok(())
}

/// Load an 8-bit RGB PNG into `[3,H,W]` in `[0,1]`.
pub fn load_png<F: Real>(path: &Path) -> Result<Array3<F>> {
    let im = image::open(path)
        .map_err(|e| FicgenError::Dataset(format!("loading {path:?}: {e}")))?
        .to_rgb8();
    let (w, h) = im.dimensions();
    let mut out = Array3::<F>::zeros((3, h as usize, w as usize));
    for (x, y, px) in im.enumerate_pixels() {
        for k in 0..3 {
            out[[k, y as usize, x as usize]] = F::of(px.0[k] as f64 / 255.0);
        }
    }
    Ok(out)
}

/// Draw 1-px box outlines (in-place) for sample overlays.
pub fn draw_box_outline<F: Real>(img: &mut Array3<F>, bbox: &BBox, rgb: [f64; 3]) {
    let (_c, h, w) = img.dim();
    let (r0, c0, rh, cw) = bbox.pixel_rect(h, w);
    let (r1, c1) = (r0 + rh - 1, c0 + cw - 1);
    for j in c0..=c1 {
        for k in 0..3 {
            img[[k, r0, j]] = F::of(rgb[k]);
            img[[k, r1, j]] = F::of(rgb[k]);
        }
    }
    for i in r0..=r1 {
        for k in 0..3 {
            img[[k, i, c0]] = F::of(rgb[k]);
            img[[k, i, c1]] = F::of(rgb[k]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_constant_preserves_value() {
        let img = Array3::<f64>::from_elem((3, 7, 5), 0.42);
        let out = resize_bilinear(&img, 13, 11);
        for v in out.iter() {
            assert!((v - 0.42).abs() < 1e-12);
        }
    }

    #[test]
    fn crop_paste_roundtrip_support() {
        let mut canvas = Array3::<f64>::zeros((3, 16, 16));
        let patch = Array3::<f64>::from_elem((3, 4, 4), 1.0);
        let bbox = BBox::new(0.25, 0.25, 0.5, 0.5);
        paste_box(&mut canvas, &patch, &bbox);
        let crop = crop_box(&canvas, &bbox);
        assert_eq!(crop.dim(), (3, 4, 4));
        assert!(crop.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let total: f64 = canvas.iter().sum();
        assert!((total - 3.0 * 16.0).abs() < 1e-9, "support limited to the box");
    }

    #[test]
    fn png_roundtrip_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let img = Array3::<f32>::from_shape_fn((3, 9, 9), |(k, i, j)| {
            ((k * 31 + i * 7 + j) % 255) as f32 / 255.0
        });
        save_png(&img, &path).unwrap();
        let back = load_png::<f32>(&path).unwrap();
        for (a, b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1.0 / 255.0 + 1e-6);
        }
    }
}
