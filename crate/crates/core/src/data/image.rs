//! Image decoding and preprocessing: bilinear resize (align-corners
//! false), [0,1] scaling, and per-channel normalization with mean 0.5 and
//! std 0.5.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const NORM_MEAN: f64 = 0.5;
pub const NORM_STD: f64 = 0.5;

/// Decodes a raster file to interleaved RGB bytes plus (width, height).
pub fn decode_image(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let img = ::image::open(path)
        .map_err(|e| Error::Data(format!("cannot decode image {}: {e}", path.display())))?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok((rgb.into_raw(), w as usize, h as usize))
}

fn axis_map(out_n: usize, in_n: usize) -> Vec<(usize, usize, f64)> {
    // Align-corners-false sampling: source = (dst + 0.5) * in/out - 0.5,
    // clamped to the valid range before splitting into floor and weight.
    (0..out_n)
        .map(|d| {
            let sc = (d as f64 + 0.5) * (in_n as f64 / out_n as f64) - 0.5;
            let sc = sc.clamp(0.0, (in_n - 1) as f64);
            let i0 = sc.floor() as usize;
            let i1 = (i0 + 1).min(in_n - 1);
            (i0, i1, sc - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of planar channel-major data. Interpolation runs in
/// 64-bit regardless of the storage type.
pub fn resize_bilinear<T: Scalar>(
    src: &[T],
    channels: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<T>> {
    if in_h == 0 || in_w == 0 || out_h == 0 || out_w == 0 || channels == 0 {
        return Err(Error::contract("resize", "all extents must be positive"));
    }
    if src.len() != channels * in_h * in_w {
        return Err(Error::contract(
            "resize",
            format!("{} values for {}x{}x{}", src.len(), channels, in_h, in_w),
        ));
    }
    let xs = axis_map(out_w, in_w);
    let ys = axis_map(out_h, in_h);
    let mut out = Vec::with_capacity(channels * out_h * out_w);
    for c in 0..channels {
        let plane = &src[c * in_h * in_w..(c + 1) * in_h * in_w];
        for &(y0, y1, ty) in &ys {
            for &(x0, x1, tx) in &xs {
                let v00 = plane[y0 * in_w + x0].to_f64();
                let v01 = plane[y0 * in_w + x1].to_f64();
                let v10 = plane[y1 * in_w + x0].to_f64();
                let v11 = plane[y1 * in_w + x1].to_f64();
                let top = v00 + (v01 - v00) * tx;
                let bottom = v10 + (v11 - v10) * tx;
                out.push(T::from_f64(top + (bottom - top) * ty));
            }
        }
    }
    Ok(out)
}

/// Interleaved RGB bytes -> normalized 3 x size x size tensor.
pub fn preprocess<T: Scalar>(rgb: &[u8], width: usize, height: usize, size: usize) -> Result<Tensor<T>> {
    if width == 0 || height == 0 || size == 0 {
        return Err(Error::Data("empty image or target size".to_string()));
    }
    if rgb.len() != 3 * width * height {
        return Err(Error::Data(format!(
            "{} bytes for a {}x{} RGB image (expected {})",
            rgb.len(),
            width,
            height,
            3 * width * height
        )));
    }
    let mut planar = vec![0f64; 3 * height * width];
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                planar[c * height * width + y * width + x] = rgb[(y * width + x) * 3 + c] as f64 / 255.0;
            }
        }
    }
    let resized = resize_bilinear(&planar, 3, height, width, size, size)?;
    let data: Vec<T> = resized.into_iter().map(|v| T::from_f64((v - NORM_MEAN) / NORM_STD)).collect();
    Tensor::from_vec(vec![3, size, size], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_when_extents_match() {
        let src: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let out = resize_bilinear(&src, 1, 3, 4, 3, 4).unwrap();
        assert_eq!(out, src);
    }

    #[test]
    fn checkerboard_two_by_two_to_four_by_four() {
        // The bilinear surface over [[0,1],[1,0]] is f(y,x) = x + y - 2xy;
        // align-corners-false sample points on each axis land at
        // 0, 0.25, 0.75, 1 after clamping.
        let src = vec![0.0, 1.0, 1.0, 0.0];
        let out = resize_bilinear(&src, 1, 2, 2, 4, 4).unwrap();
        let expected = [
            0.0, 0.25, 0.75, 1.0,
            0.25, 0.375, 0.625, 0.75,
            0.75, 0.625, 0.375, 0.25,
            1.0, 0.75, 0.25, 0.0,
        ];
        for (got, want) in out.iter().zip(expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn constant_image_survives_any_resize() {
        let src = vec![0.7f64; 5 * 7];
        let out = resize_bilinear(&src, 1, 5, 7, 11, 3).unwrap();
        assert!(out.iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn downscale_averages_neighbors() {
        // 4x4 with distinct quadrants down to 2x2: each output pixel
        // samples the center of its quadrant exactly (source coords 0.5
        // and 2.5), so it averages the four quadrant values.
        let src = vec![
            0.0, 0.0, 8.0, 8.0,
            0.0, 0.0, 8.0, 8.0,
            2.0, 2.0, 4.0, 4.0,
            2.0, 2.0, 4.0, 4.0,
        ];
        let out = resize_bilinear(&src, 1, 4, 4, 2, 2).unwrap();
        assert_eq!(out, vec![0.0, 8.0, 2.0, 4.0]);
    }

    #[test]
    fn preprocess_normalization_endpoints() {
        // White maps to (1.0 - 0.5)/0.5 = 1 and black to -1.
        let rgb = vec![255u8; 3 * 2 * 2];
        let t = preprocess::<f64>(&rgb, 2, 2, 4).unwrap();
        assert_eq!(t.shape(), &[3, 4, 4]);
        assert!(t.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let dark = vec![0u8; 3 * 2 * 2];
        let t = preprocess::<f64>(&dark, 2, 2, 2).unwrap();
        assert!(t.data().iter().all(|&v| (v + 1.0).abs() < 1e-12));
    }

    #[test]
    fn preprocess_output_stays_in_normalized_range() {
        let rgb: Vec<u8> = (0..3 * 6 * 5).map(|i| (i * 37 % 256) as u8).collect();
        let t = preprocess::<f64>(&rgb, 5, 6, 8).unwrap();
        assert!(t.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn preprocess_rejects_wrong_byte_count() {
        assert!(preprocess::<f64>(&[0u8; 5], 2, 2, 4).is_err());
    }

    #[test]
    fn decode_rejects_non_image_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.png");
        std::fs::write(&path, b"not an image").unwrap();
        let err = decode_image(&path);
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn decode_roundtrips_a_written_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut buf = ::image::RgbImage::new(3, 2);
        for (i, p) in buf.pixels_mut().enumerate() {
            *p = ::image::Rgb([(i * 40) as u8, 10, 200]);
        }
        buf.save(&path).unwrap();
        let (rgb, w, h) = decode_image(&path).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(rgb[0], 0);
        assert_eq!(rgb[3], 40);
        assert_eq!(rgb[2], 200);
    }
}
