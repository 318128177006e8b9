//! Training-time augmentation: replication padding by S/8 per side, a
//! random S x S crop, and independent 50% horizontal/vertical flips.
//! Randomness comes from per-sample streams derived from
//! (seed, epoch, sample id), so results never depend on worker order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic per-sample stream for augmentation draws.
pub fn sample_rng(seed: u64, epoch: u64, id: &str) -> ChaCha8Rng {
    let mut buf = Vec::with_capacity(16 + id.len());
    buf.extend_from_slice(&seed.to_le_bytes());
    buf.extend_from_slice(&epoch.to_le_bytes());
    buf.extend_from_slice(id.as_bytes());
    ChaCha8Rng::seed_from_u64(fnv1a(&buf))
}

/// Deterministic per-epoch stream for shuffling.
pub fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut buf = Vec::with_capacity(16);
    buf.extend_from_slice(&seed.to_le_bytes());
    buf.extend_from_slice(&epoch.to_le_bytes());
    ChaCha8Rng::seed_from_u64(fnv1a(&buf))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentParams {
    pub crop_y: usize,
    pub crop_x: usize,
    pub hflip: bool,
    pub vflip: bool,
}

/// Draw order is fixed: crop_y, crop_x, hflip, vflip.
pub fn draw_params(size: usize, rng: &mut impl Rng) -> AugmentParams {
    let pad = size / 8;
    AugmentParams {
        crop_y: rng.gen_range(0..=2 * pad),
        crop_x: rng.gen_range(0..=2 * pad),
        hflip: rng.gen_bool(0.5),
        vflip: rng.gen_bool(0.5),
    }
}

fn expect_chw<T: Scalar>(img: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    if img.rank() != 3 {
        return Err(Error::shape(op, format!("expected (C, H, W), got {:?}", img.shape())));
    }
    Ok((img.shape()[0], img.shape()[1], img.shape()[2]))
}

/// Pads each spatial side by `pad`, repeating the edge pixel.
pub fn pad_replicate<T: Scalar>(img: &Tensor<T>, pad: usize) -> Result<Tensor<T>> {
    let (c, h, w) = expect_chw(img, "pad_replicate")?;
    let (nh, nw) = (h + 2 * pad, w + 2 * pad);
    let src = img.data();
    let mut out = Vec::with_capacity(c * nh * nw);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..nh {
            let sy = y.saturating_sub(pad).min(h - 1);
            for x in 0..nw {
                let sx = x.saturating_sub(pad).min(w - 1);
                out.push(plane[sy * w + sx]);
            }
        }
    }
    Tensor::from_vec(vec![c, nh, nw], out)
}

/// Crops a (crop_h, crop_w) window with its top-left corner at (y, x).
pub fn crop<T: Scalar>(img: &Tensor<T>, y: usize, x: usize, crop_h: usize, crop_w: usize) -> Result<Tensor<T>> {
    let (c, h, w) = expect_chw(img, "crop")?;
    if y + crop_h > h || x + crop_w > w || crop_h == 0 || crop_w == 0 {
        return Err(Error::contract(
            "crop",
            format!("window {}x{} at ({}, {}) exceeds {}x{}", crop_h, crop_w, y, x, h, w),
        ));
    }
    let src = img.data();
    let mut out = Vec::with_capacity(c * crop_h * crop_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for yy in 0..crop_h {
            let row = &plane[(y + yy) * w + x..(y + yy) * w + x + crop_w];
            out.extend_from_slice(row);
        }
    }
    Tensor::from_vec(vec![c, crop_h, crop_w], out)
}

/// Mirrors along the width axis.
pub fn flip_h<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = expect_chw(img, "flip")?;
    let src = img.data();
    let mut out = Vec::with_capacity(src.len());
    for ch in 0..c {
        for y in 0..h {
            let row = &src[(ch * h + y) * w..(ch * h + y + 1) * w];
            out.extend(row.iter().rev());
        }
    }
    Tensor::from_vec(vec![c, h, w], out)
}

/// Mirrors along the height axis.
pub fn flip_v<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = expect_chw(img, "flip")?;
    let src = img.data();
    let mut out = Vec::with_capacity(src.len());
    for ch in 0..c {
        for y in (0..h).rev() {
            let row = &src[(ch * h + y) * w..(ch * h + y + 1) * w];
            out.extend_from_slice(row);
        }
    }
    Tensor::from_vec(vec![c, h, w], out)
}

/// Applies fixed parameters to a square (C, S, S) image.
pub fn apply<T: Scalar>(img: &Tensor<T>, p: &AugmentParams) -> Result<Tensor<T>> {
    let (_, h, w) = expect_chw(img, "augment")?;
    if h != w {
        return Err(Error::shape("augment", format!("expected a square image, got {h}x{w}")));
    }
    let padded = pad_replicate(img, h / 8)?;
    let mut out = crop(&padded, p.crop_y, p.crop_x, h, w)?;
    if p.hflip {
        out = flip_h(&out)?;
    }
    if p.vflip {
        out = flip_v(&out)?;
    }
    Ok(out)
}

/// Draws parameters from `rng` and applies them.
pub fn augment<T: Scalar>(img: &Tensor<T>, rng: &mut impl Rng) -> Result<Tensor<T>> {
    let (_, h, _) = expect_chw(img, "augment")?;
    let p = draw_params(h, rng);
    apply(img, &p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, s: usize) -> Tensor<f64> {
        Tensor::from_fn(vec![c, s, s], |i| i as f64)
    }

    #[test]
    fn flips_are_involutions() {
        let img = ramp(3, 8);
        assert_eq!(flip_h(&flip_h(&img).unwrap()).unwrap().data(), img.data());
        assert_eq!(flip_v(&flip_v(&img).unwrap()).unwrap().data(), img.data());
    }

    #[test]
    fn flip_h_reverses_rows() {
        let img = Tensor::from_vec(vec![1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let f = flip_h(&img).unwrap();
        assert_eq!(f.data(), &[3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
        let v = flip_v(&img).unwrap();
        assert_eq!(v.data(), &[4.0, 5.0, 6.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn pad_replicates_edges() {
        let img = Tensor::from_vec(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = pad_replicate(&img, 1).unwrap();
        assert_eq!(p.shape(), &[1, 4, 4]);
        assert_eq!(
            p.data(),
            &[
                1.0, 1.0, 2.0, 2.0,
                1.0, 1.0, 2.0, 2.0,
                3.0, 3.0, 4.0, 4.0,
                3.0, 3.0, 4.0, 4.0,
            ]
        );
    }

    #[test]
    fn centered_crop_after_padding_is_identity() {
        let img = ramp(3, 16);
        let pad = 16 / 8;
        let p = AugmentParams { crop_y: pad, crop_x: pad, hflip: false, vflip: false };
        let out = apply(&img, &p).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn augment_preserves_shape() {
        let img = ramp(3, 32);
        let mut rng = sample_rng(7, 0, "x");
        let out = augment(&img, &mut rng).unwrap();
        assert_eq!(out.shape(), img.shape());
    }

    #[test]
    fn crop_offsets_stay_within_quarter_size() {
        let mut rng = sample_rng(1, 2, "bounds");
        for _ in 0..10_000 {
            let p = draw_params(32, &mut rng);
            assert!(p.crop_y <= 8);
            assert!(p.crop_x <= 8);
        }
    }

    #[test]
    fn derived_streams_are_deterministic_and_distinct() {
        let a = augment(&ramp(3, 16), &mut sample_rng(9, 4, "id-1")).unwrap();
        let b = augment(&ramp(3, 16), &mut sample_rng(9, 4, "id-1")).unwrap();
        assert_eq!(a.data(), b.data());
        let mut r1 = sample_rng(9, 4, "id-1");
        let mut r2 = sample_rng(9, 4, "id-2");
        let mut r3 = sample_rng(9, 5, "id-1");
        let draws1: Vec<u64> = (0..4).map(|_| r1.gen()).collect();
        let draws2: Vec<u64> = (0..4).map(|_| r2.gen()).collect();
        let draws3: Vec<u64> = (0..4).map(|_| r3.gen()).collect();
        assert_ne!(draws1, draws2);
        assert_ne!(draws1, draws3);
    }

    #[test]
    fn crop_rejects_out_of_bounds_windows() {
        let img = ramp(1, 4);
        assert!(crop(&img, 3, 0, 2, 2).is_err());
        assert!(crop(&img, 0, 0, 5, 2).is_err());
    }
}
