//! Video frontend: lip-box cropping with landmark remapping, [-1, 1]
//! channel normalization and sliding-window sampling.
//!
//! Coordinate conventions: a landmark (x, y) names the center of pixel
//! column x, row y; crop boxes live in continuous coordinates where pixel
//! (c, r) spans [c, c+1) x [r, r+1). Bilinear sampling clamps at the edges.

use crate::{Error, Result};
use lipsynth_grad::Tensor;

pub const LANDMARK_POINTS: usize = 20;
pub const CROP_MARGIN: f64 = 0.10;

/// Map [0, 1] intensities to the network's [-1, 1] range (mean 0.5,
/// std 0.5 per channel).
pub fn normalize(x: &Tensor) -> Tensor {
    x.map(|v| (v - 0.5) / 0.5)
}

pub fn denormalize(z: &Tensor) -> Tensor {
    z.map(|v| v * 0.5 + 0.5)
}

fn bilinear_at(frame: &Tensor, c: usize, x: f64, y: f64) -> f64 {
    let (ch, h, w) = (frame.shape()[0], frame.shape()[1], frame.shape()[2]);
    debug_assert!(c < ch);
    let u = x - 0.5;
    let v = y - 0.5;
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let xi = |i: f64| (i.max(0.0) as usize).min(w - 1);
    let yi = |i: f64| (i.max(0.0) as usize).min(h - 1);
    let d = frame.data();
    let at = |yy: usize, xx: usize| d[c * h * w + yy * w + xx];
    let p00 = at(yi(y0), xi(x0));
    let p01 = at(yi(y0), xi(x0 + 1.0));
    let p10 = at(yi(y0 + 1.0), xi(x0));
    let p11 = at(yi(y0 + 1.0), xi(x0 + 1.0));
    p00 * (1.0 - fx) * (1.0 - fy) + p01 * fx * (1.0 - fy) + p10 * (1.0 - fx) * fy + p11 * fx * fy
}

/// Continuous crop box, later mapped onto the 64x64 output grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

/// Crop box around a landmark set: bounding box expanded by
/// `CROP_MARGIN` x diagonal on every side, clamped to the image.
pub fn landmark_crop_box(landmarks: &Tensor, img_h: usize, img_w: usize) -> Result<CropBox> {
    let shape = landmarks.shape();
    if shape.len() != 2 || shape[1] != 2 {
        return Err(Error::invalid("landmarks must be [P, 2]"));
    }
    let d = landmarks.data();
    let mut min_x = f64::INFINITY;
    let mut max_x = f64::NEG_INFINITY;
    let mut min_y = f64::INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    for p in 0..shape[0] {
        min_x = min_x.min(d[p * 2]);
        max_x = max_x.max(d[p * 2]);
        min_y = min_y.min(d[p * 2 + 1]);
        max_y = max_y.max(d[p * 2 + 1]);
    }
    let (bw, bh) = (max_x - min_x, max_y - min_y);
    if !(bw > 0.0 && bh > 0.0) {
        return Err(Error::invalid("degenerate landmark bounding box (zero area)"));
    }
    let margin = CROP_MARGIN * bw.hypot(bh);
    Ok(CropBox {
        x0: (min_x + 0.5 - margin).max(0.0),
        y0: (min_y + 0.5 - margin).max(0.0),
        x1: (max_x + 0.5 + margin).min(img_w as f64),
        y1: (max_y + 0.5 + margin).min(img_h as f64),
    })
}

/// Resample the box region of `frame` ([C, H, W], [0, 1] intensities) onto
/// a 64x64 grid, normalize to [-1, 1], and remap `landmarks` into the crop's
/// coordinates.
pub fn crop_and_normalize(
    frame: &Tensor,
    landmarks: &Tensor,
    the_box: CropBox,
) -> Result<(Tensor, Tensor)> {
    let shape = frame.shape();
    if shape.len() != 3 {
        return Err(Error::invalid("frame must be [C, H, W]"));
    }
    let chans = shape[0];
    let (bw, bh) = (the_box.x1 - the_box.x0, the_box.y1 - the_box.y0);
    if !(bw > 0.0 && bh > 0.0) {
        return Err(Error::invalid("degenerate crop box (zero area)"));
    }
    let mut out = Vec::with_capacity(chans * 64 * 64);
    for c in 0..chans {
        for r in 0..64 {
            for q in 0..64 {
                let sx = the_box.x0 + (q as f64 + 0.5) * bw / 64.0;
                let sy = the_box.y0 + (r as f64 + 0.5) * bh / 64.0;
                out.push(bilinear_at(frame, c, sx, sy));
            }
        }
    }
    let cropped = normalize(&Tensor::new(&[chans, 64, 64], out));
    let d = landmarks.data();
    let mut remapped = Vec::with_capacity(d.len());
    for p in 0..landmarks.shape()[0] {
        remapped.push((d[p * 2] + 0.5 - the_box.x0) * 64.0 / bw - 0.5);
        remapped.push((d[p * 2 + 1] + 0.5 - the_box.y0) * 64.0 / bh - 0.5);
    }
    Ok((cropped, Tensor::new(&[landmarks.shape()[0], 2], remapped)))
}

/// Start indices of 16-frame windows with the given overlap; a trailing
/// partial window is dropped.
pub fn sliding_windows(video_len: usize, window: usize, overlap: usize) -> Result<Vec<usize>> {
    if window == 0 || overlap >= window {
        return Err(Error::invalid("need 0 <= overlap < window"));
    }
    let stride = window - overlap;
    let mut starts = Vec::new();
    let mut s = 0;
    while s + window <= video_len {
        starts.push(s);
        s += stride;
    }
    Ok(starts)
}

/// Source of per-frame lip landmarks. The synthetic corpus provides an
/// analytic implementation; real data would adapt an external detector's
/// output files.
pub trait LandmarkSource {
    /// frames: [T, C, H, W] in [0, 1]; returns [T, LANDMARK_POINTS, 2].
    fn landmarks(&self, frames: &Tensor) -> Result<Tensor>;
}

/// Adapter for landmarks produced by an external detector and saved as a
/// tensor file next to the video frames.
pub struct StoredLandmarks(pub Tensor);

impl LandmarkSource for StoredLandmarks {
    fn landmarks(&self, frames: &Tensor) -> Result<Tensor> {
        let t = frames.shape()[0];
        let shape = self.0.shape();
        if shape.len() != 3 || shape[0] != t || shape[1] != LANDMARK_POINTS || shape[2] != 2 {
            return Err(Error::invalid(format!(
                "stored landmarks shaped {shape:?}, expected [{t}, {LANDMARK_POINTS}, 2]"
            )));
        }
        Ok(self.0.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn normalize_roundtrip_and_gray_zero() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn(&[3, 8, 8], |_| rng.gen_range(0.0..1.0));
        let back = denormalize(&normalize(&x));
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let gray = Tensor::full(&[3, 4, 4], 0.5);
        assert!(normalize(&gray).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_box_remaps_landmarks_identically() {
        let frame = Tensor::full(&[3, 64, 64], 0.25);
        let lms = Tensor::new(&[2, 2], vec![10.0, 20.0, 50.0, 40.0]);
        let b = CropBox { x0: 0.0, y0: 0.0, x1: 64.0, y1: 64.0 };
        let (crop, remapped) = crop_and_normalize(&frame, &lms, b).unwrap();
        assert_eq!(crop.shape(), &[3, 64, 64]);
        for (a, b) in remapped.data().iter().zip(lms.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn remap_matches_affine_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let frame = Tensor::from_fn(&[3, 96, 120], |_| rng.gen_range(0.0..1.0));
        let lms = Tensor::from_fn(&[20, 2], |i| {
            if i % 2 == 0 {
                rng.gen_range(30.0..90.0)
            } else {
                rng.gen_range(20.0..70.0)
            }
        });
        let b = landmark_crop_box(&lms, 96, 120).unwrap();
        let (_, remapped) = crop_and_normalize(&frame, &lms, b).unwrap();
        for p in 0..20 {
            let lx = lms.data()[p * 2];
            let ly = lms.data()[p * 2 + 1];
            let ex = (lx + 0.5 - b.x0) / (b.x1 - b.x0) * 64.0 - 0.5;
            let ey = (ly + 0.5 - b.y0) / (b.y1 - b.y0) * 64.0 - 0.5;
            assert!((remapped.data()[p * 2] - ex).abs() < 1e-6);
            assert!((remapped.data()[p * 2 + 1] - ey).abs() < 1e-6);
        }
    }

    #[test]
    fn degenerate_box_rejected() {
        let lms = Tensor::new(&[3, 2], vec![5.0, 7.0, 5.0, 7.0, 5.0, 7.0]);
        assert!(landmark_crop_box(&lms, 64, 64).is_err());
    }

    #[test]
    fn bilinear_reproduces_affine_images() {
        // an affine intensity field is invariant under bilinear resampling
        let frame = Tensor::from_fn(&[1, 32, 32], |i| {
            0.2 + 0.01 * ((i / 32) % 32) as f64 + 0.005 * (i % 32) as f64
        });
        let lms = Tensor::new(&[2, 2], vec![8.0, 8.0, 23.0, 23.0]);
        let b = landmark_crop_box(&lms, 32, 32).unwrap();
        let (crop, _) = crop_and_normalize(&frame, &lms, b).unwrap();
        let crop = denormalize(&crop);
        let bw = b.x1 - b.x0;
        let bh = b.y1 - b.y0;
        for r in 10..54 {
            for q in 10..54 {
                let sx = b.x0 + (q as f64 + 0.5) * bw / 64.0 - 0.5;
                let sy = b.y0 + (r as f64 + 0.5) * bh / 64.0 - 0.5;
                let want = 0.2 + 0.01 * sy + 0.005 * sx;
                let got = crop.data()[r * 64 + q];
                assert!((got - want).abs() < 1e-9, "at ({r},{q}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn window_enumeration() {
        assert_eq!(sliding_windows(75, 16, 8).unwrap(), vec![0, 8, 16, 24, 32, 40, 48, 56]);
        assert_eq!(sliding_windows(16, 16, 8).unwrap(), vec![0]);
        assert!(sliding_windows(15, 16, 8).unwrap().is_empty());
        assert!(sliding_windows(64, 16, 16).is_err());
    }

    #[test]
    fn window_starts_form_arithmetic_sequence() {
        let starts = sliding_windows(200, 16, 8).unwrap();
        for w in starts.windows(2) {
            assert_eq!(w[1] - w[0], 8);
        }
        assert_eq!(starts.len(), (200 - 16) / 8 + 1);
    }
}
