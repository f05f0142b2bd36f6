//! Evaluation metrics: calibrated landmark distance (Eq. 5 analog), PSNR,
//! SSIM, and a gradient-energy sharpness proxy. All of them run on plain
//! tensors outside the autodiff graph; videos are [T, C, H, W] in [0, 1]
//! and landmark sets are [T, P, 2] in pixel coordinates.

use std::fmt::Write as _;
use std::path::Path;

use crate::{Error, Result};
use lipsynth_grad::Tensor;
use serde::{Deserialize, Serialize};

/// PSNR values are capped here; identical inputs report exactly the cap.
pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

/// Landmark distance with per-frame mean-point calibration: each frame's
/// predicted landmark cloud is shifted so its centroid matches the
/// reference centroid before the pointwise distances are averaged.
pub fn lmd(real: &Tensor, fake: &Tensor) -> Result<f64> {
    let s = real.shape();
    if s.len() != 3 || s[2] != 2 || fake.shape() != s {
        return Err(Error::invalid("lmd expects matching [T, P, 2] landmark tensors"));
    }
    let (t, p) = (s[0], s[1]);
    if t == 0 || p == 0 {
        return Err(Error::invalid("lmd needs at least one frame and point"));
    }
    let (r, f) = (real.data(), fake.data());
    let mut total = 0.0;
    for k in 0..t {
        let base = k * p * 2;
        let (mut mrx, mut mry, mut mfx, mut mfy) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..p {
            mrx += r[base + 2 * i];
            mry += r[base + 2 * i + 1];
            mfx += f[base + 2 * i];
            mfy += f[base + 2 * i + 1];
        }
        let (dx, dy) = ((mrx - mfx) / p as f64, (mry - mfy) / p as f64);
        for i in 0..p {
            let ex = r[base + 2 * i] - (f[base + 2 * i] + dx);
            let ey = r[base + 2 * i + 1] - (f[base + 2 * i + 1] + dy);
            total += (ex * ex + ey * ey).sqrt();
        }
    }
    Ok(total / (t * p) as f64)
}

/// 10 log10(1 / MSE) for unit-range inputs, capped at `PSNR_CAP_DB`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() || a.numel() == 0 {
        return Err(Error::invalid("psnr expects matching non-empty tensors"));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

/// Mean SSIM of one grayscale plane pair, valid-mode 11x11 Gaussian window.
fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let win = gaussian_window();
    let half = SSIM_WINDOW / 2;
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    // separable pass over rows, then columns, for the five moment maps
    let hw = (h, w - 2 * half);
    let mut rows = vec![[0.0; 5]; h * hw.1];
    for y in 0..h {
        for x in 0..hw.1 {
            let mut m = [0.0; 5];
            for (i, wi) in win.iter().enumerate() {
                let (va, vb) = (a[y * w + x + i], b[y * w + x + i]);
                m[0] += wi * va;
                m[1] += wi * vb;
                m[2] += wi * va * va;
                m[3] += wi * vb * vb;
                m[4] += wi * va * vb;
            }
            rows[y * hw.1 + x] = m;
        }
    }
    let (oh, ow) = (h - 2 * half, hw.1);
    let mut total = 0.0;
    for y in 0..oh {
        for x in 0..ow {
            let mut m = [0.0; 5];
            for (i, wi) in win.iter().enumerate() {
                let r = rows[(y + i) * ow + x];
                for k in 0..5 {
                    m[k] += wi * r[k];
                }
            }
            let [mx, my, mxx, myy, mxy] = m;
            let (vx, vy, cov) = (mxx - mx * mx, myy - my * my, mxy - mx * my);
            let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
            let den = (mx * mx + my * my + c1) * (vx + vy + c2);
            total += num / den;
        }
    }
    total / (oh * ow) as f64
}

/// Mean SSIM over every frame and channel of two [T, C, H, W] videos.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let s = a.shape();
    if s.len() != 4 || b.shape() != s {
        return Err(Error::invalid("ssim expects matching [T, C, H, W] tensors"));
    }
    let (t, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid("ssim needs frames of at least 11 x 11"));
    }
    let plane = h * w;
    let mut total = 0.0;
    for i in 0..t * c {
        total += ssim_plane(
            &a.data()[i * plane..(i + 1) * plane],
            &b.data()[i * plane..(i + 1) * plane],
            h,
            w,
        );
    }
    Ok(total / (t * c) as f64)
}

fn luma_plane(video: &Tensor, t: usize) -> Vec<f64> {
    let s = video.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let plane = h * w;
    let base = t * c * plane;
    let d = video.data();
    if c == 3 {
        (0..plane)
            .map(|i| {
                0.299 * d[base + i] + 0.587 * d[base + plane + i] + 0.114 * d[base + 2 * plane + i]
            })
            .collect()
    } else {
        d[base..base + plane].to_vec()
    }
}

/// Sharpness proxy: mean luma gradient magnitude (forward differences).
/// Blurring strictly lowers it, which is all the ablation table needs.
pub fn sharpness(video: &Tensor) -> Result<f64> {
    let s = video.shape();
    if s.len() != 4 || (s[1] != 3 && s[1] != 1) {
        return Err(Error::invalid("sharpness expects [T, 1|3, H, W]"));
    }
    let (t, h, w) = (s[0], s[2], s[3]);
    if h < 2 || w < 2 {
        return Err(Error::invalid("sharpness needs at least 2 x 2 frames"));
    }
    let mut total = 0.0;
    for k in 0..t {
        let y = luma_plane(video, k);
        let mut acc = 0.0;
        for r in 0..h - 1 {
            for cix in 0..w - 1 {
                let dx = y[r * w + cix + 1] - y[r * w + cix];
                let dy = y[(r + 1) * w + cix] - y[r * w + cix];
                acc += (dx * dx + dy * dy).sqrt();
            }
        }
        total += acc / ((h - 1) * (w - 1)) as f64;
    }
    Ok(total / t as f64)
}

/// Extension point for external sharpness scorers (e.g. CPBD). The built-in
/// proxy is `GradientSharpness`; `Cpbd` is a declared-but-unimplemented slot
/// that reports a clear error instead of a fake number.
pub trait SharpnessPlugin {
    fn name(&self) -> &'static str;
    fn score(&self, video: &Tensor) -> Result<f64>;
}

pub struct GradientSharpness;

impl SharpnessPlugin for GradientSharpness {
    fn name(&self) -> &'static str {
        "grad"
    }
    fn score(&self, video: &Tensor) -> Result<f64> {
        sharpness(video)
    }
}

pub struct Cpbd;

impl SharpnessPlugin for Cpbd {
    fn name(&self) -> &'static str {
        "cpbd"
    }
    fn score(&self, _video: &Tensor) -> Result<f64> {
        Err(Error::Config(
            "cpbd is not implemented; use the `grad` sharpness proxy or wire in an external scorer"
                .into(),
        ))
    }
}

/// Per-clip numbers; aggregate with `MetricReport::from_clips`.
#[derive(Serialize, Deserialize, Clone, Copy, Debug)]
pub struct ClipMetrics {
    pub lmd: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub sharp_real: f64,
    pub sharp_fake: f64,
}

/// All four videos/landmark sets must describe the same clip; videos in
/// [0, 1], landmarks in pixels.
pub fn clip_metrics(
    real: &Tensor,
    fake: &Tensor,
    real_lm: &Tensor,
    fake_lm: &Tensor,
) -> Result<ClipMetrics> {
    Ok(ClipMetrics {
        lmd: lmd(real_lm, fake_lm)?,
        psnr: psnr(real, fake)?,
        ssim: ssim(real, fake)?,
        sharp_real: sharpness(real)?,
        sharp_fake: sharpness(fake)?,
    })
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct MetricReport {
    pub n_clips: usize,
    pub lmd: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub sharp_real: f64,
    pub sharp_fake: f64,
}

impl MetricReport {
    pub fn from_clips(clips: &[ClipMetrics]) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::invalid("no clips to aggregate"));
        }
        let n = clips.len() as f64;
        Ok(MetricReport {
            n_clips: clips.len(),
            lmd: clips.iter().map(|c| c.lmd).sum::<f64>() / n,
            psnr: clips.iter().map(|c| c.psnr).sum::<f64>() / n,
            ssim: clips.iter().map(|c| c.ssim).sum::<f64>() / n,
            sharp_real: clips.iter().map(|c| c.sharp_real).sum::<f64>() / n,
            sharp_fake: clips.iter().map(|c| c.sharp_fake).sum::<f64>() / n,
        })
    }

    pub const TSV_HEADER: &'static str = "label\tn_clips\tlmd\tpsnr\tssim\tsharp_real\tsharp_fake";

    pub fn tsv_row(&self, label: &str) -> String {
        format!(
            "{label}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.n_clips, self.lmd, self.psnr, self.ssim, self.sharp_real, self.sharp_fake
        )
    }

    pub fn write_tsv(path: impl AsRef<Path>, rows: &[(String, MetricReport)]) -> Result<()> {
        let mut out = String::from(Self::TSV_HEADER);
        out.push('\n');
        for (label, report) in rows {
            let _ = writeln!(out, "{}", report.tsv_row(label));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_json(path, self)
    }
}
