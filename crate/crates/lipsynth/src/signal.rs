//! Audio frontend: resampling, STFT, Slaney-style mel filterbank, the
//! 64x128 log-mel grid (LMS) and its temporal derivative.
//!
//! Framing convention: Hann window of `fft_window` samples centered at
//! `t * hop`, reflect-padded at the edges, so `window_samples / hop` frames
//! cover the clip exactly (64 frames for 0.64 s at 51200 Hz).

use crate::config::FrontendConfig;
use crate::{Error, Result};
use lipsynth_grad::Tensor;
use rustfft::{num_complex::Complex, FftPlanner};

pub const LOG_FLOOR: f64 = 1e-10;

/// Windowed-sinc resampler (Hann window, 32 taps each side). Identity when
/// the rates match.
pub fn resample(samples: &[f64], from_rate: u32, to_rate: u32) -> Vec<f64> {
    if from_rate == to_rate {
        return samples.to_vec();
    }
    let ratio = to_rate as f64 / from_rate as f64;
    let out_len = (samples.len() as f64 * ratio).round() as usize;
    // When downsampling, shift the sinc cutoff below the new Nyquist.
    let fc = ratio.min(1.0);
    let half_width = 32.0 / fc;
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let center = i as f64 / ratio;
        let lo = (center - half_width).floor().max(0.0) as usize;
        let hi = ((center + half_width).ceil() as usize).min(samples.len().saturating_sub(1));
        let mut acc = 0.0;
        for (j, &x) in samples.iter().enumerate().take(hi + 1).skip(lo) {
            let d = center - j as f64;
            let win = 0.5 + 0.5 * (std::f64::consts::PI * d / half_width).cos();
            acc += x * fc * sinc(fc * d) * win;
        }
        out.push(acc);
    }
    out
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Fit `samples` to exactly one frontend window: trims from the start when
/// longer, zero-pads at the end when shorter and `pad` is set.
pub fn exact_window(samples: &[f64], cfg: &FrontendConfig, pad: bool) -> Result<Vec<f64>> {
    let want = cfg.window_samples();
    if samples.len() == want {
        return Ok(samples.to_vec());
    }
    if samples.len() > want {
        return Ok(samples[..want].to_vec());
    }
    if !pad {
        return Err(Error::invalid(format!(
            "waveform has {} samples, expected {want} (pass pad to zero-fill)",
            samples.len()
        )));
    }
    let mut out = samples.to_vec();
    out.resize(want, 0.0);
    Ok(out)
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

fn reflect_index(i: i64, n: i64) -> usize {
    // Reflection without repeating the edge sample: -1 -> 1, n -> n-2.
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Magnitude spectrogram: rows are frames centered at `t * hop`, columns
/// the `fft_window/2 + 1` non-negative-frequency bins.
fn stft_magnitudes(samples: &[f64], cfg: &FrontendConfig, n_frames: usize) -> Vec<Vec<f64>> {
    let nfft = cfg.fft_window;
    let win = hann(nfft);
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(nfft);
    let n = samples.len() as i64;
    let mut frames = Vec::with_capacity(n_frames);
    let mut buf = vec![Complex::new(0.0, 0.0); nfft];
    for t in 0..n_frames {
        let center = (t * cfg.hop) as i64;
        for (k, b) in buf.iter_mut().enumerate() {
            let idx = center - (nfft / 2) as i64 + k as i64;
            *b = Complex::new(samples[reflect_index(idx, n)] * win[k], 0.0);
        }
        fft.process(&mut buf);
        frames.push(buf[..nfft / 2 + 1].iter().map(|c| c.norm()).collect());
    }
    frames
}

fn hz_to_mel(f: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    if f < 1000.0 {
        f / f_sp
    } else {
        15.0 + (f / 1000.0).ln() / (6.4f64.ln() / 27.0)
    }
}

fn mel_to_hz(m: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    if m < 15.0 {
        m * f_sp
    } else {
        1000.0 * ((m - 15.0) * (6.4f64.ln() / 27.0)).exp()
    }
}

/// Triangular mel filterbank (Slaney variant: linear below 1 kHz,
/// logarithmic above, rows normalized by bandwidth). Rows index mel bands,
/// columns FFT bins.
pub struct MelBank {
    pub weights: Vec<Vec<f64>>,
    pub centers_hz: Vec<f64>,
}

pub fn mel_bank(cfg: &FrontendConfig) -> MelBank {
    let n_bins = cfg.fft_window / 2 + 1;
    let sr = cfg.sample_rate as f64;
    let fmax = sr / 2.0;
    let m_lo = hz_to_mel(0.0);
    let m_hi = hz_to_mel(fmax);
    let edges: Vec<f64> = (0..cfg.mel_bands + 2)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (cfg.mel_bands + 1) as f64))
        .collect();
    let mut weights = vec![vec![0.0; n_bins]; cfg.mel_bands];
    for m in 0..cfg.mel_bands {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let norm = 2.0 / (hi - lo);
        for (k, w) in weights[m].iter_mut().enumerate() {
            let f = k as f64 * sr / cfg.fft_window as f64;
            let rise = (f - lo) / (mid - lo);
            let fall = (hi - f) / (hi - mid);
            *w = rise.min(fall).max(0.0) * norm;
        }
    }
    MelBank { weights, centers_hz: edges[1..=cfg.mel_bands].to_vec() }
}

/// 64x128 log-amplitude mel spectrogram of exactly one 0.64 s window.
pub fn compute_lms(samples: &[f64], cfg: &FrontendConfig) -> Result<Tensor> {
    if samples.len() != cfg.window_samples() {
        return Err(Error::invalid(format!(
            "expected {} samples, got {}",
            cfg.window_samples(),
            samples.len()
        )));
    }
    lms_frames(samples, cfg, cfg.n_frames())
}

/// Log-mel grid over an arbitrary-length signal (one row per hop); used by
/// the delay analysis on full videos.
pub fn compute_lms_full(samples: &[f64], cfg: &FrontendConfig) -> Result<Tensor> {
    let n_frames = samples.len() / cfg.hop;
    if n_frames == 0 {
        return Err(Error::invalid("signal shorter than one hop"));
    }
    lms_frames(samples, cfg, n_frames)
}

fn lms_frames(samples: &[f64], cfg: &FrontendConfig, n_frames: usize) -> Result<Tensor> {
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite samples"));
    }
    let mags = stft_magnitudes(samples, cfg, n_frames);
    let bank = mel_bank(cfg);
    let mut out = Vec::with_capacity(n_frames * cfg.mel_bands);
    for frame in &mags {
        for row in &bank.weights {
            let e: f64 = row.iter().zip(frame).map(|(w, m)| w * m).sum();
            out.push(e.max(LOG_FLOOR).ln());
        }
    }
    Ok(Tensor::new(&[n_frames, cfg.mel_bands], out))
}

/// Exact finite difference along the leading (time) axis: [T, F] -> [T-1, F].
pub fn temporal_derivative(f: &Tensor) -> Result<Tensor> {
    let shape = f.shape();
    if shape.len() != 2 || shape[0] < 2 {
        return Err(Error::invalid("temporal_derivative expects [T>=2, F]"));
    }
    let (t, w) = (shape[0], shape[1]);
    let d = f.data();
    let mut out = Vec::with_capacity((t - 1) * w);
    for i in 0..t - 1 {
        for j in 0..w {
            out.push(d[(i + 1) * w + j] - d[i * w + j]);
        }
    }
    Ok(Tensor::new(&[t - 1, w], out))
}
