//! The "talking ellipse" corpus: a fully synthetic audio-visual benchmark
//! with analytic ground truth.
//!
//! Each video shows a filled ellipse ("lips") whose vertical aperture and
//! brightness track a random-walk loudness envelope after a per-video delay
//! of 0..=7 frames; the audio is a 440 Hz tone amplitude-modulated by the
//! same envelope. Landmarks lie exactly on the ellipse boundary, the
//! aperture map is affine, and per-frame audio RMS equals the envelope, so
//! losses, metrics and the delay analysis all have closed-form oracles.

use crate::vision::{LandmarkSource, LANDMARK_POINTS};
use crate::{io, Error, Result};
use lipsynth_grad::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SAMPLE_RATE: u32 = 51200;
pub const SAMPLES_PER_FRAME: usize = 2048;
pub const FPS: f64 = 25.0;
pub const CARRIER_HZ: f64 = 440.0;
pub const MAX_DELAY: usize = 7;
/// Aperture in pixels is an affine map of the envelope: 2 + 22 * env,
/// covering [2, 24] px over the envelope's full [0, 1] range.
pub const APERTURE_MIN: f64 = 2.0;
pub const APERTURE_SPAN: f64 = 22.0;
pub const ENV_LO: f64 = 0.2;
pub const ENV_HI: f64 = 0.65;
/// Boundary crossfade of the amplitude modulation, in samples (half on
/// each side of a frame boundary).
const CROSSFADE: usize = 256;

pub fn aperture(env: f64) -> f64 {
    APERTURE_MIN + APERTURE_SPAN * env
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_videos: usize,
    pub video_len: usize,
    /// Fixed audio-to-visual lag in frames; None draws one per video
    /// uniformly from 0..=7.
    pub delay: Option<usize>,
    pub envelope_seed: u64,
    pub noise_level: f64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let max_delay = self.delay.unwrap_or(MAX_DELAY);
        if max_delay > MAX_DELAY {
            return Err(Error::invalid(format!("delay must be <= {MAX_DELAY}")));
        }
        if self.video_len < 16 + max_delay {
            return Err(Error::invalid(format!(
                "video_len must be >= {} (16 + max delay)",
                16 + max_delay
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(Error::invalid("noise_level must be in [0, 1]"));
        }
        Ok(())
    }
}

/// Per-video ellipse style: center, horizontal semi-axis and colors vary
/// so the identity image carries real information.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IdentityParams {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub lip_rgb: [f64; 3],
    pub bg_rgb: [f64; 3],
}

pub struct SynthSample {
    pub waveform: Vec<f64>,
    /// [L, 3, 64, 64] intensities in [0, 1].
    pub frames: Tensor,
    /// [L, LANDMARK_POINTS, 2] pixel coordinates, exact.
    pub landmarks: Tensor,
    pub envelope: Vec<f64>,
    pub true_delay: usize,
    pub identity: IdentityParams,
}

fn rng_for(seed: u64, index: usize) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&(index as u64).to_le_bytes());
    ChaCha8Rng::from_seed(bytes)
}

fn randn(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    (-2.0 * u1.ln()).sqrt() * u2.cos()
}

pub fn identity_params(rng: &mut ChaCha8Rng) -> IdentityParams {
    IdentityParams {
        cx: 32.0 + rng.gen_range(-3.0..3.0),
        cy: 34.0 + rng.gen_range(-3.0..3.0),
        a: rng.gen_range(18.0..23.0),
        lip_rgb: [
            rng.gen_range(0.75..0.9),
            rng.gen_range(0.25..0.4),
            rng.gen_range(0.3..0.45),
        ],
        bg_rgb: [
            rng.gen_range(0.05..0.12),
            rng.gen_range(0.05..0.12),
            rng.gen_range(0.08..0.14),
        ],
    }
}

/// Random-walk loudness envelope in [ENV_LO, ENV_HI] with steps bounded to
/// keep per-frame aperture changes in the optical-flow-friendly regime.
pub fn envelope_walk(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let mut env = Vec::with_capacity(len);
    let mut e: f64 = rng.gen_range(0.3..0.55);
    for _ in 0..len {
        env.push(e);
        e = (e + rng.gen_range(-0.1..0.1)).clamp(ENV_LO, ENV_HI);
    }
    env
}

fn delayed(env: &[f64], t: usize, delay: usize) -> f64 {
    env[t.saturating_sub(delay)]
}

/// One frame: filled ellipse with 4x4 supersampled coverage. `b` is the
/// vertical semi-axis (aperture / 2), `bright` scales the lip color.
pub fn render_frame(id: &IdentityParams, b: f64, bright: f64) -> Tensor {
    let mut out = vec![0.0; 3 * 64 * 64];
    for y in 0..64 {
        for x in 0..64 {
            let mut cover = 0.0;
            for sy in 0..4 {
                for sx in 0..4 {
                    let px = x as f64 + (sx as f64 + 0.5) / 4.0 - 0.5;
                    let py = y as f64 + (sy as f64 + 0.5) / 4.0 - 0.5;
                    let dx = (px - id.cx) / id.a;
                    let dy = (py - id.cy) / b;
                    if dx * dx + dy * dy <= 1.0 {
                        cover += 1.0;
                    }
                }
            }
            cover /= 16.0;
            for c in 0..3 {
                out[c * 64 * 64 + y * 64 + x] =
                    id.bg_rgb[c] + (id.lip_rgb[c] * bright - id.bg_rgb[c]) * cover;
            }
        }
    }
    Tensor::new(&[3, 64, 64], out)
}

/// Landmarks at 20 fixed angular positions on the ellipse boundary.
pub fn ellipse_landmarks(id: &IdentityParams, b: f64) -> Vec<f64> {
    let mut pts = Vec::with_capacity(LANDMARK_POINTS * 2);
    for i in 0..LANDMARK_POINTS {
        let th = std::f64::consts::TAU * i as f64 / LANDMARK_POINTS as f64;
        pts.push(id.cx + id.a * th.cos());
        pts.push(id.cy + b * th.sin());
    }
    pts
}

/// Amplitude of the modulated carrier at sample `n`: sqrt(2) * env of the
/// containing frame, with a short linear crossfade straddling each frame
/// boundary so per-frame RMS stays equal to the envelope.
fn amplitude_at(env: &[f64], n: usize) -> f64 {
    let k = n / SAMPLES_PER_FRAME;
    let r = n % SAMPLES_PER_FRAME;
    let half = CROSSFADE / 2;
    let sq2 = std::f64::consts::SQRT_2;
    if r < half && k > 0 {
        let u = (r + half) as f64 / CROSSFADE as f64;
        sq2 * (env[k - 1] + (env[k] - env[k - 1]) * u)
    } else if r >= SAMPLES_PER_FRAME - half && k + 1 < env.len() {
        let u = (r - (SAMPLES_PER_FRAME - half)) as f64 / CROSSFADE as f64;
        sq2 * (env[k] + (env[k + 1] - env[k]) * u)
    } else {
        sq2 * env[k]
    }
}

/// Build one sample from explicit parameters. `generate` wraps this with
/// per-index RNG; tests drive it directly with crafted envelopes.
pub fn synth_sample(
    id: &IdentityParams,
    envelope: &[f64],
    delay: usize,
    noise_level: f64,
    rng: &mut ChaCha8Rng,
) -> SynthSample {
    let len = envelope.len();
    let n_samples = len * SAMPLES_PER_FRAME;
    let mut waveform = Vec::with_capacity(n_samples);
    for n in 0..n_samples {
        let phase = std::f64::consts::TAU * CARRIER_HZ * n as f64 / SAMPLE_RATE as f64;
        let mut s = amplitude_at(envelope, n) * phase.sin();
        if noise_level > 0.0 {
            s += noise_level * 0.02 * randn(rng);
        }
        waveform.push(s.clamp(-1.0, 1.0));
    }

    let mut frames = Vec::with_capacity(len * 3 * 64 * 64);
    let mut landmarks = Vec::with_capacity(len * LANDMARK_POINTS * 2);
    for t in 0..len {
        let e = delayed(envelope, t, delay);
        let b = aperture(e) / 2.0;
        let bright = 0.7 + 0.3 * e;
        let mut frame = render_frame(id, b, bright).into_data();
        if noise_level > 0.0 {
            for v in frame.iter_mut() {
                *v = (*v + noise_level * randn(rng)).clamp(0.0, 1.0);
            }
        }
        frames.extend_from_slice(&frame);
        landmarks.extend_from_slice(&ellipse_landmarks(id, b));
    }

    SynthSample {
        waveform,
        frames: Tensor::new(&[len, 3, 64, 64], frames),
        landmarks: Tensor::new(&[len, LANDMARK_POINTS, 2], landmarks),
        envelope: envelope.to_vec(),
        true_delay: delay,
        identity: id.clone(),
    }
}

/// Deterministic sample number `index` of the corpus described by `spec`.
pub fn generate_one(spec: &SynthSpec, index: usize) -> Result<SynthSample> {
    spec.validate()?;
    let mut rng = rng_for(spec.envelope_seed, index);
    let id = identity_params(&mut rng);
    let delay = match spec.delay {
        Some(d) => d,
        None => rng.gen_range(0..=MAX_DELAY),
    };
    let env = envelope_walk(&mut rng, spec.video_len);
    Ok(synth_sample(&id, &env, delay, spec.noise_level, &mut rng))
}

pub fn generate(spec: &SynthSpec) -> Result<Vec<SynthSample>> {
    (0..spec.n_videos).map(|i| generate_one(spec, i)).collect()
}

#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct VideoMeta {
    pub video_id: String,
    pub n_frames: usize,
    pub fps: f64,
    pub sample_rate: u32,
    pub true_delay: usize,
    pub noise_level: f64,
    /// Frames are already 64x64 lip crops; preprocessing skips the crop.
    pub precropped: bool,
}

/// Write the corpus as one directory per video:
/// frames.tensor, audio.tensor, landmarks.tensor, envelope.tensor, meta.json.
pub fn write_corpus(spec: &SynthSpec, dir: impl AsRef<Path>) -> Result<()> {
    spec.validate()?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for i in 0..spec.n_videos {
        let s = generate_one(spec, i)?;
        let vid = format!("v{i:05}");
        let vdir = dir.join(&vid);
        std::fs::create_dir_all(&vdir)?;
        io::write_tensor(vdir.join("frames.tensor"), &s.frames, io::Dtype::F32)?;
        let wave = Tensor::new(&[s.waveform.len()], s.waveform.clone());
        io::write_tensor(vdir.join("audio.tensor"), &wave, io::Dtype::F32)?;
        io::write_tensor(vdir.join("landmarks.tensor"), &s.landmarks, io::Dtype::F64)?;
        let env = Tensor::new(&[s.envelope.len()], s.envelope.clone());
        io::write_tensor(vdir.join("envelope.tensor"), &env, io::Dtype::F64)?;
        io::write_json(
            vdir.join("meta.json"),
            &VideoMeta {
                video_id: vid,
                n_frames: spec.video_len,
                fps: FPS,
                sample_rate: SAMPLE_RATE,
                true_delay: s.true_delay,
                noise_level: spec.noise_level,
                precropped: true,
            },
        )?;
    }
    Ok(())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

/// Moment-based ellipse fit on the coverage field. A midpoint threshold
/// finds the support box; foreground/background levels come from medians;
/// each pixel is then weighted by its reconstructed coverage, which is
/// exact for an anti-aliased filled uniform ellipse, where the centroid
/// and 2*std recover the center and semi-axes.
pub fn detect_ellipse(frame: &Tensor) -> (f64, f64, f64, f64) {
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let fallback = (w as f64 / 2.0, h as f64 / 2.0, 0.0, 0.0);
    let d = frame.data();
    let hw = h * w;
    let luma: Vec<f64> = (0..hw)
        .map(|i| 0.299 * d[i] + 0.587 * d[hw + i] + 0.114 * d[2 * hw + i])
        .collect();
    let lo = luma.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = luma.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-6 {
        return fallback;
    }
    let thr = 0.5 * (lo + hi);
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            if luma[y * w + x] > thr {
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(y);
                y1 = y1.max(y);
            }
        }
    }
    if x0 > x1 {
        return fallback;
    }
    let (bx0, by0) = (x0.saturating_sub(3), y0.saturating_sub(3));
    let (bx1, by1) = ((x1 + 3).min(w - 1), (y1 + 3).min(h - 1));
    let mut inside = Vec::new();
    let mut outside = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = luma[y * w + x];
            if v > thr {
                inside.push(v);
            } else if x < bx0 || x > bx1 || y < by0 || y > by1 {
                outside.push(v);
            }
        }
    }
    let fg = median(inside);
    let bg = if outside.is_empty() { lo } else { median(outside) };
    if fg - bg < 1e-9 {
        return fallback;
    }
    let cover =
        |x: usize, y: usize| ((luma[y * w + x] - bg) / (fg - bg)).clamp(0.0, 1.0);
    let mut m00 = 0.0;
    let mut mx = 0.0;
    let mut my = 0.0;
    for y in by0..=by1 {
        for x in bx0..=bx1 {
            let c = cover(x, y);
            m00 += c;
            mx += c * x as f64;
            my += c * y as f64;
        }
    }
    if m00 <= 1e-12 {
        return fallback;
    }
    let cx = mx / m00;
    let cy = my / m00;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for y in by0..=by1 {
        for x in bx0..=bx1 {
            let c = cover(x, y);
            vx += c * (x as f64 - cx).powi(2);
            vy += c * (y as f64 - cy).powi(2);
        }
    }
    (cx, cy, 2.0 * (vx / m00).sqrt(), 2.0 * (vy / m00).sqrt())
}

/// Analytic landmark detector for talking-ellipse frames: fits the ellipse
/// by intensity moments and places the 20 fixed-angle boundary points.
pub struct EllipseDetector;

impl LandmarkSource for EllipseDetector {
    fn landmarks(&self, frames: &Tensor) -> Result<Tensor> {
        let shape = frames.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::invalid("expected [T, 3, H, W] frames"));
        }
        let t = shape[0];
        let fsize = shape[1] * shape[2] * shape[3];
        let mut out = Vec::with_capacity(t * LANDMARK_POINTS * 2);
        for k in 0..t {
            let frame = Tensor::new(
                &shape[1..],
                frames.data()[k * fsize..(k + 1) * fsize].to_vec(),
            );
            let (cx, cy, a, b) = detect_ellipse(&frame);
            let id = IdentityParams { cx, cy, a, lip_rgb: [0.0; 3], bg_rgb: [0.0; 3] };
            out.extend_from_slice(&ellipse_landmarks(&id, b));
        }
        Ok(Tensor::new(&[t, LANDMARK_POINTS, 2], out))
    }
}
