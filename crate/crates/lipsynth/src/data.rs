//! Corpus directories, preprocessed training windows, and batch assembly.
//!
//! Files store video tensors as [T, C, H, W]; models consume [N, C, T, H, W].

use crate::config::FrontendConfig;
use crate::signal::compute_lms;
use crate::vision::{normalize, LANDMARK_POINTS};
use crate::{io, synth, Error, Result};
use lipsynth_grad::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// [T, C, H, W] -> [1, C, T, H, W].
pub fn to_ncthw(frames: &Tensor) -> Tensor {
    let s = frames.shape();
    assert_eq!(s.len(), 4, "expected [T, C, H, W]");
    let (t, c, h, w) = (s[0], s[1], s[2], s[3]);
    let d = frames.data();
    let hw = h * w;
    let mut out = vec![0.0; t * c * hw];
    for ti in 0..t {
        for ci in 0..c {
            let src = (ti * c + ci) * hw;
            let dst = (ci * t + ti) * hw;
            out[dst..dst + hw].copy_from_slice(&d[src..src + hw]);
        }
    }
    Tensor::new(&[1, c, t, h, w], out)
}

/// One video of a [N, C, T, H, W] batch back to [T, C, H, W].
pub fn to_tchw(batch: &Tensor, n: usize) -> Tensor {
    let s = batch.shape();
    assert_eq!(s.len(), 5, "expected [N, C, T, H, W]");
    let (c, t, h, w) = (s[1], s[2], s[3], s[4]);
    let d = batch.data();
    let hw = h * w;
    let mut out = vec![0.0; c * t * hw];
    let base = n * c * t * hw;
    for ci in 0..c {
        for ti in 0..t {
            let src = base + (ci * t + ti) * hw;
            let dst = (ti * c + ci) * hw;
            out[dst..dst + hw].copy_from_slice(&d[src..src + hw]);
        }
    }
    Tensor::new(&[t, c, h, w], out)
}

/// Stack single-sample tensors ([1, ...] or unbatched) along a new batch dim.
pub fn stack(samples: &[Tensor]) -> Tensor {
    assert!(!samples.is_empty());
    let inner: Vec<usize> = match samples[0].shape() {
        [1, rest @ ..] => rest.to_vec(),
        s => s.to_vec(),
    };
    let mut data = Vec::with_capacity(samples.len() * samples[0].numel());
    for s in samples {
        data.extend_from_slice(s.data());
    }
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(&inner);
    Tensor::new(&shape, data)
}

/// A raw corpus video loaded from disk.
pub struct RawVideo {
    pub frames: Tensor,
    pub waveform: Vec<f64>,
    pub landmarks: Option<Tensor>,
    pub envelope: Option<Vec<f64>>,
    pub meta: synth::VideoMeta,
    pub dir: PathBuf,
}

pub fn video_dirs(corpus: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(corpus.as_ref())?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.join("meta.json").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::invalid(format!(
            "no video directories under {}",
            corpus.as_ref().display()
        )));
    }
    Ok(dirs)
}

pub fn load_video(dir: impl AsRef<Path>) -> Result<RawVideo> {
    let dir = dir.as_ref();
    let meta: synth::VideoMeta = io::read_json(dir.join("meta.json"))?;
    let frames = io::read_tensor(dir.join("frames.tensor"))?;
    if frames.shape().len() != 4 {
        return Err(Error::format("frames.tensor must be [T, C, H, W]"));
    }
    let waveform = io::read_tensor(dir.join("audio.tensor"))?.into_data();
    let landmarks = match io::read_tensor(dir.join("landmarks.tensor")) {
        Ok(t) => Some(t),
        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(e),
    };
    let envelope = match io::read_tensor(dir.join("envelope.tensor")) {
        Ok(t) => Some(t.into_data()),
        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(e),
    };
    Ok(RawVideo { frames, waveform, landmarks, envelope, meta, dir: dir.to_path_buf() })
}

#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct ClipMeta {
    pub clip_id: String,
    pub source_video: String,
    pub start_frame: usize,
    pub n_frames: usize,
    pub sample_rate: u32,
    pub true_delay: Option<usize>,
}

/// A preprocessed 16-frame training window.
pub struct Clip {
    /// [16, 3, 64, 64] normalized to [-1, 1].
    pub frames: Tensor,
    /// [window_samples] raw waveform for the same span.
    pub audio: Vec<f64>,
    /// [64, 128] log-mel spectrogram.
    pub lms: Tensor,
    /// [16, LANDMARK_POINTS, 2] in crop coordinates.
    pub landmarks: Tensor,
    pub meta: ClipMeta,
}

pub fn write_clip(dir: impl AsRef<Path>, clip: &Clip) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    io::write_tensor(dir.join("frames.tensor"), &clip.frames, io::Dtype::F32)?;
    let wave = Tensor::new(&[clip.audio.len()], clip.audio.clone());
    io::write_tensor(dir.join("audio.tensor"), &wave, io::Dtype::F32)?;
    io::write_tensor(dir.join("lms.tensor"), &clip.lms, io::Dtype::F32)?;
    io::write_tensor(dir.join("landmarks.tensor"), &clip.landmarks, io::Dtype::F64)?;
    io::write_json(dir.join("meta.json"), &clip.meta)
}

pub fn load_clip(dir: impl AsRef<Path>) -> Result<Clip> {
    let dir = dir.as_ref();
    let meta: ClipMeta = io::read_json(dir.join("meta.json"))?;
    let frames = io::read_tensor(dir.join("frames.tensor"))?;
    let audio = io::read_tensor(dir.join("audio.tensor"))?.into_data();
    let lms = io::read_tensor(dir.join("lms.tensor"))?;
    let landmarks = io::read_tensor(dir.join("landmarks.tensor"))?;
    let shape = frames.shape().to_vec();
    if shape != [16, 3, 64, 64] {
        return Err(Error::format(format!("bad clip frame shape {shape:?}")));
    }
    if lms.shape() != [64, 128] {
        return Err(Error::format("bad lms shape"));
    }
    if landmarks.shape() != [16, LANDMARK_POINTS, 2] {
        return Err(Error::format("bad landmark shape"));
    }
    Ok(Clip { frames, audio, lms, landmarks, meta })
}

pub fn clip_dirs(root: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    video_dirs(root)
}

/// Cut one window out of a raw video: 16 normalized frames, the matching
/// audio span, its log-mel spectrogram and the window's landmarks.
pub fn extract_window(
    video: &RawVideo,
    start_frame: usize,
    cfg: &FrontendConfig,
) -> Result<Clip> {
    let t = video.frames.shape()[0];
    let vf = (cfg.window_seconds * video.meta.fps).round() as usize;
    if vf != 16 {
        return Err(Error::invalid(format!(
            "window covers {vf} frames at {} fps; the model takes 16",
            video.meta.fps
        )));
    }
    if start_frame + vf > t {
        return Err(Error::invalid("window exceeds video length"));
    }
    let fsize: usize = video.frames.shape()[1..].iter().product();
    let frames_raw = Tensor::new(
        &[vf, video.frames.shape()[1], video.frames.shape()[2], video.frames.shape()[3]],
        video.frames.data()[start_frame * fsize..(start_frame + vf) * fsize].to_vec(),
    );
    let frames = normalize(&frames_raw);

    let spf = video.waveform.len() / t;
    let a0 = start_frame * spf;
    let a1 = a0 + cfg.window_samples();
    if a1 > video.waveform.len() {
        return Err(Error::invalid("audio window exceeds waveform"));
    }
    let audio = video.waveform[a0..a1].to_vec();
    let lms = compute_lms(&audio, cfg)?;

    let landmarks = match &video.landmarks {
        Some(l) => {
            let lsize = LANDMARK_POINTS * 2;
            Tensor::new(
                &[vf, LANDMARK_POINTS, 2],
                l.data()[start_frame * lsize..(start_frame + vf) * lsize].to_vec(),
            )
        }
        None => {
            let det = synth::EllipseDetector;
            crate::vision::LandmarkSource::landmarks(&det, &frames_raw)?
        }
    };

    Ok(Clip {
        frames,
        audio,
        lms,
        landmarks,
        meta: ClipMeta {
            clip_id: String::new(),
            source_video: video.meta.video_id.clone(),
            start_frame,
            n_frames: vf,
            sample_rate: cfg.sample_rate,
            true_delay: Some(video.meta.true_delay),
        },
    })
}

/// A training batch in model layout.
pub struct Batch {
    /// [N, 1, 64, 128] log-mel inputs.
    pub lms: Tensor,
    /// [N, 3, 16, 64, 64] target videos in [-1, 1].
    pub video: Tensor,
    /// [N, 3, 64, 64] identity frames in [-1, 1].
    pub identity: Tensor,
    /// Which clips, for logging.
    pub indices: Vec<usize>,
}

/// Assemble a batch from loaded clips. The identity image is a uniformly
/// sampled frame of each clip's own window.
pub fn make_batch(clips: &[&Clip], rng: &mut impl Rng) -> Batch {
    let n = clips.len();
    assert!(n > 0);
    let mut lms = Vec::with_capacity(n * 64 * 128);
    let mut video = Vec::with_capacity(n * 3 * 16 * 64 * 64);
    let mut identity = Vec::with_capacity(n * 3 * 64 * 64);
    for clip in clips {
        lms.extend_from_slice(clip.lms.data());
        video.extend_from_slice(to_ncthw(&clip.frames).data());
        let pick = rng.gen_range(0..16usize);
        let fsize = 3 * 64 * 64;
        identity.extend_from_slice(&clip.frames.data()[pick * fsize..(pick + 1) * fsize]);
    }
    Batch {
        lms: Tensor::new(&[n, 1, 64, 128], lms),
        video: Tensor::new(&[n, 3, 16, 64, 64], video),
        identity: Tensor::new(&[n, 3, 64, 64], identity),
        indices: Vec::new(),
    }
}
