//! Audio-visual correlation: the derivative encoders phi_s / phi_v, the
//! cosine correlation loss (Eq. 1 analog), and the offline offset-Pearson
//! delay analysis.
//!
//! phi_s embeds the temporal derivative of audio features, phi_v embeds
//! optical flow. Both collapse their non-temporal axes to 1 while keeping
//! the temporal length, with large temporal receptive fields (9 and 13) so
//! the pair can absorb a variable audio-visual delay.

use crate::config::{CorrWidths, FrontendConfig};
use crate::flow::{pooled_flow, FlowEstimator};
use crate::generator::{ConvBn2d, ConvBn3d};
use crate::signal::{compute_lms_full, temporal_derivative};
use crate::{data, Error, Result};
use lipsynth_grad::nn::{Conv2d, Conv3d};
use lipsynth_grad::{Exec, Graph, Id, Mode, Sess, VarStore};
use rand::Rng;
use std::io::Write as _;
use std::path::Path;

/// Pearson correlation coefficient; None when either series is constant
/// (zero variance) or the lengths differ / are < 2.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

/// phi_s and phi_v. With `derivative` (the paper's main configuration)
/// phi_s reads the temporal derivative of audio features and phi_v reads
/// optical flow; without it both read the raw features/frames directly and
/// the temporal length stays at 16 instead of 15.
pub struct CorrNet {
    phis: [ConvBn2d; 3],
    phis_out: Conv2d,
    phiv: [ConvBn3d; 3],
    phiv_out: Conv3d,
    derivative: bool,
}

/// Temporal padding of each phi_v layer: kernel 4 with asymmetric (2, 1)
/// padding keeps the length and gives the 13-step receptive field.
const PHIV_TPAD: (usize, usize) = (2, 1);

impl CorrNet {
    pub fn new(
        vs: &mut VarStore,
        rng: &mut impl Rng,
        w: &CorrWidths,
        audio_channels: usize,
        derivative: bool,
    ) -> Self {
        let p = &w.phi_s;
        let phis = [
            ConvBn2d::new(vs, rng, "corr.phis0", audio_channels, p[0], [3, 3], [1, 2], [1, 1]),
            ConvBn2d::new(vs, rng, "corr.phis1", p[0], p[1], [3, 3], [1, 2], [1, 1]),
            ConvBn2d::new(vs, rng, "corr.phis2", p[1], p[2], [3, 3], [1, 2], [1, 1]),
        ];
        let phis_out =
            Conv2d::new(vs, rng, "corr.phis3", p[2], 1, [3, 3], [1, 2], [1, 1], true);
        let q = &w.phi_v;
        let vc = if derivative { 2 } else { 3 };
        let phiv = [
            ConvBn3d::new(vs, rng, "corr.phiv0", vc, q[0], [4, 3, 3], [1, 2, 2], [0, 1, 1]),
            ConvBn3d::new(vs, rng, "corr.phiv1", q[0], q[1], [4, 3, 3], [1, 2, 2], [0, 1, 1]),
            ConvBn3d::new(vs, rng, "corr.phiv2", q[1], q[2], [4, 3, 3], [1, 2, 2], [0, 1, 1]),
        ];
        let phiv_out = Conv3d::new(
            vs, rng, "corr.phiv3", q[2], 1, [4, 3, 3], [1, 2, 2], [0, 1, 1], true,
        );
        Self { phis, phis_out, phiv, phiv_out, derivative }
    }

    pub fn derivative(&self) -> bool {
        self.derivative
    }

    /// Audio features [N, Ca, 16, 16] -> embedding [N, 15] (or [N, 16]
    /// in the non-derivative variant).
    pub fn embed_audio(&self, s: &mut Sess, f_audio: Id, mode: Mode) -> Id {
        let mut x = if self.derivative {
            let t = s.g.shape(f_audio)[2];
            let hi = s.g.narrow(f_audio, 2, 1, t - 1);
            let lo = s.g.narrow(f_audio, 2, 0, t - 1);
            s.g.sub(hi, lo)
        } else {
            f_audio
        };
        for layer in &self.phis {
            x = layer.forward(s, x, mode);
        }
        x = self.phis_out.forward(s, x, mode);
        let sh = s.g.shape(x).to_vec();
        s.g.reshape(x, &[sh[0], sh[2]])
    }

    fn phiv_stack(&self, s: &mut Sess, mut x: Id, mode: Mode) -> Id {
        for layer in &self.phiv {
            x = s.g.pad(x, 2, PHIV_TPAD.0, PHIV_TPAD.1);
            x = layer.forward(s, x, mode);
        }
        x = s.g.pad(x, 2, PHIV_TPAD.0, PHIV_TPAD.1);
        x = self.phiv_out.forward(s, x, mode);
        let sh = s.g.shape(x).to_vec();
        s.g.reshape(x, &[sh[0], sh[2]])
    }

    /// Video [N, 3, T, 64, 64] -> embedding [N, T-1] via flow (derivative
    /// mode) or [N, T] via raw pooled frames.
    pub fn embed_video(
        &self,
        s: &mut Sess,
        video: Id,
        est: &dyn FlowEstimator,
        mode: Mode,
    ) -> Result<Id> {
        let x = if self.derivative {
            pooled_flow(&mut s.g, video, est, [1, 4, 4])?
        } else {
            s.g.avgpool3d(video, [1, 4, 4], [1, 4, 4])
        };
        Ok(self.phiv_stack(s, x, mode))
    }

    /// Entry point for already-extracted flow features (tests and the
    /// receptive-field probes).
    pub fn embed_flow(&self, s: &mut Sess, flow: Id, mode: Mode) -> Id {
        self.phiv_stack(s, flow, mode)
    }
}

/// Eq. 1 analog: mean over the batch of 1 - cos(a_n, b_n), with eps=1e-8
/// in the denominator guarding zero vectors.
pub fn correlation_loss(g: &mut Graph, a: Id, b: Id) -> Id {
    assert_eq!(g.shape(a), g.shape(b), "embedding shapes must match");
    let prod = g.mul(a, b);
    let dot = g.sum_last(prod);
    let a2 = g.square(a);
    let sa = g.sum_last(a2);
    let na = g.sqrt(sa);
    let b2 = g.square(b);
    let sb = g.sum_last(b2);
    let nb = g.sqrt(sb);
    let nn = g.mul(na, nb);
    let denom = g.add_scalar(nn, 1e-8);
    let cos = g.div(dot, denom);
    let neg = g.neg(cos);
    let ones = g.add_scalar(neg, 1.0);
    g.mean_all(ones)
}

/// Per-video-frame mean absolute log-mel derivative. Derivative hop k is
/// assigned to the video frame boundary nearest its center, so bin t
/// collects the audio change across the boundary between frames t and t+1
/// -- the same transition flow index t measures.
pub fn audio_derivative_series(
    waveform: &[f64],
    n_frames: usize,
    cfg: &FrontendConfig,
) -> Result<Vec<f64>> {
    let hops_per_frame = crate::synth::SAMPLES_PER_FRAME / cfg.hop;
    let lms = compute_lms_full(waveform, cfg)?;
    let d = temporal_derivative(&lms)?;
    let bands = d.shape()[1];
    let n_hops = d.shape()[0];
    let mut out = Vec::with_capacity(n_frames - 1);
    for t in 0..n_frames - 1 {
        let k0 = hops_per_frame * t + hops_per_frame / 2;
        let k1 = (k0 + hops_per_frame).min(n_hops);
        if k0 >= n_hops {
            return Err(Error::invalid("waveform shorter than the video"));
        }
        let mut acc = 0.0;
        for k in k0..k1 {
            let row = &d.data()[k * bands..(k + 1) * bands];
            acc += row.iter().map(|v| v.abs()).sum::<f64>() / bands as f64;
        }
        out.push(acc / (k1 - k0) as f64);
    }
    Ok(out)
}

/// Pearson between the audio series and the flow series shifted forward by
/// each offset; None where a truncated series is constant.
pub fn offset_pearson_curve(
    audio: &[f64],
    flow: &[f64],
    max_offset: usize,
) -> Vec<Option<f64>> {
    (0..=max_offset)
        .map(|o| {
            if flow.len() <= o + 1 {
                return None;
            }
            let n = flow.len() - o;
            let n = n.min(audio.len());
            pearson(&audio[..n], &flow[o..o + n])
        })
        .collect()
}

pub struct VideoCurve {
    pub video_id: String,
    pub true_delay: Option<usize>,
    pub coeffs: Vec<Option<f64>>,
    pub argmax: Option<usize>,
}

pub struct DelayAnalysis {
    pub curves: Vec<VideoCurve>,
    pub histogram: Vec<usize>,
    pub excluded: usize,
}

impl DelayAnalysis {
    pub fn mode_offset(&self) -> Option<usize> {
        self.histogram
            .iter()
            .enumerate()
            .max_by_key(|(_, &c)| c)
            .map(|(o, _)| o)
    }
}

fn curve_argmax(coeffs: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (o, c) in coeffs.iter().enumerate() {
        if let Some(r) = c {
            if best.map_or(true, |(_, br)| *r > br) {
                best = Some((o, *r));
            }
        }
    }
    best.map(|(o, _)| o)
}

/// Offset-Pearson analysis over a raw corpus directory.
pub fn analyze_corpus(
    corpus: impl AsRef<Path>,
    max_offset: usize,
    est: &dyn FlowEstimator,
    cfg: &FrontendConfig,
    exec: Exec,
) -> Result<DelayAnalysis> {
    let mut curves = Vec::new();
    let mut histogram = vec![0usize; max_offset + 1];
    let mut excluded = 0;
    for dir in data::video_dirs(corpus)? {
        let video = data::load_video(&dir)?;
        let n_frames = video.frames.shape()[0];
        let audio = audio_derivative_series(&video.waveform, n_frames, cfg)?;
        let flow = crate::flow::flow_magnitude_series(&video.frames, est, exec)?;
        let coeffs = offset_pearson_curve(&audio, &flow, max_offset);
        let argmax = curve_argmax(&coeffs);
        match argmax {
            Some(o) => histogram[o] += 1,
            None => excluded += 1,
        }
        curves.push(VideoCurve {
            video_id: video.meta.video_id.clone(),
            true_delay: Some(video.meta.true_delay),
            coeffs,
            argmax,
        });
    }
    Ok(DelayAnalysis { curves, histogram, excluded })
}

/// Per-video coefficient curves as TSV: one row per video, one column per
/// offset, missing values empty.
pub fn write_curves_tsv(a: &DelayAnalysis, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    let width = a.curves.first().map_or(0, |c| c.coeffs.len());
    write!(f, "video_id\ttrue_delay\targmax")?;
    for o in 0..width {
        write!(f, "\tr{o}")?;
    }
    writeln!(f)?;
    for c in &a.curves {
        write!(f, "{}", c.video_id)?;
        match c.true_delay {
            Some(d) => write!(f, "\t{d}")?,
            None => write!(f, "\t")?,
        }
        match c.argmax {
            Some(o) => write!(f, "\t{o}")?,
            None => write!(f, "\t")?,
        }
        for v in &c.coeffs {
            match v {
                Some(r) => write!(f, "\t{r:.6}")?,
                None => write!(f, "\t")?,
            }
        }
        writeln!(f)?;
    }
    Ok(())
}

pub fn write_histogram_tsv(a: &DelayAnalysis, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "offset\tcount")?;
    for (o, c) in a.histogram.iter().enumerate() {
        writeln!(f, "{o}\t{c}")?;
    }
    writeln!(f, "excluded\t{}", a.excluded)?;
    Ok(())
}

/// Minimal self-contained bar chart of the argmax histogram.
pub fn render_histogram_svg(a: &DelayAnalysis) -> String {
    let n = a.histogram.len();
    let max = a.histogram.iter().copied().max().unwrap_or(0).max(1);
    let (bw, gap, h, pad) = (40.0, 10.0, 160.0, 24.0);
    let width = pad * 2.0 + n as f64 * (bw + gap);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0}\" height=\"{:.0}\">\n",
        width,
        h + pad * 2.0
    );
    for (o, &c) in a.histogram.iter().enumerate() {
        let bh = h * c as f64 / max as f64;
        let x = pad + o as f64 * (bw + gap);
        let y = pad + h - bh;
        s.push_str(&format!(
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{bw:.1}\" height=\"{bh:.1}\" fill=\"#4878a8\"/>\n"
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">{o}</text>\n",
            x + bw / 2.0,
            pad + h + 14.0
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">{c}</text>\n",
            x + bw / 2.0,
            y - 4.0
        ));
    }
    s.push_str("</svg>\n");
    s
}
