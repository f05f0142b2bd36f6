//! Conditional three-stream discriminator (audio, video, motion), its loss
//! with the mismatch term (Eq. 4 analog), and the generator's adversarial
//! term. The two-stream and frame-difference ablations share the code and
//! differ only in how the motion stream is built.

use crate::config::{DiscVariant, DiscWidths};
use crate::flow::{pooled_flow, FlowEstimator};
use crate::generator::{ConvBn2d, ConvBn3d};
use crate::{Error, Result};
use lipsynth_grad::nn::{avgpool2d, Conv3d, Linear};
use lipsynth_grad::{Graph, Id, Mode, Sess, VarStore};
use rand::Rng;

/// Probability clamp for the log terms.
pub const EPS_P: f64 = 1e-7;

pub struct Discriminator {
    variant: DiscVariant,
    audio: [ConvBn2d; 4],
    fc: Linear,
    video: [ConvBn3d; 4],
    motion: Option<[ConvBn3d; 4]>,
    head0: ConvBn3d,
    head1: Conv3d,
}

impl Discriminator {
    pub fn new(
        vs: &mut VarStore,
        rng: &mut impl Rng,
        w: &DiscWidths,
        variant: DiscVariant,
    ) -> Result<Self> {
        if variant == DiscVariant::None {
            return Err(Error::Config("cannot build a `none` discriminator".into()));
        }
        let a = &w.audio;
        let audio = [
            ConvBn2d::new(vs, rng, "disc.audio0", 1, a[0], [3, 3], [1, 1], [1, 1]),
            ConvBn2d::new(vs, rng, "disc.audio1", a[0], a[1], [3, 3], [1, 2], [1, 1]),
            ConvBn2d::new(vs, rng, "disc.audio2", a[1], a[2], [3, 3], [1, 1], [1, 1]),
            ConvBn2d::new(vs, rng, "disc.audio3", a[2], a[3], [3, 3], [1, 2], [1, 1]),
        ];
        let fc = Linear::new(vs, rng, "disc.fc", a[3] * 16 * 32, w.fc);
        let v = &w.video;
        let video = [
            ConvBn3d::new(vs, rng, "disc.video0", 3, v[0], [4; 3], [2; 3], [1; 3]),
            ConvBn3d::new(vs, rng, "disc.video1", v[0], v[1], [4; 3], [2; 3], [1; 3]),
            ConvBn3d::new(vs, rng, "disc.video2", v[1], v[2], [4; 3], [2; 3], [1; 3]),
            ConvBn3d::new(vs, rng, "disc.video3", v[2], v[3], [4; 3], [1, 2, 2], [1; 3]),
        ];
        let motion = match variant {
            DiscVariant::TwoStream | DiscVariant::None => None,
            DiscVariant::ThreeStream | DiscVariant::ThreeStreamFrameDiff => {
                let ci = if variant == DiscVariant::ThreeStream { 2 } else { 3 };
                let f = &w.flow;
                Some([
                    ConvBn3d::new(vs, rng, "disc.motion0", ci, f[0], [3; 3], [2; 3], [1; 3]),
                    ConvBn3d::new(
                        vs, rng, "disc.motion1", f[0], f[1], [3; 3], [2, 1, 1], [1; 3],
                    ),
                    ConvBn3d::new(vs, rng, "disc.motion2", f[1], f[2], [3; 3], [2; 3], [1; 3]),
                    ConvBn3d::new(
                        vs, rng, "disc.motion3", f[2], f[3], [3; 3], [2, 1, 1], [1; 3],
                    ),
                ])
            }
        };
        let cat = w.fc + v[3] + motion.as_ref().map_or(0, |_| w.flow[3]);
        Ok(Self {
            variant,
            audio,
            fc,
            video,
            motion,
            head0: ConvBn3d::new(vs, rng, "disc.head0", cat, w.head, [1, 3, 3], [1; 3], [0, 1, 1]),
            head1: Conv3d::new(vs, rng, "disc.head1", w.head, 1, [1, 4, 4], [1; 3], [0; 3], true),
        })
    }

    pub fn variant(&self) -> DiscVariant {
        self.variant
    }

    /// Audio stream: [N, 1, 64, 128] -> FC vector duplicated over the
    /// 1 x 4 x 4 grid.
    fn audio_stream(&self, s: &mut Sess, lms: Id, mode: Mode) -> Id {
        let mut x = avgpool2d(&mut s.g, lms, [4, 1], [4, 1]);
        for layer in &self.audio {
            x = layer.forward(s, x, mode);
        }
        let sh = s.g.shape(x).to_vec();
        let flat = s.g.reshape(x, &[sh[0], sh[1] * sh[2] * sh[3]]);
        let v = self.fc.forward(s, flat, mode);
        let v = s.g.relu(v);
        let n = s.g.shape(v)[0];
        let fc = s.g.shape(v)[1];
        let v5 = s.g.reshape(v, &[n, fc, 1, 1, 1]);
        s.g.broadcast(v5, &[n, fc, 1, 4, 4])
    }

    fn motion_input(
        &self,
        s: &mut Sess,
        video: Id,
        est: &dyn FlowEstimator,
    ) -> Result<Option<Id>> {
        match self.variant {
            DiscVariant::ThreeStream => {
                Ok(Some(pooled_flow(&mut s.g, video, est, [1, 4, 4])?))
            }
            DiscVariant::ThreeStreamFrameDiff => {
                let t = s.g.shape(video)[2];
                let hi = s.g.narrow(video, 2, 1, t - 1);
                let lo = s.g.narrow(video, 2, 0, t - 1);
                let diff = s.g.sub(hi, lo);
                let mag = s.g.abs(diff);
                Ok(Some(s.g.avgpool3d(mag, [1, 4, 4], [1, 4, 4])))
            }
            _ => Ok(None),
        }
    }

    /// Probability that (audio, video) is a real matched pair: [N].
    pub fn discriminate(
        &self,
        s: &mut Sess,
        lms: Id,
        video: Id,
        est: &dyn FlowEstimator,
        mode: Mode,
    ) -> Result<Id> {
        let vs_shape = s.g.shape(video).to_vec();
        if vs_shape.len() != 5 || vs_shape[1] != 3 || vs_shape[3] != 64 || vs_shape[4] != 64 {
            return Err(Error::invalid("discriminator expects [N, 3, T, 64, 64] video"));
        }
        let fa = self.audio_stream(s, lms, mode);
        let mut fv = video;
        for layer in &self.video {
            fv = layer.forward(s, fv, mode);
        }
        let mut streams = vec![fa, fv];
        if let Some(motion) = &self.motion {
            let mut fm = self
                .motion_input(s, video, est)?
                .expect("motion layers exist iff variant has a motion stream");
            for layer in motion {
                fm = layer.forward(s, fm, mode);
            }
            streams.push(fm);
        }
        let cat = s.g.concat(&streams, 1);
        let h = self.head0.forward(s, cat, mode);
        let h = self.head1.forward(s, h, mode);
        let n = s.g.shape(h)[0];
        let flat = s.g.reshape(h, &[n]);
        Ok(s.g.sigmoid(flat))
    }
}

/// log(clamp(p, EPS_P, 1 - EPS_P)).
fn clamped_log(g: &mut Graph, p: Id) -> Id {
    let c = g.clamp(p, EPS_P, 1.0 - EPS_P);
    g.log(c)
}

fn clamped_log_one_minus(g: &mut Graph, p: Id) -> Id {
    let neg = g.neg(p);
    let om = g.add_scalar(neg, 1.0);
    clamped_log(g, om)
}

/// Eq. 4 analog: -log D(real) - lambda_p log(1 - D(fake))
/// - lambda_u log(1 - D(mismatch)), each term batch-averaged.
pub fn discriminator_loss(
    g: &mut Graph,
    d_real: Id,
    d_fake: Id,
    d_mismatch: Id,
    lambda_p: f64,
    lambda_u: f64,
) -> Id {
    let lr = clamped_log(g, d_real);
    let real_term = g.mean_all(lr);
    let lf = clamped_log_one_minus(g, d_fake);
    let fake_term = g.mean_all(lf);
    let lm = clamped_log_one_minus(g, d_mismatch);
    let mis_term = g.mean_all(lm);
    let f_scaled = g.mul_scalar(fake_term, lambda_p);
    let m_scaled = g.mul_scalar(mis_term, lambda_u);
    let fm = g.add(f_scaled, m_scaled);
    let total = g.add(real_term, fm);
    g.neg(total)
}

/// Generator's adversarial term: -mean log D(fake).
pub fn generator_adversarial_loss(g: &mut Graph, d_fake: Id) -> Id {
    let l = clamped_log(g, d_fake);
    let m = g.mean_all(l);
    g.neg(m)
}

/// Uniform mismatched index k != j over n clips.
pub fn sample_mismatch(n: usize, j: usize, rng: &mut impl Rng) -> usize {
    assert!(n >= 2, "mismatch sampling needs at least 2 clips");
    let u = rng.gen_range(0..n - 1);
    u + usize::from(u >= j)
}

/// Number of parameter elements under the discriminator namespace.
pub fn disc_param_count(vs: &VarStore) -> usize {
    vs.iter()
        .filter(|(n, kind, _)| n.starts_with("disc.") && *kind == lipsynth_grad::VarKind::Param)
        .map(|(_, _, t)| t.numel())
        .sum()
}
