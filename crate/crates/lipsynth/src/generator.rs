//! The speech-to-video generator: audio and identity encoders, feature
//! fusion, and a residual 3-d decoder.
//!
//! Every "conv" below is conv + batch norm + ReLU except the final output
//! convolution, which is a plain convolution into tanh. Residual blocks are
//! pre-activation with a zero-initialized closing conv, so each block is an
//! exact identity map at init and depth never hurts the starting point.

use crate::config::GeneratorWidths;
use lipsynth_grad::nn::{avgpool2d, maxpool2d, BatchNorm, Conv2d, Conv3d, ConvT3d};
use lipsynth_grad::{Id, Mode, Sess, Tensor, VarStore};
use rand::Rng;

pub struct ConvBn2d {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBn2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        vs: &mut VarStore,
        rng: &mut impl Rng,
        path: &str,
        ci: usize,
        co: usize,
        k: [usize; 2],
        stride: [usize; 2],
        pad: [usize; 2],
    ) -> Self {
        Self {
            conv: Conv2d::new(vs, rng, &format!("{path}.conv"), ci, co, k, stride, pad, false),
            bn: BatchNorm::new(vs, &format!("{path}.bn"), co),
        }
    }

    pub fn forward(&self, s: &mut Sess, x: Id, mode: Mode) -> Id {
        let y = self.conv.forward(s, x, mode);
        let y = self.bn.forward(s, y, mode);
        s.g.relu(y)
    }
}

pub struct ConvBn3d {
    conv: Conv3d,
    bn: BatchNorm,
}

impl ConvBn3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        vs: &mut VarStore,
        rng: &mut impl Rng,
        path: &str,
        ci: usize,
        co: usize,
        k: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Self {
        Self {
            conv: Conv3d::new(vs, rng, &format!("{path}.conv"), ci, co, k, stride, pad, false),
            bn: BatchNorm::new(vs, &format!("{path}.bn"), co),
        }
    }

    pub fn forward(&self, s: &mut Sess, x: Id, mode: Mode) -> Id {
        let y = self.conv.forward(s, x, mode);
        let y = self.bn.forward(s, y, mode);
        s.g.relu(y)
    }
}

/// Pre-activation residual block: x + conv(relu(bn(conv(relu(bn(x)))))).
/// The closing conv starts at zero, making the block the identity at init.
pub struct ResBlock {
    bn1: BatchNorm,
    conv1: Conv3d,
    bn2: BatchNorm,
    conv2: Conv3d,
}

impl ResBlock {
    pub fn new(
        vs: &mut VarStore,
        rng: &mut impl Rng,
        path: &str,
        ch: usize,
        k: [usize; 3],
        pad: [usize; 3],
    ) -> Self {
        let conv1 = Conv3d::new(vs, rng, &format!("{path}.conv1"), ch, ch, k, [1; 3], pad, false);
        let conv2 = Conv3d::new(vs, rng, &format!("{path}.conv2"), ch, ch, k, [1; 3], pad, false);
        vs.set(
            &format!("{path}.conv2.weight"),
            Tensor::zeros(&[ch, ch, k[0], k[1], k[2]]),
        );
        Self {
            bn1: BatchNorm::new(vs, &format!("{path}.bn1"), ch),
            conv1,
            bn2: BatchNorm::new(vs, &format!("{path}.bn2"), ch),
            conv2,
        }
    }

    pub fn forward(&self, s: &mut Sess, x: Id, mode: Mode) -> Id {
        let y = self.bn1.forward(s, x, mode);
        let y = s.g.relu(y);
        let y = self.conv1.forward(s, y, mode);
        let y = self.bn2.forward(s, y, mode);
        let y = s.g.relu(y);
        let y = self.conv2.forward(s, y, mode);
        s.g.add(x, y)
    }
}

pub struct Generator {
    audio: [ConvBn2d; 4],
    ident: [ConvBn2d; 3],
    blocks: Vec<ResBlock>,
    trunk_bn: BatchNorm,
    up1: ConvT3d,
    up1_bn: BatchNorm,
    up2: ConvT3d,
    up2_bn: BatchNorm,
    out: Conv3d,
    widths: GeneratorWidths,
}

impl Generator {
    pub fn new(vs: &mut VarStore, rng: &mut impl Rng, w: &GeneratorWidths) -> Self {
        let a = &w.audio;
        let audio = [
            ConvBn2d::new(vs, rng, "gen.audio0", 1, a[0], [3, 3], [1, 1], [1, 1]),
            ConvBn2d::new(vs, rng, "gen.audio1", a[0], a[1], [3, 3], [1, 2], [1, 1]),
            ConvBn2d::new(vs, rng, "gen.audio2", a[1], a[2], [3, 3], [1, 1], [1, 1]),
            ConvBn2d::new(vs, rng, "gen.audio3", a[2], a[3], [3, 3], [1, 2], [1, 1]),
        ];
        let i = &w.identity;
        let ident = [
            ConvBn2d::new(vs, rng, "gen.ident0", 3, i[0], [7, 7], [1, 1], [3, 3]),
            ConvBn2d::new(vs, rng, "gen.ident1", i[0], i[1], [3, 3], [2, 2], [1, 1]),
            ConvBn2d::new(vs, rng, "gen.ident2", i[1], i[2], [3, 3], [2, 2], [1, 1]),
        ];
        let trunk = w.trunk();
        let blocks = (0..w.res_blocks)
            .map(|b| {
                ResBlock::new(vs, rng, &format!("gen.block{b}"), trunk, [1, 3, 3], [0, 1, 1])
            })
            .collect();
        let d = &w.deconv;
        Self {
            audio,
            ident,
            blocks,
            trunk_bn: BatchNorm::new(vs, "gen.trunk_bn", trunk),
            up1: ConvT3d::new(
                vs, rng, "gen.up1", trunk, d[0], [3; 3], [1, 2, 2], [1; 3], [0, 1, 1], false,
            ),
            up1_bn: BatchNorm::new(vs, "gen.up1_bn", d[0]),
            up2: ConvT3d::new(
                vs, rng, "gen.up2", d[0], d[1], [3; 3], [1, 2, 2], [1; 3], [0, 1, 1], false,
            ),
            up2_bn: BatchNorm::new(vs, "gen.up2_bn", d[1]),
            out: Conv3d::new(vs, rng, "gen.out", d[1], 3, [7; 3], [1; 3], [3; 3], true),
            widths: w.clone(),
        }
    }

    /// [N, 1, 64, 128] log-mel -> [N, Ca, 16, 16] (time x freq).
    pub fn encode_audio(&self, s: &mut Sess, lms: Id, mode: Mode) -> Id {
        let mut x = avgpool2d(&mut s.g, lms, [4, 1], [4, 1]);
        for layer in &self.audio {
            x = layer.forward(s, x, mode);
        }
        maxpool2d(&mut s.g, x, [1, 2], [1, 2])
    }

    /// [N, 3, 64, 64] identity frame -> [N, Ci, 16, 16].
    pub fn encode_identity(&self, s: &mut Sess, img: Id, mode: Mode) -> Id {
        let mut x = img;
        for layer in &self.ident {
            x = layer.forward(s, x, mode);
        }
        x
    }

    /// Channel-grouped fusion into a [N, Ca+Ci, 16, 16, 16] volume: audio
    /// features repeat along H (freq lands on W), identity features repeat
    /// along T.
    pub fn fuse(s: &mut Sess, fa: Id, fi: Id) -> Id {
        let (n, ca) = {
            let sh = s.g.shape(fa);
            (sh[0], sh[1])
        };
        let ci = s.g.shape(fi)[1];
        let a5 = s.g.reshape(fa, &[n, ca, 16, 1, 16]);
        let a = s.g.broadcast(a5, &[n, ca, 16, 16, 16]);
        let i5 = s.g.reshape(fi, &[n, ci, 1, 16, 16]);
        let i = s.g.broadcast(i5, &[n, ci, 16, 16, 16]);
        s.g.concat(&[a, i], 1)
    }

    /// Fused volume -> [N, 3, 16, 64, 64] video in (-1, 1).
    pub fn decode(&self, s: &mut Sess, fused: Id, mode: Mode) -> Id {
        let mut x = fused;
        for block in &self.blocks {
            x = block.forward(s, x, mode);
        }
        x = self.trunk_bn.forward(s, x, mode);
        x = s.g.relu(x);
        x = self.up1.forward(s, x, mode);
        x = self.up1_bn.forward(s, x, mode);
        x = s.g.relu(x);
        x = self.up2.forward(s, x, mode);
        x = self.up2_bn.forward(s, x, mode);
        x = s.g.relu(x);
        x = self.out.forward(s, x, mode);
        s.g.tanh(x)
    }

    /// Full forward: log-mel [N,1,64,128] + identity [N,3,64,64]
    /// -> video [N,3,16,64,64].
    pub fn forward(&self, s: &mut Sess, lms: Id, identity: Id, mode: Mode) -> Id {
        let fa = self.encode_audio(s, lms, mode);
        let fi = self.encode_identity(s, identity, mode);
        let fused = Self::fuse(s, fa, fi);
        self.decode(s, fused, mode)
    }

    pub fn widths(&self) -> &GeneratorWidths {
        &self.widths
    }
}
