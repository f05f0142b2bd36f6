//! Frame autoencoder whose frozen encoder supplies the perceptual loss
//! (Eq. 3 analog). Every kernel is 1 x k x k, so the "2-D" autoencoder runs
//! on whole [N, 3, T, H, W] videos in one pass and treats time exactly like
//! an extra batch axis.

use std::path::Path;

use crate::config::AeWidths;
use crate::data::{to_ncthw, Clip};
use crate::generator::{ConvBn3d, ResBlock};
use crate::io::Checkpoint;
use crate::{Error, Result};
use lipsynth_grad::nn::{BatchNorm, Conv3d, ConvT3d};
use lipsynth_grad::{Adam, Exec, Graph, Id, Mode, Sess, Tensor, VarStore};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CHECKPOINT_KIND: &str = "perceptual";

pub struct Autoencoder {
    enc: [ConvBn3d; 3],
    blocks: Vec<ResBlock>,
    dec: Vec<(ConvT3d, BatchNorm)>,
    out: Conv3d,
    widths: AeWidths,
}

impl Autoencoder {
    pub fn new(vs: &mut VarStore, rng: &mut impl Rng, w: &AeWidths) -> Self {
        let e = &w.enc;
        let enc = [
            ConvBn3d::new(vs, rng, "ae.enc0", 3, e[0], [1, 3, 3], [1, 2, 2], [0, 1, 1]),
            ConvBn3d::new(vs, rng, "ae.enc1", e[0], e[1], [1, 3, 3], [1, 2, 2], [0, 1, 1]),
            ConvBn3d::new(vs, rng, "ae.enc2", e[1], e[2], [1, 3, 3], [1, 2, 2], [0, 1, 1]),
        ];
        let blocks = (0..w.res_blocks)
            .map(|b| ResBlock::new(vs, rng, &format!("ae.block{b}"), e[2], [1, 3, 3], [0, 1, 1]))
            .collect();
        let mut dec = Vec::new();
        for (i, (ci, co)) in [(e[2], e[1]), (e[1], e[0]), (e[0], e[0])].into_iter().enumerate() {
            let path = format!("ae.dec{i}");
            let t = ConvT3d::new(
                vs,
                rng,
                &path,
                ci,
                co,
                [1, 4, 4],
                [1, 2, 2],
                [0, 1, 1],
                [0; 3],
                false,
            );
            let bn = BatchNorm::new(vs, &format!("{path}.bn"), co);
            dec.push((t, bn));
        }
        let out = Conv3d::new(vs, rng, "ae.out", e[0], 3, [1, 3, 3], [1; 3], [0, 1, 1], true);
        Self { enc, blocks, dec, out, widths: w.clone() }
    }

    pub fn widths(&self) -> &AeWidths {
        &self.widths
    }

    /// Embedding of a [N, 3, T, H, W] video: [N, C, T, H/8, W/8].
    pub fn encode(&self, s: &mut Sess, video: Id, mode: Mode) -> Id {
        let mut x = video;
        for layer in &self.enc {
            x = layer.forward(s, x, mode);
        }
        for block in &self.blocks {
            x = block.forward(s, x, mode);
        }
        x
    }

    fn decode(&self, s: &mut Sess, z: Id, mode: Mode) -> Id {
        let mut x = z;
        for (t, bn) in &self.dec {
            x = t.forward(s, x, mode);
            x = bn.forward(s, x, mode);
            x = s.g.relu(x);
        }
        let x = self.out.forward(s, x, mode);
        s.g.tanh(x)
    }

    /// Full reconstruction, in (-1, 1).
    pub fn forward(&self, s: &mut Sess, video: Id, mode: Mode) -> Id {
        let z = self.encode(s, video, mode);
        self.decode(s, z, mode)
    }
}

/// Eq. 3 analog: mean over all elements of the squared embedding difference.
pub fn perceptual_loss(g: &mut Graph, e_real: Id, e_fake: Id) -> Id {
    let d = g.sub(e_real, e_fake);
    let sq = g.square(d);
    g.mean_all(sq)
}

#[derive(Debug, Clone)]
pub struct PerceptualTrainOptions {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for PerceptualTrainOptions {
    fn default() -> Self {
        Self { steps: 400, batch: 4, lr: 1e-3, weight_decay: 0.0, seed: 17, log_every: 10 }
    }
}

fn video_batch(clips: &[Clip], idx: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(idx.len() * 3 * 16 * 64 * 64);
    for &i in idx {
        data.extend_from_slice(to_ncthw(&clips[i].frames).data());
    }
    Tensor::new(&[idx.len(), 3, 16, 64, 64], data)
}

/// Train the autoencoder on clip videos with a plain L2 reconstruction loss.
/// Returns the trained weights and the (step, loss) log.
pub fn train_perceptual(
    clips: &[Clip],
    widths: &AeWidths,
    opt: &PerceptualTrainOptions,
    exec: Exec,
) -> Result<(VarStore, Vec<(usize, f64)>)> {
    if clips.is_empty() {
        return Err(Error::invalid("no clips to train the autoencoder on"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let mut vs = VarStore::new();
    let ae = Autoencoder::new(&mut vs, &mut rng, widths);
    let mut adam = Adam::new(opt.lr, opt.weight_decay);
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..clips.len()).collect();
    for step in 0..opt.steps {
        order.shuffle(&mut rng);
        let idx = &order[..opt.batch.min(order.len())];
        let batch = video_batch(clips, idx);
        let mut s = Sess::new(&vs, exec);
        let x = s.g.constant(batch);
        let xhat = ae.forward(&mut s, x, Mode::TRAIN);
        let d = s.g.sub(xhat, x);
        let sq = s.g.square(d);
        let loss = s.g.mean_all(sq);
        let lv = s.g.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::Diverged(format!("autoencoder loss {lv} at step {step}")));
        }
        let grads = s.g.backward(loss);
        let named = s.named_grads(&grads);
        let updates = s.take_buffer_updates();
        drop(s);
        adam.step(&mut vs, &named);
        for (name, t) in updates {
            vs.set(&name, t);
        }
        if step % opt.log_every == 0 || step + 1 == opt.steps {
            log.push((step, lv));
        }
    }
    Ok((vs, log))
}

pub fn save_perceptual(path: impl AsRef<Path>, vs: &VarStore, widths: &AeWidths) -> Result<()> {
    let ckpt = Checkpoint {
        kind: CHECKPOINT_KIND.into(),
        config: serde_json::to_value(widths).map_err(|e| Error::Format(e.to_string()))?,
        tensors: vs.iter().map(|(n, _, t)| (n.to_string(), t.clone())).collect(),
    };
    ckpt.save(path)
}

/// Rebuild the autoencoder from a checkpoint; variable kinds come from a
/// fresh construction, tensors from the file.
pub fn load_perceptual(path: impl AsRef<Path>) -> Result<(VarStore, Autoencoder)> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.kind != CHECKPOINT_KIND {
        return Err(Error::format(format!(
            "expected a {CHECKPOINT_KIND} checkpoint, found kind `{}`",
            ckpt.kind
        )));
    }
    let widths: AeWidths =
        serde_json::from_value(ckpt.config.clone()).map_err(|e| Error::Format(e.to_string()))?;
    let mut vs = VarStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ae = Autoencoder::new(&mut vs, &mut rng, &widths);
    let expected = vs.iter().count();
    if ckpt.tensors.len() != expected {
        return Err(Error::format(format!(
            "checkpoint has {} tensors, model needs {expected}",
            ckpt.tensors.len()
        )));
    }
    for (name, t) in ckpt.tensors {
        if !vs.contains(&name) {
            return Err(Error::format(format!("unexpected tensor `{name}` in checkpoint")));
        }
        if vs.get(&name).shape() != t.shape() {
            return Err(Error::format(format!("shape mismatch for `{name}`")));
        }
        vs.set(&name, t);
    }
    Ok((vs, ae))
}
