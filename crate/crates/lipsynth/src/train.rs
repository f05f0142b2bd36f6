//! Adversarial training loop: one discriminator step, then one generator
//! step per iteration. The generator, both correlation nets, and (frozen)
//! perceptual encoder live in a single variable store; trainability is
//! decided per session, so the two optimizers never touch each other's
//! weights.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::adversary::{
    discriminator_loss, generator_adversarial_loss, sample_mismatch, Discriminator,
};
use crate::config::{
    AblationSpec, DiscVariant, FrontendConfig, LossWeights, ModelConfig, TrainConfig,
};
use crate::corr::{correlation_loss, CorrNet};
use crate::data::{clip_dirs, load_clip, make_batch, Batch, Clip};
use crate::flow::LucasKanade;
use crate::generator::Generator;
use crate::io::Checkpoint;
use crate::objectives::{full_loss, perceptual_loss, pixel_loss, LossTerms, PixelNorm};
use crate::perceptual::{load_perceptual, Autoencoder};
use crate::{Error, Result};
use lipsynth_grad::{Adam, Exec, Mode, Sess, Tensor, VarStore};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const TRAINER_KIND: &str = "trainer";

/// Discriminator loss weights for the fake and mismatch terms.
pub const LAMBDA_P: f64 = 0.5;
pub const LAMBDA_U: f64 = 0.5;

/// Everything a checkpoint needs to rebuild the models.
#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct CkptConfig {
    pub model: ModelConfig,
    pub ablation: AblationSpec,
    pub frontend: FrontendConfig,
    pub step: usize,
}

/// The networks plus the store that owns their tensors.
pub struct Models {
    pub vs: VarStore,
    pub gen: Generator,
    pub corr: Option<CorrNet>,
    pub ae: Option<Autoencoder>,
    pub disc: Option<Discriminator>,
    pub cfg: CkptConfig,
}

impl Models {
    /// Fresh networks; the perceptual encoder is merged in from its own
    /// checkpoint since it is trained separately and stays frozen here.
    pub fn build(
        model: &ModelConfig,
        ablation: &AblationSpec,
        frontend: &FrontendConfig,
        seed: u64,
        perceptual_ckpt: Option<&Path>,
    ) -> Result<Self> {
        ablation.validate()?;
        let mut vs = VarStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gen = Generator::new(&mut vs, &mut rng, &model.generator);
        let corr = ablation.use_corr.then(|| {
            CorrNet::new(
                &mut vs,
                &mut rng,
                &model.corr,
                model.generator.audio[3],
                !ablation.corr_non_derivative,
            )
        });
        let disc = match ablation.disc_variant {
            DiscVariant::None => None,
            v => Some(Discriminator::new(&mut vs, &mut rng, &model.disc, v)?),
        };
        let ae = match (ablation.use_perc, perceptual_ckpt) {
            (false, _) => None,
            (true, None) => {
                return Err(Error::Config(
                    "perceptual loss enabled but no perceptual checkpoint given".into(),
                ))
            }
            (true, Some(path)) => {
                let (vs_ae, ae) = load_perceptual(path)?;
                if ae.widths() != &model.ae {
                    return Err(Error::Config(format!(
                        "perceptual checkpoint widths {:?} do not match the model's {:?}",
                        ae.widths(),
                        model.ae
                    )));
                }
                for (name, kind, t) in vs_ae.iter() {
                    vs.add(name, kind, t.clone());
                }
                Some(ae)
            }
        };
        Ok(Models {
            vs,
            gen,
            corr,
            ae,
            disc,
            cfg: CkptConfig {
                model: model.clone(),
                ablation: *ablation,
                frontend: frontend.clone(),
                step: 0,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let ckpt = Checkpoint {
            kind: TRAINER_KIND.into(),
            config: serde_json::to_value(&self.cfg).map_err(|e| Error::Format(e.to_string()))?,
            tensors: self.vs.iter().map(|(n, _, t)| (n.to_string(), t.clone())).collect(),
        };
        ckpt.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ckpt = Checkpoint::load(&path)?;
        if ckpt.kind != TRAINER_KIND {
            return Err(Error::format(format!(
                "expected a {TRAINER_KIND} checkpoint, found kind `{}`",
                ckpt.kind
            )));
        }
        let cfg: CkptConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| Error::Format(e.to_string()))?;
        // rebuild the same variable set, then overwrite every tensor
        let mut models = if cfg.ablation.use_perc {
            // reconstruct the autoencoder variables without a file: build
            // nets with use_perc off, then add fresh AE vars to fill below
            let mut no_perc = cfg.ablation;
            no_perc.use_perc = false;
            let mut m = Models::build(&cfg.model, &no_perc, &cfg.frontend, 0, None)?;
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            m.ae = Some(Autoencoder::new(&mut m.vs, &mut rng, &cfg.model.ae));
            m.cfg.ablation = cfg.ablation;
            m
        } else {
            Models::build(&cfg.model, &cfg.ablation, &cfg.frontend, 0, None)?
        };
        let expected = models.vs.iter().count();
        if ckpt.tensors.len() != expected {
            return Err(Error::format(format!(
                "checkpoint has {} tensors, model needs {expected}",
                ckpt.tensors.len()
            )));
        }
        for (name, t) in ckpt.tensors {
            if !models.vs.contains(&name) {
                return Err(Error::format(format!("unexpected tensor `{name}` in checkpoint")));
            }
            if models.vs.get(&name).shape() != t.shape() {
                return Err(Error::format(format!("shape mismatch for `{name}`")));
            }
            models.vs.set(&name, t);
        }
        models.cfg.step = cfg.step;
        Ok(models)
    }

    /// Run the generator in eval mode on prepared inputs.
    pub fn generate(&self, lms: &Tensor, identity: &Tensor, exec: Exec) -> Tensor {
        let mut s = Sess::new(&self.vs, exec);
        let l = s.g.constant(lms.clone());
        let i = s.g.constant(identity.clone());
        let out = self.gen.forward(&mut s, l, i, Mode::EVAL);
        s.g.value(out).clone()
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct StepLosses {
    pub step: usize,
    pub total: f64,
    pub corr: Option<f64>,
    pub pixel: Option<f64>,
    pub perceptual: Option<f64>,
    pub adversarial: Option<f64>,
    pub disc: Option<f64>,
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl StepLosses {
    pub const TSV_HEADER: &'static str = "step\ttotal\tcorr\tpixel\tperceptual\tadversarial\tdisc";

    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{:.6}\t{}\t{}\t{}\t{}\t{}",
            self.step,
            self.total,
            opt_cell(self.corr),
            opt_cell(self.pixel),
            opt_cell(self.perceptual),
            opt_cell(self.adversarial),
            opt_cell(self.disc),
        )
    }
}

pub struct Trainer<'c> {
    pub models: Models,
    clips: &'c [Clip],
    weights: LossWeights,
    adam_g: Adam,
    adam_d: Adam,
    flow: LucasKanade,
    rng: ChaCha8Rng,
    exec: Exec,
    batch_size: usize,
}

impl<'c> Trainer<'c> {
    pub fn new(clips: &'c [Clip], cfg: &TrainConfig, exec: Exec) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::invalid("no clips to train on"));
        }
        let ablation = cfg.ablation()?;
        let model = cfg.model()?;
        if ablation.disc_variant != DiscVariant::None && clips.len() < 2 {
            return Err(Error::invalid(
                "the mismatch term needs at least 2 clips in the pool",
            ));
        }
        let models = Models::build(
            &model,
            &ablation,
            &FrontendConfig::default(),
            cfg.seed,
            cfg.perceptual_ckpt.as_deref(),
        )?;
        Ok(Trainer {
            models,
            clips,
            weights: cfg.loss_weights,
            adam_g: Adam::new(cfg.lr, cfg.weight_decay),
            adam_d: Adam::new(cfg.disc_lr.unwrap_or(cfg.lr), cfg.weight_decay),
            flow: LucasKanade::default(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e3779b97f4a7c15),
            exec,
            batch_size: cfg.batch_size,
        })
    }

    pub fn step_index(&self) -> usize {
        self.models.cfg.step
    }

    fn next_batch(&mut self) -> (Batch, Vec<usize>) {
        let n = self.batch_size.min(self.clips.len());
        let mut order: Vec<usize> = (0..self.clips.len()).collect();
        order.shuffle(&mut self.rng);
        let idx: Vec<usize> = order.into_iter().take(n).collect();
        let refs: Vec<&Clip> = idx.iter().map(|&i| &self.clips[i]).collect();
        let mut batch = make_batch(&refs, &mut self.rng);
        batch.indices = idx.clone();
        (batch, idx)
    }

    fn mismatched_lms(&mut self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * 64 * 128);
        for &j in idx {
            let k = sample_mismatch(self.clips.len(), j, &mut self.rng);
            data.extend_from_slice(self.clips[k].lms.data());
        }
        Tensor::new(&[idx.len(), 1, 64, 128], data)
    }

    fn check_finite(name: &str, v: f64, step: usize) -> Result<f64> {
        if !v.is_finite() {
            return Err(Error::Diverged(format!("{name} loss {v} at step {step}")));
        }
        Ok(v)
    }

    /// Detached generator output with batch statistics (the generator's
    /// running stats must not move during the discriminator step).
    fn fakes_detached(&self, batch: &Batch) -> Tensor {
        let mut s = Sess::new(&self.models.vs, self.exec);
        let lms = s.g.constant(batch.lms.clone());
        let idimg = s.g.constant(batch.identity.clone());
        let out = self.models.gen.forward(&mut s, lms, idimg, Mode::FROZEN_BATCH);
        s.g.value(out).clone()
    }

    fn disc_step(&mut self, batch: &Batch, idx: &[usize]) -> Result<Option<f64>> {
        if self.models.disc.is_none() {
            return Ok(None);
        }
        let step = self.models.cfg.step;
        let fake = self.fakes_detached(batch);
        let lms_mis = self.mismatched_lms(idx);
        let disc = self.models.disc.as_ref().expect("checked above");
        let mut s = Sess::new(&self.models.vs, self.exec);
        let lms = s.g.constant(batch.lms.clone());
        let lms_m = s.g.constant(lms_mis);
        let video = s.g.constant(batch.video.clone());
        let fake_c = s.g.constant(fake);
        let d_real = disc.discriminate(&mut s, lms, video, &self.flow, Mode::TRAIN)?;
        let d_fake = disc.discriminate(&mut s, lms, fake_c, &self.flow, Mode::TRAIN)?;
        let d_mis = disc.discriminate(&mut s, lms_m, video, &self.flow, Mode::TRAIN)?;
        let loss = discriminator_loss(&mut s.g, d_real, d_fake, d_mis, LAMBDA_P, LAMBDA_U);
        let lv = Self::check_finite("discriminator", s.g.value(loss).item(), step)?;
        let grads = s.g.backward(loss);
        let named = s.named_grads(&grads);
        let updates = s.take_buffer_updates();
        drop(s);
        debug_assert!(named.iter().all(|(n, _)| n.starts_with("disc.")));
        self.adam_d.step(&mut self.models.vs, &named);
        for (name, t) in updates {
            self.models.vs.set(&name, t);
        }
        Ok(Some(lv))
    }

    fn gen_step(&mut self, batch: &Batch) -> Result<StepLosses> {
        let step = self.models.cfg.step;
        let ab = self.models.cfg.ablation;
        let mut s = Sess::new(&self.models.vs, self.exec);
        let lms = s.g.constant(batch.lms.clone());
        let idimg = s.g.constant(batch.identity.clone());
        let real = s.g.constant(batch.video.clone());

        let fa = self.models.gen.encode_audio(&mut s, lms, Mode::TRAIN);
        let fi = self.models.gen.encode_identity(&mut s, idimg, Mode::TRAIN);
        let fused = Generator::fuse(&mut s, fa, fi);
        let fake = self.models.gen.decode(&mut s, fused, Mode::TRAIN);

        let mut terms = LossTerms::default();
        if let Some(corr) = &self.models.corr {
            let ea = corr.embed_audio(&mut s, fa, Mode::TRAIN);
            let ev = corr.embed_video(&mut s, fake, &self.flow, Mode::TRAIN)?;
            terms.corr = Some(correlation_loss(&mut s.g, ea, ev));
        }
        if ab.use_pix {
            terms.pixel = Some(pixel_loss(&mut s.g, real, fake, PixelNorm::L1));
        }
        if let Some(ae) = &self.models.ae {
            let er = ae.encode(&mut s, real, Mode::EVAL);
            let ef = ae.encode(&mut s, fake, Mode::EVAL);
            terms.perceptual = Some(perceptual_loss(&mut s.g, er, ef));
        }
        if ab.use_gen {
            let disc = self.models.disc.as_ref().expect("validated: use_gen needs a disc");
            let d_fake =
                disc.discriminate(&mut s, lms, fake, &self.flow, Mode::FROZEN_BATCH)?;
            terms.adversarial = Some(generator_adversarial_loss(&mut s.g, d_fake));
        }
        let total = full_loss(&mut s.g, &terms, &self.weights)?;

        let read = |s: &mut Sess, id: Option<lipsynth_grad::Id>| id.map(|i| s.g.value(i).item());
        let losses = StepLosses {
            step,
            total: s.g.value(total).item(),
            corr: read(&mut s, terms.corr),
            pixel: read(&mut s, terms.pixel),
            perceptual: read(&mut s, terms.perceptual),
            adversarial: read(&mut s, terms.adversarial),
            disc: None,
        };
        Self::check_finite("generator", losses.total, step)?;

        let grads = s.g.backward(total);
        let named = s.named_grads(&grads);
        let updates = s.take_buffer_updates();
        drop(s);
        debug_assert!(named
            .iter()
            .all(|(n, _)| n.starts_with("gen.") || n.starts_with("corr.")));
        self.adam_g.step(&mut self.models.vs, &named);
        for (name, t) in updates {
            self.models.vs.set(&name, t);
        }
        Ok(losses)
    }

    /// One discriminator update followed by one generator update.
    pub fn step(&mut self) -> Result<StepLosses> {
        let (batch, idx) = self.next_batch();
        let d_loss = self.disc_step(&batch, &idx)?;
        let mut losses = self.gen_step(&batch)?;
        losses.disc = d_loss;
        self.models.cfg.step += 1;
        Ok(losses)
    }
}

pub struct TrainOutput {
    pub final_ckpt: PathBuf,
    pub log_path: PathBuf,
    pub steps_run: usize,
    pub last: StepLosses,
}

/// Full loop: loads clips, trains, writes an append-only TSV log, and saves
/// `latest.ckpt` every `ckpt_every` steps plus `final.ckpt` at the end. On
/// divergence the last `latest.ckpt` is left on disk and an error returns.
pub fn run_training(
    cfg: &TrainConfig,
    clips_dir: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
    exec: Exec,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let clips = load_clips(clips_dir)?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join("train_log.tsv");
    let mut log = OpenOptions::new().create(true).append(true).open(&log_path)?;
    if log.metadata()?.len() == 0 {
        writeln!(log, "{}", StepLosses::TSV_HEADER)?;
    }
    let mut trainer = Trainer::new(&clips, cfg, exec)?;
    let latest = out_dir.join("latest.ckpt");
    let mut last = None;
    for i in 0..cfg.steps {
        let losses = trainer.step()?;
        if i % cfg.log_every == 0 || i + 1 == cfg.steps {
            writeln!(log, "{}", losses.tsv_row())?;
            log.flush()?;
        }
        if (i + 1) % cfg.ckpt_every == 0 {
            trainer.models.save(&latest)?;
        }
        last = Some(losses);
    }
    let final_ckpt = out_dir.join("final.ckpt");
    trainer.models.save(&final_ckpt)?;
    Ok(TrainOutput {
        final_ckpt,
        log_path,
        steps_run: cfg.steps,
        last: last.expect("steps >= 1 was validated"),
    })
}

pub fn load_clips(dir: impl AsRef<Path>) -> Result<Vec<Clip>> {
    clip_dirs(dir.as_ref())?.iter().map(load_clip).collect()
}

/// Held-out discriminator accuracy on matched and mismatched pairs, eval
/// mode, chunked to bound memory. Mismatches are drawn with `seed`.
pub fn disc_pair_accuracy(
    models: &Models,
    clips: &[Clip],
    exec: Exec,
    seed: u64,
) -> Result<(f64, f64)> {
    let disc = models
        .disc
        .as_ref()
        .ok_or_else(|| Error::invalid("model has no discriminator"))?;
    if clips.len() < 2 {
        return Err(Error::invalid("need at least 2 clips for mismatch pairs"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flow = LucasKanade::default();
    let (mut match_hits, mut mis_hits) = (0usize, 0usize);
    for chunk in (0..clips.len()).collect::<Vec<_>>().chunks(8) {
        let refs: Vec<&Clip> = chunk.iter().map(|&i| &clips[i]).collect();
        let batch = make_batch(&refs, &mut rng);
        let mut mis = Vec::with_capacity(chunk.len() * 64 * 128);
        for &j in chunk {
            let k = sample_mismatch(clips.len(), j, &mut rng);
            mis.extend_from_slice(clips[k].lms.data());
        }
        let mut s = Sess::new(&models.vs, exec);
        let lms = s.g.constant(batch.lms.clone());
        let lms_m = s.g.constant(Tensor::new(&[chunk.len(), 1, 64, 128], mis));
        let video = s.g.constant(batch.video.clone());
        let p_match = disc.discriminate(&mut s, lms, video, &flow, Mode::EVAL)?;
        let p_mis = disc.discriminate(&mut s, lms_m, video, &flow, Mode::EVAL)?;
        match_hits += s.g.value(p_match).data().iter().filter(|&&p| p > 0.5).count();
        mis_hits += s.g.value(p_mis).data().iter().filter(|&&p| p < 0.5).count();
    }
    let n = clips.len() as f64;
    Ok((match_hits as f64 / n, mis_hits as f64 / n))
}

/// Generate a video for every clip (identity = the clip's first frame) and
/// score it against the real one. Landmarks on generated frames come from
/// the analytic detector, matching how the corpus landmarks were made.
pub fn evaluate_generator(
    models: &Models,
    clips: &[Clip],
    exec: Exec,
) -> Result<(crate::metrics::MetricReport, Vec<crate::metrics::ClipMetrics>)> {
    use crate::metrics::{clip_metrics, MetricReport};
    use crate::synth::EllipseDetector;
    use crate::vision::{denormalize, LandmarkSource};

    if clips.is_empty() {
        return Err(Error::invalid("no clips to evaluate"));
    }
    let mut per = Vec::with_capacity(clips.len());
    let fsize = 3 * 64 * 64;
    for chunk in clips.chunks(8) {
        let n = chunk.len();
        let mut lms = Vec::with_capacity(n * 64 * 128);
        let mut ident = Vec::with_capacity(n * fsize);
        for clip in chunk {
            lms.extend_from_slice(clip.lms.data());
            ident.extend_from_slice(&clip.frames.data()[..fsize]);
        }
        let fake = models.generate(
            &Tensor::new(&[n, 1, 64, 128], lms),
            &Tensor::new(&[n, 3, 64, 64], ident),
            exec,
        );
        for (i, clip) in chunk.iter().enumerate() {
            let fake01 = denormalize(&crate::data::to_tchw(&fake, i));
            let real01 = denormalize(&clip.frames);
            let fake_lm = EllipseDetector.landmarks(&fake01)?;
            per.push(clip_metrics(&real01, &fake01, &clip.landmarks, &fake_lm)?);
        }
    }
    let report = MetricReport::from_clips(&per)?;
    Ok((report, per))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{extract_window, load_video, video_dirs};
    use crate::perceptual::{save_perceptual, train_perceptual, PerceptualTrainOptions};
    use crate::synth;
    use std::path::Path;

    fn corpus_clips(dir: &Path, n_videos: usize, seed: u64) -> Vec<Clip> {
        let spec = synth::SynthSpec {
            n_videos,
            video_len: 23,
            delay: Some(0),
            envelope_seed: seed,
            noise_level: 0.0,
        };
        synth::write_corpus(&spec, dir).unwrap();
        let cfg = FrontendConfig::default();
        video_dirs(dir)
            .unwrap()
            .iter()
            .map(|d| extract_window(&load_video(d).unwrap(), 0, &cfg).unwrap())
            .collect()
    }

    fn tiny_cfg(steps: usize, perceptual: Option<PathBuf>) -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.model = "tiny".into();
        cfg.steps = steps;
        cfg.batch_size = 2;
        cfg.lr = 1e-3;
        cfg.log_every = 1;
        cfg.ckpt_every = 1000;
        cfg.perceptual_ckpt = perceptual;
        cfg
    }

    fn tiny_perceptual(dir: &Path, clips: &[Clip]) -> PathBuf {
        let opt = PerceptualTrainOptions { steps: 2, batch: 2, ..Default::default() };
        let widths = ModelConfig::tiny().ae;
        let (vs, _) = train_perceptual(clips, &widths, &opt, Exec::Seq).unwrap();
        let path = dir.join("ae.ckpt");
        save_perceptual(&path, &vs, &widths).unwrap();
        path
    }

    #[test]
    fn full_step_and_checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let clips = corpus_clips(&dir.path().join("corpus"), 2, 3);
        let ae = tiny_perceptual(dir.path(), &clips);
        let cfg = tiny_cfg(2, Some(ae));
        let mut trainer = Trainer::new(&clips, &cfg, Exec::Seq).unwrap();
        for step in 0..2 {
            let l = trainer.step().unwrap();
            assert_eq!(l.step, step);
            assert!(l.total.is_finite());
            for term in [l.corr, l.pixel, l.perceptual, l.adversarial, l.disc] {
                assert!(term.unwrap().is_finite());
            }
        }
        let path = dir.path().join("t.ckpt");
        trainer.models.save(&path).unwrap();
        let loaded = Models::load(&path).unwrap();
        assert_eq!(loaded.cfg.step, 2);
        assert!(loaded.corr.is_some() && loaded.ae.is_some() && loaded.disc.is_some());
        let mut n = 0;
        for (name, kind, t) in trainer.models.vs.iter() {
            assert_eq!(loaded.vs.kind(name), kind);
            assert_eq!(loaded.vs.get(name).data(), t.data(), "{name}");
            n += 1;
        }
        assert_eq!(loaded.vs.iter().count(), n);
        // the loaded generator reproduces the original's output bitwise
        let lms = Tensor::new(&[1, 1, 64, 128], clips[0].lms.data().to_vec());
        let ident =
            Tensor::new(&[1, 3, 64, 64], clips[0].frames.data()[..3 * 64 * 64].to_vec());
        let a = trainer.models.generate(&lms, &ident, Exec::Seq);
        let b = loaded.generate(&lms, &ident, Exec::Seq);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn ablation_masks_terms_and_skips_disc() {
        let dir = tempfile::tempdir().unwrap();
        let clips = corpus_clips(dir.path(), 1, 5);
        let mut cfg = tiny_cfg(1, None);
        cfg.ablation = "b".into();
        cfg.batch_size = 1;
        let mut trainer = Trainer::new(&clips, &cfg, Exec::Seq).unwrap();
        assert!(trainer.models.disc.is_none());
        let l = trainer.step().unwrap();
        assert!(l.pixel.is_some());
        assert!(l.corr.is_none() && l.perceptual.is_none());
        assert!(l.adversarial.is_none() && l.disc.is_none());
        assert!((l.total - 0.5 * l.pixel.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn training_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus");
        let clips = corpus_clips(&corpus, 2, 7);
        let clips_dir = dir.path().join("clips");
        for (i, c) in clips.iter().enumerate() {
            crate::data::write_clip(clips_dir.join(format!("c{i:05}")), c).unwrap();
        }
        let ae = tiny_perceptual(dir.path(), &clips);
        let cfg = tiny_cfg(3, Some(ae));
        let out_a = run_training(&cfg, &clips_dir, dir.path().join("a"), Exec::Seq).unwrap();
        let out_b = run_training(&cfg, &clips_dir, dir.path().join("b"), Exec::Seq).unwrap();
        let log_a = std::fs::read(&out_a.log_path).unwrap();
        let log_b = std::fs::read(&out_b.log_path).unwrap();
        assert!(!log_a.is_empty());
        assert_eq!(log_a, log_b);
        let ma = Models::load(&out_a.final_ckpt).unwrap();
        let mb = Models::load(&out_b.final_ckpt).unwrap();
        for (name, _, t) in ma.vs.iter() {
            assert_eq!(mb.vs.get(name).data(), t.data(), "{name}");
        }
        let header = String::from_utf8(log_a).unwrap();
        assert!(header.starts_with(StepLosses::TSV_HEADER));
    }

    #[test]
    fn divergence_aborts_with_error() {
        let dir = tempfile::tempdir().unwrap();
        let clips = corpus_clips(dir.path(), 1, 9);
        let mut cfg = tiny_cfg(1, None);
        cfg.ablation = "b".into();
        cfg.batch_size = 1;
        let mut trainer = Trainer::new(&clips, &cfg, Exec::Seq).unwrap();
        let shape = trainer.models.vs.get("gen.out.bias").shape().to_vec();
        trainer.models.vs.set("gen.out.bias", Tensor::full(&shape, f64::NAN));
        match trainer.step() {
            Err(Error::Diverged(_)) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn disc_accuracy_runs_on_untrained_model() {
        let dir = tempfile::tempdir().unwrap();
        let clips = corpus_clips(dir.path(), 3, 11);
        let ae = tiny_perceptual(dir.path(), &clips);
        let cfg = tiny_cfg(1, Some(ae));
        let trainer = Trainer::new(&clips, &cfg, Exec::Seq).unwrap();
        let (ma, mm) = disc_pair_accuracy(&trainer.models, &clips, Exec::Seq, 1).unwrap();
        assert!((0.0..=1.0).contains(&ma));
        assert!((0.0..=1.0).contains(&mm));
    }

    #[test]
    fn evaluation_runs_on_untrained_generator() {
        let dir = tempfile::tempdir().unwrap();
        let clips = corpus_clips(dir.path(), 2, 15);
        let mut cfg = tiny_cfg(1, None);
        cfg.ablation = "b".into();
        let trainer = Trainer::new(&clips, &cfg, Exec::Seq).unwrap();
        let (report, per) = evaluate_generator(&trainer.models, &clips, Exec::Seq).unwrap();
        assert_eq!(report.n_clips, 2);
        assert_eq!(per.len(), 2);
        assert!(report.lmd.is_finite() && report.lmd >= 0.0);
        assert!(report.psnr.is_finite());
        assert!(report.ssim.is_finite() && report.ssim <= 1.0);
        assert!(report.sharp_real > 0.0);
    }

    #[test]
    fn trainer_rejects_impossible_setups() {
        let dir = tempfile::tempdir().unwrap();
        let clips = corpus_clips(dir.path(), 1, 13);
        // disc enabled but only one clip: no mismatch possible
        let ae = tiny_perceptual(dir.path(), &clips);
        let cfg = tiny_cfg(1, Some(ae));
        assert!(Trainer::new(&clips, &cfg, Exec::Seq).is_err());
        // perceptual enabled but no checkpoint
        let cfg2 = tiny_cfg(1, None);
        assert!(Trainer::new(&clips, &cfg2, Exec::Seq).is_err());
    }
}
