//! Serializable configuration: audio frontend constants, model widths,
//! loss weights, ablation presets and the training configuration.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Audio frontend constants. The defaults make 0.64 s of audio map exactly
/// to a 64x128 log-mel grid (64 hops of 512 samples at 51200 Hz).
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(default)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub hop: usize,
    pub fft_window: usize,
    pub mel_bands: usize,
    pub window_seconds: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            sample_rate: 51200,
            hop: 512,
            fft_window: 1024,
            mel_bands: 128,
            window_seconds: 0.64,
        }
    }
}

impl FrontendConfig {
    pub fn window_samples(&self) -> usize {
        (self.window_seconds * self.sample_rate as f64).round() as usize
    }
    pub fn n_frames(&self) -> usize {
        self.window_samples() / self.hop
    }
    pub fn validate(&self) -> Result<()> {
        if self.window_samples() % self.hop != 0 {
            return Err(Error::Config("window length must be a multiple of hop".into()));
        }
        if self.fft_window < self.hop {
            return Err(Error::Config("fft_window must be >= hop".into()));
        }
        Ok(())
    }
}

/// Channel widths of the generation path. The decoder trunk operates
/// directly on the fused feature, so its width is `audio[3] + identity[2]`.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct GeneratorWidths {
    pub audio: [usize; 4],
    pub identity: [usize; 3],
    pub res_blocks: usize,
    pub deconv: [usize; 2],
}

impl GeneratorWidths {
    pub fn trunk(&self) -> usize {
        self.audio[3] + self.identity[2]
    }
}

/// Hidden widths of the correlation encoders; both collapse to a single
/// output channel, giving flattened embeddings of equal length.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct CorrWidths {
    pub phi_s: [usize; 3],
    pub phi_v: [usize; 3],
}

/// Discriminator stream widths. `fc` is the audio-stream bottleneck that is
/// duplicated across the 4x4 grid before the head convolutions.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct DiscWidths {
    pub audio: [usize; 4],
    pub fc: usize,
    pub video: [usize; 4],
    pub flow: [usize; 4],
    pub head: usize,
}

/// Perceptual autoencoder widths: three stride-2 encoder convolutions, then
/// `res_blocks` residual blocks at `enc[2]` channels; the decoder mirrors
/// the convolutions.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct AeWidths {
    pub enc: [usize; 3],
    pub res_blocks: usize,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub version: u32,
    pub generator: GeneratorWidths,
    pub corr: CorrWidths,
    pub disc: DiscWidths,
    pub ae: AeWidths,
}

impl ModelConfig {
    /// Full-scale widths. Too slow for interactive use on one CPU core but
    /// recorded as the canonical configuration.
    pub fn paper() -> Self {
        ModelConfig {
            version: 1,
            generator: GeneratorWidths {
                audio: [32, 64, 64, 128],
                identity: [32, 64, 128],
                res_blocks: 9,
                deconv: [128, 64],
            },
            corr: CorrWidths { phi_s: [16, 32, 64], phi_v: [16, 32, 64] },
            disc: DiscWidths {
                audio: [32, 64, 64, 128],
                fc: 256,
                video: [64, 128, 256, 256],
                flow: [32, 64, 128, 256],
                head: 256,
            },
            ae: AeWidths { enc: [64, 128, 256], res_blocks: 6 },
        }
    }

    /// Default configuration: same layer structure as `paper` with channel
    /// widths scaled down so single-sample generation stays under a second
    /// on one desktop core.
    pub fn desk() -> Self {
        ModelConfig {
            version: 1,
            generator: GeneratorWidths {
                audio: [4, 8, 8, 16],
                identity: [4, 8, 16],
                res_blocks: 9,
                deconv: [16, 8],
            },
            corr: CorrWidths { phi_s: [8, 16, 16], phi_v: [8, 16, 16] },
            disc: DiscWidths {
                audio: [8, 16, 16, 32],
                fc: 256,
                video: [16, 32, 64, 64],
                flow: [8, 16, 32, 64],
                head: 64,
            },
            ae: AeWidths { enc: [8, 16, 32], res_blocks: 6 },
        }
    }

    /// Half-width decoder for the overfit smoke run: keeps a training step
    /// cheap enough to finish a run in well under the CPU budget.
    pub fn smoke() -> Self {
        ModelConfig {
            version: 1,
            generator: GeneratorWidths {
                audio: [2, 4, 4, 8],
                identity: [2, 4, 8],
                res_blocks: 9,
                deconv: [8, 4],
            },
            corr: CorrWidths { phi_s: [4, 8, 8], phi_v: [4, 8, 8] },
            disc: DiscWidths {
                audio: [4, 8, 8, 16],
                fc: 64,
                video: [8, 16, 32, 32],
                flow: [4, 8, 16, 32],
                head: 32,
            },
            ae: AeWidths { enc: [4, 8, 16], res_blocks: 6 },
        }
    }

    /// Minimal widths for finite-difference gradient checks; every loss
    /// path stays under 1e4 parameters.
    pub fn tiny() -> Self {
        ModelConfig {
            version: 1,
            generator: GeneratorWidths {
                audio: [2, 2, 2, 3],
                identity: [2, 2, 3],
                res_blocks: 2,
                deconv: [4, 2],
            },
            corr: CorrWidths { phi_s: [2, 2, 2], phi_v: [2, 2, 2] },
            disc: DiscWidths {
                audio: [2, 2, 2, 1],
                fc: 2,
                video: [2, 2, 2, 2],
                flow: [2, 2, 2, 2],
                head: 4,
            },
            ae: AeWidths { enc: [2, 2, 2], res_blocks: 2 },
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            "smoke" => Ok(Self::smoke()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown model preset `{other}`"))),
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

/// Coefficients of the full objective: total = corr + l1*pix + l2*perc
/// + l3*gen.
#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq)]
#[serde(default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 0.5, lambda2: 1.0, lambda3: 1.0 }
    }
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum DiscVariant {
    TwoStream,
    ThreeStream,
    ThreeStreamFrameDiff,
    None,
}

/// Which loss terms and discriminator variant a run uses. The presets
/// (a)-(i) reproduce the ablation grid exactly; see `table_row`.
#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq)]
pub struct AblationSpec {
    pub use_corr: bool,
    pub corr_non_derivative: bool,
    pub use_gen: bool,
    pub use_pix: bool,
    pub use_perc: bool,
    pub disc_variant: DiscVariant,
}

impl AblationSpec {
    pub fn preset(name: &str) -> Result<Self> {
        use DiscVariant::*;
        let s = |corr, nd, gen, pix, perc, disc| AblationSpec {
            use_corr: corr,
            corr_non_derivative: nd,
            use_gen: gen,
            use_pix: pix,
            use_perc: perc,
            disc_variant: disc,
        };
        let spec = match name {
            "a" => s(false, false, true, false, false, ThreeStream),
            "b" => s(false, false, false, true, false, None),
            "c" => s(false, false, true, true, false, ThreeStream),
            "d" => s(false, false, true, true, true, ThreeStream),
            "e" => s(true, false, true, true, true, ThreeStream),
            "f" => s(true, true, true, true, true, ThreeStream),
            "g" => s(true, false, true, true, true, TwoStream),
            "h" => s(false, false, true, true, true, TwoStream),
            "i" => s(true, false, true, true, true, ThreeStreamFrameDiff),
            other => return Err(Error::Config(format!("unknown ablation preset `{other}`"))),
        };
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.corr_non_derivative && !self.use_corr {
            return Err(Error::Config("corr_non_derivative requires use_corr".into()));
        }
        if self.disc_variant == DiscVariant::None && self.use_gen {
            return Err(Error::Config("use_gen requires a discriminator".into()));
        }
        Ok(())
    }

    /// Check-mark row in the ablation table's order: derivative correlation,
    /// non-derivative correlation, adversarial, pixel, perceptual,
    /// two-stream D, three-stream D, frame-difference D.
    pub fn table_row(&self) -> [bool; 8] {
        [
            self.use_corr && !self.corr_non_derivative,
            self.use_corr && self.corr_non_derivative,
            self.use_gen,
            self.use_pix,
            self.use_perc,
            self.disc_variant == DiscVariant::TwoStream,
            self.disc_variant == DiscVariant::ThreeStream,
            self.disc_variant == DiscVariant::ThreeStreamFrameDiff,
        ]
    }
}

impl Default for AblationSpec {
    fn default() -> Self {
        AblationSpec::preset("e").unwrap()
    }
}

fn default_lr() -> f64 {
    1e-4
}
fn default_weight_decay() -> f64 {
    5e-4
}
fn default_batch_size() -> usize {
    16
}
fn default_steps() -> usize {
    2000
}
fn default_seed() -> u64 {
    17
}
fn default_log_every() -> usize {
    10
}
fn default_ckpt_every() -> usize {
    500
}
fn default_model() -> String {
    "desk".into()
}
fn default_ablation() -> String {
    "e".into()
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Discriminator learning rate; falls back to `lr` when unset. Small
    /// corpora need the discriminator slowed down or it overpowers the
    /// generator long before the pixel term converges.
    #[serde(default)]
    pub disc_lr: Option<f64>,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub loss_weights: LossWeights,
    /// Ablation preset letter, or "custom" with `ablation_spec` set.
    #[serde(default = "default_ablation")]
    pub ablation: String,
    #[serde(default)]
    pub ablation_spec: Option<AblationSpec>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Model preset name; `model_config` overrides when present.
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default)]
    pub model_config: Option<ModelConfig>,
    #[serde(default)]
    pub perceptual_ckpt: Option<PathBuf>,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default = "default_ckpt_every")]
    pub ckpt_every: usize,
}

impl TrainConfig {
    pub fn ablation(&self) -> Result<AblationSpec> {
        let spec = match (self.ablation.as_str(), &self.ablation_spec) {
            ("custom", Some(s)) => *s,
            ("custom", None) => {
                return Err(Error::Config("ablation=custom needs ablation_spec".into()))
            }
            (name, _) => AblationSpec::preset(name)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn model(&self) -> Result<ModelConfig> {
        match &self.model_config {
            Some(m) => Ok(m.clone()),
            None => ModelConfig::preset(&self.model),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.disc_lr.is_some_and(|d| d <= 0.0) {
            return Err(Error::Config("disc_lr must be positive".into()));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::Config("batch_size and steps must be positive".into()));
        }
        let ab = self.ablation()?;
        if ab.use_perc && self.perceptual_ckpt.is_none() {
            return Err(Error::Config("perceptual loss enabled but no perceptual_ckpt".into()));
        }
        if let Some(p) = &self.perceptual_ckpt {
            if ab.use_perc && !p.exists() {
                return Err(Error::Config(format!("perceptual_ckpt {} not found", p.display())));
            }
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        toml::from_str("").unwrap()
    }
}

pub fn load_toml<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let s = std::fs::read_to_string(path.as_ref())?;
    toml::from_str(&s)
        .map_err(|e| Error::Config(format!("{}: {e}", path.as_ref().display())))
}
