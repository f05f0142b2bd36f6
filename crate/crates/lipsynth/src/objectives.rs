//! Loss assembly: the pixel term and the weighted full objective (Eq. 2
//! analog). The individual terms live next to the networks that produce
//! them and are re-exported here so the trainer has one import surface.

use crate::config::LossWeights;
use crate::{Error, Result};
use lipsynth_grad::{Graph, Id};

pub use crate::adversary::{discriminator_loss, generator_adversarial_loss};
pub use crate::corr::correlation_loss;
pub use crate::perceptual::perceptual_loss;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PixelNorm {
    L1,
    L2,
}

/// Mean per-element distance between generated and real frames.
pub fn pixel_loss(g: &mut Graph, real: Id, fake: Id, norm: PixelNorm) -> Id {
    let d = g.sub(real, fake);
    let e = match norm {
        PixelNorm::L1 => g.abs(d),
        PixelNorm::L2 => g.square(d),
    };
    g.mean_all(e)
}

/// Terms that survived ablation masking; absent terms simply don't exist in
/// the graph, so they cost nothing and contribute no gradient.
#[derive(Default, Clone, Copy)]
pub struct LossTerms {
    pub corr: Option<Id>,
    pub pixel: Option<Id>,
    pub perceptual: Option<Id>,
    pub adversarial: Option<Id>,
}

/// Eq. 2 analog:
/// corr + lambda1 * pixel + lambda2 * perceptual + lambda3 * adversarial.
pub fn full_loss(g: &mut Graph, terms: &LossTerms, w: &LossWeights) -> Result<Id> {
    let weighted = [
        (terms.corr, 1.0),
        (terms.pixel, w.lambda1),
        (terms.perceptual, w.lambda2),
        (terms.adversarial, w.lambda3),
    ];
    let mut total: Option<Id> = None;
    for (term, lambda) in weighted {
        let Some(id) = term else { continue };
        let scaled = if lambda == 1.0 { id } else { g.mul_scalar(id, lambda) };
        total = Some(match total {
            Some(acc) => g.add(acc, scaled),
            None => scaled,
        });
    }
    total.ok_or_else(|| Error::Config("objective has no active loss terms".into()))
}
