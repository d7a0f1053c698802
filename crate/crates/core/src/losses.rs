//! Training objectives. All losses are pixel means so their scale does not
//! depend on resolution; logs are natural.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{Mask, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::nn::{log_softmax, scalar, softmax, softplus};

/// Floor for probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Label the discriminator should output for source entropy maps.
pub const SOURCE_LABEL: f64 = 1.0;
pub const TARGET_LABEL: f64 = 0.0;

/// A masked cross-entropy value and how many pixels it averaged.
#[derive(Clone, Debug)]
pub struct MaskedLoss {
    pub loss: Tensor,
    pub valid_pixels: usize,
}

impl MaskedLoss {
    /// True when every pixel was ignored; `loss` is then a constant zero.
    pub fn all_ignored(&self) -> bool {
        self.valid_pixels == 0
    }

    pub fn value(&self) -> Result<f64> {
        scalar(&self.loss)
    }
}

/// Concatenates masks into one (N·H·W) target buffer.
pub fn stack_masks(masks: &[&Mask]) -> Vec<u8> {
    masks.iter().flat_map(|m| m.data().iter().copied()).collect()
}

/// Mean over non-ignored pixels of `-log softmax(logits)[target]`.
/// `logits` is (N, C, H, W); `targets` holds N·H·W labels in row-major order.
pub fn seg_loss(logits: &Tensor, targets: &[u8]) -> Result<MaskedLoss> {
    let (n, c, h, w) = logits.dims4()?;
    let plane = h * w;
    if targets.len() != n * plane {
        return Err(Error::shape(format!(
            "{} targets for logits of shape {n}x{c}x{h}x{w}",
            targets.len()
        )));
    }
    let mut weights = vec![0f64; n * c * plane];
    let mut valid = 0usize;
    for (i, &t) in targets.iter().enumerate() {
        if t == IGNORE_INDEX {
            continue;
        }
        let t = t as usize;
        if t >= c {
            return Err(Error::invalid(format!("target class {t} out of range for {c} classes")));
        }
        let (img, pix) = (i / plane, i % plane);
        weights[img * c * plane + t * plane + pix] = 1.0;
        valid += 1;
    }
    if valid == 0 {
        log::debug!("segmentation loss: every pixel ignored");
        return Ok(MaskedLoss {
            loss: Tensor::zeros((), logits.dtype(), logits.device())?,
            valid_pixels: 0,
        });
    }
    let scale = 1.0 / valid as f64;
    for v in weights.iter_mut() {
        *v *= scale;
    }
    let weights = Tensor::from_vec(weights, (n, c, h, w), logits.device())?.to_dtype(logits.dtype())?;
    let loss = log_softmax(logits, 1)?.mul(&weights)?.sum_all()?.neg()?;
    Ok(MaskedLoss {
        loss,
        valid_pixels: valid,
    })
}

/// Pseudo-label loss; same semantics as [`seg_loss`].
pub fn pseudo_loss(logits: &Tensor, pseudo: &[u8]) -> Result<MaskedLoss> {
    seg_loss(logits, pseudo)
}

/// Per-pixel entropy of a probability map (N, C, H, W) → (N, 1, H, W).
/// Rejects maps whose per-pixel sums are off by more than 1e-4 or that hold
/// negative entries.
pub fn entropy_map(probs: &Tensor) -> Result<Tensor> {
    let sums = probs.sum(1)?.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if let Some(s) = sums.iter().find(|s| !((**s - 1.0).abs() <= 1e-4)) {
        return Err(Error::invalid(format!("probability map is not normalized (pixel sum {s})")));
    }
    let min = scalar(&probs.min_all()?)?;
    if min < 0.0 {
        return Err(Error::invalid(format!("probability map has negative entry {min}")));
    }
    let logp = probs.clamp(PROB_FLOOR, 1.0)?.log()?;
    Ok(probs.mul(&logp)?.sum_keepdim(1)?.neg()?)
}

/// Entropy of `softmax(logits)` per pixel, with exact log-probabilities.
pub fn entropy_from_logits(logits: &Tensor) -> Result<Tensor> {
    Ok(self_information_from_logits(logits)?.sum_keepdim(1)?)
}

/// Weighted self-information `-p_c log p_c` per class, (N, C, H, W).
pub fn self_information_from_logits(logits: &Tensor) -> Result<Tensor> {
    let p = softmax(logits, 1)?;
    Ok(p.mul(&log_softmax(logits, 1)?)?.neg()?)
}

/// What the discriminator looks at.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiscInput {
    /// One-channel entropy map.
    #[default]
    Entropy,
    /// C-channel weighted self-information map.
    SelfInformation,
}

impl DiscInput {
    pub fn channels(self, class_count: usize) -> usize {
        match self {
            Self::Entropy => 1,
            Self::SelfInformation => class_count,
        }
    }

    pub fn map(self, logits: &Tensor) -> Result<Tensor> {
        match self {
            Self::Entropy => entropy_from_logits(logits),
            Self::SelfInformation => self_information_from_logits(logits),
        }
    }
}

/// Mean binary cross-entropy of logits `z` against a constant label.
pub fn bce_with_logits(z: &Tensor, label: f64) -> Result<Tensor> {
    // softplus(z) - y·z
    Ok(softplus(z)?.sub(&z.affine(label, 0.0)?)?.mean_all()?)
}

/// `0.5·(BCE(D(E_s), source) + BCE(D(E_p), target))`; inputs are the
/// discriminator outputs on detached maps.
pub fn discriminator_loss(d_source: &Tensor, d_target: &Tensor) -> Result<Tensor> {
    let s = bce_with_logits(d_source, SOURCE_LABEL)?;
    let t = bce_with_logits(d_target, TARGET_LABEL)?;
    Ok(s.add(&t)?.affine(0.5, 0.0)?)
}

/// Generator side: push `D(E_p)` toward the source label.
pub fn generator_adv_loss(d_target: &Tensor) -> Result<Tensor> {
    bce_with_logits(d_target, SOURCE_LABEL)
}

#[derive(Clone, Debug)]
pub struct AdvLosses {
    /// Discriminator objective on detached maps.
    pub disc: Tensor,
    /// Adversarial term for the segmentation network.
    pub adv: Tensor,
}

/// Both adversarial losses from source and personal maps; `disc` is the
/// discriminator as a function of its input map.
pub fn adv_losses(e_source: &Tensor, e_personal: &Tensor, disc: &dyn Fn(&Tensor) -> Result<Tensor>) -> Result<AdvLosses> {
    let check = |map: &Tensor, out: &Tensor| -> Result<()> {
        let (n, _, _, _) = map.dims4()?;
        let (n2, c2, _, _) = out.dims4()?;
        if n != n2 || c2 != 1 {
            return Err(Error::shape(format!(
                "discriminator output {:?} does not match map {:?}",
                out.dims(),
                map.dims()
            )));
        }
        Ok(())
    };
    let d_s = disc(&e_source.detach())?;
    check(e_source, &d_s)?;
    let d_p_detached = disc(&e_personal.detach())?;
    check(e_personal, &d_p_detached)?;
    let d_p = disc(e_personal)?;
    Ok(AdvLosses {
        disc: discriminator_loss(&d_s, &d_p_detached)?,
        adv: generator_adv_loss(&d_p)?,
    })
}
