//! Group region-context module.
//!
//! For a batch of images from one group, every image is split into `C` soft
//! class regions using the auxiliary head's per-pixel class distribution, and
//! each region is summarized by the weighted mean of the encoder features.
//! Every pixel then attends over all `N·C` regions of the batch; the attended
//! value is transformed into a context vector and fused with the pixel's own
//! features.
//!
//! Shapes: features `X` are (N, CH, H, W), auxiliary logits (N, C, H, W), a
//! region bank (N, C, CH).

use std::str::FromStr;

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{from_rows, softmax, to_rows, Affine, ParamStore};

/// Context used between encoder and decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextVariant {
    /// Decoder sees the encoder features unchanged.
    None,
    /// One group vector (mean of all regions) broadcast to every pixel.
    Global,
    /// Per-pixel attention over the group's regions.
    Group,
}

impl FromStr for ContextVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "global" => Ok(Self::Global),
            "group" => Ok(Self::Group),
            other => Err(Error::invalid(format!(
                "unknown context variant `{other}` (expected none, global or group)"
            ))),
        }
    }
}

impl std::fmt::Display for ContextVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Global => "global",
            Self::Group => "group",
        })
    }
}

/// How class weights are normalized when pooling a region.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegionNorm {
    /// `f_c = Σ_i r_ci X_i / Σ_i r_ci`: a weighted mean, independent of image size.
    #[serde(rename = "softmax+spatial")]
    SoftmaxSpatial,
    /// `f_c = Σ_i r_ci X_i` with `r_·i` the class softmax only.
    #[serde(rename = "softmax-only")]
    SoftmaxOnly,
}

/// Keeps the spatial normalization finite for classes with no mass.
const REGION_EPS: f64 = 1e-6;

/// Soft region representations of a batch of images, (N, C, CH).
#[derive(Clone, Debug)]
pub struct RegionBank {
    regions: Tensor,
}

impl RegionBank {
    pub fn new(regions: Tensor) -> Result<Self> {
        let (n, _, _) = regions.dims3()?;
        if n == 0 {
            return Err(Error::invalid("region bank is empty"));
        }
        Ok(Self { regions })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.regions
    }

    pub fn images(&self) -> usize {
        self.regions.dims()[0]
    }

    pub fn classes(&self) -> usize {
        self.regions.dims()[1]
    }

    pub fn channels(&self) -> usize {
        self.regions.dims()[2]
    }

    /// All regions as rows, (N·C, CH).
    pub fn flat(&self) -> Result<Tensor> {
        let (n, c, ch) = self.regions.dims3()?;
        Ok(self.regions.reshape((n * c, ch))?)
    }

    pub fn detach(&self) -> Self {
        Self {
            regions: self.regions.detach(),
        }
    }
}

/// Pools encoder features into `C` soft class regions per image.
pub fn extract_regions(features: &Tensor, aux_logits: &Tensor, norm: RegionNorm) -> Result<RegionBank> {
    let (n, ch, h, w) = features.dims4()?;
    let (n2, c, h2, w2) = aux_logits.dims4()?;
    if (n, h, w) != (n2, h2, w2) {
        return Err(Error::shape(format!(
            "features are {n}x{ch}x{h}x{w} but auxiliary logits are {n2}x{c}x{h2}x{w2}"
        )));
    }
    let weights = softmax(aux_logits, 1)?.reshape((n, c, h * w))?;
    let pixels = features.reshape((n, ch, h * w))?.transpose(1, 2)?.contiguous()?;
    let pooled = weights.matmul(&pixels)?; // (N, C, CH)
    let regions = match norm {
        RegionNorm::SoftmaxOnly => pooled,
        RegionNorm::SoftmaxSpatial => {
            let mass = weights.sum_keepdim(2)?.affine(1.0, REGION_EPS)?;
            pooled.broadcast_div(&mass)?
        }
    };
    RegionBank::new(regions)
}

/// The learned maps of the module. Names follow their role: `query` projects
/// pixels and `key` projects regions for the relation score, `value` and
/// `output` transform the aggregated regions, `fuse` merges `[X, context]`
/// back to `CH` channels.
#[derive(Clone, Debug)]
pub struct GroupContextParams {
    pub query: Affine,
    pub key: Affine,
    pub value: Affine,
    pub output: Affine,
    pub fuse: Affine,
}

impl GroupContextParams {
    /// Random projections; `fuse` starts as `[Identity | 0]` so the module is
    /// initially a no-op on the features.
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, attention_dim: usize) -> Result<Self> {
        let query = Affine::new(store, &format!("{prefix}.query"), channels, attention_dim)?;
        let key = Affine::new(store, &format!("{prefix}.key"), channels, attention_dim)?;
        let value = Affine::new(store, &format!("{prefix}.value"), channels, channels)?;
        let output = Affine::new(store, &format!("{prefix}.output"), channels, channels)?;
        let mut identity = vec![0f64; channels * 2 * channels];
        for i in 0..channels {
            identity[i * 2 * channels + i] = 1.0;
        }
        let fuse = Affine::with_values(store, &format!("{prefix}.fuse"), 2 * channels, channels, identity)?;
        Ok(Self {
            query,
            key,
            value,
            output,
            fuse,
        })
    }

    /// Same as [`Self::new`] but with a randomly initialized `fuse`.
    pub fn new_random(store: &mut ParamStore, prefix: &str, channels: usize, attention_dim: usize) -> Result<Self> {
        let query = Affine::new(store, &format!("{prefix}.query"), channels, attention_dim)?;
        let key = Affine::new(store, &format!("{prefix}.key"), channels, attention_dim)?;
        let value = Affine::new(store, &format!("{prefix}.value"), channels, channels)?;
        let output = Affine::new(store, &format!("{prefix}.output"), channels, channels)?;
        let fuse = Affine::new(store, &format!("{prefix}.fuse"), 2 * channels, channels)?;
        Ok(Self {
            query,
            key,
            value,
            output,
            fuse,
        })
    }

    pub fn channels(&self) -> usize {
        self.value.d_in()
    }

    fn check(&self, channels: usize) -> Result<()> {
        if self.channels() != channels || self.query.d_in() != channels || self.fuse.d_in() != 2 * channels {
            return Err(Error::shape(format!(
                "context parameters expect {} channels, features have {channels}",
                self.channels()
            )));
        }
        Ok(())
    }
}

/// Attention of every pixel over the regions, (N·H·W, N_bank·C); rows sum to one.
pub fn attention_weights(features: &Tensor, bank: &RegionBank, params: &GroupContextParams) -> Result<Tensor> {
    let (_, ch, _, _) = features.dims4()?;
    params.check(ch)?;
    if bank.channels() != ch {
        return Err(Error::shape(format!("bank has {} channels, features {ch}", bank.channels())));
    }
    let q = params.query.forward(&to_rows(features)?)?;
    let k = params.key.forward(&bank.flat()?)?;
    softmax(&q.matmul(&k.t()?)?, 1)
}

/// Per-pixel context: softmax-weighted sum of transformed regions, then the output map.
pub fn aggregate_group_context(features: &Tensor, bank: &RegionBank, params: &GroupContextParams) -> Result<Tensor> {
    let (n, _, h, w) = features.dims4()?;
    let weights = attention_weights(features, bank, params)?;
    let values = params.value.forward(&bank.flat()?)?;
    let context = params.output.forward(&weights.matmul(&values)?)?;
    from_rows(&context, n, h, w)
}

/// Mean of all regions, transformed and broadcast to every pixel.
pub fn global_context_variant(features: &Tensor, bank: &RegionBank, params: &GroupContextParams) -> Result<Tensor> {
    let (n, ch, h, w) = features.dims4()?;
    params.check(ch)?;
    if bank.channels() != ch {
        return Err(Error::shape(format!("bank has {} channels, features {ch}", bank.channels())));
    }
    let mean = bank.flat()?.mean_keepdim(0)?; // (1, CH)
    let context = params.output.forward(&params.value.forward(&mean)?)?;
    Ok(context.reshape((1, ch, 1, 1))?.broadcast_as((n, ch, h, w))?.contiguous()?)
}

pub fn none_variant(features: &Tensor) -> Tensor {
    features.clone()
}

/// `X̂ = fuse([X, context])` per pixel.
pub fn enhance(features: &Tensor, context: &Tensor, params: &GroupContextParams) -> Result<Tensor> {
    let (n, ch, h, w) = features.dims4()?;
    if context.dims() != features.dims() {
        return Err(Error::shape(format!(
            "context {:?} does not match features {:?}",
            context.dims(),
            features.dims()
        )));
    }
    params.check(ch)?;
    let joined = Tensor::cat(&[&to_rows(features)?, &to_rows(context)?], D::Minus1)?;
    from_rows(&params.fuse.forward(&joined)?, n, h, w)
}

/// Where the region bank for a forward pass comes from.
#[derive(Clone, Copy, Debug)]
pub enum BankSource<'a> {
    /// No bank; only valid for [`ContextVariant::None`].
    Absent,
    /// Build the bank from the batch being processed.
    FromBatch,
    External(&'a RegionBank),
}

/// The module as plugged between encoder and decoder.
#[derive(Clone, Debug)]
pub struct ContextModule {
    pub variant: ContextVariant,
    pub norm: RegionNorm,
    pub params: GroupContextParams,
    /// When building the bank from the batch, block gradients through regions
    /// contributed by the other images of the batch.
    pub stop_grad_others: bool,
}

impl ContextModule {
    pub fn forward(&self, features: &Tensor, aux_logits: &Tensor, bank: BankSource<'_>) -> Result<Tensor> {
        if self.variant == ContextVariant::None {
            return Ok(none_variant(features));
        }
        let context = match bank {
            BankSource::Absent => {
                return Err(Error::invalid(format!(
                    "context variant `{}` needs a region bank",
                    self.variant
                )))
            }
            BankSource::External(bank) => self.context(features, bank)?,
            BankSource::FromBatch => {
                let bank = extract_regions(features, aux_logits, self.norm)?;
                if self.stop_grad_others && bank.images() > 1 {
                    self.context_own_gradients_only(features, &bank)?
                } else {
                    self.context(features, &bank)?
                }
            }
        };
        enhance(features, &context, &self.params)
    }

    fn context(&self, features: &Tensor, bank: &RegionBank) -> Result<Tensor> {
        match self.variant {
            ContextVariant::Group => aggregate_group_context(features, bank, &self.params),
            ContextVariant::Global => global_context_variant(features, bank, &self.params),
            ContextVariant::None => Ok(features.clone()),
        }
    }

    /// Image `i` sees its own regions with gradients and the others detached.
    fn context_own_gradients_only(&self, features: &Tensor, bank: &RegionBank) -> Result<Tensor> {
        let n = bank.images();
        let detached = bank.tensor().detach();
        let mut outs = Vec::with_capacity(n);
        for i in 0..n {
            let mut parts = Vec::with_capacity(3);
            if i > 0 {
                parts.push(detached.narrow(0, 0, i)?);
            }
            parts.push(bank.tensor().narrow(0, i, 1)?);
            if i + 1 < n {
                parts.push(detached.narrow(0, i + 1, n - i - 1)?);
            }
            let own = RegionBank::new(Tensor::cat(&parts, 0)?)?;
            outs.push(self.context(&features.narrow(0, i, 1)?, &own)?);
        }
        Ok(Tensor::cat(&outs, 0)?)
    }
}
