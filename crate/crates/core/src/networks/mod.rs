//! Segmentation networks and the entropy-map discriminator.
//!
//! A [`SegModel`] is encoder → (auxiliary head, context module) → decoder,
//! with the decoder output resized to the input resolution. Two encoders are
//! available: a small strided conv stack for 64×64 experiments and a dilated
//! ResNet-50 with a pyramid pooling module.

mod checkpoint;
mod desk;
mod discriminator;
mod resnet;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use discriminator::{DiscConfig, Discriminator};

use crate::context::{BankSource, ContextModule, ContextVariant, GroupContextParams, RegionNorm};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::grouping::DescriptorFn;
use crate::nn::{resize_bilinear, Conv2d, ConvSpec, ParamStore};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Self::F32 => DType::F32,
            Self::F64 => DType::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// `desk` or `resnet50`.
    pub backbone: String,
    pub class_count: usize,
    /// Feature channels seen by the context module (desk only; the full model uses 512).
    pub channels: usize,
    pub attention_dim: usize,
    pub variant: ContextVariant,
    pub region_norm: RegionNorm,
    pub stop_grad_others: bool,
    /// Square input side the data is resized/cropped to.
    pub input_size: usize,
    pub input_mean: [f32; 3],
    pub input_std: [f32; 3],
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(4)
    }
}

impl ModelConfig {
    pub fn desk(class_count: usize) -> Self {
        Self {
            backbone: "desk".into(),
            class_count,
            channels: 32,
            attention_dim: 16,
            variant: ContextVariant::Group,
            region_norm: RegionNorm::SoftmaxSpatial,
            stop_grad_others: false,
            input_size: 64,
            input_mean: [0.5; 3],
            input_std: [0.25; 3],
            precision: Precision::F32,
        }
    }

    pub fn full(class_count: usize) -> Self {
        Self {
            backbone: "resnet50".into(),
            class_count,
            channels: resnet::PSP_OUT,
            attention_dim: resnet::PSP_OUT / 2,
            input_size: 320,
            input_mean: [0.485, 0.456, 0.406],
            input_std: [0.229, 0.224, 0.225],
            ..Self::desk(class_count)
        }
    }
}

enum Encoder {
    Desk(desk::DeskEncoder),
    ResNet(resnet::ResNetPsp),
}

enum Decoder {
    Desk(desk::DeskDecoder),
    Full(resnet::FullDecoder),
}

/// Everything a forward pass produces.
#[derive(Clone, Debug)]
pub struct SegOutput {
    /// Class logits at input resolution, (N, C, H, W).
    pub logits: Tensor,
    /// Auxiliary class logits at feature resolution.
    pub aux_logits: Tensor,
    /// Encoder output fed to the context module.
    pub features: Tensor,
    /// Features after the context module.
    pub enhanced: Tensor,
}

pub struct SegModel {
    config: ModelConfig,
    store: ParamStore,
    encoder: Encoder,
    aux: Conv2d,
    context: ContextModule,
    decoder: Decoder,
}

impl std::fmt::Debug for SegModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SegModel")
            .field("backbone", &self.config.backbone)
            .field("variant", &self.config.variant)
            .field("parameters", &self.store.parameter_count())
            .finish()
    }
}

/// Builds the model named by `config.backbone`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<SegModel> {
    match config.backbone.as_str() {
        "desk" => build_desk_model(config, seed),
        "resnet50" => build_full_model(config, seed),
        other => Err(Error::invalid(format!("unknown backbone `{other}` (expected desk or resnet50)"))),
    }
}

fn check_common(config: &ModelConfig) -> Result<()> {
    if config.class_count < 2 {
        return Err(Error::invalid("a model needs at least two classes"));
    }
    if config.attention_dim == 0 || config.channels == 0 {
        return Err(Error::invalid("channel counts must be positive"));
    }
    Ok(())
}

pub fn build_desk_model(config: &ModelConfig, seed: u64) -> Result<SegModel> {
    check_common(config)?;
    let mut store = ParamStore::new(seed, config.precision.dtype());
    let ch = config.channels;
    let encoder = desk::DeskEncoder::new(&mut store, ch)?;
    let aux = Conv2d::new(&mut store, "aux", ch, config.class_count, ConvSpec::same(1))?;
    let params = GroupContextParams::new(&mut store, "context", ch, config.attention_dim)?;
    let decoder = desk::DeskDecoder::new(&mut store, ch, config.class_count)?;
    Ok(SegModel {
        context: context_module(config, params),
        config: config.clone(),
        store,
        encoder: Encoder::Desk(encoder),
        aux,
        decoder: Decoder::Desk(decoder),
    })
}

pub fn build_full_model(config: &ModelConfig, seed: u64) -> Result<SegModel> {
    check_common(config)?;
    if config.backbone != "resnet50" {
        return Err(Error::invalid(format!("unknown backbone `{}`", config.backbone)));
    }
    let mut store = ParamStore::new(seed, config.precision.dtype());
    let ch = resnet::PSP_OUT;
    let encoder = resnet::ResNetPsp::new(&mut store)?;
    let aux = Conv2d::new(&mut store, "aux", ch, config.class_count, ConvSpec::same(1))?;
    let params = GroupContextParams::new(&mut store, "context", ch, config.attention_dim)?;
    let decoder = resnet::FullDecoder::new(&mut store, ch, config.class_count)?;
    let mut config = config.clone();
    config.channels = ch;
    Ok(SegModel {
        context: context_module(&config, params),
        config,
        store,
        encoder: Encoder::ResNet(encoder),
        aux,
        decoder: Decoder::Full(decoder),
    })
}

fn context_module(config: &ModelConfig, params: GroupContextParams) -> ContextModule {
    ContextModule {
        variant: config.variant,
        norm: config.region_norm,
        params,
        stop_grad_others: config.stop_grad_others,
    }
}

impl SegModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn class_count(&self) -> usize {
        self.config.class_count
    }

    pub fn variant(&self) -> ContextVariant {
        self.context.variant
    }

    /// Switches the context variant without touching parameters.
    pub fn set_variant(&mut self, variant: ContextVariant) {
        self.context.variant = variant;
        self.config.variant = variant;
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Total downsampling factor of the encoder.
    pub fn stride(&self) -> usize {
        match self.encoder {
            Encoder::Desk(_) => desk::STRIDE,
            Encoder::ResNet(_) => resnet::STRIDE,
        }
    }

    /// Normalized (N, 3, H, W) tensor from images of identical size.
    pub fn batch_tensor(&self, images: &[&Image]) -> Result<Tensor> {
        images_to_tensor(images, self.config.input_mean, self.config.input_std, self.dtype())
    }

    pub fn forward(&self, images: &Tensor, bank: BankSource<'_>) -> Result<SegOutput> {
        let (_, c, h, w) = images.dims4()?;
        let s = self.stride();
        if c != 3 || h % s != 0 || w % s != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "input {c}x{h}x{w}: need 3 channels and sides divisible by {s}"
            )));
        }
        let features = match &self.encoder {
            Encoder::Desk(e) => e.forward(images)?,
            Encoder::ResNet(e) => e.forward(images)?,
        };
        let aux_logits = self.aux.forward(&features)?;
        let enhanced = self.context.forward(&features, &aux_logits, bank)?;
        let low = match &self.decoder {
            Decoder::Desk(d) => d.forward(&enhanced)?,
            Decoder::Full(d) => d.forward(&enhanced)?,
        };
        let logits = resize_bilinear(&low, h, w)?;
        Ok(SegOutput {
            logits,
            aux_logits,
            features,
            enhanced,
        })
    }

    /// Features used to describe whole images for clustering (before any
    /// pooling module), (N, D, h, w).
    pub fn backbone_features(&self, images: &Tensor) -> Result<Tensor> {
        match &self.encoder {
            Encoder::Desk(e) => e.forward(images),
            Encoder::ResNet(e) => e.backbone(images),
        }
    }

    pub fn backbone_channels(&self) -> usize {
        match &self.encoder {
            Encoder::Desk(_) => self.config.channels,
            Encoder::ResNet(_) => resnet::BACKBONE_OUT,
        }
    }
}

/// Stacks images into a normalized (N, 3, H, W) tensor.
pub fn images_to_tensor(images: &[&Image], mean: [f32; 3], std: [f32; 3], dtype: DType) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::invalid("empty image batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height(), img.width()) != (h, w) {
            return Err(Error::shape(format!(
                "batch mixes {h}x{w} and {}x{} images",
                img.height(),
                img.width()
            )));
        }
        for c in 0..3 {
            data.extend(img.channel(c).iter().map(|v| (v - mean[c]) / std[c]));
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Global-average-pooled backbone features as a clustering descriptor.
pub struct BackboneDescriptor<'a> {
    model: &'a SegModel,
}

impl<'a> BackboneDescriptor<'a> {
    pub fn new(model: &'a SegModel) -> Self {
        Self { model }
    }
}

impl DescriptorFn for BackboneDescriptor<'_> {
    fn dim(&self) -> usize {
        self.model.backbone_channels()
    }

    fn describe(&self, image: &Image) -> Result<Vec<f64>> {
        let x = self.model.batch_tensor(&[image])?;
        let f = self.model.backbone_features(&x)?.mean((2, 3))?;
        Ok(f.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }
}
