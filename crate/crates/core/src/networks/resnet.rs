//! ResNet-50 (bottleneck v1.5) dilated to output stride 8, with a pyramid
//! pooling module on top. Backbone tensors are named as in torchvision under a
//! `backbone.` prefix so ImageNet weights can be loaded by name.

use candle_core::{Tensor, D};

use crate::error::Result;
use crate::nn::{adaptive_avg_pool, resize_bilinear, Conv2d, ConvSpec, FrozenBatchNorm, ParamStore};

pub const STRIDE: usize = 8;
pub const BACKBONE_OUT: usize = 2048;
pub const PSP_OUT: usize = 512;
const PSP_BINS: [usize; 4] = [1, 2, 3, 6];

struct ConvBn {
    conv: Conv2d,
    bn: FrozenBatchNorm,
}

impl ConvBn {
    fn new(store: &mut ParamStore, conv: &str, bn: &str, c_in: usize, c_out: usize, spec: ConvSpec) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, conv, c_in, c_out, spec.no_bias())?,
            bn: FrozenBatchNorm::new(store, bn, c_out)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.bn.forward(&self.conv.forward(x)?)
    }
}

struct Bottleneck {
    a: ConvBn,
    b: ConvBn,
    c: ConvBn,
    downsample: Option<ConvBn>,
}

impl Bottleneck {
    fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        width: usize,
        stride: usize,
        dilation: usize,
    ) -> Result<Self> {
        let out = width * 4;
        let p = |s: &str| format!("{name}.{s}");
        let downsample = if stride != 1 || c_in != out {
            Some(ConvBn::new(
                store,
                &p("downsample.0"),
                &p("downsample.1"),
                c_in,
                out,
                ConvSpec::same(1).stride(stride),
            )?)
        } else {
            None
        };
        Ok(Self {
            a: ConvBn::new(store, &p("conv1"), &p("bn1"), c_in, width, ConvSpec::same(1))?,
            b: ConvBn::new(
                store,
                &p("conv2"),
                &p("bn2"),
                width,
                width,
                ConvSpec::same(3).dilation(dilation).stride(stride),
            )?,
            c: ConvBn::new(store, &p("conv3"), &p("bn3"), width, out, ConvSpec::same(1))?,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.a.forward(x)?.relu()?;
        let h = self.b.forward(&h)?.relu()?;
        let h = self.c.forward(&h)?;
        let skip = match &self.downsample {
            Some(d) => d.forward(x)?,
            None => x.clone(),
        };
        Ok(h.add(&skip)?.relu()?)
    }
}

struct PspStage {
    bins: usize,
    proj: ConvBn,
}

pub struct ResNetPsp {
    stem: ConvBn,
    layers: Vec<Vec<Bottleneck>>,
    stages: Vec<PspStage>,
    bottleneck: ConvBn,
}

impl ResNetPsp {
    pub fn new(store: &mut ParamStore) -> Result<Self> {
        let stem = ConvBn::new(
            store,
            "backbone.conv1",
            "backbone.bn1",
            3,
            64,
            ConvSpec::same(7).stride(2),
        )?;
        // (blocks, width, stride, dilation of first block, dilation of the rest)
        let plan = [(3, 64, 1, 1, 1), (4, 128, 2, 1, 1), (6, 256, 1, 1, 2), (3, 512, 1, 2, 4)];
        let mut c_in = 64;
        let mut layers = Vec::new();
        for (li, &(blocks, width, stride, first_dil, dil)) in plan.iter().enumerate() {
            let mut layer = Vec::new();
            for bi in 0..blocks {
                let name = format!("backbone.layer{}.{bi}", li + 1);
                let (s, d) = if bi == 0 { (stride, first_dil) } else { (1, dil) };
                layer.push(Bottleneck::new(store, &name, c_in, width, s, d)?);
                c_in = width * 4;
            }
            layers.push(layer);
        }
        let mut stages = Vec::new();
        for (i, &bins) in PSP_BINS.iter().enumerate() {
            stages.push(PspStage {
                bins,
                proj: ConvBn::new(
                    store,
                    &format!("psp.stages.{i}.conv"),
                    &format!("psp.stages.{i}.bn"),
                    BACKBONE_OUT,
                    PSP_OUT,
                    ConvSpec::same(1),
                )?,
            });
        }
        let bottleneck = ConvBn::new(
            store,
            "psp.bottleneck.conv",
            "psp.bottleneck.bn",
            BACKBONE_OUT + PSP_BINS.len() * PSP_OUT,
            PSP_OUT,
            ConvSpec::same(3),
        )?;
        Ok(Self {
            stem,
            layers,
            stages,
            bottleneck,
        })
    }

    /// Output of `layer4`, (N, 2048, H/8, W/8).
    pub fn backbone(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.stem.forward(x)?.relu()?;
        // 3×3/2 max pool with padding 1; edge replication never changes a max
        let h = h.pad_with_same(2, 1, 1)?.pad_with_same(3, 1, 1)?.max_pool2d_with_stride(3, 2)?;
        let mut h = h;
        for layer in &self.layers {
            for block in layer {
                h = block.forward(&h)?;
            }
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let f = self.backbone(x)?;
        let (_, _, h, w) = f.dims4()?;
        let mut parts = vec![f.clone()];
        for stage in &self.stages {
            let pooled = adaptive_avg_pool(&f, stage.bins, stage.bins)?;
            let p = stage.proj.forward(&pooled)?.relu()?;
            parts.push(resize_bilinear(&p, h, w)?);
        }
        let cat = Tensor::cat(&parts, D::Minus(3))?;
        Ok(self.bottleneck.forward(&cat)?.relu()?)
    }
}

/// 3×3 conv-BN-ReLU then a 1×1 classifier.
pub struct FullDecoder {
    hidden: ConvBn,
    classifier: Conv2d,
}

impl FullDecoder {
    pub fn new(store: &mut ParamStore, channels: usize, classes: usize) -> Result<Self> {
        Ok(Self {
            hidden: ConvBn::new(store, "decoder.0.conv", "decoder.0.bn", channels, 256, ConvSpec::same(3))?,
            classifier: Conv2d::new(store, "decoder.1", 256, classes, ConvSpec::same(1))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.classifier.forward(&self.hidden.forward(x)?.relu()?)
    }
}
