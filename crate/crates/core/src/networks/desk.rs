use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{Conv2d, ConvSpec, ParamStore};

pub const STRIDE: usize = 4;

/// Four 3×3 conv layers; the first two have stride 2.
pub struct DeskEncoder {
    convs: [Conv2d; 4],
}

impl DeskEncoder {
    pub fn new(store: &mut ParamStore, channels: usize) -> Result<Self> {
        Ok(Self {
            convs: [
                Conv2d::new(store, "encoder.0", 3, 16, ConvSpec::same(3).stride(2))?,
                Conv2d::new(store, "encoder.1", 16, 32, ConvSpec::same(3).stride(2))?,
                Conv2d::new(store, "encoder.2", 32, 32, ConvSpec::same(3))?,
                Conv2d::new(store, "encoder.3", 32, channels, ConvSpec::same(3))?,
            ],
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for conv in &self.convs {
            h = conv.forward(&h)?.relu()?;
        }
        Ok(h)
    }
}

/// 3×3 conv + ReLU, then a 1×1 classifier.
pub struct DeskDecoder {
    hidden: Conv2d,
    classifier: Conv2d,
}

impl DeskDecoder {
    pub fn new(store: &mut ParamStore, channels: usize, classes: usize) -> Result<Self> {
        Ok(Self {
            hidden: Conv2d::new(store, "decoder.0", channels, 32, ConvSpec::same(3))?,
            classifier: Conv2d::new(store, "decoder.1", 32, classes, ConvSpec::same(1))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.classifier.forward(&self.hidden.forward(x)?.relu()?)
    }
}
