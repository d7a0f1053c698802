use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::DiscInput;
use crate::nn::{leaky_relu, Conv2d, ConvSpec, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscConfig {
    /// Widths of the three hidden layers; the last layer has one channel.
    pub widths: [usize; 3],
    pub slope: f64,
    pub input: DiscInput,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 32],
            slope: 0.2,
            input: DiscInput::Entropy,
        }
    }
}

impl DiscConfig {
    pub fn full() -> Self {
        Self {
            widths: [64, 128, 256],
            ..Self::default()
        }
    }
}

/// Four 4×4 stride-2 convolutions with leaky ReLU between them; maps an
/// (N, 1 or C, H, W) map to (N, 1, H/16, W/16) domain logits.
pub struct Discriminator {
    config: DiscConfig,
    store: ParamStore,
    layers: Vec<Conv2d>,
}

impl std::fmt::Debug for Discriminator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Discriminator").field("config", &self.config).finish()
    }
}

impl Discriminator {
    pub fn new(config: &DiscConfig, class_count: usize, seed: u64, dtype: candle_core::DType) -> Result<Self> {
        let mut store = ParamStore::new(seed, dtype);
        let spec = ConvSpec::same(4).stride(2).padding(1);
        let c_in = config.input.channels(class_count);
        let chans = [c_in, config.widths[0], config.widths[1], config.widths[2], 1];
        let layers = (0..4)
            .map(|i| Conv2d::new(&mut store, &format!("layers.{i}"), chans[i], chans[i + 1], spec))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            store,
            layers,
        })
    }

    pub fn config(&self) -> &DiscConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn forward(&self, map: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = map.dims4()?;
        if c != self.layers[0].weight.dims()[1] || h < 16 || w < 16 {
            return Err(Error::shape(format!("discriminator cannot take a {c}x{h}x{w} map")));
        }
        let mut x = map.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x)?;
            if i + 1 < self.layers.len() {
                x = leaky_relu(&x, self.config.slope)?;
            }
        }
        Ok(x)
    }
}
