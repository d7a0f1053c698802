use rayon::prelude::*;

use crate::data::{Image, UnlabeledSample};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor {
    pub id: String,
    pub vector: Vec<f64>,
}

/// Image → fixed-length vector used for clustering.
pub trait DescriptorFn: Sync {
    fn dim(&self) -> usize;
    fn describe(&self, image: &Image) -> Result<Vec<f64>>;
}

/// Area-downsampled pixels on a `grid`×`grid` lattice followed by a per-channel
/// intensity histogram with `bins` bins (normalized to sum 1 per channel).
#[derive(Clone, Copy, Debug)]
pub struct PixelHistogramDescriptor {
    pub grid: usize,
    pub bins: usize,
}

impl Default for PixelHistogramDescriptor {
    fn default() -> Self {
        Self { grid: 8, bins: 8 }
    }
}

impl DescriptorFn for PixelHistogramDescriptor {
    fn dim(&self) -> usize {
        3 * self.grid * self.grid + 3 * self.bins
    }

    fn describe(&self, image: &Image) -> Result<Vec<f64>> {
        let (h, w) = (image.height(), image.width());
        if h < self.grid || w < self.grid {
            return Err(Error::invalid(format!(
                "image {h}x{w} is smaller than the descriptor grid {}",
                self.grid
            )));
        }
        let mut out = Vec::with_capacity(self.dim());
        for c in 0..3 {
            let plane = image.channel(c);
            for gy in 0..self.grid {
                let (y0, y1) = (gy * h / self.grid, (gy + 1) * h / self.grid);
                for gx in 0..self.grid {
                    let (x0, x1) = (gx * w / self.grid, (gx + 1) * w / self.grid);
                    let mut sum = 0f64;
                    for y in y0..y1 {
                        sum += plane[y * w + x0..y * w + x1].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    out.push(sum / ((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        let n = (h * w) as f64;
        for c in 0..3 {
            let mut hist = vec![0f64; self.bins];
            for &v in image.channel(c) {
                let b = ((v.clamp(0.0, 1.0) * self.bins as f32) as usize).min(self.bins - 1);
                hist[b] += 1.0;
            }
            out.extend(hist.into_iter().map(|v| v / n));
        }
        Ok(out)
    }
}

/// One descriptor per sample, in input order.
pub fn embed_images(samples: &[UnlabeledSample], descriptor: &dyn DescriptorFn) -> Result<Vec<Descriptor>> {
    let dim = descriptor.dim();
    samples
        .par_iter()
        .map(|s| {
            let vector = descriptor.describe(&s.image)?;
            if vector.len() != dim {
                return Err(Error::shape(format!(
                    "descriptor of {} has length {}, expected {dim}",
                    s.id,
                    vector.len()
                )));
            }
            if vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidSample {
                    id: s.id.clone(),
                    reason: "descriptor contains non-finite values".into(),
                });
            }
            Ok(Descriptor {
                id: s.id.clone(),
                vector,
            })
        })
        .collect()
}
