//! Dataset model: images, masks, on-disk ingestion, merging/sampling and the
//! synthetic grouped two-domain generator.
//!
//! On-disk layout of a dataset root:
//!
//! ```text
//! <root>/dataset.json        {"role": "source"|"personal", "class_count": C, "user": ..., "val": [...]}
//! <root>/images/<id>.png     RGB, 8 bit
//! <root>/masks/<id>.png      single channel, value = class index, 255 = ignore
//! ```

mod io;
mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_dataset, read_image, read_mask, write_dataset, write_image, write_mask};
pub use synth::{generate_synthetic, Appearance, DomainShift, SynthOutput, SynthSpec, Texture};

/// Mask value excluded from every loss and metric.
pub const IGNORE_INDEX: u8 = 255;

/// An RGB image stored channel-major (3×H×W), values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape(format!("empty image {height}x{width}")));
        }
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::shape(format!(
                "image buffer has {} values, expected 3x{height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite pixel value {v}")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let plane = height * width;
        let mut data = Vec::with_capacity(3 * plane);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, plane));
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Crops a `height`×`width` window with its top-left corner at (`top`, `left`).
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Image {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in top..top + height {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + left..row + left + width]);
            }
        }
        Image {
            height,
            width,
            data,
        }
    }
}

/// Per-pixel class indices (H×W); [`IGNORE_INDEX`] marks excluded pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "mask buffer has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    /// Checks every value is a class index below `class_count` or the ignore value.
    pub fn validate(&self, class_count: usize) -> std::result::Result<(), String> {
        match self
            .data
            .iter()
            .find(|&&v| v != IGNORE_INDEX && v as usize >= class_count)
        {
            Some(v) => Err(format!(
                "mask value {v} outside 0..{class_count} and not the ignore value"
            )),
            None => Ok(()),
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Mask {
        let mut data = Vec::with_capacity(height * width);
        for y in top..top + height {
            let row = y * self.width;
            data.extend_from_slice(&self.data[row + left..row + left + width]);
        }
        Mask {
            height,
            width,
            data,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub id: String,
    pub image: Image,
    pub mask: Mask,
}

impl LabeledSample {
    pub fn new(id: impl Into<String>, image: Image, mask: Mask, class_count: usize) -> Result<Self> {
        let id = id.into();
        if image.height() != mask.height() || image.width() != mask.width() {
            return Err(Error::InvalidSample {
                id,
                reason: format!(
                    "image is {}x{} but mask is {}x{}",
                    image.height(),
                    image.width(),
                    mask.height(),
                    mask.width()
                ),
            });
        }
        if let Err(reason) = mask.validate(class_count) {
            return Err(Error::InvalidSample { id, reason });
        }
        Ok(Self { id, image, mask })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledSample {
    pub id: String,
    pub user: String,
    pub image: Image,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Source,
    Personal,
}

/// Contents of `dataset.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub role: Role,
    pub class_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user: Option<String>,
    /// Explicit evaluation split. When absent every available mask is used for evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val: Option<Vec<String>>,
}

pub const MANIFEST_FILE: &str = "dataset.json";

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl DatasetSpec {
    /// Reads `<root>/dataset.json`.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        if !root.is_dir() {
            return Err(Error::MissingArtifact(root));
        }
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.class_count < 2 {
            return Err(Error::invalid(format!(
                "{}: class_count must be at least 2, got {}",
                path.display(),
                manifest.class_count
            )));
        }
        if manifest.role == Role::Personal && manifest.user.is_none() {
            return Err(Error::invalid(format!(
                "{}: personal datasets need a user",
                path.display()
            )));
        }
        Ok(Self { root, manifest })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourceDataset {
    pub class_count: usize,
    pub samples: Vec<LabeledSample>,
}

/// One user's image collection. `annotations` holds the held-out evaluation
/// masks; those images are clustered but never drawn into training batches.
#[derive(Clone, Debug, PartialEq)]
pub struct PersonalDataset {
    pub user: String,
    pub class_count: usize,
    pub samples: Vec<UnlabeledSample>,
    pub annotations: BTreeMap<String, Mask>,
}

impl PersonalDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&UnlabeledSample> {
        self.samples
            .binary_search_by(|s| s.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.samples[i])
    }

    /// Images available for unsupervised training (evaluation split excluded).
    pub fn training_ids(&self) -> Vec<String> {
        self.samples
            .iter()
            .filter(|s| !self.annotations.contains_key(&s.id))
            .map(|s| s.id.clone())
            .collect()
    }

    pub fn eval_ids(&self) -> Vec<String> {
        self.annotations.keys().cloned().collect()
    }

    /// Distinct users present (more than one after [`merge_datasets`]).
    pub fn users(&self) -> BTreeSet<String> {
        self.samples.iter().map(|s| s.user.clone()).collect()
    }

    /// Restricts the collection to the images of one original user.
    pub fn filter_user(&self, user: &str) -> PersonalDataset {
        let samples: Vec<_> = self
            .samples
            .iter()
            .filter(|s| s.user == user)
            .cloned()
            .collect();
        let annotations = samples
            .iter()
            .filter_map(|s| self.annotations.get(&s.id).map(|m| (s.id.clone(), m.clone())))
            .collect();
        PersonalDataset {
            user: user.to_string(),
            class_count: self.class_count,
            samples,
            annotations,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Source(SourceDataset),
    Personal(PersonalDataset),
}

impl Dataset {
    pub fn into_source(self) -> Result<SourceDataset> {
        match self {
            Dataset::Source(d) => Ok(d),
            Dataset::Personal(d) => Err(Error::invalid(format!(
                "expected a source dataset, found personal data of user {}",
                d.user
            ))),
        }
    }

    pub fn into_personal(self) -> Result<PersonalDataset> {
        match self {
            Dataset::Personal(d) => Ok(d),
            Dataset::Source(_) => Err(Error::invalid("expected a personal dataset, found source data")),
        }
    }
}

/// Concatenates several users' collections. Ids are prefixed with the user
/// (`<user>_<id>`); each sample keeps its original user for per-user reports.
pub fn merge_datasets(users: &[PersonalDataset]) -> Result<PersonalDataset> {
    let first = users
        .first()
        .ok_or_else(|| Error::invalid("merge_datasets needs at least one dataset"))?;
    let class_count = first.class_count;
    let mut samples = Vec::new();
    let mut annotations = BTreeMap::new();
    for d in users {
        if d.class_count != class_count {
            return Err(Error::invalid(format!(
                "class count mismatch: user {} has {}, expected {class_count}",
                d.user, d.class_count
            )));
        }
        for s in &d.samples {
            let id = format!("{}_{}", d.user, s.id);
            if let Some(m) = d.annotations.get(&s.id) {
                annotations.insert(id.clone(), m.clone());
            }
            samples.push(UnlabeledSample {
                id,
                user: s.user.clone(),
                image: s.image.clone(),
            });
        }
    }
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    if samples.windows(2).any(|w| w[0].id == w[1].id) {
        return Err(Error::invalid("duplicate ids after merging"));
    }
    Ok(PersonalDataset {
        user: "mix".to_string(),
        class_count,
        samples,
        annotations,
    })
}

/// Number of samples drawn by [`sample_dataset`]: ⌊fraction·n⌋, tolerant to the
/// rounding of fractions such as 1/15.
pub fn sample_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64) + 1e-9).floor() as usize
}

/// Uniformly draws ⌊fraction·n⌋ samples without replacement; output stays in id order.
pub fn sample_dataset(dataset: &PersonalDataset, fraction: f64, seed: u64) -> Result<PersonalDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("fraction must be in (0, 1], got {fraction}")));
    }
    if dataset.is_empty() {
        return Err(Error::invalid("cannot sample from an empty dataset"));
    }
    let n = dataset.len();
    let k = sample_count(n, fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample_indices(&mut rng, n, k).into_vec();
    picked.sort_unstable();
    let samples: Vec<_> = picked.iter().map(|&i| dataset.samples[i].clone()).collect();
    let annotations = samples
        .iter()
        .filter_map(|s| dataset.annotations.get(&s.id).map(|m| (s.id.clone(), m.clone())))
        .collect();
    Ok(PersonalDataset {
        user: dataset.user.clone(),
        class_count: dataset.class_count,
        samples,
        annotations,
    })
}
