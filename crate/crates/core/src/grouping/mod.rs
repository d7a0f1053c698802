//! Grouping of a user's images: descriptors, K-means and single-group batching.

mod batches;
mod descriptor;
mod kmeans;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use batches::{make_group_batches, GroupBatcher};
pub use descriptor::{embed_images, Descriptor, DescriptorFn, PixelHistogramDescriptor};
pub use kmeans::{kmeans, Clustering, KMeansConfig};

/// Cluster membership of every personal image. Serialized as `groups.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAssignment {
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    pub mapping: BTreeMap<String, usize>,
    #[serde(default)]
    pub centroids: Vec<Vec<f64>>,
}

impl GroupAssignment {
    pub fn group_of(&self, id: &str) -> Option<usize> {
        self.mapping.get(id).copied()
    }

    /// Ids per group, each list in id order.
    pub fn members(&self) -> Vec<Vec<String>> {
        let mut groups = vec![Vec::new(); self.k];
        for (id, &g) in &self.mapping {
            groups[g].push(id.clone());
        }
        groups
    }

    /// Every group index is in range and every group is nonempty.
    pub fn validate(&self) -> Result<()> {
        let mut sizes = vec![0usize; self.k];
        for (id, &g) in &self.mapping {
            if g >= self.k {
                return Err(Error::invalid(format!("{id} assigned to group {g} >= K={}", self.k)));
            }
            sizes[g] += 1;
        }
        if let Some(g) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::invalid(format!("group {g} is empty")));
        }
        Ok(())
    }

    /// Fails unless every id in `ids` has a group.
    pub fn check_covers<'a>(&self, ids: impl IntoIterator<Item = &'a String>) -> Result<()> {
        for id in ids {
            if !self.mapping.contains_key(id) {
                return Err(Error::invalid(format!("image {id} has no group assignment")));
            }
        }
        Ok(())
    }

    /// Single group holding every id.
    pub fn single<'a>(ids: impl IntoIterator<Item = &'a String>) -> Self {
        Self {
            k: 1,
            seed: 0,
            mapping: ids.into_iter().map(|id| (id.clone(), 0)).collect(),
            centroids: Vec::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let g: GroupAssignment = serde_json::from_str(&text)?;
        g.validate()?;
        Ok(g)
    }
}
