use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::GroupAssignment;
use crate::error::{Error, Result};

/// Produces batches whose images all come from one group. Each epoch reshuffles
/// the images inside every group and the order of the resulting batches.
#[derive(Clone, Debug)]
pub struct GroupBatcher {
    groups: Vec<Vec<String>>,
    batch_size: usize,
    drop_last: bool,
    seed: u64,
}

impl GroupBatcher {
    /// Batches over `ids` only (e.g. the training split); every id needs a group.
    pub fn new(
        assignment: &GroupAssignment,
        ids: &[String],
        batch_size: usize,
        drop_last: bool,
        seed: u64,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        assignment.check_covers(ids)?;
        let mut groups = vec![Vec::new(); assignment.k];
        for id in ids {
            groups[assignment.mapping[id]].push(id.clone());
        }
        for g in &mut groups {
            g.sort();
        }
        Ok(Self {
            groups,
            batch_size,
            drop_last,
            seed,
        })
    }

    pub fn epoch(&self, epoch: u64) -> Vec<Vec<String>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        let mut batches = Vec::new();
        for group in &self.groups {
            let mut ids = group.clone();
            ids.shuffle(&mut rng);
            for chunk in ids.chunks(self.batch_size) {
                if self.drop_last && chunk.len() < self.batch_size {
                    continue;
                }
                batches.push(chunk.to_vec());
            }
        }
        batches.shuffle(&mut rng);
        batches
    }

    /// Deterministic, unshuffled batches (id order inside each group, groups in
    /// index order). Used for evaluation and pseudo-label inference.
    pub fn ordered(&self) -> Vec<Vec<String>> {
        self.groups
            .iter()
            .flat_map(|g| g.chunks(self.batch_size).map(<[String]>::to_vec))
            .collect()
    }
}

/// One epoch of single-group batches over every id in the assignment.
pub fn make_group_batches(
    assignment: &GroupAssignment,
    batch_size: usize,
    seed: u64,
    drop_last: bool,
) -> Result<Vec<Vec<String>>> {
    let ids: Vec<String> = assignment.mapping.keys().cloned().collect();
    Ok(GroupBatcher::new(assignment, &ids, batch_size, drop_last, seed)?.epoch(0))
}
