use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::eval::{predict_grouped, Prediction};
use crate::data::{read_mask, sample_count, write_mask, Mask, PersonalDataset, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::grouping::GroupAssignment;
use crate::networks::SegModel;

/// Pseudo labels for the selected personal images.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PseudoLabelSet {
    pub masks: BTreeMap<String, Mask>,
    /// Every ranked image with its mean entropy, most confident first.
    pub ranking: Vec<(String, f64)>,
}

#[derive(Serialize, Deserialize)]
struct RankingFile {
    selected: Vec<String>,
    ranking: Vec<(String, f64)>,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Mask of `id`, or all-ignore when it was not selected.
    pub fn mask_or_ignore(&self, id: &str, height: usize, width: usize) -> Mask {
        self.masks
            .get(id)
            .cloned()
            .unwrap_or_else(|| Mask::filled(height, width, IGNORE_INDEX))
    }

    /// Writes `<id>.png` per selected image and `ranking.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (id, m) in &self.masks {
            write_mask(&dir.join(format!("{id}.png")), m)?;
        }
        let file = RankingFile {
            selected: self.masks.keys().cloned().collect(),
            ranking: self.ranking.clone(),
        };
        let path = dir.join("ranking.json");
        std::fs::write(&path, serde_json::to_string_pretty(&file)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("ranking.json");
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let file: RankingFile = serde_json::from_str(&text)?;
        let mut masks = BTreeMap::new();
        for id in file.selected {
            let p = dir.join(format!("{id}.png"));
            if !p.exists() {
                return Err(Error::MissingArtifact(p));
            }
            masks.insert(id, read_mask(&p)?);
        }
        Ok(Self {
            masks,
            ranking: file.ranking,
        })
    }
}

/// Keeps the `⌊rate·n⌋` predictions with the lowest mean entropy (ties by id)
/// and, inside each, the `⌊quantile·P⌋` lowest-entropy pixels (ties by pixel
/// index); every other pixel becomes 255.
pub fn select_from_predictions(predictions: &[Prediction], rate: f64, quantile: f64) -> Result<PseudoLabelSet> {
    if predictions.is_empty() {
        return Err(Error::invalid("no personal images to select pseudo labels from"));
    }
    if !(rate > 0.0 && rate <= 1.0) || !(0.0..=1.0).contains(&quantile) {
        return Err(Error::invalid(format!("bad selection parameters r={rate} q={quantile}")));
    }
    let mut ranking: Vec<(String, f64)> = predictions.iter().map(|p| (p.id.clone(), p.mean_entropy())).collect();
    ranking.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    let keep = sample_count(predictions.len(), rate);
    let by_id: BTreeMap<&str, &Prediction> = predictions.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut masks = BTreeMap::new();
    for (id, _) in ranking.iter().take(keep) {
        let p = by_id[id.as_str()];
        masks.insert(id.clone(), mask_pixels(p, quantile)?);
    }
    Ok(PseudoLabelSet { masks, ranking })
}

fn mask_pixels(p: &Prediction, quantile: f64) -> Result<Mask> {
    let n = p.labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| p.entropy[a].total_cmp(&p.entropy[b]).then(a.cmp(&b)));
    let mut data = vec![IGNORE_INDEX; n];
    for &i in order.iter().take(sample_count(n, quantile)) {
        data[i] = p.labels[i];
    }
    Mask::new(p.height, p.width, data)
}

/// Predicts every training image of `personal` (grouped batches) and selects
/// pseudo labels from the predictions.
pub fn select_pseudo_labels(
    model: &SegModel,
    personal: &PersonalDataset,
    groups: &GroupAssignment,
    rate: f64,
    quantile: f64,
    batch_size: usize,
    crop: usize,
) -> Result<PseudoLabelSet> {
    let ids = personal.training_ids();
    if ids.is_empty() {
        return Err(Error::invalid("personal dataset has no training images"));
    }
    let preds = predict_grouped(model, personal, groups, &ids, batch_size, crop)?;
    let set = select_from_predictions(&preds, rate, quantile)?;
    log::info!("selected {} of {} images as pseudo labels", set.len(), ids.len());
    Ok(set)
}
