use candle_core::{DType, Tensor};

use crate::context::{BankSource, ContextVariant};
use crate::data::{Image, PersonalDataset};
use crate::error::{Error, Result};
use crate::grouping::{GroupAssignment, GroupBatcher};
use crate::losses::entropy_from_logits;
use crate::metrics::{FiouMode, UserEvaluation};
use crate::networks::SegModel;
use crate::nn::resize_bilinear;

/// The bank a model builds during a forward pass on a batch.
pub fn batch_bank(model: &SegModel) -> BankSource<'static> {
    match model.variant() {
        ContextVariant::None => BankSource::Absent,
        _ => BankSource::FromBatch,
    }
}

/// Arg-max labels and per-pixel entropy of one image at its own resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
    pub entropy: Vec<f32>,
}

impl Prediction {
    pub fn mean_entropy(&self) -> f64 {
        self.entropy.iter().map(|&v| v as f64).sum::<f64>() / self.entropy.len().max(1) as f64
    }
}

/// Stacks images resized to `crop`×`crop` into one normalized batch.
pub fn input_batch(model: &SegModel, images: &[&Image], crop: usize) -> Result<Tensor> {
    let parts = images
        .iter()
        .map(|img| {
            let x = model.batch_tensor(&[img])?;
            resize_bilinear(&x, crop, crop)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&parts, 0)?)
}

/// Forward pass on one batch (the batch is its own region bank).
pub fn predict_batch(model: &SegModel, batch: &[(&str, &Image)], crop: usize) -> Result<Vec<Prediction>> {
    if batch.is_empty() {
        return Ok(Vec::new());
    }
    let images: Vec<&Image> = batch.iter().map(|(_, img)| *img).collect();
    let x = input_batch(model, &images, crop)?;
    let logits = model.forward(&x, batch_bank(model))?.logits.detach();
    let mut out = Vec::with_capacity(batch.len());
    for (i, (id, img)) in batch.iter().enumerate() {
        let (h, w) = (img.height(), img.width());
        let l = resize_bilinear(&logits.narrow(0, i, 1)?, h, w)?;
        let labels = l
            .argmax(1)?
            .flatten_all()?
            .to_dtype(DType::U32)?
            .to_vec1::<u32>()?
            .into_iter()
            .map(|v| v as u8)
            .collect();
        let entropy = entropy_from_logits(&l)?.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        out.push(Prediction {
            id: id.to_string(),
            height: h,
            width: w,
            labels,
            entropy,
        });
    }
    Ok(out)
}

/// Predictions for `ids`, batched group by group in a fixed order; returned
/// sorted by id.
pub fn predict_grouped(
    model: &SegModel,
    personal: &PersonalDataset,
    groups: &GroupAssignment,
    ids: &[String],
    batch_size: usize,
    crop: usize,
) -> Result<Vec<Prediction>> {
    let batcher = GroupBatcher::new(groups, ids, batch_size, false, 0)?;
    let mut out = Vec::with_capacity(ids.len());
    for batch in batcher.ordered() {
        let items = batch
            .iter()
            .map(|id| {
                let s = personal
                    .get(id)
                    .ok_or_else(|| Error::invalid(format!("unknown personal image {id}")))?;
                Ok((id.as_str(), &s.image))
            })
            .collect::<Result<Vec<_>>>()?;
        out.extend(predict_batch(model, &items, crop)?);
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

/// Scores predictions on the annotated split of `personal`.
pub fn evaluate_personal(
    model: &SegModel,
    personal: &PersonalDataset,
    groups: &GroupAssignment,
    batch_size: usize,
    crop: usize,
    mode: FiouMode,
) -> Result<UserEvaluation> {
    let ids = personal.eval_ids();
    let mut eval = UserEvaluation::new(&personal.user, personal.class_count, mode);
    if ids.is_empty() {
        return Ok(eval);
    }
    for p in predict_grouped(model, personal, groups, &ids, batch_size, crop)? {
        let gt = &personal.annotations[&p.id];
        eval.add_image(&p.id, gt.data(), &p.labels)?;
    }
    Ok(eval)
}
