//! Two-stage adaptation: adversarial entropy alignment with group batches
//! (step 1), then the same objective plus a pseudo-label loss (step 2).
//!
//! The data drawn at a global step depends only on the seed and the step
//! index, so a stage resumed from a checkpoint sees the same batches as an
//! uninterrupted run.

mod config;
mod eval;
mod metrics_log;
mod optim;
mod pseudo;

use std::path::PathBuf;

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::TrainConfig;
pub use eval::{batch_bank, evaluate_personal, input_batch, predict_batch, predict_grouped, Prediction};
pub use metrics_log::{read_metrics, MetricRecord, MetricsLog};
pub use optim::{poly_lr, Sgd};
pub use pseudo::{select_from_predictions, select_pseudo_labels, PseudoLabelSet};

use crate::data::{Image, Mask, PersonalDataset, SourceDataset};
use crate::error::{Error, Result};
use crate::grouping::{GroupAssignment, GroupBatcher};
use crate::losses::{adv_losses, seg_loss, MaskedLoss};
use crate::networks::{save_checkpoint, CheckpointMeta, Discriminator, SegModel};
use crate::nn::{resize_bilinear, scalar};

const SOURCE_STREAM_SALT: u64 = 0x5eed_0001;
const PERSONAL_SEED_SALT: u64 = 0x5eed_0002;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Step1,
    Step2,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Self::Step1 => "step1",
            Self::Step2 => "step2",
        }
    }
}

/// Source batches: a fresh permutation per epoch, sequential batches within it.
pub struct SourceSampler {
    n: usize,
    batch: usize,
    seed: u64,
    cache: Option<(usize, Vec<usize>)>,
}

impl SourceSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("source dataset is empty"));
        }
        Ok(Self {
            n,
            batch: batch.min(n),
            seed,
            cache: None,
        })
    }

    pub fn batch_at(&mut self, step: usize) -> Vec<usize> {
        let per_epoch = self.n / self.batch;
        let (epoch, k) = (step / per_epoch, step % per_epoch);
        if self.cache.as_ref().map(|c| c.0) != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ SOURCE_STREAM_SALT);
            rng.set_stream(epoch as u64);
            let mut perm: Vec<usize> = (0..self.n).collect();
            perm.shuffle(&mut rng);
            self.cache = Some((epoch, perm));
        }
        let perm = &self.cache.as_ref().unwrap().1;
        perm[k * self.batch..(k + 1) * self.batch].to_vec()
    }
}

/// Personal batches: single-group batches from [`GroupBatcher`] epochs.
pub struct PersonalSampler {
    batcher: GroupBatcher,
    cache: Option<(usize, Vec<Vec<String>>)>,
}

impl PersonalSampler {
    pub fn new(groups: &GroupAssignment, ids: &[String], batch: usize, seed: u64) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::invalid("no personal training images"));
        }
        Ok(Self {
            batcher: GroupBatcher::new(groups, ids, batch, false, seed ^ PERSONAL_SEED_SALT)?,
            cache: None,
        })
    }

    pub fn batch_at(&mut self, step: usize) -> Vec<String> {
        let per_epoch = self.batcher.epoch(0).len();
        let (epoch, k) = (step / per_epoch, step % per_epoch);
        if self.cache.as_ref().map(|c| c.0) != Some(epoch) {
            self.cache = Some((epoch, self.batcher.epoch(epoch as u64)));
        }
        self.cache.as_ref().unwrap().1[k].clone()
    }
}

/// Nearest-neighbour resize of label masks to `size`×`size`, flattened.
pub fn resize_targets(masks: &[&Mask], size: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(masks.len() * size * size);
    for m in masks {
        let (h, w) = (m.height(), m.width());
        if (h, w) == (size, size) {
            out.extend_from_slice(m.data());
            continue;
        }
        for y in 0..size {
            let sy = ((y as f64 + 0.5) * h as f64 / size as f64) as usize;
            for x in 0..size {
                let sx = ((x as f64 + 0.5) * w as f64 / size as f64) as usize;
                out.push(m.data()[sy.min(h - 1) * w + sx.min(w - 1)]);
            }
        }
    }
    out
}

/// Everything a training stage reads.
pub struct StageData<'a> {
    pub source: &'a SourceDataset,
    pub personal: &'a PersonalDataset,
    pub groups: &'a GroupAssignment,
    pub pseudo: Option<&'a PseudoLabelSet>,
}

#[derive(Clone, Debug)]
pub struct StageOptions {
    /// Global index of the first step (continues the previous stage's count).
    pub start_step: usize,
    pub steps: usize,
    /// Where to leave a checkpoint if a loss becomes non-finite.
    pub abort_checkpoint: Option<PathBuf>,
    /// Serialized run configuration stored in checkpoints.
    pub config_json: String,
}

#[derive(Clone, Debug)]
pub struct StageSummary {
    pub stage: Stage,
    pub first_step: usize,
    pub last_step: usize,
    pub first_seg_loss: f64,
    pub last_seg_loss: f64,
}

fn images_of<'a>(source: &'a SourceDataset, idx: &[usize]) -> (Vec<&'a Image>, Vec<&'a Mask>) {
    idx.iter()
        .map(|&i| (&source.samples[i].image, &source.samples[i].mask))
        .unzip()
}

fn weighted(loss: &Tensor, w: f64) -> Result<Tensor> {
    Ok(loss.affine(w, 0.0)?)
}

/// Runs one stage. `disc` is trained whenever the adversarial weight is
/// positive; in step 2 the pseudo loss is added when its weight is positive
/// (and always logged).
pub fn train_stage(
    model: &SegModel,
    disc: &Discriminator,
    data: &StageData<'_>,
    config: &TrainConfig,
    stage: Stage,
    options: &StageOptions,
    log: &mut MetricsLog,
) -> Result<StageSummary> {
    config.validate()?;
    if data.source.class_count != model.class_count() || data.personal.class_count != model.class_count() {
        return Err(Error::invalid("dataset and model class counts differ"));
    }
    let train_ids = data.personal.training_ids();
    data.groups.check_covers(&train_ids)?;
    let empty = PseudoLabelSet::default();
    let pseudo = match (stage, data.pseudo) {
        (Stage::Step2, Some(p)) => p,
        (Stage::Step2, None) => return Err(Error::invalid("step 2 needs pseudo labels")),
        (Stage::Step1, _) => &empty,
    };
    if stage == Stage::Step2 && pseudo.is_empty() {
        ::log::warn!("pseudo-label set is empty; step 2 reduces to step 1");
    }
    let use_adv = config.lambda_adv > 0.0;
    let use_personal = use_adv || stage == Stage::Step2;

    let mut source_sampler = SourceSampler::new(data.source.samples.len(), config.batch_size, config.seed)?;
    let mut personal_sampler = PersonalSampler::new(data.groups, &train_ids, config.batch_size, config.seed)?;
    let mut opt = Sgd::new(config.momentum, config.weight_decay);
    let mut disc_opt = Sgd::new(config.disc_momentum, config.weight_decay);
    let disc_input = disc.config().input;
    let bank = batch_bank(model);
    let crop = config.crop;
    let name = stage.name();

    let mut first_seg = f64::NAN;
    let mut last_seg = f64::NAN;
    for local in 0..options.steps {
        let step = options.start_step + local;
        let lr = poly_lr(config.stage_lr(stage == Stage::Step2), local, options.steps, config.poly_power);
        let disc_lr = poly_lr(config.disc_lr, local, options.steps, config.poly_power);

        let (src_images, src_masks) = images_of(data.source, &source_sampler.batch_at(step));
        let xs = input_batch(model, &src_images, crop)?;
        let targets = resize_targets(&src_masks, crop);
        let out_s = model.forward(&xs, bank)?;
        let l_seg = seg_loss(&out_s.logits, &targets)?;
        let aux_full = resize_bilinear(&out_s.aux_logits, crop, crop)?;
        let l_aux = seg_loss(&aux_full, &targets)?;
        let mut total = l_seg.loss.add(&weighted(&l_aux.loss, config.aux_weight)?)?;
        let mut logged = vec![("loss_seg", l_seg.value()?), ("loss_aux", l_aux.value()?)];

        let mut disc_loss = None;
        if use_personal {
            let ids = personal_sampler.batch_at(step);
            let samples = ids
                .iter()
                .map(|id| data.personal.get(id).ok_or_else(|| Error::invalid(format!("unknown image {id}"))))
                .collect::<Result<Vec<_>>>()?;
            let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
            let xp = input_batch(model, &images, crop)?;
            let out_p = model.forward(&xp, bank)?;
            if use_adv {
                let e_s = disc_input.map(&out_s.logits)?;
                let e_p = disc_input.map(&out_p.logits)?;
                let adv = adv_losses(&e_s, &e_p, &|m: &Tensor| disc.forward(m))?;
                total = total.add(&weighted(&adv.adv, config.lambda_adv)?)?;
                logged.push(("loss_adv", scalar(&adv.adv)?));
                disc_loss = Some(adv.disc);
            }
            if stage == Stage::Step2 {
                let masks: Vec<Mask> = samples
                    .iter()
                    .map(|s| pseudo.mask_or_ignore(&s.id, s.image.height(), s.image.width()))
                    .collect();
                let refs: Vec<&Mask> = masks.iter().collect();
                let l_pse: MaskedLoss = seg_loss(&out_p.logits, &resize_targets(&refs, crop))?;
                logged.push(("loss_pse", l_pse.value()?));
                if config.lambda_pse > 0.0 && !l_pse.all_ignored() {
                    total = total.add(&weighted(&l_pse.loss, config.lambda_pse)?)?;
                }
            }
        }
        let total_value = scalar(&total)?;
        logged.push(("loss_total", total_value));
        if let Some(d) = &disc_loss {
            logged.push(("loss_disc", scalar(d)?));
        }
        if let Some((bad, _)) = logged.iter().find(|(_, v)| !v.is_finite()) {
            let bad = bad.to_string();
            let checkpoint = match &options.abort_checkpoint {
                Some(path) => {
                    let meta = CheckpointMeta {
                        config: options.config_json.clone(),
                        step: step as u64,
                        stage: name.into(),
                    };
                    save_checkpoint(path, model, Some(disc), &meta)?;
                    Some(path.clone())
                }
                None => None,
            };
            log.flush()?;
            return Err(Error::NonFiniteLoss {
                name: bad,
                step,
                checkpoint,
            });
        }
        for (metric, value) in &logged {
            log.push(name, step, metric, *value)?;
        }
        log.push(name, step, "lr", lr)?;
        if local == 0 {
            first_seg = l_seg.value()?;
        }
        last_seg = l_seg.value()?;

        let grads = total.backward()?;
        opt.step(model.store(), &grads, lr)?;
        if let Some(d) = disc_loss {
            let grads = d.backward()?;
            disc_opt.step(disc.store(), &grads, disc_lr)?;
        }

        if config.val_every > 0 && (local + 1) % config.val_every == 0 && !data.personal.annotations.is_empty() {
            let ev = evaluate_personal(
                model,
                data.personal,
                data.groups,
                config.eval_batch_size,
                crop,
                config.fiou_mode,
            )?;
            if let Some(f) = ev.fiou() {
                log.push(name, step, "val_fiou", f)?;
            }
            if let Some(m) = ev.confusion.miou() {
                log.push(name, step, "val_miou", m)?;
            }
        }
        if local % 50 == 0 {
            ::log::debug!("{name} step {step}: total {total_value:.4} lr {lr:.2e}");
        }
    }
    log.flush()?;
    Ok(StageSummary {
        stage,
        first_step: options.start_step,
        last_step: options.start_step + options.steps.saturating_sub(1),
        first_seg_loss: first_seg,
        last_seg_loss: last_seg,
    })
}

/// Step 1 from step 0 for `config.steps_step1` steps.
pub fn train_step1(
    model: &SegModel,
    disc: &Discriminator,
    data: &StageData<'_>,
    config: &TrainConfig,
    log: &mut MetricsLog,
) -> Result<StageSummary> {
    let options = StageOptions {
        start_step: 0,
        steps: config.steps_step1,
        abort_checkpoint: None,
        config_json: serde_json::to_string(config)?,
    };
    train_stage(model, disc, data, config, Stage::Step1, &options, log)
}

/// Step 2 continuing the global step count after step 1.
pub fn train_step2(
    model: &SegModel,
    disc: &Discriminator,
    data: &StageData<'_>,
    config: &TrainConfig,
    log: &mut MetricsLog,
) -> Result<StageSummary> {
    let options = StageOptions {
        start_step: config.steps_step1,
        steps: config.steps_step2,
        abort_checkpoint: None,
        config_json: serde_json::to_string(config)?,
    };
    train_stage(model, disc, data, config, Stage::Step2, &options, log)
}
