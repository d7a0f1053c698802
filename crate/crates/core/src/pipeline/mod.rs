//! End-to-end runs: configuration, clustering, the two training stages and
//! evaluation, either in memory or inside a run directory.

mod ablate;
mod run;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use ablate::{run_ablation, synth_users, AblationMatrix, AblationResult, AblationRow, DataMode};
pub use run::{RunDir, CKPT_ABORT, CKPT_STEP1, CKPT_STEP2, CONFIG_FILE, GROUPS_FILE, METRICS_FILE, PSEUDO_DIR, REPORT_FILE};

use crate::data::{PersonalDataset, SourceDataset, SynthSpec};
use crate::error::{Error, Result};
use crate::grouping::{embed_images, kmeans, GroupAssignment, KMeansConfig, PixelHistogramDescriptor};
use crate::metrics::{make_report, EvalReport};
use crate::networks::{build_model, BackboneDescriptor, DiscConfig, Discriminator, ModelConfig, SegModel};
use crate::training::{
    evaluate_personal, select_pseudo_labels, train_stage, MetricsLog, PseudoLabelSet, Stage, StageData, StageOptions,
    TrainConfig,
};

/// Image descriptor used for clustering.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DescriptorKind {
    /// Downsampled pixels plus colour histograms.
    #[default]
    PixelHistogram,
    /// Pooled features of the (untrained or loaded) segmentation backbone.
    Backbone,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupingConfig {
    #[serde(rename = "K")]
    pub k: usize,
    pub descriptor: DescriptorKind,
    pub max_iters: usize,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        Self {
            k: 4,
            descriptor: DescriptorKind::PixelHistogram,
            max_iters: 100,
        }
    }
}

/// Where the data of a run comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Labeled source dataset root.
    pub source: Option<PathBuf>,
    /// Personal dataset roots (several are merged).
    pub personal: Vec<PathBuf>,
    /// Synthetic fixture used when no paths are given.
    pub synth: SynthSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: None,
            personal: Vec::new(),
            synth: SynthSpec::default(),
        }
    }
}

/// Complete description of a run; written verbatim to `config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub name: String,
    /// Master seed; [`RunConfig::with_seed`] threads it through every component.
    pub seed: u64,
    pub data: DataConfig,
    pub grouping: GroupingConfig,
    pub model: ModelConfig,
    pub disc: DiscConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Synthetic 64×64 fixture with the small model.
    pub fn desk() -> Self {
        let synth = SynthSpec::default();
        Self {
            name: "desk".into(),
            seed: 0,
            model: ModelConfig::desk(synth.class_count),
            data: DataConfig {
                synth,
                ..DataConfig::default()
            },
            grouping: GroupingConfig::default(),
            disc: DiscConfig::default(),
            train: TrainConfig::desk(),
        }
    }

    /// ResNet-50 + PSP at 320×320 with the published optimizer settings.
    pub fn full(class_count: usize) -> Self {
        Self {
            name: "full".into(),
            model: ModelConfig::full(class_count),
            disc: DiscConfig::full(),
            train: TrainConfig::paper(),
            grouping: GroupingConfig {
                k: 10,
                descriptor: DescriptorKind::Backbone,
                max_iters: 100,
            },
            ..Self::desk()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.data.synth.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.grouping.k == 0 {
            return Err(Error::invalid("K must be at least 1"));
        }
        if self.train.crop % 16 != 0 {
            return Err(Error::invalid("crop must be a multiple of 16"));
        }
        Ok(())
    }

    /// Seeds of the separately initialized components.
    pub fn model_seed(&self) -> u64 {
        self.seed.wrapping_mul(2).wrapping_add(101)
    }

    pub fn disc_seed(&self) -> u64 {
        self.seed.wrapping_mul(2).wrapping_add(202)
    }

    pub fn cluster_seed(&self) -> u64 {
        self.seed.wrapping_add(303)
    }

    pub fn build_networks(&self) -> Result<(SegModel, Discriminator)> {
        let model = build_model(&self.model, self.model_seed())?;
        let disc = Discriminator::new(&self.disc, self.model.class_count, self.disc_seed(), model.dtype())?;
        Ok((model, disc))
    }
}

/// K-means over descriptors of every personal image (evaluation split included).
pub fn cluster_personal(
    personal: &PersonalDataset,
    grouping: &GroupingConfig,
    seed: u64,
    model: Option<&SegModel>,
) -> Result<GroupAssignment> {
    let descriptors = match grouping.descriptor {
        DescriptorKind::PixelHistogram => embed_images(&personal.samples, &PixelHistogramDescriptor::default())?,
        DescriptorKind::Backbone => {
            let model = model.ok_or_else(|| Error::invalid("backbone descriptor needs a model"))?;
            embed_images(&personal.samples, &BackboneDescriptor::new(model))?
        }
    };
    let config = KMeansConfig {
        max_iters: grouping.max_iters,
        ..KMeansConfig::new(grouping.k, seed)
    };
    let clustering = kmeans(&descriptors, &config)?;
    Ok(clustering.assignment)
}

/// Reports of a two-stage run.
#[derive(Clone, Debug)]
pub struct TwoStageOutcome {
    pub step1: EvalReport,
    pub pseudo: Option<PseudoLabelSet>,
    pub step2: Option<EvalReport>,
}

/// Evaluation of `model` on every user in `eval_sets`, each with its own groups.
pub fn evaluate_users(
    model: &SegModel,
    eval_sets: &[(&PersonalDataset, &GroupAssignment)],
    config: &TrainConfig,
) -> Result<EvalReport> {
    let evals = eval_sets
        .iter()
        .map(|(p, g)| evaluate_personal(model, p, g, config.eval_batch_size, config.crop, config.fiou_mode))
        .collect::<Result<Vec<_>>>()?;
    make_report(evals)
}

/// In-memory run: step 1, evaluation, and optionally pseudo selection, step 2
/// and a second evaluation.
pub fn run_two_stage(
    config: &RunConfig,
    source: &SourceDataset,
    personal: &PersonalDataset,
    groups: &GroupAssignment,
    eval_sets: &[(&PersonalDataset, &GroupAssignment)],
    with_step2: bool,
    log: &mut MetricsLog,
) -> Result<TwoStageOutcome> {
    config.validate()?;
    let (model, disc) = config.build_networks()?;
    let config_json = serde_json::to_string(config)?;
    let data = StageData {
        source,
        personal,
        groups,
        pseudo: None,
    };
    let t = &config.train;
    train_stage(
        &model,
        &disc,
        &data,
        t,
        Stage::Step1,
        &StageOptions {
            start_step: 0,
            steps: t.steps_step1,
            abort_checkpoint: None,
            config_json: config_json.clone(),
        },
        log,
    )?;
    let step1 = evaluate_users(&model, eval_sets, t)?;
    if !with_step2 {
        return Ok(TwoStageOutcome {
            step1,
            pseudo: None,
            step2: None,
        });
    }
    let pseudo = select_pseudo_labels(
        &model,
        personal,
        groups,
        t.select_rate,
        t.pixel_quantile,
        t.eval_batch_size,
        t.crop,
    )?;
    let data = StageData {
        pseudo: Some(&pseudo),
        ..data
    };
    train_stage(
        &model,
        &disc,
        &data,
        t,
        Stage::Step2,
        &StageOptions {
            start_step: t.steps_step1,
            steps: t.steps_step2,
            abort_checkpoint: None,
            config_json,
        },
        log,
    )?;
    let step2 = evaluate_users(&model, eval_sets, t)?;
    Ok(TwoStageOutcome {
        step1,
        pseudo: Some(pseudo),
        step2: Some(step2),
    })
}
